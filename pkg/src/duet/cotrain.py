"""Dual-model co-training over exposed and unexposed candidates.

Two identically shaped predictors A and B are trained side by side. On
exposed candidates each fits the real click; on unexposed candidates each
fits the other's current prediction (a constant target, no gradient flows
into the teacher). A symmetric Bernoulli KL term, weighted by ``lam``,
pulls the two predictions together over every loss-bearing candidate.

Both models step synchronously: losses and gradients are evaluated at the
pre-update parameters of both, then both are updated.
"""
import logging
from dataclasses import dataclass, asdict, field

import numpy as np

from . import model as M

log = logging.getLogger(__name__)

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7
ABLATIONS = ("full", "no_co", "no_kl", "no_set")


def _clamp(p):
    return np.clip(p, P_MIN, P_MAX)


def bce_loss(target, pred):
    """Element-wise BCE; ``pred`` clamped to [1e-7, 1 - 1e-7], soft targets allowed."""
    p = _clamp(np.asarray(pred, dtype=np.float64))
    t = np.asarray(target, dtype=np.float64)
    out = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def symmetric_kl(p, q):
    """KL(Ber(p) || Ber(q)) + KL(Ber(q) || Ber(p)) = (p - q) (logit p - logit q)."""
    p = _clamp(np.asarray(p, dtype=np.float64))
    q = _clamp(np.asarray(q, dtype=np.float64))
    out = (p - q) * ((np.log(p) - np.log1p(-p)) - (np.log(q) - np.log1p(-q)))
    return float(out) if out.ndim == 0 else out


def _bce_grad(target, pred):
    inside = (pred > P_MIN) & (pred < P_MAX)
    p = _clamp(pred)
    return np.where(inside, (p - target) / (p * (1.0 - p)), 0.0)


def _skl_grad(p, q):
    """d/dp of symmetric_kl(p, q), zero where p sits on a clamp bound."""
    inside = (p > P_MIN) & (p < P_MAX)
    pc, qc = _clamp(p), _clamp(q)
    g = (np.log(pc) - np.log1p(-pc)) - (np.log(qc) - np.log1p(-qc)) + (pc - qc) / (pc * (1.0 - pc))
    return np.where(inside, g, 0.0)


@dataclass
class TrainHyper:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 0.5
    warmup_steps: int = 500
    unexposed_per_exposed: float = 1.0
    ablation: str = "full"
    batch_size: int = 64
    epochs: int = 1
    eval_every: int = 0       # 0: evaluate once per epoch
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.unexposed_per_exposed < 0:
            raise ValueError("unexposed_per_exposed must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class Batch:
    """B requests plus, per candidate, which ones carry a loss and which labels are real."""
    ids: M.IdBatch
    observed: np.ndarray     # B x m bool, exposed candidates (D_obs)
    unobserved: np.ndarray   # B x m bool, sampled unexposed candidates (D_unobs)
    labels: np.ndarray       # B x m float, clicks where observed, 0 elsewhere

    def __post_init__(self):
        if np.any(self.observed & self.unobserved):
            raise ValueError("a candidate cannot be both exposed and unexposed")
        if np.any(self.labels[~self.observed] != 0):
            raise ValueError("labels are only allowed on exposed candidates")


def duet_loss(out_a, out_b, batch, lam, ablation="full", warmup=False):
    """Objectives of both models for one batch.

    Returns ``(loss_a, loss_b, parts)``; ``parts`` holds the supervised and
    consistency components and ``grad_a``/``grad_b``, the gradients of each
    model's own loss with respect to its own outputs.

    ``no_co`` (and the warm-up phase) keeps exposed terms only and drops
    the consistency term so the models do not interact; ``no_kl`` keeps
    pseudo-labels but sets ``lam`` to 0.
    """
    obs = batch.observed
    if not obs.any():
        raise ValueError("batch has no exposed candidates" + (" during warm-up" if warmup else ""))
    exposed_only = warmup or ablation == "no_co"
    unobs = np.zeros_like(obs) if exposed_only else batch.unobserved
    if ablation == "no_kl" or exposed_only:
        lam = 0.0
    in_loss = obs | unobs
    count = float(in_loss.sum())
    a = np.asarray(out_a, dtype=np.float64)
    b = np.asarray(out_b, dtype=np.float64)
    y = batch.labels

    # pseudo-labels are the peer's outputs, treated as constants
    target_a = np.where(obs, y, b)
    target_b = np.where(obs, y, a)
    w = in_loss / count
    sup_a = float((bce_loss(target_a, a) * w).sum())
    sup_b = float((bce_loss(target_b, b) * w).sum())
    con = float((symmetric_kl(a, b) * w).sum())
    grad_a = w * _bce_grad(target_a, a)
    grad_b = w * _bce_grad(target_b, b)
    if lam:
        grad_a = grad_a + lam * w * _skl_grad(a, b)
        grad_b = grad_b + lam * w * _skl_grad(b, a)
    parts = {"sup_a": sup_a, "sup_b": sup_b, "con": con, "lam": lam,
             "n_obs": int(obs.sum()), "n_unobs": int(unobs.sum()),
             "grad_a": grad_a, "grad_b": grad_b}
    return sup_a + lam * con, sup_b + lam * con, parts


# -- AdamW --------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adamw_update(params, grads, state, hyper):
    """One AdamW step with decoupled weight decay; returns new objects, inputs untouched."""
    step = state.step + 1
    lr, wd, b1, b2, eps = hyper.lr, hyper.weight_decay, hyper.beta1, hyper.beta2, hyper.eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = (theta * (1.0 - lr * wd) - lr * update).astype(theta.dtype, copy=False)
        new_m[name] = m.astype(theta.dtype, copy=False)
        new_v[name] = v.astype(theta.dtype, copy=False)
    return M.Parameters(params.config, new_p), OptimizerState(new_m, new_v, step)


# -- dual state and steps -----------------------------------------------------

@dataclass
class DualState:
    params_a: M.Parameters
    params_b: M.Parameters
    opt_a: OptimizerState
    opt_b: OptimizerState
    step: int = 0

    @classmethod
    def init(cls, config, seed_a, seed_b):
        if seed_a == seed_b:
            raise ValueError("the two models need distinct initialisation seeds")
        pa = M.init_params(config, seed_a)
        pb = M.init_params(config, seed_b)
        return cls(pa, pb, OptimizerState.zeros(pa), OptimizerState.zeros(pb), 0)


def train_step(state, batch, hyper):
    """Forward both models, compute both objectives, backprop, update both."""
    pointwise = hyper.ablation == "no_set"
    warmup = state.step < hyper.warmup_steps
    bundle_a = M.lookup(state.params_a, batch.ids)
    bundle_b = M.lookup(state.params_b, batch.ids)
    y_a, cache_a = M.forward(state.params_a, bundle_a, pointwise=pointwise)
    y_b, cache_b = M.forward(state.params_b, bundle_b, pointwise=pointwise)
    loss_a, loss_b, parts = duet_loss(y_a, y_b, batch, hyper.lam, hyper.ablation, warmup=warmup)
    g_a = M.backward(state.params_a, cache_a, parts["grad_a"])
    g_b = M.backward(state.params_b, cache_b, parts["grad_b"])
    pa, oa = adamw_update(state.params_a, g_a, state.opt_a, hyper)
    pb, ob = adamw_update(state.params_b, g_b, state.opt_b, hyper)
    metrics = {"step": state.step + 1, "loss_a": loss_a, "loss_b": loss_b,
               "loss_sup_a": parts["sup_a"], "loss_sup_b": parts["sup_b"], "loss_con": parts["con"],
               "warmup": warmup}
    return DualState(pa, pb, oa, ob, state.step + 1), metrics


# -- data streaming -----------------------------------------------------------

@dataclass
class TrainData:
    """Training requests encoded once: ids plus exposure flags and clicks."""
    ids: M.IdBatch
    observed: np.ndarray
    labels: np.ndarray
    request_ids: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.ids)


def make_train_data(requests, config):
    """Only exposure and clicks are read; held-out entire-space labels are ignored."""
    ids = M.encode_requests(requests, config)
    observed = np.zeros(ids.cand_ids.shape, dtype=bool)
    labels = np.zeros(ids.cand_ids.shape, dtype=np.float64)
    for b, r in enumerate(requests):
        if len(r.clicks) != len(r.exposed_idx):
            raise ValueError(f"request {r.request_id}: clicks and exposed_idx lengths differ")
        observed[b, r.exposed_idx] = True
        labels[b, r.exposed_idx] = r.clicks
    return TrainData(ids, observed, labels, np.array([r.request_id for r in requests]))


def sample_unobserved(observed, ratio, rng):
    """Per request, pick round(ratio * #exposed) unexposed candidates uniformly."""
    B, m = observed.shape
    keys = rng.random((B, m))
    keys[observed] = np.inf
    want = np.minimum(np.round(ratio * observed.sum(axis=1)).astype(int), m - observed.sum(axis=1))
    order = np.argsort(keys, axis=1)
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(m)[None, :].repeat(B, 0), axis=1)
    return rank < want[:, None]


def iter_batches(data, hyper, epoch):
    rng = np.random.default_rng([hyper.seed, 7, epoch])
    perm = rng.permutation(len(data))
    for start in range(0, len(perm), hyper.batch_size):
        idx = np.sort(perm[start:start + hyper.batch_size])
        obs = data.observed[idx]
        yield Batch(data.ids.take(idx), obs, sample_unobserved(obs, hyper.unexposed_per_exposed, rng),
                    data.labels[idx])


def train(state, data, hyper, eval_hook=None, on_record=None):
    """Run ``hyper.epochs`` passes over ``data``.

    ``eval_hook(state)`` returns a dict with at least ``auc_a`` and
    ``auc_b`` (validation scores used for model selection) and is called
    every ``eval_every`` steps and at the end. Returns
    ``(state, records, best)`` with ``best`` in {"a", "b"}.
    """
    if len(data) == 0:
        raise ValueError("empty training stream")
    records = []
    window = []
    last = None

    def evaluate():
        rec = {"step": state.step}
        if window:
            for key in ("loss_sup_a", "loss_sup_b", "loss_con"):
                rec[key] = float(np.mean([w[key] for w in window]))
        if eval_hook is not None:
            rec.update(eval_hook(state))
        rec.update({"lambda": hyper.lam, "ablation": hyper.ablation, "seed": hyper.seed})
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        window.clear()
        return rec

    for epoch in range(hyper.epochs):
        for batch in iter_batches(data, hyper, epoch):
            state, metrics = train_step(state, batch, hyper)
            window.append(metrics)
            if hyper.eval_every and state.step % hyper.eval_every == 0:
                last = evaluate()
        if not hyper.eval_every:
            last = evaluate()
    if last is None or last["step"] != state.step:
        last = evaluate()
    best = "a"
    if "auc_a" in last and "auc_b" in last and last["auc_b"] > last["auc_a"]:
        best = "b"
    return state, records, best
