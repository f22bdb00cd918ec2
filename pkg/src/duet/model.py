"""Set-wise CTR predictor with hand-written backward pass.

Pipeline for one request with m candidates and n history items::

    F_cs  = LinAttn(F_can Wq, F_seq Wk, F_seq Wv)     # candidates attend to history
    F_cc  = LinAttn(F_can Wq', F_can Wk', F_can Wv')  # candidates attend to each other
    F_fin = [F_cs | F_cc | F_u | F_cro]               # m x (2d + d_u + d_c)
    y     = sigmoid(MLP(F_fin))                       # ReLU hidden layers

The point-wise variant replaces ``F_cc`` by zeros so each score depends
only on its own candidate and the shared user context.

Everything here is batched: a bundle holds B requests with the same
candidate count m; behaviour sequences are right-padded and masked.

Id spaces reserve row 0 in every table: it is the padding row for empty
histories and the fallback for out-of-vocabulary ids.
"""
import itertools
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .attention import batched_linear_attention, batched_linear_attention_backward
from .kernels import scatter_add_rows
from .numerics import KernelMap

log = logging.getLogger(__name__)

CROSS_BUCKETS = 4  # repeat-click count buckets 0, 1, 2, 3+ (ids 1..4, 0 reserved)


@dataclass
class ModelConfig:
    n_items: int            # item vocabulary size, reserved row 0 included
    n_users: int
    n_cross: int = CROSS_BUCKETS + 1
    embed_dim: int = 64
    user_dim: int = 16
    cross_dim: int = 8
    mlp_hidden: tuple = (128, 64)
    kernel: KernelMap = field(default_factory=KernelMap)
    use_projections: bool = True
    max_seq_len: int = 200
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelMap(**self.kernel)
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        for name in ("n_items", "n_users", "n_cross"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1 (got {getattr(self, name)})")
        for name in ("embed_dim", "user_dim", "cross_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.mlp_hidden or min(self.mlp_hidden) < 1:
            raise ValueError("mlp_hidden must be a non-empty list of positive widths")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def fusion_dim(self):
        return 2 * self.embed_dim + self.user_dim + self.cross_dim

    def to_dict(self):
        out = asdict(self)
        out["kernel"] = self.kernel.to_dict()
        out["mlp_hidden"] = list(self.mlp_hidden)
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


PROJECTIONS = ("cs_q", "cs_k", "cs_v", "cc_q", "cc_k", "cc_v")


def param_shapes(config):
    """Canonical parameter order and shapes.

    item_table, user_table, cross_table, the six projection matrices when
    enabled (cross stream q/k/v then self stream q/k/v), then
    ``mlp_w{l}``, ``mlp_b{l}`` for each layer including the width-1 output.
    This order defines ``Parameters.flatten`` and the checkpoint layout.
    """
    d = config.embed_dim
    shapes = {
        "item_table": (config.n_items, d),
        "user_table": (config.n_users, config.user_dim),
        "cross_table": (config.n_cross, config.cross_dim),
    }
    if config.use_projections:
        for name in PROJECTIONS:
            shapes[name] = (d, d)
    widths = [config.fusion_dim, *config.mlp_hidden, 1]
    for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"mlp_w{layer}"] = (fan_in, fan_out)
        shapes[f"mlp_b{layer}"] = (fan_out,)
    return shapes


_tokens = itertools.count(1)


class Parameters:
    """Named arrays of one model instance, kept in canonical order.

    Each instance carries a fresh ``token``; forward caches record it so a
    backward call against different parameters is refused.
    """

    def __init__(self, config, arrays):
        self.config = config
        expected = param_shapes(config)
        if list(arrays) != list(expected):
            raise ValueError(f"parameter names {list(arrays)} do not match canonical order {list(expected)}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {shape}")
        self.arrays = dict(arrays)
        self.token = next(_tokens)

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def n_layers(self):
        return len(self.config.mlp_hidden) + 1

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, vector):
        out, offset = {}, 0
        for name, arr in self.arrays.items():
            out[name] = np.asarray(vector[offset:offset + arr.size], dtype=arr.dtype).reshape(arr.shape)
            offset += arr.size
        if offset != len(vector):
            raise ValueError(f"flat vector has {len(vector)} entries, parameters need {offset}")
        return Parameters(self.config, out)

    def map(self, fn):
        return Parameters(self.config, {k: fn(v) for k, v in self.arrays.items()})

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def allclose(self, other, **kw):
        return all(np.allclose(self[k], other[k], **kw) for k in self)

    def equal(self, other):
        return all(np.array_equal(self[k], other[k]) for k in self)


def init_params(config, seed=None):
    """Embeddings ~ U(-0.01, 0.01); dense weights and biases ~ U(-1/sqrt(fan_in), +)."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = np.dtype(config.dtype)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_table"):
            bound = 0.01
        elif name.startswith("mlp_b"):
            bound = 1.0 / np.sqrt(param_shapes(config)[f"mlp_w{name[5:]}"][0])
        else:
            bound = 1.0 / np.sqrt(shape[0])
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Parameters(config, arrays)


# -- request encoding ---------------------------------------------------------

@dataclass
class IdBatch:
    """Integer inputs for B requests sharing a candidate count."""
    cand_ids: np.ndarray    # B x m
    seq_ids: np.ndarray     # B x n, right padded with 0
    seq_mask: np.ndarray    # B x n, 1.0 for real (or the lone padding) entries
    user_ids: np.ndarray    # B
    cross_ids: np.ndarray   # B x m

    def __len__(self):
        return self.cand_ids.shape[0]

    def take(self, idx):
        mask = self.seq_mask[idx]
        width = max(1, int(mask.sum(axis=1).max()))
        return IdBatch(self.cand_ids[idx], self.seq_ids[idx, :width], mask[:, :width],
                       self.user_ids[idx], self.cross_ids[idx])


def cross_bucket(candidates, behavior):
    """User-item cross id: how often the user already clicked the item (0, 1, 2, 3+), shifted past row 0."""
    counts = {}
    for item in behavior:
        counts[item] = counts.get(item, 0) + 1
    return np.array([1 + min(counts.get(c, 0), CROSS_BUCKETS - 1) for c in candidates], dtype=np.int64)


def _clip_ids(ids, vocab, what):
    ids = np.asarray(ids, dtype=np.int64)
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        log.warning("%d out-of-vocabulary %s id(s) mapped to row 0", int(bad.sum()), what)
        ids = np.where(bad, 0, ids)
    return ids


def encode_requests(requests, config):
    """Turn requests (objects with user_id, behavior, candidates) into an IdBatch.

    Histories keep their most recent ``max_seq_len`` items; an empty
    history becomes the single reserved padding row.
    """
    if not requests:
        raise ValueError("no requests to encode")
    m = len(requests[0].candidates)
    if m < 1:
        raise ValueError("a request needs at least one candidate")
    B = len(requests)
    seqs = []
    for r in requests:
        if len(r.candidates) != m:
            raise ValueError("all requests in one batch must have the same candidate count")
        seqs.append(list(r.behavior)[-config.max_seq_len:] or [0])
    n = max(len(s) for s in seqs)
    seq_ids = np.zeros((B, n), dtype=np.int64)
    seq_mask = np.zeros((B, n), dtype=config.dtype)
    for b, s in enumerate(seqs):
        seq_ids[b, :len(s)] = s
        seq_mask[b, :len(s)] = 1.0
    cand = np.array([r.candidates for r in requests], dtype=np.int64)
    cross = np.stack([cross_bucket(r.candidates, r.behavior[-config.max_seq_len:]) for r in requests])
    return IdBatch(
        cand_ids=_clip_ids(cand, config.n_items, "item"),
        seq_ids=_clip_ids(seq_ids, config.n_items, "item"),
        seq_mask=seq_mask,
        user_ids=_clip_ids([r.user_id for r in requests], config.n_users, "user"),
        cross_ids=_clip_ids(cross, config.n_cross, "cross"),
    )


@dataclass
class FeatureBundle:
    """Dense inputs: f_can (B,m,d), f_seq (B,n,d), f_u (B,m,d_u) tiled, f_cro (B,m,d_c).

    ``ids`` is kept so the backward pass can route gradients into tables;
    hand-built bundles may leave it ``None`` (then only feature gradients
    are available).
    """
    f_can: np.ndarray
    f_seq: np.ndarray
    seq_mask: np.ndarray
    f_u: np.ndarray
    f_cro: np.ndarray
    ids: IdBatch = None

    @property
    def shape(self):
        return self.f_can.shape[0], self.f_can.shape[1], self.f_seq.shape[1]


def lookup(params, ids):
    m = ids.cand_ids.shape[1]
    f_u = params["user_table"][ids.user_ids]
    return FeatureBundle(
        f_can=params["item_table"][ids.cand_ids],
        f_seq=params["item_table"][ids.seq_ids],
        seq_mask=ids.seq_mask.astype(params.config.dtype, copy=False),
        f_u=np.repeat(f_u[:, None, :], m, axis=1),
        f_cro=params["cross_table"][ids.cross_ids],
        ids=ids,
    )


def embed_request(params, request):
    """Single request -> bundle with B = 1."""
    return lookup(params, encode_requests([request], params.config))


# -- forward / backward -------------------------------------------------------

@dataclass
class ForwardCache:
    token: int
    pointwise: bool
    bundle: FeatureBundle
    cs: tuple
    cc: tuple
    proj_inputs: dict
    layer_inputs: list
    pre_acts: list
    y: np.ndarray


def _check_bundle(params, bundle):
    cfg = params.config
    B, m, n = bundle.shape
    checks = (
        ("candidate", bundle.f_can, (B, m, cfg.embed_dim)),
        ("sequence", bundle.f_seq, (B, n, cfg.embed_dim)),
        ("sequence mask", bundle.seq_mask, (B, n)),
        ("user", bundle.f_u, (B, m, cfg.user_dim)),
        ("cross", bundle.f_cro, (B, m, cfg.cross_dim)),
    )
    for stream, arr, shape in checks:
        if arr.shape != shape:
            raise ValueError(f"{stream} stream has shape {arr.shape}, expected {shape}")


def _project(params, x, name):
    if params.config.use_projections:
        return x @ params[name]
    return x


def forward(params, bundle, pointwise=False):
    """Scores (B, m) in (0, 1) and the cache needed by ``backward``."""
    _check_bundle(params, bundle)
    cfg = params.config
    kmap = cfg.kernel
    B, m, _ = bundle.shape
    x_can, x_seq = bundle.f_can, bundle.f_seq

    q = _project(params, x_can, "cs_q")
    k = _project(params, x_seq, "cs_k")
    v = _project(params, x_seq, "cs_v")
    e_cs, cs_cache = batched_linear_attention(q, k, v, bundle.seq_mask, kmap)

    if pointwise:
        e_cc, cc_cache = np.zeros_like(e_cs), None
    else:
        q2 = _project(params, x_can, "cc_q")
        k2 = _project(params, x_can, "cc_k")
        v2 = _project(params, x_can, "cc_v")
        e_cc, cc_cache = batched_linear_attention(q2, k2, v2, None, kmap)

    h = np.concatenate([e_cs, e_cc, bundle.f_u, bundle.f_cro], axis=-1).reshape(B * m, cfg.fusion_dim)
    layer_inputs, pre_acts = [], []
    n_layers = len(cfg.mlp_hidden) + 1
    for layer in range(n_layers):
        layer_inputs.append(h)
        a = h @ params[f"mlp_w{layer}"] + params[f"mlp_b{layer}"]
        pre_acts.append(a)
        h = np.maximum(a, 0.0) if layer < n_layers - 1 else a
    logits = h.reshape(B, m)
    y = 0.5 * (1.0 + np.tanh(0.5 * logits))
    cache = ForwardCache(params.token, pointwise, bundle, cs_cache, cc_cache,
                         {"can": x_can, "seq": x_seq}, layer_inputs, pre_acts, y)
    return y, cache


def forward_pointwise(params, bundle):
    return forward(params, bundle, pointwise=True)


def backward(params, cache, d_y, return_feature_grads=False):
    """Parameter gradients of a scalar loss given ``d_y = dL/dy`` with shape (B, m).

    With ``return_feature_grads`` also returns gradients with respect to
    the bundle matrices (``f_can``, ``f_seq``, ``f_u``, ``f_cro``).
    """
    if cache.token != params.token:
        raise ValueError("stale forward cache: it was produced with different parameters")
    cfg = params.config
    kmap = cfg.kernel
    bundle = cache.bundle
    B, m, n = bundle.shape
    d = cfg.embed_dim
    grads = {name: None for name in params}

    y = cache.y
    d_h = (np.asarray(d_y, dtype=y.dtype) * y * (1.0 - y)).reshape(B * m, 1)
    n_layers = len(cfg.mlp_hidden) + 1
    for layer in reversed(range(n_layers)):
        if layer < n_layers - 1:
            d_h = d_h * (cache.pre_acts[layer] > 0)
        grads[f"mlp_w{layer}"] = cache.layer_inputs[layer].T @ d_h
        grads[f"mlp_b{layer}"] = d_h.sum(axis=0)
        d_h = d_h @ params[f"mlp_w{layer}"].T
    d_fin = d_h.reshape(B, m, cfg.fusion_dim)
    d_cs = d_fin[..., :d]
    d_cc = d_fin[..., d:2 * d]
    d_fu = d_fin[..., 2 * d:2 * d + cfg.user_dim]
    d_fcro = d_fin[..., 2 * d + cfg.user_dim:]

    x_can, x_seq = cache.proj_inputs["can"], cache.proj_inputs["seq"]
    dq, dk, dv = batched_linear_attention_backward(d_cs, cache.cs, kmap)
    if cfg.use_projections:
        grads["cs_q"] = _outer(x_can, dq)
        grads["cs_k"] = _outer(x_seq, dk)
        grads["cs_v"] = _outer(x_seq, dv)
        d_can = dq @ params["cs_q"].T
        d_seq = dk @ params["cs_k"].T + dv @ params["cs_v"].T
    else:
        d_can = dq
        d_seq = dk + dv

    if cache.pointwise:
        if cfg.use_projections:
            for name in ("cc_q", "cc_k", "cc_v"):
                grads[name] = np.zeros_like(params[name])
    else:
        dq2, dk2, dv2 = batched_linear_attention_backward(d_cc, cache.cc, kmap)
        if cfg.use_projections:
            grads["cc_q"] = _outer(x_can, dq2)
            grads["cc_k"] = _outer(x_can, dk2)
            grads["cc_v"] = _outer(x_can, dv2)
            d_can = d_can + dq2 @ params["cc_q"].T + dk2 @ params["cc_k"].T + dv2 @ params["cc_v"].T
        else:
            d_can = d_can + dq2 + dk2 + dv2

    feature_grads = {"f_can": d_can, "f_seq": d_seq, "f_u": d_fu, "f_cro": d_fcro}
    ids = bundle.ids
    if ids is None:
        if not return_feature_grads:
            raise ValueError("bundle carries no ids; table gradients are unavailable")
        for name in ("item_table", "user_table", "cross_table"):
            grads[name] = np.zeros_like(params[name])
    else:
        item = np.zeros_like(params["item_table"])
        scatter_add_rows(item, ids.cand_ids, d_can.reshape(-1, d))
        scatter_add_rows(item, ids.seq_ids, d_seq.reshape(-1, d))
        grads["item_table"] = item
        grads["user_table"] = scatter_add_rows(np.zeros_like(params["user_table"]), ids.user_ids,
                                               d_fu.sum(axis=1))
        grads["cross_table"] = scatter_add_rows(np.zeros_like(params["cross_table"]), ids.cross_ids,
                                                d_fcro.reshape(-1, cfg.cross_dim))
    out = Parameters(cfg, {name: grads[name].astype(params[name].dtype, copy=False) for name in params})
    if return_feature_grads:
        return out, feature_grads
    return out


def _outer(x, g):
    """sum_b x_b^T g_b for (B, r, d) inputs."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def predict(params, ids, pointwise=False, batch_size=256):
    """Scores for every candidate in ``ids`` (B, m) without keeping caches."""
    out = np.empty(ids.cand_ids.shape, dtype=params.config.dtype)
    for start in range(0, len(ids), batch_size):
        sl = np.arange(start, min(start + batch_size, len(ids)))
        out[sl], _ = forward(params, lookup(params, ids.take(sl)), pointwise=pointwise)
    return out
