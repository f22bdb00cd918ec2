import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from duet import cotrain as C
from duet import model as M
from duet.numerics import finite_diff_grad, relative_error

from conftest import tiny_config, spread_params, tiny_requests

probs = st.floats(1e-6, 1 - 1e-6)


# -- scalar losses --------------------------------------------------------------

def test_bce_values():
    assert C.bce_loss(1, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert C.bce_loss(0, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert C.bce_loss(0.3, 0.3) == pytest.approx(0.6108643020548935, abs=1e-12)


def test_bce_clamps_extremes():
    assert np.isfinite(C.bce_loss(1, 0.0)) and np.isfinite(C.bce_loss(0, 1.0))
    assert C.bce_loss(1, 0.0) == pytest.approx(-math.log(1e-7), rel=1e-9)


@given(st.floats(0, 1), probs)
def test_bce_minimised_at_target(t, p):
    assert C.bce_loss(t, p) >= C.bce_loss(t, min(max(t, 1e-7), 1 - 1e-7)) - 1e-12


def test_symmetric_kl_values():
    assert C.symmetric_kl(0.37, 0.37) == 0.0
    assert C.symmetric_kl(0.8, 0.2) == pytest.approx(1.6635532333438687, abs=1e-12)
    assert C.symmetric_kl(0.9, 0.1) == C.symmetric_kl(0.1, 0.9)


@given(probs, probs)
def test_symmetric_kl_properties(p, q):
    v = C.symmetric_kl(p, q)
    assert v >= 0
    assert abs(v - C.symmetric_kl(q, p)) <= 1e-12
    assert (v == 0) == (p == q) or abs(p - q) < 1e-12


@given(st.floats(0, 1), st.floats(0, 1))
def test_losses_finite_everywhere(p, q):
    assert np.isfinite(C.symmetric_kl(p, q)) and np.isfinite(C.bce_loss(p, q))


def test_loss_gradients_match_finite_differences(rng):
    p = rng.uniform(0.05, 0.95, size=20)
    q = rng.uniform(0.05, 0.95, size=20)
    t = rng.uniform(size=20)
    fd_bce = finite_diff_grad(lambda x: C.bce_loss(t, x).sum(), p, eps=1e-6)
    fd_kl = finite_diff_grad(lambda x: C.symmetric_kl(x, q).sum(), p, eps=1e-6)
    np.testing.assert_allclose(C._bce_grad(t, p), fd_bce, rtol=1e-6)
    np.testing.assert_allclose(C._skl_grad(p, q), fd_kl, rtol=1e-6, atol=1e-9)


# -- duet_loss ----------------------------------------------------------------

def _batch(observed, unobserved, labels):
    observed = np.asarray(observed, bool)[None]
    ids = M.IdBatch(np.ones(observed.shape, int), np.ones((1, 1), int), np.ones((1, 1)),
                    np.ones(1, int), np.ones(observed.shape, int))
    return C.Batch(ids, observed, np.asarray(unobserved, bool)[None], np.asarray(labels, float)[None])


def test_duet_loss_pinned_regression():
    # values from a standalone closed-form evaluation (plain math.log, no package code)
    batch = _batch([1, 1, 0], [0, 0, 1], [1, 0, 0])
    la, lb, parts = C.duet_loss(np.array([[0.7, 0.4, 0.5]]), np.array([[0.6, 0.5, 0.8]]), batch, 0.5)
    assert la == pytest.approx(0.6036522651506708, abs=1e-10)
    assert lb == pytest.approx(0.790190861129145, abs=1e-10)
    assert parts["con"] == pytest.approx(0.16687269812489594, abs=1e-10)


def test_all_exposed_no_coupling():
    batch = _batch([1, 1, 1], [0, 0, 0], [1, 0, 1])
    a = np.array([[0.7, 0.4, 0.6]])
    b = np.array([[0.2, 0.9, 0.5]])
    la, lb, parts = C.duet_loss(a, b, batch, lam=0.0)
    assert la == pytest.approx(C.bce_loss([1, 0, 1], a[0]).mean(), abs=1e-14)
    assert lb == pytest.approx(C.bce_loss([1, 0, 1], b[0]).mean(), abs=1e-14)
    # B's values must not influence A's gradient
    _, _, parts2 = C.duet_loss(a, b * 0.5, batch, lam=0.0)
    np.testing.assert_array_equal(parts["grad_a"], parts2["grad_a"])


def test_equal_outputs_zero_consistency():
    batch = _batch([1, 0, 0], [0, 1, 1], [1, 0, 0])
    a = np.array([[0.7, 0.3, 0.6]])
    la, lb, parts = C.duet_loss(a, a.copy(), batch, lam=2.0)
    assert parts["con"] == 0.0
    expected = (C.bce_loss(1, 0.7) + C.bce_loss(0.3, 0.3) + C.bce_loss(0.6, 0.6)) / 3
    assert la == pytest.approx(expected, abs=1e-14) and lb == pytest.approx(expected, abs=1e-14)


def test_no_co_and_warmup_drop_unexposed_terms():
    batch = _batch([1, 0, 0], [0, 1, 1], [1, 0, 0])
    a = np.array([[0.7, 0.3, 0.6]])
    b = np.array([[0.2, 0.9, 0.1]])
    for kwargs in ({"ablation": "no_co"}, {"warmup": True}):
        la, lb, parts = C.duet_loss(a, b, batch, lam=5.0, **kwargs)
        assert la == pytest.approx(C.bce_loss(1, 0.7), abs=1e-14)
        assert lb == pytest.approx(C.bce_loss(1, 0.2), abs=1e-14)
        assert np.all(parts["grad_a"][0, 1:] == 0)


def test_no_kl_zeroes_lambda():
    batch = _batch([1, 0], [0, 1], [1, 0])
    a, b = np.array([[0.7, 0.3]]), np.array([[0.2, 0.9]])
    la, _, parts = C.duet_loss(a, b, batch, lam=5.0, ablation="no_kl")
    assert parts["lam"] == 0.0 and la == pytest.approx(parts["sup_a"])


def test_empty_observed_rejected():
    batch = _batch([0, 0], [1, 1], [0, 0])
    with pytest.raises(ValueError, match="warm-up"):
        C.duet_loss(np.full((1, 2), 0.5), np.full((1, 2), 0.5), batch, 0.5, warmup=True)


def test_batch_validation():
    with pytest.raises(ValueError):
        _batch([1, 0], [1, 0], [1, 0])
    with pytest.raises(ValueError):
        _batch([1, 0], [0, 1], [1, 1])


def test_pseudo_label_path_carries_no_gradient(rng):
    """d L_A / d y_B through the pseudo-label is zero: L_A's only y_B dependence is L_con."""
    batch = _batch([1, 0, 0, 1], [0, 1, 1, 0], [0, 0, 0, 1])
    a = rng.uniform(0.1, 0.9, size=(1, 4))
    b = rng.uniform(0.1, 0.9, size=(1, 4))
    lam = 0.7

    def la_of_b(bb):
        return C.duet_loss(a, bb.reshape(1, 4), batch, lam)[0]

    fd = finite_diff_grad(la_of_b, b.ravel(), eps=1e-6)
    w = 1.0 / 4
    con_part = lam * w * C._skl_grad(b, a).ravel()
    sup_part = w * (np.log(a) - np.log1p(-a)).ravel() * -1 * batch.unobserved.ravel()
    # numerically L_A moves with y_B through the target too; the training gradient for A ignores it
    np.testing.assert_allclose(fd, con_part + sup_part, atol=1e-7)
    _, _, parts = C.duet_loss(a, b, batch, lam)
    a_fd = finite_diff_grad(lambda aa: C.duet_loss(aa.reshape(1, 4), b, batch, lam)[0], a.ravel(), eps=1e-6)
    np.testing.assert_allclose(parts["grad_a"].ravel(), a_fd, rtol=1e-6, atol=1e-9)


# -- AdamW --------------------------------------------------------------------

def _params_and_state(seed=0):
    p = M.init_params(tiny_config(), seed)
    return p, C.OptimizerState.zeros(p)


def test_adamw_zero_grad_is_pure_decay():
    p, s = _params_and_state()
    hy = C.TrainHyper(lr=1e-2, weight_decay=0.1)
    new, s2 = C.adamw_update(p, p.zeros_like(), s, hy)
    for k in p:
        np.testing.assert_array_equal(new[k], p[k] * (1 - 1e-2 * 0.1))
    assert s2.step == 1


def test_adamw_first_step_is_signed_lr():
    p, s = _params_and_state()
    g = p.map(lambda a: np.where(np.arange(a.size).reshape(a.shape) % 2 == 0, 0.3, -2.0))
    hy = C.TrainHyper(lr=1e-3, weight_decay=0.0)
    new, _ = C.adamw_update(p, g, s, hy)
    for k in p:
        np.testing.assert_allclose(new[k] - p[k], -1e-3 * np.sign(g[k]), rtol=1e-6)


def test_adamw_deterministic_and_pure():
    p, s = _params_and_state()
    g = p.map(lambda a: np.cos(a * 100))
    hy = C.TrainHyper()
    before = p.copy()
    n1, s1 = C.adamw_update(p, g, s, hy)
    n2, s2 = C.adamw_update(p, g, s, hy)
    assert n1.equal(n2) and p.equal(before) and s.step == 0


def test_adamw_rejects_non_finite():
    p, s = _params_and_state()
    g = p.zeros_like()
    g.arrays["mlp_w1"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="mlp_w1"):
        C.adamw_update(p, g, s, C.TrainHyper())


def test_hyper_validation():
    for bad in (dict(lr=0), dict(lam=-1), dict(warmup_steps=-1), dict(ablation="w/o")):
        with pytest.raises(ValueError):
            C.TrainHyper(**bad)


# -- training steps -----------------------------------------------------------

def _data(n_req=24, m=6, seed=0, all_exposed=False):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(n_items=15, n_users=5)
    reqs = tiny_requests(rng, n_req=n_req, m=m, cfg=cfg)
    for r in reqs:
        k = m if all_exposed else 2
        r.exposed_idx = sorted(rng.choice(m, size=k, replace=False).tolist())
        r.clicks = rng.integers(0, 2, size=k).tolist()
    return cfg, C.make_train_data(reqs, cfg)


def test_sample_unobserved_ratio(rng):
    obs = np.zeros((5, 10), bool)
    obs[:, :2] = True
    un = C.sample_unobserved(obs, 1.5, rng)
    assert np.all(un.sum(1) == 3) and not np.any(un & obs)
    assert np.all(C.sample_unobserved(obs, 100, rng).sum(1) == 8)


def test_no_co_decouples_models():
    cfg, data = _data()
    hy = C.TrainHyper(ablation="no_co", warmup_steps=0, batch_size=8, lam=3.0)
    base = C.DualState.init(cfg, 1, 2)
    alt = C.DualState.init(cfg, 1, 2)
    alt.params_a = M.init_params(cfg, 77)
    s1, s2 = base, alt
    for batch in C.iter_batches(data, hy, 0):
        s1, _ = C.train_step(s1, batch, hy)
        s2, _ = C.train_step(s2, batch, hy)
    assert s1.params_b.equal(s2.params_b)
    assert not s1.params_a.equal(s2.params_a)


def test_no_co_equals_independent_supervised_training():
    cfg, data = _data()
    hy = C.TrainHyper(ablation="no_co", lam=0.0, warmup_steps=0, batch_size=8)
    state = C.DualState.init(cfg, 1, 2)
    single = state.params_a, state.opt_a
    for batch in C.iter_batches(data, hy, 0):
        state, _ = C.train_step(state, batch, hy)
        p, o = single
        y, cache = M.forward(p, M.lookup(p, batch.ids))
        count = batch.observed.sum()
        d_y = np.where(batch.observed, C._bce_grad(batch.labels, y), 0.0) / count
        single = C.adamw_update(p, M.backward(p, cache, d_y), o, hy)
    assert state.params_a.equal(single[0])


def test_all_exposed_zero_lambda_is_supervised():
    cfg, data = _data(all_exposed=True)
    full = C.TrainHyper(ablation="full", lam=0.0, warmup_steps=0, batch_size=8)
    noco = C.TrainHyper(ablation="no_co", lam=0.0, warmup_steps=0, batch_size=8)
    s1 = s2 = C.DualState.init(cfg, 1, 2)
    for b in C.iter_batches(data, full, 0):
        s1, _ = C.train_step(s1, b, full)
        s2, _ = C.train_step(s2, b, noco)
    assert s1.params_a.equal(s2.params_a) and s1.params_b.equal(s2.params_b)


def test_synchronous_update_uses_pre_update_peer():
    cfg, data = _data()
    hy = C.TrainHyper(warmup_steps=0, batch_size=8, lam=1.0)
    state = C.DualState.init(cfg, 1, 2)
    batch = next(C.iter_batches(data, hy, 0))
    new, _ = C.train_step(state, batch, hy)
    ya, _ = M.forward(state.params_a, M.lookup(state.params_a, batch.ids))
    yb, cache_b = M.forward(state.params_b, M.lookup(state.params_b, batch.ids))
    _, _, parts = C.duet_loss(ya, yb, batch, 1.0)
    pb, _ = C.adamw_update(state.params_b, M.backward(state.params_b, cache_b, parts["grad_b"]), state.opt_b, hy)
    assert new.params_b.equal(pb)


def test_full_loss_gradient_certified():
    """Analytic gradient of L_A (pseudo-labels held constant) vs finite differences."""
    cfg = tiny_config()
    rng = np.random.default_rng(5)
    reqs = tiny_requests(rng, n_req=2, m=4, cfg=cfg)
    ids = M.encode_requests(reqs, cfg)
    obs = np.array([[1, 1, 0, 0], [1, 0, 0, 0]], bool)
    un = np.array([[0, 0, 1, 1], [0, 1, 0, 1]], bool)
    batch = C.Batch(ids, obs, un, np.where(obs, rng.integers(0, 2, size=obs.shape), 0).astype(float))
    pa = spread_params(M.init_params(cfg, 1))
    pb = spread_params(M.init_params(cfg, 2))
    yb, _ = M.forward(pb, M.lookup(pb, ids))

    def la(p):
        y, _ = M.forward(p, M.lookup(p, ids))
        return C.duet_loss(y, yb, batch, 0.5)[0]

    ya, cache = M.forward(pa, M.lookup(pa, ids))
    _, _, parts = C.duet_loss(ya, yb, batch, 0.5)
    g = M.backward(pa, cache, parts["grad_a"]).flatten()
    assert relative_error(g, finite_diff_grad(la, pa, eps=1e-5), floor=1e-6).max() < 1e-4


def test_overfit_tiny_batch():
    cfg, data = _data(n_req=8)
    hy = C.TrainHyper(lr=1e-2, warmup_steps=0, batch_size=8, lam=0.5)
    state = C.DualState.init(cfg, 1, 2)
    batch = next(C.iter_batches(data, hy, 0))
    first = None
    for _ in range(200):
        state, met = C.train_step(state, batch, hy)
        first = first if first is not None else met["loss_sup_a"]
    assert met["loss_sup_a"] < first


def test_train_deterministic_and_selects_best():
    cfg, data = _data()
    hy = C.TrainHyper(warmup_steps=2, batch_size=8, epochs=2)

    def hook(s):
        return {"auc_a": float(s.params_a["mlp_b2"][0]), "auc_b": float(s.params_b["mlp_b2"][0])}

    runs = [C.train(C.DualState.init(cfg, 1, 2), data, hy, hook) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    assert len(runs[0][1]) == 2
    expect = "b" if runs[0][1][-1]["auc_b"] > runs[0][1][-1]["auc_a"] else "a"
    assert runs[0][2] == expect


def test_warmup_everything_equals_exposed_only():
    cfg, data = _data()
    steps = 3 * 2
    warm = C.TrainHyper(warmup_steps=steps, batch_size=8, epochs=2, lam=1.0)
    noco = C.TrainHyper(ablation="no_co", warmup_steps=0, batch_size=8, epochs=2, lam=1.0)
    s1, _, _ = C.train(C.DualState.init(cfg, 1, 2), data, warm)
    s2, _, _ = C.train(C.DualState.init(cfg, 1, 2), data, noco)
    assert s1.step == steps
    assert s1.params_a.equal(s2.params_a) and s1.params_b.equal(s2.params_b)


def test_empty_stream_rejected():
    cfg, data = _data()
    ids = M.IdBatch(data.ids.cand_ids[:0], data.ids.seq_ids[:0], data.ids.seq_mask[:0],
                    data.ids.user_ids[:0], data.ids.cross_ids[:0])
    empty = C.TrainData(ids, data.observed[:0], data.labels[:0])
    with pytest.raises(ValueError, match="empty"):
        C.train(C.DualState.init(cfg, 1, 2), empty, C.TrainHyper())


def test_identical_seeds_rejected():
    with pytest.raises(ValueError):
        C.DualState.init(tiny_config(), 3, 3)
