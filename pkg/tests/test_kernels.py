"""The numba and numpy paths of every hot kernel must agree."""
import numpy as np
import pytest

from duet import _accel, kernels

needs_numba = pytest.mark.skipif(not _accel.NUMBA_AVAILABLE, reason="numba disabled or missing")


@needs_numba
def test_quadratic_attention_backends_agree(rng):
    for _ in range(20):
        m, n, d, e = rng.integers(1, 9, size=4)
        pq = rng.uniform(0.1, 2, size=(m, d))
        pk = rng.uniform(0.1, 2, size=(n, d))
        v = rng.normal(size=(n, e))
        np.testing.assert_allclose(kernels.quadratic_attention(pq, pk, v, backend="numba"),
                                   kernels.quadratic_attention(pq, pk, v, backend="numpy"), rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("backend", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_quadratic_attention_degenerate_row(backend):
    pq = np.array([[1.0], [0.0]])
    pk = np.array([[1.0]])
    with pytest.raises(kernels.DegenerateDegreeError) as err:
        kernels.quadratic_attention(pq, pk, np.ones((1, 1)), backend=backend)
    assert err.value.row == 1


@needs_numba
def test_scatter_backends_agree(rng):
    ids = rng.integers(0, 7, size=40)
    rows = rng.normal(size=(40, 3))
    a = kernels.scatter_add_rows(np.zeros((7, 3)), ids, rows, backend="numba")
    b = kernels.scatter_add_rows(np.zeros((7, 3)), ids, rows, backend="numpy")
    np.testing.assert_allclose(a, b, atol=1e-12)
    expected = np.zeros((7, 3))
    for i, r in zip(ids, rows):
        expected[i] += r
    np.testing.assert_allclose(a, expected, atol=1e-12)


@needs_numba
def test_rank_sum_auc_backends_agree(rng):
    for _ in range(200):
        n = int(rng.integers(2, 60))
        s = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            continue
        assert kernels.rank_sum_auc(s, y, backend="numba") == pytest.approx(
            kernels.rank_sum_auc(s, y, backend="numpy"), abs=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.rank_sum_auc(np.zeros(2), np.array([0, 1]), backend="cuda")
