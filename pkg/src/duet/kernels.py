"""Hot loops, each with a numba path and a pure-numpy path.

The public functions dispatch on ``_accel.NUMBA_AVAILABLE`` unless an
explicit ``backend`` is passed, which the benchmark uses to time both
paths in one process. Both paths must agree to floating-point accuracy;
``tests/test_kernels.py`` checks that.
"""
import numpy as np

from . import _accel
from ._accel import njit

DEGREE_FLOOR = 1e-30
DEGREE_EPS = 1e-12   # added to every degree before dividing, in both attention forms


class DegenerateDegreeError(ValueError):
    """A query row whose kernel similarities to every key sum to ~0."""

    def __init__(self, row):
        super().__init__(f"degenerate attention degree in query row {row}")
        self.row = row


def _pick(backend):
    if backend is None:
        return "numba" if _accel.NUMBA_AVAILABLE else "numpy"
    if backend == "numba" and not _accel.NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is disabled or missing")
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


# -- quadratic attention ------------------------------------------------------

@njit
def _quadratic_attention_nb(phi_q, phi_k, v, out):
    m, d = phi_q.shape
    n = phi_k.shape[0]
    e = v.shape[1]
    for i in range(m):
        deg = 0.0
        for j in range(n):
            s = 0.0
            for t in range(d):
                s += phi_q[i, t] * phi_k[j, t]
            deg += s
            for c in range(e):
                out[i, c] += s * v[j, c]
        if deg < 1e-30:
            return i
        for c in range(e):
            out[i, c] /= deg + 1e-12
    return -1


def _quadratic_attention_np(phi_q, phi_k, v):
    w = phi_q @ phi_k.T
    deg = w.sum(axis=1)
    bad = np.flatnonzero(deg < DEGREE_FLOOR)
    if bad.size:
        raise DegenerateDegreeError(int(bad[0]))
    return (w @ v) / (deg + DEGREE_EPS)[:, None]


def quadratic_attention(phi_q, phi_k, v, backend=None):
    """Row-normalised ``(phi_q phi_k^T) v`` built from the full m x n weights."""
    if _pick(backend) == "numba":
        out = np.zeros((phi_q.shape[0], v.shape[1]), dtype=np.result_type(phi_q, v))
        bad = _quadratic_attention_nb(
            np.ascontiguousarray(phi_q, dtype=out.dtype),
            np.ascontiguousarray(phi_k, dtype=out.dtype),
            np.ascontiguousarray(v, dtype=out.dtype),
            out,
        )
        if bad >= 0:
            raise DegenerateDegreeError(int(bad))
        return out
    return _quadratic_attention_np(phi_q, phi_k, v)


# -- sparse gradient accumulation ---------------------------------------------

@njit
def _scatter_add_rows_nb(table, ids, rows):
    for r in range(ids.shape[0]):
        k = ids[r]
        for c in range(rows.shape[1]):
            table[k, c] += rows[r, c]


def scatter_add_rows(table, ids, rows, backend=None):
    """In place: ``table[ids[r]] += rows[r]`` with repeated ids accumulating."""
    ids = np.ascontiguousarray(ids, dtype=np.int64).ravel()
    rows = np.ascontiguousarray(rows, dtype=table.dtype).reshape(ids.shape[0], -1)
    if _pick(backend) == "numba":
        _scatter_add_rows_nb(table, ids, rows)
    else:
        np.add.at(table, ids, rows)
    return table


# -- rank-sum AUC -------------------------------------------------------------

@njit
def _rank_sum_auc_nb(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    n = scores.shape[0]
    n_pos = 0.0
    pos_rank_sum = 0.0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg_rank = 0.5 * (i + j) + 1.0
        for t in range(i, j + 1):
            if labels[order[t]] > 0:
                n_pos += 1.0
                pos_rank_sum += avg_rank
        i = j + 1
    n_neg = n - n_pos
    return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)


def _rank_sum_auc_np(scores, labels):
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    boundaries = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    # tied group spanning sorted positions [a, b) gets average 1-based rank (a + b + 1) / 2
    avg = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    pos = labels[order] > 0
    n_pos = float(pos.sum())
    n_neg = s.size - n_pos
    return (avg[pos].sum() - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)


def rank_sum_auc(scores, labels, backend=None):
    """Mann-Whitney AUC with average ranks for ties. Caller checks both classes exist."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if _pick(backend) == "numba":
        return float(_rank_sum_auc_nb(scores, labels))
    return float(_rank_sum_auc_np(scores, labels))
