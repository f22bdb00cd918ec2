"""Degree-normalised kernel attention.

``linear_attention`` computes ``D^-1 phi(Q) (phi(K)^T V)`` with
``D = diag(phi(Q) phi(K)^T 1)``; it never forms the m x n similarity
matrix. ``naive_kernel_attention`` forms it explicitly and serves as the
oracle. Both normalise every query row so its weights sum to one, which
makes each output row a convex combination of V's rows.

Note that the result is *not* invariant to rescaling Q: phi is not
homogeneous, so scaling queries changes the weights.

The batched variants take a key mask so ragged behaviour sequences can be
padded; masked keys contribute nothing to either the numerator or the
degree.
"""
import numpy as np

from . import kernels
from .kernels import DegenerateDegreeError
from .numerics import KernelMap, apply_kernel, kernel_derivative

DEGREE_EPS = kernels.DEGREE_EPS

__all__ = [
    "DegenerateDegreeError",
    "naive_kernel_attention",
    "linear_attention",
    "batched_linear_attention",
    "batched_linear_attention_backward",
]


def _check_shapes(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention inputs must be 2-D matrices")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"keys ({k.shape[0]} rows) and values ({v.shape[0]} rows) disagree")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("attention needs at least one query and one key")


def naive_kernel_attention(q, k, v, kmap=KernelMap(), backend=None):
    """O(m n d) reference: explicit weights, each row divided by its degree.

    The degree gets the same 1e-12 floor as in ``linear_attention``, so the
    two differ only by summation order.
    """
    q, k, v = (np.asarray(a) for a in (q, k, v))
    _check_shapes(q, k, v)
    return kernels.quadratic_attention(apply_kernel(kmap, q), apply_kernel(kmap, k), v, backend=backend)


def linear_attention(q, k, v, kmap=KernelMap()):
    """O((m + n) d^2) degree-normalised linear attention."""
    q, k, v = (np.asarray(a) for a in (q, k, v))
    _check_shapes(q, k, v)
    phi_q = apply_kernel(kmap, q)
    phi_k = apply_kernel(kmap, k)
    kv = phi_k.T @ v            # d x e
    z = phi_k.sum(axis=0)       # d
    deg = phi_q @ z
    bad = np.flatnonzero(deg < kernels.DEGREE_FLOOR)
    if bad.size:
        raise DegenerateDegreeError(int(bad[0]))
    return (phi_q @ kv) / (deg + DEGREE_EPS)[:, None]


def batched_linear_attention(q, k, v, key_mask, kmap):
    """Batched form over (B, m, d) queries and (B, n, d) keys/values.

    Returns ``(out, cache)``; pass the cache to the backward function.
    """
    phi_q = apply_kernel(kmap, q)
    phi_k = apply_kernel(kmap, k)
    if key_mask is not None:
        phi_k = phi_k * key_mask[..., None]
    kv = np.matmul(phi_k.transpose(0, 2, 1), v)          # B x d x e
    z = phi_k.sum(axis=1)                                 # B x d
    num = np.matmul(phi_q, kv)                            # B x m x e
    deg = np.einsum("bmd,bd->bm", phi_q, z) + DEGREE_EPS  # B x m
    out = num / deg[..., None]
    cache = (q, k, v, key_mask, phi_q, phi_k, kv, z, deg, out)
    return out, cache


def batched_linear_attention_backward(d_out, cache, kmap):
    """Gradients ``(dq, dk, dv)`` of the batched op given ``d_out``."""
    q, k, v, key_mask, phi_q, phi_k, kv, z, deg, out = cache
    d_num = d_out / deg[..., None]
    d_deg = -np.einsum("bme,bme->bm", d_out, out) / deg
    d_phi_q = np.matmul(d_num, kv.transpose(0, 2, 1)) + d_deg[..., None] * z[:, None, :]
    d_kv = np.matmul(phi_q.transpose(0, 2, 1), d_num)     # B x d x e
    d_z = np.einsum("bm,bmd->bd", d_deg, phi_q)
    d_phi_k = np.matmul(v, d_kv.transpose(0, 2, 1)) + d_z[:, None, :]
    d_v = np.matmul(phi_k, d_kv)
    if key_mask is not None:
        d_phi_k = d_phi_k * key_mask[..., None]
    dq = d_phi_q * kernel_derivative(kmap, q)
    dk = d_phi_k * kernel_derivative(kmap, k)
    return dq, dk, d_v
