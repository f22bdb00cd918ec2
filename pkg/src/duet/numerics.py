"""Feature maps for kernelised attention and a central-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects (2-D for single requests,
3-D with a leading batch axis inside the training path).
"""
from dataclasses import dataclass

import numpy as np

KERNEL_KINDS = ("elu_plus_one", "softplus", "relu_plus_eps")


@dataclass(frozen=True)
class KernelMap:
    kind: str = "elu_plus_one"
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if not self.eps > 0:
            raise ValueError("kernel eps must be positive")

    def to_dict(self):
        return {"kind": self.kind, "eps": self.eps}


def apply_kernel(kmap, x):
    """Element-wise positive feature map phi(x)."""
    x = np.asarray(x)
    if kmap.kind == "elu_plus_one":
        # exp only on the negative side so large positives cannot overflow
        return np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    if kmap.kind == "softplus":
        return np.logaddexp(0.0, x)
    return np.maximum(x, 0.0) + kmap.eps


def kernel_derivative(kmap, x):
    """d phi / dx evaluated element-wise at ``x``."""
    x = np.asarray(x)
    if kmap.kind == "elu_plus_one":
        return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype, copy=False)
    if kmap.kind == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    return (x > 0).astype(x.dtype)


def finite_diff_grad(f, params, eps=1e-6):
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` is either a 1-D float array or an object exposing
    ``flatten()`` and ``with_flat(vector)`` (see ``duet.model.Parameters``),
    in which case coordinates follow its canonical flattening order.
    Evaluate at float64; the oracle is meaningless at lower precision.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    if isinstance(params, np.ndarray):
        theta = params.astype(np.float64).ravel()

        def rebuild(vec):
            return vec.reshape(params.shape)
    else:
        theta = params.flatten().astype(np.float64)
        rebuild = params.with_flat

    grad = np.empty_like(theta)
    work = theta.copy()
    for i in range(theta.size):
        work[i] = theta[i] + eps
        hi = float(f(rebuild(work.copy())))
        work[i] = theta[i] - eps
        lo = float(f(rebuild(work.copy())))
        work[i] = theta[i]
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite objective while perturbing coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a, b, floor=1e-8):
    """Element-wise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
