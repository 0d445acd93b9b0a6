"""Dense float64 helpers: products, spectral norms, Cayley orthogonalization,
finite-difference gradients.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every public
function validates its inputs through :func:`as_tensor`, which rejects NaN
and Inf.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

MAX_EXACT_DIM = 4096


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} produced non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _check_finite(a @ b, "matmul")


@dataclass(frozen=True)
class SpectralEstimate:
    sigma: float
    iterations: int
    residual: float
    # top left/right singular vector estimates; None for the zero matrix
    u: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    residuals: tuple[float, ...] = field(default=(), repr=False)


def power_iteration(w, tol: float = 1e-10, max_iter: int = 1000, seed: int = 0) -> SpectralEstimate:
    """Estimate the largest singular value of ``w`` by power iteration on WᵀW.

    Stops when the relative change of sigma between two iterations drops
    below ``tol``. The estimate never exceeds the true value in exact
    arithmetic, which is why certification does not rely on it.
    """
    w = as_tensor(w, "w")
    if w.ndim != 2:
        raise DimensionError(f"power_iteration expects a matrix, got shape {w.shape}")
    if tol <= 0 or max_iter < 1:
        raise ValidationError("power_iteration needs tol > 0 and max_iter >= 1")
    n = w.shape[1]
    if not np.any(w):
        return SpectralEstimate(0.0, 0, 0.0)
    # iterate on w / max|w| so huge or tiny weights cannot overflow
    scale = float(np.max(np.abs(w)))
    w = w / scale

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    u = w @ v
    sigma = float(np.linalg.norm(u))
    residuals: list[float] = []  # running minimum of the relative change
    it = 0
    for it in range(1, max_iter + 1):
        z = w.T @ u
        nz = np.linalg.norm(z)
        if nz == 0.0:
            break
        v = z / nz
        u = w @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            break
        change = abs(new_sigma - sigma) / new_sigma
        residuals.append(min(change, residuals[-1]) if residuals else change)
        sigma = new_sigma
        if change < tol:
            break
    if sigma > 0:
        u = u / sigma
    return SpectralEstimate(
        sigma=sigma * scale,
        iterations=it,
        residual=residuals[-1] if residuals else 0.0,
        u=u,
        v=v,
        residuals=tuple(residuals),
    )


def exact_spectral_norm(w) -> float:
    """Largest singular value from the eigenvalues of the smaller Gram matrix."""
    w = as_tensor(w, "w")
    if w.ndim != 2:
        raise DimensionError(f"exact_spectral_norm expects a matrix, got shape {w.shape}")
    m, n = w.shape
    if min(m, n) > MAX_EXACT_DIM:
        raise ValidationError(f"matrix {w.shape} too large for dense eigen-decomposition")
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    if scale == 0.0:
        return 0.0
    w = w / scale
    gram = w @ w.T if m <= n else w.T @ w
    lam = np.linalg.eigvalsh(gram)[-1]
    return float(np.sqrt(max(lam, 0.0))) * scale


def skew(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a - a.T)


def cayley_orthogonalize(a) -> np.ndarray:
    """Return W = (I - S)(I + S)^-1 for the skew part S of ``a``."""
    a = as_tensor(a, "a")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"cayley_orthogonalize expects a square matrix, got {a.shape}")
    n = a.shape[0]
    s = skew(a)
    eye = np.eye(n)
    try:
        # (I - S) and (I + S)^-1 commute, so W = (I + S)^-1 (I - S)
        w = np.linalg.solve(eye + s, eye - s)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Cayley solve failed: {exc}") from exc
    return _check_finite(w, "cayley_orthogonalize")


def cayley_backward(a, w: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``a`` given dL/dW for W = cayley_orthogonalize(a).

    dW = -(I + W) dS (I + S)^-1, hence dL/dS = -(I + W)ᵀ G (I + S)^-ᵀ.
    """
    a = as_tensor(a)
    n = a.shape[0]
    eye = np.eye(n)
    s = skew(a)
    # G M^T with M = (I + S)^-1  ->  solve (I + S) X^T = G^T
    gm = np.linalg.solve(eye + s, grad_w.T).T
    grad_s = -(eye + w).T @ gm
    return 0.5 * (grad_s - grad_s.T)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValidationError("finite difference step must be positive")
    x = as_tensor(x, "x").copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
