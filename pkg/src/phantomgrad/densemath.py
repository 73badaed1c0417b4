"""Dense linear-algebra kernels and brute-force oracles.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64
(2-D and 1-D respectively). The thin wrappers below add shape checking with
errors that name both operands; everything else is numpy.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import ShapeError, SingularMatrixError, ZeroVectorError

__all__ = [
    "as_mat",
    "as_vec",
    "gemm",
    "matvec",
    "axpy",
    "dot",
    "norm2",
    "norm1",
    "transpose",
    "spectral_norm",
    "power_iteration_sigma",
    "power_iteration_rho",
    "PowerResult",
    "svd_extremes",
    "lu_factor",
    "dense_inverse",
    "cosine_similarity",
]

KAPPA_INF = float("inf")


def as_mat(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("as_mat", m.shape)
    return m


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("as_vec", v.shape)
    return v


def gemm(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("gemm", a.shape, b.shape)
    return a @ b


def matvec(a, x) -> np.ndarray:
    a, x = as_mat(a), as_vec(x)
    if a.shape[1] != x.shape[0]:
        raise ShapeError("matvec", a.shape, x.shape)
    return a @ x


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` (new array)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError("axpy", x.shape, y.shape)
    return alpha * x + y


def dot(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError("dot", x.shape, y.shape)
    return float(np.vdot(x, y))


def norm2(x) -> float:
    return float(np.linalg.norm(np.ravel(x)))


def norm1(x) -> float:
    return float(np.abs(np.ravel(x)).sum())


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_mat(a).T)


def spectral_norm(a) -> float:
    """Operator 2-norm via a full SVD (dense oracle, small matrices only)."""
    a = as_mat(a)
    if a.size == 0:
        return 0.0
    return float(np.linalg.svd(a, compute_uv=False)[0])


class PowerResult(NamedTuple):
    estimate: float
    iters: int
    converged: bool


def _start_vector(n: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=n)


def power_iteration_sigma(m, max_iters: int = 100, tol: float = 1e-10, seed=0,
                          x0=None) -> PowerResult:
    """Largest singular value of ``m`` by power iteration on ``m.T @ m``.

    Each step maps ``x -> m.T @ m @ x`` and estimates ``sigma**2`` as the
    growth ratio ``|m.T m x| / |x|``. Stops once the estimate or the
    normalized direction changes by at most ``tol`` (relative).

    A zero matrix returns ``PowerResult(0.0, 0, True)``.
    """
    m = as_mat(m)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not np.any(m):
        return PowerResult(0.0, 0, True)
    x = _start_vector(m.shape[1], seed) if x0 is None else np.array(x0, dtype=np.float64)
    nx = np.linalg.norm(x)
    prev = None
    for it in range(1, max_iters + 1):
        y = m.T @ (m @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector landed in the null space; nothing better to report
            return PowerResult(0.0, it, False)
        est = float(np.sqrt(ny / nx))
        y_dir = y / ny
        step = np.linalg.norm(y_dir - x / nx)
        if prev is not None and abs(est - prev) <= tol * est:
            return PowerResult(est, it, True)
        if step <= tol:
            return PowerResult(est, it, True)
        prev = est
        x, nx = y_dir, 1.0
    return PowerResult(est, max_iters, False)


def power_iteration_rho(m, max_iters: int = 1000, tol: float = 1e-10, seed=0) -> PowerResult:
    """Spectral radius estimate by power iteration on ``m`` itself.

    The estimate is the growth ratio ``|m x| / |x|`` of the normalized
    iterate. For a dominant pair of opposite-sign eigenvalues the ratio still
    converges to their common magnitude. A nilpotent matrix drives the
    iterate to zero and is reported as non-converged with estimate 0.
    """
    m = as_mat(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeError("power_iteration_rho", m.shape)
    if not np.any(m):
        return PowerResult(0.0, 0, False)
    x = _start_vector(m.shape[0], seed)
    x /= np.linalg.norm(x)
    prev = None
    est = 0.0
    logs = []
    for it in range(1, max_iters + 1):
        y = m @ x
        ny = np.linalg.norm(y)
        if ny == 0.0 or not np.isfinite(ny):
            return PowerResult(0.0 if ny == 0.0 else est, it, False)
        est = float(ny)
        logs.append(math.log(est))
        if prev is not None and abs(est - prev) <= tol * est:
            return PowerResult(est, it, True)
        prev = est
        x = y / ny
    # complex or near-tied dominant eigenvalues make the one-step ratio
    # oscillate; the mean log-growth over the tail still tends to rho
    tail = logs[len(logs) // 2:]
    return PowerResult(float(math.exp(sum(tail) / len(tail))), max_iters, False)


def svd_extremes(m) -> tuple[float, float, float]:
    """``(sigma_max, sigma_min, kappa)`` from the singular values of ``m``.

    Uses LAPACK's divide-and-conquer SVD through numpy. ``sigma_min`` is
    the smallest of the ``min(rows, cols)`` singular values; ``kappa`` is
    ``inf`` once ``sigma_min`` drops below 1e-300.
    """
    m = as_mat(m)
    if m.size == 0:
        raise ShapeError("svd_extremes", m.shape)
    s = np.linalg.svd(m, compute_uv=False)
    smax, smin = float(s[0]), float(s[-1])
    kappa = KAPPA_INF if smin < 1e-300 else smax / smin
    return smax, smin, kappa


def lu_factor(m) -> tuple[np.ndarray, np.ndarray]:
    """Doolittle LU with partial pivoting.

    Returns ``(lu, perm)`` with unit-lower L below the diagonal and U on and
    above it, such that ``m[perm] == L @ U``. Raises
    :class:`SingularMatrixError` when a pivot falls below ``1e-12`` times the
    largest absolute entry of ``m``.
    """
    a = np.array(as_mat(m), dtype=np.float64)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError("lu_factor", a.shape)
    scale = float(np.abs(a).max()) if a.size else 0.0
    perm = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        piv = abs(a[p, k])
        if piv < 1e-12 * scale or scale == 0.0:
            raise SingularMatrixError(piv, scale, k)
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    return a, perm


def _lu_solve(lu: np.ndarray, perm: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = lu.shape[0]
    x = np.array(rhs[perm], dtype=np.float64)
    for i in range(1, n):
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - lu[i, i + 1:] @ x[i + 1:]) / lu[i, i]
    return x


def dense_inverse(m) -> np.ndarray:
    """Inverse by LU with partial pivoting, solving against the identity."""
    lu, perm = lu_factor(m)
    return _lu_solve(lu, perm, np.eye(lu.shape[0]))


def cosine_similarity(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    sa, sb = np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)
    if sa == 0.0 or sb == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for a zero vector")
    # pre-scale so tiny or huge entries do not under/overflow in the norms
    a, b = a / sa, b / sb
    c = float(np.dot(a / np.linalg.norm(a), b / np.linalg.norm(b)))
    if math.isnan(c):
        return c
    return min(1.0, max(-1.0, c))
