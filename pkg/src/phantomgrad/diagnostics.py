"""Dense numerical checks of the descent condition and Neumann/unroll convergence.

All matrix norms are spectral (operator 2-norm) unless the field name says
``frobenius``. Dense Jacobians use the row-is-input convention of
:mod:`phantomgrad.eqmodule`, so for a phantom matrix ``A`` of shape
``(n_params, d)`` the phantom gradient is ``A @ v`` and the exact one is
``J_theta @ inv(I - J_h) @ v``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import eqmodule as eq
from .densemath import (cosine_similarity, dense_inverse, norm1, norm2, power_iteration_rho,
                        spectral_norm, svd_extremes)
from .errors import ZeroVectorError
from .gradoracles import NPG, UPG, PhantomGradient, unroll

NAN = float("nan")


@dataclass
class DiagnosticsRecord:
    cosine_vs_exact: float = NAN
    eps_error: float = NAN
    lhs_thm1: float = NAN
    rhs_thm1: float = NAN
    lhs_thm1_frobenius: float = NAN
    lhs_reduced: float = NAN
    rhs_reduced: float = NAN
    condition_holds: Optional[bool] = None
    inner_product: float = NAN
    min_sampled_inner: float = NAN
    n_sampled_positive: int = -1
    n_sampled: int = 0
    sigma_max: float = NAN
    sigma_min: float = NAN
    kappa: float = NAN
    sigma_min_zero: bool = False
    rho_F: float = NAN
    rho_F_lambda: float = NAN
    l1_exact: float = NAN
    l1_phantom: float = NAN
    solver_trace: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        c = self.cosine_vs_exact
        if not math.isnan(c) and not -1.0 <= c <= 1.0:
            raise ValueError(f"cosine out of range: {c}")

    def to_row(self) -> dict:
        """Flat mapping in :data:`COLUMNS` order; the trace is not serialized."""
        d = asdict(self)
        return {k: d[k] for k in COLUMNS}


COLUMNS = tuple(f.name for f in fields(DiagnosticsRecord) if f.name != "solver_trace")


def _damped(J_h: np.ndarray, lam: float) -> np.ndarray:
    return lam * J_h + (1.0 - lam) * np.eye(J_h.shape[0])


def neumann_matrix(J_h: np.ndarray, k: int, lam: float) -> np.ndarray:
    """``lam * (I + B + ... + B^(k-1))`` with ``B = lam J_h + (1 - lam) I``."""
    B = _damped(J_h, lam)
    term = np.eye(J_h.shape[0])
    acc = term.copy()
    for _ in range(k - 1):
        term = B @ term
        acc += term
    return lam * acc


def unrolled_matrix(m: eq.EqModule, h0, u, k: int, lam: float) -> np.ndarray:
    """Dense unrolled phantom matrix along the damped trajectory started at ``h0``."""
    traj = unroll(m, h0, u, k, lam)
    P = np.eye(m.d)
    A = np.zeros((m.n_params, m.d))
    for t in range(k - 1, -1, -1):
        J_h, J_t = eq.materialize_jacobians(m, traj[t], u)
        A += lam * (J_t @ P)
        P = _damped(J_h, lam) @ P
    return A


def phantom_matrix(m: eq.EqModule, h_star, u, k: int, lam: float, method: str = NPG):
    J_h, J_t = eq.materialize_jacobians(m, h_star, u)
    if method == UPG:
        return unrolled_matrix(m, h_star, u, k, lam)
    return J_t @ neumann_matrix(J_h, k, lam)


def descent_condition_check(m: eq.EqModule, h_star, u, k: int, lam: float, method: str = NPG,
                            v=None, A=None, n_samples: int = 100, seed=0) -> DiagnosticsRecord:
    """Evaluate the sufficient ascent condition for one phantom matrix.

    ``lhs = |A (I - J_h) - J_theta|`` against ``rhs = sigma_min^2 / sigma_max``
    of ``J_theta``. With ``A`` given explicitly it is used as-is; otherwise it
    is built from ``method`` (``npg`` or ``upg``) at ``(k, lam)``. The reduced
    form ``|D (I - J_h) - I| < 1 / kappa^2`` is reported for the Neumann
    matrix ``D``. ``inner_product`` uses ``v`` (or a seeded normal draw), and
    ``n_samples`` further normal draws give ``min_sampled_inner``.
    """
    J_h, J_t = eq.materialize_jacobians(m, h_star, u)
    d = m.d
    I = np.eye(d)
    resolvent = dense_inverse(I - J_h)
    D = None
    if A is None:
        D = neumann_matrix(J_h, k, lam)
        A = J_t @ D if method == NPG else unrolled_matrix(m, h_star, u, k, lam)
    E = A @ (I - J_h) - J_t
    smax, smin, kappa = svd_extremes(J_t)
    rec = DiagnosticsRecord(sigma_max=smax, sigma_min=smin, kappa=kappa)
    rec.lhs_thm1 = spectral_norm(E)
    rec.lhs_thm1_frobenius = float(np.linalg.norm(E))
    if smin < 1e-300:
        rec.rhs_thm1 = 0.0
        rec.sigma_min_zero = True
    else:
        rec.rhs_thm1 = smin * smin / smax
    rec.condition_holds = rec.lhs_thm1 < rec.rhs_thm1
    if D is not None and method == NPG:
        rec.lhs_reduced = spectral_norm(D @ (I - J_h) - I)
        rec.rhs_reduced = 0.0 if math.isinf(kappa) else 1.0 / (kappa * kappa)

    rng = np.random.default_rng(seed)
    exact_map = J_t @ resolvent
    if v is None:
        v = rng.standard_normal(d)
    rec.inner_product = float((A @ v) @ (exact_map @ v))
    if n_samples > 0:
        V = rng.standard_normal((n_samples, d))
        inner = np.einsum("ij,ij->i", V @ A.T, V @ exact_map.T)
        rec.min_sampled_inner = float(inner.min())
        rec.n_sampled_positive = int((inner > 0).sum())
        rec.n_sampled = n_samples
    return rec


def smallest_satisfying_k(m: eq.EqModule, h_star, u, lam: float, k_max: int = 200,
                          method: str = NPG) -> Optional[int]:
    """Smallest ``k <= k_max`` for which the ascent condition holds, else ``None``."""
    for k in range(1, k_max + 1):
        if descent_condition_check(m, h_star, u, k, lam, method, n_samples=0).condition_holds:
            return k
    return None


def neumann_truncation_error(m: eq.EqModule, h_star, u, k: int, lam: float) -> float:
    """``| lam * sum_{t<k} B^t - inv(I - J_h) |_2``."""
    J_h, _ = eq.materialize_jacobians(m, h_star, u)
    exact = dense_inverse(np.eye(m.d) - J_h)
    return spectral_norm(neumann_matrix(J_h, k, lam) - exact)


def jacobian_h(m: eq.EqModule, h, u) -> np.ndarray:
    """Dense ``J_h`` without the parameter Jacobian (cheap path for radii)."""
    lin = eq.Linearization(m, h, u)
    if lin.dphi is None:
        return m.W.T.copy()
    return m.W.T * lin.dphi[None, :]


def spectral_radius_report(m: eq.EqModule, h_star, u, lam: float, seed=0,
                           max_iters: int = 5000, tol: float = 1e-12) -> tuple[float, float]:
    """Power-iteration estimates of ``rho(J_h)`` and ``rho(lam J_h + (1 - lam) I)``."""
    J_h = jacobian_h(m, h_star, u)
    rho = power_iteration_rho(J_h, max_iters, tol, seed).estimate
    if lam == 1.0:
        return rho, rho
    rho_l = power_iteration_rho(_damped(J_h, lam), max_iters, tol, seed).estimate
    return rho, rho_l


def compare_gradients(exact: PhantomGradient, candidate: PhantomGradient) -> DiagnosticsRecord:
    """Cosine, error norm and L1 norms of concatenated ``(grad_theta, grad_u)``.

    The record is also attached to ``candidate.aux``.
    """
    e, c = exact.flat, candidate.flat
    if not e.any():
        raise ZeroVectorError("exact gradient is zero; cosine is undefined")
    if not c.any():
        raise ZeroVectorError("candidate gradient is zero; cosine is undefined")
    rec = DiagnosticsRecord(
        cosine_vs_exact=cosine_similarity(e, c),
        eps_error=norm2(c - e),
        l1_exact=norm1(e),
        l1_phantom=norm1(c),
    )
    candidate.aux = rec
    return rec
