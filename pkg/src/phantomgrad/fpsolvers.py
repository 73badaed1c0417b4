"""Forward equilibrium solvers: (damped) Picard iteration and limited-memory Broyden."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import eqmodule as eq
from .errors import DivergenceError, ParameterError, ZeroVectorError

PICARD = "picard"
DAMPED_PICARD = "damped_picard"
BROYDEN = "broyden"
METHODS = (PICARD, DAMPED_PICARD, BROYDEN)


@dataclass(frozen=True)
class SolverSpec:
    method: str = PICARD
    tol: float = 1e-5
    max_iters: int = 100
    damping: float = 1.0
    broyden_memory: int = 30

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown solver method {self.method!r}; expected one of {METHODS}")
        if not self.tol > 0:
            raise ParameterError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (0.0 < self.damping <= 1.0):
            raise ParameterError(f"damping must lie in (0, 1], got {self.damping}")
        if self.broyden_memory < 1:
            raise ParameterError(f"broyden_memory must be >= 1, got {self.broyden_memory}")


@dataclass
class FixedPointSolution:
    h_star: np.ndarray
    rel_residual: float
    iterations: int
    converged: bool
    trajectory: Optional[list] = None
    residuals: list = field(default_factory=list)


def _rel(res_norm: float, h_norm: float) -> float:
    if h_norm == 0.0:
        return 0.0 if res_norm == 0.0 else float("inf")
    return res_norm / h_norm


def relative_residual(m: eq.EqModule, h, u) -> float:
    """``|h - F(h, u)| / |h|`` with Frobenius norms over batched states."""
    h = np.asarray(h, dtype=np.float64)
    nh = np.linalg.norm(h)
    if nh == 0.0:
        raise ZeroVectorError("relative residual is undefined at h = 0")
    return float(np.linalg.norm(h - eq.forward(m, h, u)) / nh)


def picard_solve(m: eq.EqModule, u, spec: SolverSpec = SolverSpec(), h0=None,
                 store_trajectory: bool = False) -> FixedPointSolution:
    """Iterate ``h <- lam F(h) + (1 - lam) h`` until the relative residual is <= tol.

    ``lam`` is ``spec.damping`` for ``damped_picard`` and 1 for ``picard``.
    ``iterations`` counts applied updates; the stored trajectory is
    ``[h_0, ..., h_T]`` with ``trajectory[-1] is h_star``.
    """
    if spec.method == BROYDEN:
        raise ParameterError("picard_solve called with a Broyden spec")
    lam = spec.damping if spec.method == DAMPED_PICARD else 1.0
    u = np.asarray(u, dtype=np.float64)
    h = np.zeros_like(u) if h0 is None else np.array(h0, dtype=np.float64)
    traj = [h] if store_trajectory else None
    residuals = []
    f = eq.forward(m, h, u)
    rel = _rel(float(np.linalg.norm(h - f)), float(np.linalg.norm(h)))
    residuals.append(rel)
    it = 0
    while rel > spec.tol and it < spec.max_iters:
        h_new = f if lam == 1.0 else lam * f + (1.0 - lam) * h
        if not np.all(np.isfinite(h_new)):
            raise DivergenceError(f"Picard iterate became non-finite at step {it + 1}",
                                  last_finite=h, iteration=it + 1, trace=residuals)
        h = h_new
        it += 1
        if store_trajectory:
            traj.append(h)
        f = eq.forward(m, h, u)
        rel = _rel(float(np.linalg.norm(h - f)), float(np.linalg.norm(h)))
        residuals.append(rel)
        if not np.isfinite(rel):
            raise DivergenceError(f"Picard residual became non-finite at step {it}",
                                  last_finite=h, iteration=it, trace=residuals)
    return FixedPointSolution(h, rel, it, rel <= spec.tol, traj, residuals)


def broyden_root(g: Callable[[np.ndarray], np.ndarray], x0, tol: float, max_iters: int,
                 memory: int = 30, rel_to: Optional[Callable[[np.ndarray], float]] = None,
                 callback=None):
    """Limited-memory "good Broyden" root finder for ``g(x) = 0``.

    The inverse-Jacobian estimate starts at ``-I`` and is kept as
    ``H = -I + sum_i p_i q_i^T`` over the last ``memory`` rank-one factors.
    Steps are clipped to ``|dx| <= 10 |g(x)|``; when the update denominator
    ``|<dx, H dg>|`` is below 1e-14 the estimate is reset to ``-I``.

    Convergence is ``|g(x)| / rel_to(x) <= tol`` (``rel_to`` defaults to
    ``|x|``). ``callback(it, x, gx)`` is invoked after every step.

    Returns ``(x, rel, iterations, converged, residual_history)``.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    shape = np.shape(x0)
    if rel_to is None:
        rel_to = lambda z: float(np.linalg.norm(z))  # noqa: E731

    def G(z):
        return np.asarray(g(z.reshape(shape)), dtype=np.float64).ravel()

    P: list = []
    Q: list = []

    def H(w):
        out = -w
        for p, q in zip(P, Q):
            out = out + p * (q @ w)
        return out

    def HT(w):
        out = -w
        for p, q in zip(P, Q):
            out = out + q * (p @ w)
        return out

    gx = G(x)
    rel = _rel(float(np.linalg.norm(gx)), rel_to(x))
    history = [rel]
    it = 0
    while rel > tol and it < max_iters:
        dx = -H(gx)
        ndx, ng = np.linalg.norm(dx), np.linalg.norm(gx)
        if ndx > 10.0 * ng:
            dx *= 10.0 * ng / ndx
        x_new = x + dx
        g_new = G(x_new)
        it += 1
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(g_new))):
            raise DivergenceError(f"Broyden iterate became non-finite at step {it}",
                                  last_finite=x.reshape(shape), iteration=it, trace=history)
        dg = g_new - gx
        Hdg = H(dg)
        denom = float(dx @ Hdg)
        if abs(denom) < 1e-14:
            P.clear()
            Q.clear()
        else:
            q = HT(dx)
            P.append((dx - Hdg) / denom)
            Q.append(q)
            if len(P) > memory:
                P.pop(0)
                Q.pop(0)
        x, gx = x_new, g_new
        rel = _rel(float(np.linalg.norm(gx)), rel_to(x))
        history.append(rel)
        if callback is not None:
            callback(it, x.reshape(shape), gx.reshape(shape))
    return x.reshape(shape), rel, it, rel <= tol, history


def broyden_solve(m: eq.EqModule, u, spec: SolverSpec = SolverSpec(method=BROYDEN), h0=None
                  ) -> FixedPointSolution:
    """Root of ``F(h, u) - h`` by :func:`broyden_root`."""
    if spec.method != BROYDEN:
        raise ParameterError("broyden_solve called with a non-Broyden spec")
    u = np.asarray(u, dtype=np.float64)
    h0 = np.zeros_like(u) if h0 is None else np.asarray(h0, dtype=np.float64)
    h, _, it, _, hist = broyden_root(lambda h: eq.forward(m, h, u) - h, h0, spec.tol,
                                     spec.max_iters, spec.broyden_memory)
    rel = _rel(float(np.linalg.norm(h - eq.forward(m, h, u))), float(np.linalg.norm(h)))
    return FixedPointSolution(h, rel, it, rel <= spec.tol, None, hist)


def solve(m: eq.EqModule, u, spec: SolverSpec, h0=None, store_trajectory: bool = False
          ) -> FixedPointSolution:
    if spec.method == BROYDEN:
        if store_trajectory:
            raise ParameterError("trajectory storage is only available for Picard solvers")
        return broyden_solve(m, u, spec, h0)
    return picard_solve(m, u, spec, h0, store_trajectory)
