"""Backward-pass gradient oracles.

Every oracle maps the upstream gradient ``v = dL/dh`` at the equilibrium to
``(grad_theta, grad_u)``:

* ``ift``      exact implicit differentiation, ``J_theta (I - J_h)^-1 v`` via an
               iterative adjoint solve (Picard or Broyden)
* ``bptt``     reverse sweep through a stored forward trajectory
* ``upg``      unroll ``k`` damped steps from ``h*`` and backpropagate through them
* ``npg``      ``lam * J_theta (I + B + ... + B^(k-1)) v`` with
               ``B = lam J_h + (1 - lam) I``, constant memory
* ``one_step`` ``J_theta v``
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import eqmodule as eq
from .errors import AdjointDivergenceError, DivergenceError, MissingTrajectoryError, ParameterError
from .fpsolvers import FixedPointSolution, _rel, broyden_root

IFT = "ift"
BPTT = "bptt"
UPG = "upg"
NPG = "npg"
ONE_STEP = "one_step"
METHODS = (IFT, BPTT, UPG, NPG, ONE_STEP)

PICARD_ADJOINT = "picard"
BROYDEN_ADJOINT = "broyden"

NORM_CAP = 1e30


@dataclass(frozen=True)
class GradOracleSpec:
    method: str = NPG
    k: int = 5
    lam: float = 0.5
    adjoint_solver: str = PICARD_ADJOINT
    adjoint_tol: float = 1e-10
    adjoint_max_iters: int = 500
    adjoint_damping: float = 1.0
    broyden_memory: int = 30

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown oracle {self.method!r}; expected one of {METHODS}")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if not (0.0 < self.lam <= 1.0):
            raise ParameterError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.adjoint_solver not in (PICARD_ADJOINT, BROYDEN_ADJOINT):
            raise ParameterError(f"unknown adjoint solver {self.adjoint_solver!r}")
        if not self.adjoint_tol > 0 or self.adjoint_max_iters < 1:
            raise ParameterError("adjoint_tol must be > 0 and adjoint_max_iters >= 1")
        if not (0.0 < self.adjoint_damping <= 1.0):
            raise ParameterError(f"adjoint_damping must lie in (0, 1], got {self.adjoint_damping}")


@dataclass
class PhantomGradient:
    grad_theta: np.ndarray
    grad_u: np.ndarray
    method_tag: GradOracleSpec
    # effective backward vector: grad_theta == J_theta @ g_eff
    g_eff: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)
    aux: object = None

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.grad_theta.ravel(), self.grad_u.ravel()])


# -- exact ------------------------------------------------------------------

def adjoint_picard(lin: eq.Linearization, v, tol=1e-10, max_iters=500, damping=1.0):
    """Solve ``g = v + J_h g`` by (damped) fixed-point iteration from ``g = v``.

    Returns ``(g, rel_residual, iterations, converged)``.
    """
    v = np.asarray(v, dtype=np.float64)
    g = v.copy()
    trace = []
    it = 0
    while True:
        r = v + lin.h(g) - g
        rel = _rel(float(np.linalg.norm(r)), float(np.linalg.norm(g)))
        trace.append(rel)
        if rel <= tol or it >= max_iters:
            break
        g_new = g + damping * r
        it += 1
        n = np.linalg.norm(g_new)
        if not np.isfinite(n) or n > NORM_CAP:
            raise AdjointDivergenceError(f"Picard adjoint diverged at step {it}",
                                         last_finite=g, iteration=it, trace=trace)
        g = g_new
    return g, rel, it, rel <= tol


def adjoint_broyden(lin: eq.Linearization, v, tol=1e-10, max_iters=20, memory=30, callback=None):
    """Solve ``(I - J_h) g = v`` with :func:`broyden_root` started at ``g = 0``."""
    v = np.asarray(v, dtype=np.float64)
    if not v.any():
        return np.zeros_like(v), 0.0, 0, True
    try:
        g, rel, it, ok, _ = broyden_root(lambda g: v + lin.h(g) - g, np.zeros_like(v), tol,
                                         max_iters, memory, callback=callback)
    except DivergenceError as exc:
        raise AdjointDivergenceError(str(exc), last_finite=exc.last_finite,
                                     iteration=exc.iteration, trace=exc.trace) from exc
    if np.linalg.norm(g) > NORM_CAP:
        raise AdjointDivergenceError("Broyden adjoint norm exceeded cap", last_finite=g,
                                     iteration=it)
    return g, rel, it, ok


def ift_exact(m: eq.EqModule, h_star, u, v, spec: GradOracleSpec = GradOracleSpec(method=IFT),
              callback=None) -> PhantomGradient:
    lin = eq.Linearization(m, h_star, u)
    if spec.adjoint_solver == BROYDEN_ADJOINT:
        g, rel, it, ok = adjoint_broyden(lin, v, spec.adjoint_tol, spec.adjoint_max_iters,
                                         spec.broyden_memory, callback=callback)
    else:
        g, rel, it, ok = adjoint_picard(lin, v, spec.adjoint_tol, spec.adjoint_max_iters,
                                        spec.adjoint_damping)
    info = {"adjoint_rel_residual": rel, "adjoint_iterations": it, "adjoint_converged": ok}
    return PhantomGradient(lin.theta(g), lin.u(g), spec, g, info)


def _reverse_sweep(m: eq.EqModule, traj, u, v, lam: float):
    """Backpropagate ``v`` (taken at ``traj[-1]``) through damped steps ``traj[0..T-1]``."""
    a = np.asarray(v, dtype=np.float64)
    gt = gu = None
    for t in range(len(traj) - 2, -1, -1):
        gh, guu, gtt = eq.Linearization(m, traj[t], u).all(a)
        if gt is None:
            gt, gu = lam * gtt, lam * guu
        else:
            gt = gt + lam * gtt
            gu = gu + lam * guu
        a = gh if lam == 1.0 else lam * gh + (1.0 - lam) * a
    if gt is None:
        gt = np.zeros(m.n_params)
        gu = np.zeros_like(a)
    return gt, gu


def bptt_exact(m: eq.EqModule, sol: FixedPointSolution, u, v, lambda_fwd: float = 1.0
               ) -> PhantomGradient:
    if sol.trajectory is None:
        raise MissingTrajectoryError("bptt_exact needs a solution with a stored trajectory")
    gt, gu = _reverse_sweep(m, sol.trajectory, u, v, lambda_fwd)
    spec = GradOracleSpec(method=BPTT, k=max(1, len(sol.trajectory) - 1), lam=lambda_fwd)
    return PhantomGradient(gt, gu, spec, info={"steps": len(sol.trajectory) - 1})


# -- phantom ----------------------------------------------------------------

def unroll(m: eq.EqModule, h0, u, k: int, lam: float) -> list:
    """``[h_0, ..., h_k]`` of the damped iteration started at ``h0``."""
    h = np.asarray(h0, dtype=np.float64)
    traj = [h]
    for t in range(k):
        f = eq.forward(m, h, u)
        h = f if lam == 1.0 else (1.0 - lam) * h + lam * f
        if not np.all(np.isfinite(h)):
            raise DivergenceError(f"unrolled state became non-finite at step {t + 1}",
                                  last_finite=traj[-1], iteration=t + 1)
        traj.append(h)
    return traj


def upg_from_trajectory(m: eq.EqModule, traj, u, v, lam: float, k: Optional[int] = None
                        ) -> PhantomGradient:
    gt, gu = _reverse_sweep(m, traj, u, v, lam)
    spec = GradOracleSpec(method=UPG, k=k or len(traj) - 1, lam=lam)
    return PhantomGradient(gt, gu, spec, info={"trajectory_len": len(traj)})


def upg(m: eq.EqModule, h_star, u, v, k: int, lam: float) -> PhantomGradient:
    """Unrolling-based phantom gradient; stores ``k + 1`` states.

    ``v`` is used as the loss gradient at the end of the unroll ``h_k``.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    return upg_from_trajectory(m, unroll(m, h_star, u, k, lam), u, v, lam, k)


def npg(m: eq.EqModule, h_star, u, v, k: int, lam: float) -> PhantomGradient:
    """Neumann-series phantom gradient with two work vectors."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if not (0.0 < lam <= 1.0):
        raise ParameterError(f"lambda must lie in (0, 1], got {lam}")
    lin = eq.Linearization(m, h_star, u)
    v = np.asarray(v, dtype=np.float64)
    g = v
    for i in range(k - 1):
        Bg = lin.h(g)
        if lam != 1.0:
            Bg = lam * Bg + (1.0 - lam) * g
        g = v + Bg
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"Neumann sum became non-finite at term {i + 2}",
                                  iteration=i + 1)
    _, gu, gt = lin.all(g)
    spec = GradOracleSpec(method=NPG, k=k, lam=lam)
    return PhantomGradient(lam * gt, lam * gu, spec, lam * g)


def one_step(m: eq.EqModule, h_star, u, v) -> PhantomGradient:
    _, gu, gt = eq.Linearization(m, h_star, u).all(v)
    spec = GradOracleSpec(method=ONE_STEP, k=1, lam=1.0)
    return PhantomGradient(gt, gu, spec, np.asarray(v, dtype=np.float64))


def gradient(m: eq.EqModule, h_star, u, v, spec: GradOracleSpec,
             sol: Optional[FixedPointSolution] = None) -> PhantomGradient:
    """Dispatch on ``spec.method``; ``bptt`` needs ``sol`` with a trajectory."""
    if spec.method == IFT:
        return ift_exact(m, h_star, u, v, spec)
    if spec.method == NPG:
        return replace(npg(m, h_star, u, v, spec.k, spec.lam), method_tag=spec)
    if spec.method == UPG:
        return replace(upg(m, h_star, u, v, spec.k, spec.lam), method_tag=spec)
    if spec.method == ONE_STEP:
        return one_step(m, h_star, u, v)
    if sol is None:
        raise MissingTrajectoryError("bptt oracle needs the forward solution")
    return bptt_exact(m, sol, u, v, 1.0)
