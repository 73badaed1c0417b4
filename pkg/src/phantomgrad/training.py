"""SGD on the synthetic regression task ``min E 0.5 |h*(u) - y|^2`` with any gradient oracle."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import eqmodule as eq
from . import fpsolvers as fp
from . import gradoracles as go
from .diagnostics import compare_gradients, spectral_radius_report
from .errors import DivergenceError, ParameterError, PhantomGradError

log = logging.getLogger(__name__)

INV_SQRT = "inv_sqrt"
CONSTANT = "constant"
# shrink W only when it exceeds the target by more than rounding
PROJECT_SLACK = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    oracle: go.GradOracleSpec = field(default_factory=go.GradOracleSpec)
    solver: fp.SolverSpec = field(default_factory=lambda: fp.SolverSpec(tol=1e-8, max_iters=500))
    eta0: float = 0.5
    schedule: str = INV_SQRT
    weight_decay: float = 0.0
    steps: int = 2000
    batch_size: int = 32
    dataset_seed: int = 0
    module_seed: int = 0
    d: int = 16
    n_pairs: int = 64
    target_L: float = 0.9
    kind: str = eq.AFFINE_TANH
    measure_exact: bool = False
    monitor_rho: bool = False

    def __post_init__(self):
        if not self.eta0 >= 0:
            raise ParameterError(f"eta0 must be >= 0, got {self.eta0}")
        if self.steps < 1 or self.batch_size < 1 or self.n_pairs < 1:
            raise ParameterError("steps, batch_size and n_pairs must be >= 1")
        if self.schedule not in (INV_SQRT, CONSTANT):
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")


@dataclass
class TraceRow:
    step: int
    loss: float
    grad_norm: float
    eta: float
    eps_error: float = math.nan
    cosine_vs_exact: float = math.nan
    rho_F: float = math.nan
    rho_F_lambda: float = math.nan
    forward_iters: int = 0
    forward_rel_residual: float = math.nan
    forward_wall_time: float = math.nan
    backward_wall_time: float = math.nan


TRACE_COLUMNS = tuple(f.name for f in fields(TraceRow))
TIMING_COLUMNS = ("forward_wall_time", "backward_wall_time")


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)
    final_module: Optional[eq.EqModule] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    def __len__(self):
        return len(self.rows)


class TrainingAborted(PhantomGradError, RuntimeError):
    def __init__(self, step: int, trace: TrainTrace, cause: Exception):
        self.step = step
        self.trace = trace
        self.cause = cause
        super().__init__(f"training aborted at step {step}: {cause}")


def make_dataset(d: int, n_pairs: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """``(U, Y)``, each ``(n_pairs, d)`` with iid standard-normal entries."""
    if d < 1 or n_pairs < 1:
        raise ParameterError("d and n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((n_pairs, d))
    Y = rng.standard_normal((n_pairs, d))
    return U, Y


def step_size(cfg: TrainConfig, n: int) -> float:
    return cfg.eta0 / math.sqrt(n) if cfg.schedule == INV_SQRT else cfg.eta0


def mse_loss(h, y) -> tuple[float, np.ndarray]:
    """``0.5 * mean_rows |h - y|^2`` and its gradient w.r.t. ``h``."""
    r = np.asarray(h) - np.asarray(y)
    n = r.shape[0] if r.ndim == 2 else 1
    return 0.5 * float(np.sum(r * r)) / n, r / n


def forward_and_backward(m: eq.EqModule, u, y, oracle: go.GradOracleSpec, solver: fp.SolverSpec):
    """One loss evaluation and oracle gradient on a batch.

    Returns ``(loss, grad, solution, forward_seconds, backward_seconds)``.
    The UPG oracle evaluates the loss at the unrolled output ``h_k``.
    """
    t0 = time.perf_counter()
    sol = fp.solve(m, u, solver, store_trajectory=(oracle.method == go.BPTT))
    t1 = time.perf_counter()
    if oracle.method == go.UPG:
        traj = go.unroll(m, sol.h_star, u, oracle.k, oracle.lam)
        loss, v = mse_loss(traj[-1], y)
        grad = go.upg_from_trajectory(m, traj, u, v, oracle.lam, oracle.k)
    else:
        loss, v = mse_loss(sol.h_star, y)
        grad = go.gradient(m, sol.h_star, u, v, oracle, sol)
    t2 = time.perf_counter()
    return loss, grad, sol, t1 - t0, t2 - t1


def sgd_run(cfg: TrainConfig, module: Optional[eq.EqModule] = None, data=None) -> TrainTrace:
    """Plain SGD with step ``eta0 / sqrt(n)`` (or constant), weight decay and a
    spectral-norm projection of ``W`` after every update."""
    m = module if module is not None else eq.new_synthetic(cfg.d, cfg.target_L, cfg.module_seed,
                                                           cfg.kind)
    U, Y = data if data is not None else make_dataset(cfg.d, cfg.n_pairs, cfg.dataset_seed)
    batch_rng = np.random.default_rng([cfg.dataset_seed, 1])
    n_pairs = U.shape[0]
    exact_spec = go.GradOracleSpec(method=go.IFT)
    trace = TrainTrace()
    for n in range(1, cfg.steps + 1):
        if cfg.batch_size >= n_pairs:
            idx = np.arange(n_pairs)
        else:
            idx = batch_rng.choice(n_pairs, size=cfg.batch_size, replace=False)
        u, y = U[idx], Y[idx]
        try:
            loss, grad, sol, tf, tb = forward_and_backward(m, u, y, cfg.oracle, cfg.solver)
            if not np.all(np.isfinite(grad.grad_theta)):
                raise DivergenceError("non-finite gradient", iteration=n)
        except DivergenceError as exc:
            raise TrainingAborted(n, trace, exc) from exc
        eta = step_size(cfg, n)
        row = TraceRow(step=n, loss=loss, grad_norm=float(np.linalg.norm(grad.grad_theta)), eta=eta,
                       forward_iters=sol.iterations, forward_rel_residual=sol.rel_residual,
                       forward_wall_time=tf, backward_wall_time=tb)
        if cfg.measure_exact and cfg.oracle.method != go.IFT:
            _, v = mse_loss(sol.h_star, y)
            rec = compare_gradients(go.ift_exact(m, sol.h_star, u, v, exact_spec), grad)
            row.eps_error, row.cosine_vs_exact = rec.eps_error, rec.cosine_vs_exact
        if cfg.monitor_rho:
            row.rho_F, row.rho_F_lambda = spectral_radius_report(m, sol.h_star[0], u[0], cfg.oracle.lam)
        trace.rows.append(row)

        theta = m.theta
        update = grad.grad_theta if cfg.weight_decay == 0 else grad.grad_theta + cfg.weight_decay * theta
        m = m.with_theta(theta - eta * update)
        m = _project(m)
        if n % 500 == 0:
            log.debug("step %d loss %.6g", n, loss)
    trace.final_module = m
    return trace


def _project(m: eq.EqModule) -> eq.EqModule:
    from .densemath import power_iteration_sigma

    sigma = power_iteration_sigma(m.W, eq.SN_MAX_ITERS, eq.SN_TOL).estimate
    if sigma <= m.target_lipschitz * (1.0 + PROJECT_SLACK):
        return m
    return eq.EqModule(m.kind, m.W * (m.target_lipschitz / sigma), m.b, m.target_lipschitz,
                       sigma_cache=sigma, seed=m.seed)


def full_loss(m: eq.EqModule, u, y, solver: fp.SolverSpec) -> float:
    sol = fp.solve(m, u, solver)
    return mse_loss(sol.h_star, y)[0]


FD_SOLVER = fp.SolverSpec(tol=1e-15, max_iters=5000)


def finite_difference_check(m: eq.EqModule, u, y, oracle: go.GradOracleSpec, eps_fd: float = 1e-5,
                            solver: fp.SolverSpec = FD_SOLVER, return_details: bool = False):
    """Max relative error of the oracle's ``grad_theta`` against central
    differences of the full loss, re-solving the fixed point at every probe.

    The relative error of parameter ``i`` is ``|g_i - fd_i| / max(|fd_i|, a)``
    with ``a = 1e-6 * max(1, max_j |fd_j|)``, which keeps exactly-zero
    components from dominating.
    """
    if m.d > 32:
        raise ParameterError(f"finite-difference check is limited to d <= 32, got {m.d}")
    theta = m.theta
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += eps_fd
        tm = theta.copy()
        tm[i] -= eps_fd
        fd[i] = (full_loss(m.with_theta(tp), u, y, solver) - full_loss(m.with_theta(tm), u, y, solver)) / (2 * eps_fd)
    sol = fp.solve(m, u, solver, store_trajectory=(oracle.method == go.BPTT))
    _, v = mse_loss(sol.h_star, y)
    g = go.gradient(m, sol.h_star, u, v, oracle, sol).grad_theta
    floor = 1e-6 * max(1.0, float(np.abs(fd).max()))
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), floor)
    if return_details:
        return float(rel.max()), g, fd
    return float(rel.max())
