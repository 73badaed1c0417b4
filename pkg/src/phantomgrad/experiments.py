"""Desk-scale experiment runners producing tidy rows (lists of dicts).

Each runner splits its grid into independent tasks, evaluates them with an
optional process pool and sorts the resulting rows by their key columns, so
output is identical for any worker count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import eqmodule as eq
from . import fpsolvers as fp
from . import gradoracles as go
from . import training as tr
from .config import config_hash, derived_seed, rng_stream
from .densemath import cosine_similarity, dense_inverse, norm1, spectral_norm
from .diagnostics import (compare_gradients, descent_condition_check, jacobian_h,
                          neumann_truncation_error, smallest_satisfying_k)
from .errors import DivergenceError, ParameterError, PhantomGradError

log = logging.getLogger(__name__)

CAP = 1e30
# cosine decreases smaller than this are treated as rounding, not oscillation
COSINE_NOISE = 1e-6


@dataclass(frozen=True)
class SweepSpec:
    d: int = 128
    n_problems: int = 16
    L_h_levels: list[float] = field(default_factory=lambda: [0.9])
    k_values: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 20, 50, 100])
    lambda_values: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    methods: list[str] = field(default_factory=lambda: [go.UPG, go.NPG])
    forward_tol: float = 1e-5
    forward_iters: int = 100
    seed: int = 0
    batch_size: int = 32
    kind: str = eq.AFFINE_TANH
    u_scale: float = 1.0
    xval_broyden_iters: int = 20
    broyden_backward_iters: int = 30
    n_samples: int = 100

    def __post_init__(self):
        if not all(0.0 < L < 1.0 for L in self.L_h_levels):
            raise ParameterError("every L_h level must lie in (0, 1)")
        if not all(0.0 < lam <= 1.0 for lam in self.lambda_values):
            raise ParameterError("every lambda must lie in (0, 1]")
        if not all(k >= 1 for k in self.k_values):
            raise ParameterError("every k must be >= 1")
        if self.d < 1 or self.n_problems < 1 or self.batch_size < 1:
            raise ParameterError("d, n_problems and batch_size must be >= 1")
        bad = set(self.methods) - {go.UPG, go.NPG}
        if bad:
            raise ParameterError(f"sweep methods must be upg/npg, got {sorted(bad)}")


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _flatten(results):
    return [row for rows in results for row in rows]


def make_instance(spec: SweepSpec, L: float, i: int, batch: int | None = None):
    """Module and ``(u, y)`` batch for problem ``i`` at level ``L``.

    Seeds depend only on ``(spec.seed, L, i)``.
    """
    tag = f"{L!r}/{i}"
    m = eq.new_synthetic(spec.d, L, derived_seed(spec.seed, "module/" + tag), spec.kind)
    rng = rng_stream(spec.seed, "data/" + tag)
    n = spec.batch_size if batch is None else batch
    u = spec.u_scale * rng.standard_normal((n, spec.d))
    y = rng.standard_normal((n, spec.d))
    return m, u, y


def _base(spec: SweepSpec, L: float, i: int) -> dict:
    return {"seed": spec.seed, "instance": i, "config_hash": config_hash(spec), "L_h": L}


# -- precision sweep ----------------------------------------------------------

PRECISION_COLUMNS = (
    "seed", "instance", "config_hash", "L_h", "method", "k", "lambda", "cosine_vs_exact",
    "eps_error", "l1_exact", "l1_phantom", "ref_xval_cosine", "forward_iters",
    "forward_rel_residual", "forward_converged", "failed", "error",
)


def _precision_task(args):
    spec, L, i = args
    base = _base(spec, L, i)
    m, u, y = make_instance(spec, L, i)
    try:
        sol = fp.picard_solve(m, u, fp.SolverSpec(tol=spec.forward_tol, max_iters=spec.forward_iters),
                              store_trajectory=True)
        _, v = tr.mse_loss(sol.h_star, y)
        ref = go.bptt_exact(m, sol, u, v)
        if not np.all(np.isfinite(ref.flat)):
            raise DivergenceError("reference gradient is not finite")
        xval = go.ift_exact(m, sol.h_star, u, v, go.GradOracleSpec(
            method=go.IFT, adjoint_solver=go.BROYDEN_ADJOINT, adjoint_tol=1e-12,
            adjoint_max_iters=spec.xval_broyden_iters))
        xcos = cosine_similarity(ref.flat, xval.flat)
    except (DivergenceError, PhantomGradError) as exc:
        return [dict(base, method="forward", k=0, **{"lambda": math.nan}, failed=True, error=type(exc).__name__)]
    common = dict(base, ref_xval_cosine=xcos, forward_iters=sol.iterations,
                  forward_rel_residual=sol.rel_residual, forward_converged=sol.converged)
    rows = []
    for method in spec.methods:
        for k in spec.k_values:
            for lam in spec.lambda_values:
                row = dict(common, method=method, k=k, **{"lambda": lam}, failed=False, error="")
                try:
                    fn = go.upg if method == go.UPG else go.npg
                    rec = compare_gradients(ref, fn(m, sol.h_star, u, v, k, lam))
                    row.update(cosine_vs_exact=rec.cosine_vs_exact, eps_error=_cap(rec.eps_error),
                               l1_exact=rec.l1_exact, l1_phantom=_cap(rec.l1_phantom))
                    if not math.isfinite(rec.cosine_vs_exact):
                        row.update(failed=True, error="non_finite_gradient")
                except (DivergenceError, PhantomGradError) as exc:
                    row.update(failed=True, error=type(exc).__name__)
                rows.append(row)
    return rows


def _sort(rows, keys):
    def key(r):
        return tuple((0, r[k]) if not isinstance(r.get(k), str) else (1, r[k]) for k in keys)
    return sorted(rows, key=key)


def run_precision_sweep(spec: SweepSpec, workers: int = 1) -> list[dict]:
    """Cosine of UPG/NPG against the BPTT reference for every (instance, method, k, lambda)."""
    tasks = [(spec, L, i) for L in spec.L_h_levels for i in range(spec.n_problems)]
    rows = _flatten(_map(_precision_task, tasks, workers))
    return _sort(rows, ("L_h", "instance", "method", "k", "lambda"))


# -- stability study ----------------------------------------------------------

STABILITY_COLUMNS = (
    "seed", "instance", "config_hash", "L_h", "method", "k", "lambda", "iteration",
    "objective", "rel_error", "cosine_vs_exact", "l1_norm", "l1_exact", "cosine_theta",
    "l1_theta", "l1_theta_exact", "rho_J", "forward_rel_residual", "failed", "error",
)


def _cap(x: float) -> float:
    if math.isnan(x):
        return x
    return max(-CAP, min(CAP, x))


def exact_backward(m: eq.EqModule, h, u, v) -> np.ndarray:
    """Dense ``inv(I - J_h) v`` row by row."""
    h, u, v = np.atleast_2d(h), np.atleast_2d(u), np.atleast_2d(v)
    I = np.eye(m.d)
    return np.stack([dense_inverse(I - jacobian_h(m, h[r], u[r])) @ v[r] for r in range(h.shape[0])])


def _backward_row(lin, v, g, g_exact, th_exact):
    r = v + lin.h(g) - g
    obj = float(np.linalg.norm(r))
    ng = float(np.linalg.norm(g))
    row = {"objective": _cap(obj), "rel_error": _cap(obj / ng) if ng else math.nan,
           "l1_norm": _cap(norm1(g))}
    th = lin.theta(g)
    row["l1_theta"] = _cap(norm1(th))
    if ng and np.all(np.isfinite(g)):
        row["cosine_vs_exact"] = cosine_similarity(g, g_exact)
        row["cosine_theta"] = cosine_similarity(th, th_exact) if th.any() else math.nan
    return row


def _stability_task(args):
    spec, L, i, iters = args
    base = _base(spec, L, i)
    m, u, y = make_instance(spec, L, i)
    sol = fp.picard_solve(m, u, fp.SolverSpec(tol=spec.forward_tol, max_iters=spec.forward_iters))
    h = sol.h_star
    _, v = tr.mse_loss(h, y)
    rho = float(max(np.max(np.abs(np.linalg.eigvals(jacobian_h(m, h[r], u[r])))) for r in range(h.shape[0])))
    common = dict(base, rho_J=rho, forward_rel_residual=sol.rel_residual, failed=False, error="")
    return stability_trace(m, h, u, v, iters, spec.lambda_values, common)


def stability_trace(m: eq.EqModule, h, u, v, iters: int, lambdas=(0.5,), common=None) -> list[dict]:
    """Rows for one problem: the exact backward vector, every Broyden adjoint
    iterate, and NPG/UPG at matched budgets for each damping value."""
    h, u, v = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (h, u, v))
    lin = eq.Linearization(m, h, u)
    common = dict(common or {}, failed=False, error="")
    rows = []
    if not np.any(v):
        zero = dict(common, objective=0.0, rel_error=math.nan, l1_norm=0.0, l1_exact=0.0,
                    l1_theta=0.0, l1_theta_exact=0.0)
        for it in range(1, iters + 1):
            rows.append(dict(zero, method="broyden", k=0, **{"lambda": math.nan}, iteration=it))
            for lam in lambdas:
                rows.append(dict(zero, method=go.NPG, k=it + 1, **{"lambda": lam}, iteration=it))
                rows.append(dict(zero, method=go.UPG, k=it, **{"lambda": lam}, iteration=it))
        return rows
    g_exact = exact_backward(m, h, u, v)
    th_exact = lin.theta(g_exact)
    l1e, l1te = norm1(g_exact), norm1(th_exact)
    rows.append(dict(common, method="exact", k=0, **{"lambda": math.nan}, iteration=0,
                     **_backward_row(lin, v, g_exact, g_exact, th_exact), l1_exact=l1e,
                     l1_theta_exact=l1te))

    def cb(it, g, gx):
        rows.append(dict(common, method="broyden", k=0, **{"lambda": math.nan}, iteration=it,
                         **_backward_row(lin, v, g, g_exact, th_exact), l1_exact=l1e,
                         l1_theta_exact=l1te))

    try:
        go.adjoint_broyden(lin, v, tol=1e-300, max_iters=iters, callback=cb)
    except go.AdjointDivergenceError as exc:
        rows.append(dict(common, method="broyden", k=0, **{"lambda": math.nan},
                         iteration=exc.iteration, failed=True, error=type(exc).__name__))
    for lam in lambdas:
        for it in range(1, iters + 1):
            # budget of `it` Jacobian products
            row = dict(common, method=go.NPG, k=it + 1, **{"lambda": lam}, iteration=it,
                       l1_exact=l1e, l1_theta_exact=l1te)
            try:
                pg = go.npg(m, h, u, v, it + 1, lam)
                row.update(_backward_row(lin, v, pg.g_eff, g_exact, th_exact))
            except DivergenceError as exc:
                row.update(failed=True, error=type(exc).__name__)
            rows.append(row)
            urow = dict(common, method=go.UPG, k=it, **{"lambda": lam}, iteration=it,
                        l1_exact=l1e, l1_theta_exact=l1te)
            try:
                pu = go.upg(m, h, u, v, it, lam)
                urow.update(l1_theta=_cap(norm1(pu.grad_theta)),
                            cosine_theta=cosine_similarity(pu.grad_theta, th_exact))
            except DivergenceError as exc:
                urow.update(failed=True, error=type(exc).__name__)
            rows.append(urow)
    return rows


def run_stability_study(spec: SweepSpec, broyden_backward_iters: int | None = None,
                        workers: int = 1) -> list[dict]:
    """Per-iteration Broyden adjoint trace next to NPG/UPG at matched budgets.

    Backward-space columns compare ``g`` against ``inv(I - J_h) v``; ``*_theta``
    columns compare the induced parameter gradients.
    """
    iters = broyden_backward_iters or spec.broyden_backward_iters
    tasks = [(spec, L, i, iters) for L in spec.L_h_levels for i in range(spec.n_problems)]
    rows = _flatten(_map(_stability_task, tasks, workers))
    return _sort(rows, ("L_h", "instance", "method", "lambda", "iteration"))


def broyden_trace_summary(rows, L: float, instance: int) -> dict:
    """Oscillation / growth indicators of one Broyden adjoint trace."""
    tr_rows = [r for r in rows if r["method"] == "broyden" and r["L_h"] == L
               and r["instance"] == instance and not r.get("failed")]
    tr_rows.sort(key=lambda r: r["iteration"])
    cos = np.array([r.get("cosine_vs_exact", math.nan) for r in tr_rows])
    l1 = np.array([r["l1_norm"] for r in tr_rows])
    drops = np.maximum.accumulate(cos) - cos
    return {
        "final_cosine": float(cos[-1]),
        "max_cosine_drop": float(np.nanmax(drops)),
        "non_monotone": bool(np.nanmax(drops) > COSINE_NOISE),
        "l1_growth": float(l1.max() / l1[0]),
        "diverged": any(r.get("failed") for r in rows if r["method"] == "broyden"
                        and r["L_h"] == L and r["instance"] == instance),
    }


# -- theory grid ----------------------------------------------------------------

THEORY_COLUMNS = (
    "seed", "instance", "config_hash", "L_h", "method", "k", "lambda", "lhs", "rhs",
    "lhs_frobenius", "lhs_reduced", "rhs_reduced", "condition_holds", "inner_product",
    "min_sampled_inner", "n_sampled_positive", "n_sampled", "neumann_error", "norm_B",
    "smallest_k", "soundness_violation", "failed", "error",
)


def _theory_task(args):
    spec, L, i = args
    base = _base(spec, L, i)
    m, u, _ = make_instance(spec, L, i, batch=1)
    u = u[0]
    sol = fp.picard_solve(m, u, fp.SolverSpec(tol=1e-14, max_iters=100000))
    h = sol.h_star
    J_h, J_t = eq.materialize_jacobians(m, h, u)
    sample_seed = derived_seed(spec.seed, f"samples/{L!r}/{i}")
    rows = []
    exact_A = J_t @ dense_inverse(np.eye(m.d) - J_h)
    rec = descent_condition_check(m, h, u, 1, 1.0, A=exact_A, n_samples=spec.n_samples, seed=sample_seed)
    rows.append(dict(base, method="exact", k=0, **{"lambda": math.nan}, **_theory_fields(rec),
                     neumann_error=0.0, failed=False, error=""))
    kmax = max(spec.k_values)
    for lam in spec.lambda_values:
        norm_B = spectral_norm(lam * J_h + (1.0 - lam) * np.eye(m.d))
        smallest = smallest_satisfying_k(m, h, u, lam, k_max=kmax)
        for k in spec.k_values:
            err = neumann_truncation_error(m, h, u, k, lam)
            for method in spec.methods:
                rec = descent_condition_check(m, h, u, k, lam, method, n_samples=spec.n_samples,
                                              seed=sample_seed)
                rows.append(dict(base, method=method, k=k, **{"lambda": lam}, **_theory_fields(rec),
                                 neumann_error=err if method == go.NPG else math.nan, norm_B=norm_B,
                                 smallest_k=-1 if smallest is None else smallest,
                                 failed=False, error=""))
    for r in rows:
        r["soundness_violation"] = bool(r["condition_holds"]) and r["n_sampled_positive"] < r["n_sampled"]
        if r["soundness_violation"]:
            r["failed"] = True
            r["error"] = "soundness_violation"
    return rows


def _theory_fields(rec) -> dict:
    return {"lhs": rec.lhs_thm1, "rhs": rec.rhs_thm1, "lhs_frobenius": rec.lhs_thm1_frobenius,
            "lhs_reduced": rec.lhs_reduced, "rhs_reduced": rec.rhs_reduced,
            "condition_holds": rec.condition_holds, "inner_product": rec.inner_product,
            "min_sampled_inner": rec.min_sampled_inner, "n_sampled_positive": rec.n_sampled_positive,
            "n_sampled": rec.n_sampled}


def run_theory_grid(spec: SweepSpec, workers: int = 1) -> list[dict]:
    """Ascent-condition and Neumann-error grid on small dense instances."""
    tasks = [(spec, L, i) for L in spec.L_h_levels for i in range(spec.n_problems)]
    rows = _flatten(_map(_theory_task, tasks, workers))
    return _sort(rows, ("L_h", "instance", "method", "lambda", "k"))


# -- training benchmark -----------------------------------------------------------

BENCH_COLUMNS = (
    "config_id", "config_hash", "method", "k", "lambda", "steps", "d", "batch_size",
    "initial_loss", "final_loss", "min_loss", "unrolled_states", "failed", "error",
)
TIMING_COLUMNS = (
    "config_id", "method", "k", "lambda", "mean_forward_s", "mean_backward_s",
    "backward_speedup_vs_ift",
)


def _bench_task(args):
    idx, cfg = args
    o = cfg.oracle
    row = {"config_id": idx, "config_hash": config_hash(cfg), "method": o.method, "k": o.k,
           "lambda": o.lam, "steps": cfg.steps, "d": cfg.d, "batch_size": cfg.batch_size,
           "unrolled_states": o.k if o.method == go.UPG else 0, "failed": False, "error": ""}
    timing = {"config_id": idx, "method": o.method, "k": o.k, "lambda": o.lam}
    try:
        trace = tr.sgd_run(cfg)
    except tr.TrainingAborted as exc:
        trace = exc.trace
        row.update(failed=True, error=f"aborted at step {exc.step}")
    if len(trace):
        L = trace.losses
        row.update(initial_loss=float(L[0]), final_loss=float(L[-1]), min_loss=float(L.min()))
        timing.update(mean_forward_s=float(np.mean([r.forward_wall_time for r in trace.rows])),
                      mean_backward_s=float(np.mean([r.backward_wall_time for r in trace.rows])))
    return row, timing


def _forward_key(cfg: tr.TrainConfig):
    return (cfg.solver, cfg.d, cfg.batch_size, cfg.n_pairs, cfg.steps, cfg.target_L, cfg.kind,
            cfg.dataset_seed, cfg.module_seed)


def run_training_benchmark(cfgs, workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Train every config; return deterministic result rows and wall-time rows.

    Speedups compare mean backward time to the IFT config with the same
    forward settings, when one is present.
    """
    results = _map(_bench_task, list(enumerate(cfgs)), workers)
    rows = [r for r, _ in results]
    timings = [t for _, t in results]
    ift_time = {}
    for cfg, t in zip(cfgs, timings):
        if cfg.oracle.method == go.IFT and "mean_backward_s" in t:
            ift_time[_forward_key(cfg)] = t["mean_backward_s"]
    for cfg, t in zip(cfgs, timings):
        base = ift_time.get(_forward_key(cfg))
        if base is not None and t.get("mean_backward_s"):
            t["backward_speedup_vs_ift"] = base / t["mean_backward_s"]
    return rows, timings
