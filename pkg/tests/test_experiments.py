import math

import numpy as np
import pytest

from phantomgrad import eqmodule as eq
from phantomgrad import experiments as ex
from phantomgrad import fpsolvers as fp
from phantomgrad import gradoracles as go
from phantomgrad import training as tr
from phantomgrad.config import config_hash
from phantomgrad.errors import ParameterError

SMALL = ex.SweepSpec(d=16, n_problems=3, k_values=[1, 2, 5], lambda_values=[0.5, 1.0], batch_size=4)


def numeric(rows, cols):
    return [tuple(r.get(c) for c in cols) for r in rows]


@pytest.mark.parametrize("kw", [dict(L_h_levels=[1.0]), dict(L_h_levels=[0.0]),
                                dict(lambda_values=[0.0]), dict(lambda_values=[1.1]),
                                dict(k_values=[0]), dict(methods=["ift"])])
def test_sweep_spec_validation(kw):
    with pytest.raises(ParameterError):
        ex.SweepSpec(**kw)


def test_precision_sweep_row_count_and_keys():
    rows = ex.run_precision_sweep(SMALL)
    assert len(rows) == 3 * 3 * 2 * 2
    h = config_hash(SMALL)
    assert all(r["config_hash"] == h and r["seed"] == 0 and not r["failed"] for r in rows)
    assert {r["instance"] for r in rows} == {0, 1, 2}
    assert all(r["ref_xval_cosine"] >= 0.9999 for r in rows)


def test_precision_sweep_lambda_one_improves_with_k():
    rows = ex.run_precision_sweep(SMALL)

    def mean(method, k, lam):
        return np.mean([r["cosine_vs_exact"] for r in rows
                        if r["method"] == method and r["k"] == k and r["lambda"] == lam])

    assert mean(go.NPG, 1, 1.0) < mean(go.NPG, 2, 1.0) < mean(go.NPG, 5, 1.0)
    assert mean(go.NPG, 2, 0.5) < mean(go.NPG, 2, 1.0)


def test_precision_sweep_flags_forward_failure():
    spec = ex.SweepSpec(d=4, n_problems=1, k_values=[1], lambda_values=[1.0], u_scale=1e308,
                        kind=eq.LINEAR)
    rows = ex.run_precision_sweep(spec)
    assert len(rows) == 1 and rows[0]["failed"] and rows[0]["error"] == "DivergenceError"


def test_precision_sweep_flags_non_finite_reference():
    spec = ex.SweepSpec(d=4, n_problems=1, k_values=[1], lambda_values=[1.0], u_scale=1e308)
    rows = ex.run_precision_sweep(spec)
    assert len(rows) == 1 and rows[0]["failed"]


def test_precision_sweep_worker_independent():
    a = ex.run_precision_sweep(SMALL, workers=1)
    b = ex.run_precision_sweep(SMALL, workers=2)
    cols = ex.PRECISION_COLUMNS
    assert numeric(a, cols) == numeric(b, cols)


def test_instances_independent_of_order():
    m1, u1, _ = ex.make_instance(SMALL, 0.9, 2)
    for i in (0, 1):
        ex.make_instance(SMALL, 0.9, i)
    m2, u2, _ = ex.make_instance(SMALL, 0.9, 2)
    assert m1 == m2 and np.array_equal(u1, u2)


def test_stability_zero_v_gives_zero_traces():
    m = eq.new_synthetic(6, 0.9, 0)
    u = np.ones((2, 6))
    h = fp.picard_solve(m, u, fp.SolverSpec(tol=1e-12, max_iters=1000)).h_star
    rows = ex.stability_trace(m, h, u, np.zeros((2, 6)), 5, [0.5])
    assert len(rows) == 15
    assert all(r["objective"] == 0.0 and r["l1_norm"] == 0.0 and r["l1_theta"] == 0.0 for r in rows)


def test_stability_rows_converge_at_moderate_L():
    spec = ex.SweepSpec(d=32, n_problems=1, L_h_levels=[0.9], lambda_values=[0.5], batch_size=4,
                        u_scale=0.1)
    rows = ex.run_stability_study(spec, broyden_backward_iters=25)
    s = ex.broyden_trace_summary(rows, 0.9, 0)
    assert s["final_cosine"] >= 0.999 and not s["diverged"]
    exact = [r for r in rows if r["method"] == "exact"]
    assert len(exact) == 1 and exact[0]["objective"] <= 1e-10
    assert 0 < exact[0]["rho_J"] < 0.9 + 1e-9
    npg = sorted((r for r in rows if r["method"] == go.NPG), key=lambda r: r["iteration"])
    assert [r["k"] for r in npg] == list(range(2, 27))


def test_stability_caps_values():
    assert ex._cap(1e300) == ex.CAP and ex._cap(-1e300) == -ex.CAP and math.isnan(ex._cap(math.nan))


def test_theory_grid_rows():
    spec = ex.SweepSpec(d=8, n_problems=2, k_values=[1, 2, 4, 8, 16], lambda_values=[1.0])
    rows = ex.run_theory_grid(spec)
    exact = [r for r in rows if r["method"] == "exact"]
    assert len(exact) == 2 and all(r["lhs"] <= 1e-12 and r["condition_holds"] for r in exact)
    assert len(rows) == 2 * (1 + 5 * 2)
    assert not any(r["soundness_violation"] for r in rows)
    for r in rows:
        if r["condition_holds"]:
            assert r["n_sampled_positive"] == r["n_sampled"] == 100


def test_theory_grid_error_ratio_tracks_norm_B():
    spec = ex.SweepSpec(d=8, n_problems=2, k_values=list(range(1, 21)), lambda_values=[1.0],
                        methods=[go.NPG], kind=eq.LINEAR)
    rows = ex.run_theory_grid(spec)
    for i in range(2):
        rs = sorted((r for r in rows if r["instance"] == i and r["method"] == go.NPG), key=lambda r: r["k"])
        for a, b in zip(rs, rs[1:]):
            ratio = b["neumann_error"] / a["neumann_error"]
            assert 0.5 * b["norm_B"] <= ratio <= 2 * b["norm_B"]


def test_training_benchmark_rows_and_speedup():
    base = tr.TrainConfig(d=8, n_pairs=16, batch_size=16, steps=10, eta0=0.1)
    cfgs = [base, tr.TrainConfig(**{**base.__dict__, "oracle": go.GradOracleSpec(method=go.UPG, k=4)}),
            tr.TrainConfig(**{**base.__dict__, "oracle": go.GradOracleSpec(method=go.IFT)})]
    rows, timings = ex.run_training_benchmark(cfgs)
    assert [r["unrolled_states"] for r in rows] == [0, 4, 0]
    assert all(r["final_loss"] < r["initial_loss"] for r in rows)
    assert all(t["backward_speedup_vs_ift"] > 0 for t in timings)
    assert timings[2]["backward_speedup_vs_ift"] == 1.0
    again, _ = ex.run_training_benchmark(cfgs)
    assert numeric(rows, ex.BENCH_COLUMNS) == numeric(again, ex.BENCH_COLUMNS)
    assert not set(ex.TIMING_COLUMNS[4:]) & set(ex.BENCH_COLUMNS)
