"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v -s``; the lines are also
repeated in the terminal summary.
"""

import time

import numpy as np
import pytest

from imexnse.diagnostics import energy_budget
from imexnse.harness import ExperimentConfig, RunSpec, execute, main, run_convergence_sweep
from imexnse.problems import taylor_green, transient_problem
from imexnse.spectral import SpectralBackend
from imexnse.timestepper import (
    ControllerConfig,
    MethodId,
    StepHistory,
    apply_filter,
    be_ab2_step,
    be_fe_step,
    est1,
    est2_coefficients,
    est2_difference,
    run,
)

TOLS = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
DTS = (1 / 10, 1 / 20, 1 / 40, 1 / 80, 1 / 160)
ADAPTIVE_DT0 = 1e-3


@pytest.fixture
def verdict(acceptance_report):
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        acceptance_report.append(line)
        print(line)
        assert ok, line

    return record


def random_field(b, rng, dealiased=True):
    v = b.to_spectral(rng.standard_normal((2,) + b.grid.shape))
    v[:, 0, 0] = 0
    return v * b.grid.dealias_mask if dealiased else v


@pytest.fixture(scope="module")
def convergence():
    start = time.perf_counter()
    cfg = ExperimentConfig(experiment="convergence_sweep", problem="taylor-green", nu=1.0, T=1.0, dt_list=DTS)
    sweep = run_convergence_sweep(cfg)
    return sweep, time.perf_counter() - start


@pytest.fixture(scope="module")
def adaptive():
    """MOOSE on the transient problem per tolerance, plus the matched constant-step run."""
    out = {}
    prob = transient_problem()
    for tol in TOLS:
        a = execute(RunSpec("transient", None, None, MethodId.MOOSE_IMEX_12, ADAPTIVE_DT0, 32, ControllerConfig(tol=tol)))
        solves = a.stats["stokes_solves"]
        c = execute(RunSpec("transient", None, None, MethodId.BE_AB2_F, prob.T / solves, 32))
        out[tol] = (a, c)
    return out


def test_criterion_1_constant_step_convergence(convergence, verdict):
    sweep, seconds = convergence
    rates = {m: sweep.rate(m) for m in ("be-fe", "be-ab2", "be-ab2-f")}
    p_rate = sweep.rate("be-ab2-f", "pressure")
    ok = (
        0.8 <= rates["be-fe"] <= 1.2
        and 0.8 <= rates["be-ab2"] <= 1.2
        and 1.8 <= rates["be-ab2-f"] <= 2.2
        and 1.7 <= p_rate <= 2.2
        and seconds < 120
    )
    detail = ", ".join(f"{m} {r:.3f}" for m, r in rates.items())
    verdict("criterion 1 (convergence rates)", ok, f"{detail}, be-ab2-f pressure {p_rate:.3f}, {seconds:.1f} s")


def test_criterion_2_pressure_improvement(convergence, verdict):
    sweep, _ = convergence
    fe = sweep.pressure[MethodId.BE_FE].errors
    ab2 = sweep.pressure[MethodId.BE_AB2].errors
    ok = len(fe) == len(ab2) == len(DTS) and all(a < f for a, f in zip(ab2, fe))
    worst = max(a / f for a, f in zip(ab2, fe))
    verdict("criterion 2 (be-ab2 pressure below be-fe)", ok, f"largest be-ab2/be-fe pressure ratio {worst:.3f}")


def test_criterion_3_estimators(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        w, v = rng.uniform(0.5, 2.0, 2)
        c = rng.standard_normal((3, 5))
        h = rng.uniform(1e-3, 1.0)
        ts = np.array([-h - h / v, -h, 0.0, w * h])
        q = [c[0] + c[1] * t + c[2] * t * t for t in ts]
        d = est2_difference(q[3], q[2], q[1], q[0], w, v)
        worst = max(worst, np.max(np.abs(d)) / max(1.0, max(np.max(np.abs(x)) for x in q)))
    affine = 0.0
    for _ in range(100):
        w = rng.uniform(0.5, 2.0)
        c0, c1 = rng.standard_normal((2, 5))
        u_nm1, u_n, u_hat = c0 - c1, c0, c0 + w * c1
        affine = max(affine, np.max(np.abs(est1(apply_filter(u_hat, u_n, u_nm1, w), u_hat))))
    pref, *stencil = est2_coefficients(1.0, 1.0)
    ok = worst <= 1e-12 and affine <= 1e-12 and abs(pref - 2 / 11) < 1e-15 and np.allclose(stencil, [3, 3, 1], rtol=0, atol=1e-15)
    verdict(
        "criterion 3 (estimator correctness)",
        ok,
        f"max quadratic residual {worst:.2e}, max affine est1 {affine:.2e}, prefactor {pref:.15f}, stencil {stencil}",
    )


def test_criterion_4_discrete_structure(verdict):
    b = SpectralBackend(32)
    worst_div = 0.0

    def watch(rec, hist):
        nonlocal worst_div
        worst_div = max(worst_div, b.max_divergence(hist.u_n), b.max_divergence(hist.u_nm1))

    run(transient_problem(T=1.0), "moose12", ControllerConfig(tol=1e-4), dt0=ADAPTIVE_DT0, backend=b, on_step=watch)
    run(taylor_green(), "be-ab2-f", dt0=1 / 40, backend=b, on_step=watch)

    rng = np.random.default_rng(2)
    worst_skew = 0.0
    for _ in range(100):
        u, v, w = (random_field(b, rng) for _ in range(3))
        scale = b.l2(u) * b.grad_l2(v) * b.grad_l2(w)
        worst_skew = max(worst_skew, abs(b.nonlinear_form(u, v, w) + b.nonlinear_form(u, w, v)) / scale)

    tg = b.sample_velocity(taylor_green().exact_velocity, 0.0)
    n = b.nonlinear(tg)
    proj = b.l2(b.leray_project(n)) / b.l2(n)
    ok = worst_div <= 1e-12 and worst_skew <= 1e-12 and proj <= 1e-10
    verdict(
        "criterion 4 (discrete structure)",
        ok,
        f"max divergence {worst_div:.2e}, max skew defect {worst_skew:.2e}, |P N(u_TG)|/|N| {proj:.2e}",
    )


def test_criterion_5_stokes_kernel(verdict):
    b = SpectralBackend(32)
    rng = np.random.default_rng(5)
    nu = 1.0
    worst = 0.0
    for dt in (1e-3, 1e-1, 10.0):
        for _ in range(20):
            r = random_field(b, rng, dealiased=False)
            u, p = b.stokes_solve(r, dt, nu)
            res = u / dt + b.stokes_operator(u, nu) + b.gradient(p) - r
            mag = np.sqrt(np.sum(np.abs(r) ** 2, axis=0))
            err = np.sqrt(np.sum(np.abs(res) ** 2, axis=0))
            live = mag > 0
            worst = max(worst, float(np.max(err[live] / mag[live])))
            assert not np.any(err[~live])
    verdict("criterion 5 (Stokes kernel)", worst <= 1e-12, f"max per-mode relative residual {worst:.2e}")


def test_criterion_6_energy_monitor(verdict):
    b = SpectralBackend(32)
    parts = []
    ok = True
    for dt in (1 / 20, 1 / 40, 1 / 80):
        res = run(taylor_green(), "be-ab2", dt0=dt, backend=b)
        e = energy_budget(res, b)
        ok &= e.holds
        parts.append(f"dt={dt:.4g} lhs {e.lhs:.6f} <= rhs {e.rhs:.6f}")
    verdict("criterion 6 (energy inequality)", ok, "; ".join(parts))


def test_criterion_7a_error_monotone_in_tol(adaptive, verdict):
    errs = [adaptive[t][0].vel_err for t in TOLS]
    ok = all(adaptive[t][0].status == "ok" for t in TOLS) and all(b < a for a, b in zip(errs, errs[1:]))
    verdict("criterion 7a (MOOSE error decreasing in tol)", ok, ", ".join(f"{t:g}: {e:.3e}" for t, e in zip(TOLS, errs)))


def test_criterion_7b_matched_solves(adaptive, verdict):
    a, c = adaptive[1e-2]
    ratio = c.vel_err / a.vel_err
    others = ", ".join(f"{t:g}: {adaptive[t][1].vel_err / adaptive[t][0].vel_err:.2f}x" for t in TOLS[1:])
    verdict(
        "criterion 7b (nonadaptive / MOOSE error >= 10 at tol 1e-2)",
        ratio >= 10,
        f"{ratio:.2f}x at {a.stats['stokes_solves']} solves (other tols {others})",
    )


def test_criterion_7c_accepted_ratio_bounds(adaptive, verdict):
    omegas = [r.omega for t in TOLS for r in adaptive[t][0].result.accepted_records]
    lo, hi = min(omegas), max(omegas)
    below = sum(w < 0.5 - 1e-12 for w in omegas)
    above = sum(w > 2.0 + 1e-12 for w in omegas)
    verdict(
        "criterion 7c (accepted step ratios in [0.5, 2])",
        below == 0 and above == 0,
        f"range [{lo:.4f}, {hi:.4f}], {below} of {len(omegas)} below 0.5, {above} above 2",
    )


def test_criterion_7d_solve_accounting(adaptive, verdict):
    ok = True
    parts = []
    for t in TOLS:
        s = adaptive[t][0].stats
        recs = adaptive[t][0].result.records
        ok &= s["stokes_solves"] == s["accepted"] + s["rejected"] == len(recs) == recs[-1].solves_cumulative
        parts.append(f"{t:g}: {s['accepted']}+{s['rejected']}={s['stokes_solves']}")
    verdict("criterion 7d (solves = accepted + rejected)", ok, ", ".join(parts))


def test_criterion_8_method_equivalence(verdict):
    b = SpectralBackend(32)
    prob = transient_problem(T=1.0)

    def same(x, y):
        return [r.t for r in x.records] == [r.t for r in y.records] and np.array_equal(x.history.u_n, y.history.u_n)

    vss1 = run(prob, "vss-be-ab2", ControllerConfig(tol=1e-3), dt0=ADAPTIVE_DT0, backend=b)
    m1 = run(prob, "moose12", ControllerConfig(tol=1e-3, force_est2_inf=True), dt0=ADAPTIVE_DT0, backend=b)
    vss2 = run(prob, "vss-be-ab2-f", ControllerConfig(tol=1e-3), dt0=ADAPTIVE_DT0, backend=b)
    m2 = run(prob, "moose12", ControllerConfig(tol=1e-3, force_est1_inf=True), dt0=ADAPTIVE_DT0, backend=b)

    rng = np.random.default_rng(8)
    u = b.leray_project(random_field(b, rng))
    f = random_field(b, rng)
    h = StepHistory(u_n=u, u_nm1=u.copy(), p_n=b.zeros_pressure(), t_n=0.0, dt_prev=0.02)
    ua, pa = be_ab2_step(h, 0.03, 1.0, f, b)
    uf, pf = be_fe_step(h, 0.03, 1.0, f, b)
    step_same = np.array_equal(ua, uf) and np.array_equal(pa, pf)

    ok = same(vss1, m1) and same(vss2, m2) and step_same
    verdict(
        "criterion 8 (method equivalence)",
        ok,
        f"est2=inf vs vss-be-ab2 {same(vss1, m1)}, est1=inf vs vss-be-ab2-f {same(vss2, m2)}, "
        f"be-ab2 vs be-fe on equal states {step_same}",
    )


def test_criterion_9_determinism(tmp_path, verdict):
    runs = [
        ["--experiment", "single_run", "--problem", "transient", "--method", "moose12", "--T", "1", "--seed", "7"],
        ["--experiment", "convergence_sweep", "--T", "0.5", "--dt-list", "1/10,1/20,1/40", "--seed", "7"],
    ]
    ok = True
    compared = 0
    for i, argv in enumerate(runs):
        a, b = tmp_path / f"a{i}", tmp_path / f"b{i}"
        ok &= main(argv + ["--out", str(a)]) == 0 and main(argv + ["--out", str(b)]) == 0
        names = sorted(p.name for p in a.iterdir())
        ok &= names == sorted(p.name for p in b.iterdir())
        for name in names:
            compared += 1
            ok &= (a / name).read_bytes() == (b / name).read_bytes()
    verdict("criterion 9 (determinism)", ok, f"{compared} CSV files byte-identical across repeated runs")
