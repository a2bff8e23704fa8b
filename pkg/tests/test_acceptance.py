"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured values
and the pinned tolerance; the lines are repeated in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""
import filecmp
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from _suites import broken_variants, example_checks, run_grad_inverse_suite, run_projection_suite

from mffbsde import (ControlQuartet, EnsembleProcess, RegressionBasis, SolverConfig, base_coefficients,
                     continuation_solve, cost_lc, exponential_lc_example, extract_lc_controls,
                     lc_hamiltonian, m_norm, make_grid, optimality_gap_check, picard_solve,
                     sample_brownian, simulate_state, stability_probe)
from mffbsde import checks, cli
from mffbsde.oracle import example_reference, ito_isometry_cost, relative_l2

pytestmark = pytest.mark.slow

# tolerances
ERR_MAX = 0.10           # relative L2 error vs the closed form
RUNTIME_1 = 120.0        # seconds, base level
COST_REL = 0.01          # zero-control cost vs the isometry value
RUNTIME_2 = 60.0
LQ_COST = 1e-3           # times max(1, J)
LQ_CONTROL = 0.05        # relative L2
SUITE_TOL_PROJ = 1e-10
SUITE_TOL_INV = 1e-8
STAB_FACTOR = 2.0


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def example_config(**kw):
    args = dict(particles=4096, steps=64, basis=RegressionBasis("joint", 3, 3), damping=2 / 3,
                alpha_schedule=(0.0, 0.5, 1.0), picard_tol=1e-6, seed=42)
    args.update(kw)
    return SolverConfig(**args)


def errors(V1, V2, noise, grid, lc):
    ref = example_reference(noise, grid)
    q = extract_lc_controls((V1, V2), lc, grid.dt)
    N = grid.N
    cat = lambda a, b: np.concatenate([a, b], axis=1)
    return {
        "X": relative_l2(cat(V1.X, V2.X), cat(ref.X1, ref.X2)),
        "Y": relative_l2(cat(V1.Y, V2.Y), cat(ref.Y1, ref.Y2)),
        "Z": relative_l2(cat(V1.Z[:, :N], V2.Z[:, :N]), cat(ref.Z1[:, :N], ref.Z2[:, :N])),
        "u": relative_l2(cat(q.u1.values[:, :N], q.u2.values[:, :N]), cat(ref.u1[:, :N], ref.u2[:, :N])),
    }


@pytest.fixture(scope="module")
def example():
    lc = exponential_lc_example()
    c = lc_hamiltonian(lc)
    cfg = example_config()
    noise = sample_brownian(cfg.grid, cfg.particles, 1, cfg.seed)
    t0 = time.perf_counter()
    V1, V2, rep = continuation_solve(c, base_coefficients(c.structural), cfg, noise)
    return dict(lc=lc, c=c, cfg=cfg, noise=noise, V1=V1, V2=V2, rep=rep, elapsed=time.perf_counter() - t0)


def test_criterion_1_closed_form_example(example):
    lc, cfg = example["lc"], example["cfg"]
    e0 = errors(example["V1"], example["V2"], example["noise"], cfg.grid, lc)
    # one refinement level: 4x particles, 4x steps
    run = cli.build_run("example-lc", {}, {})
    r1 = cli.refinement_level(run, 1)["solver"]
    noise1 = sample_brownian(r1.grid, r1.particles, 1, r1.seed)
    c = example["c"]
    V1, V2, _ = continuation_solve(c, base_coefficients(c.structural), r1, noise1)
    e1 = errors(V1, V2, noise1, r1.grid, lc)
    within = all(v <= ERR_MAX for v in e0.values())
    falls = all(e1[k] < e0[k] for k in e0)
    fast = example["elapsed"] <= RUNTIME_1
    fmt = lambda e: ", ".join(f"{k} {v:.4f}" for k, v in e.items())
    report(1, within and falls and fast,
           f"M=4096 N=64 errors [{fmt(e0)}] <= {ERR_MAX}; M={r1.particles} N={r1.grid.N} errors "
           f"[{fmt(e1)}] all smaller: {falls}; base runtime {example['elapsed']:.1f}s <= {RUNTIME_1:.0f}s")


def test_criterion_2_zero_control_cost():
    lc = exponential_lc_example()
    t0 = time.perf_counter()
    grid = make_grid(1.0, 256)
    noise = sample_brownian(grid, 100_000, 1, 42)
    z = np.zeros((noise.M, grid.N + 1, 1))
    q = ControlQuartet(np.zeros(1), np.zeros(1), EnsembleProcess(z), EnsembleProcess(z))
    J = cost_lc(lc, q, simulate_state(lc.dyn, q, grid, noise), noise).total
    elapsed = time.perf_counter() - t0
    ref = ito_isometry_cost()
    rel = abs(J / ref - 1)
    report(2, rel <= COST_REL and elapsed <= RUNTIME_2,
           f"cost {J:.6f} vs {ref:.6f}, relative {rel:.4%} <= {COST_REL:.0%}; runtime {elapsed:.1f}s")


def test_criterion_3_optimality_gap(example):
    lc, cfg, noise = example["lc"], example["cfg"], example["noise"]
    q = extract_lc_controls((example["V1"], example["V2"]), lc, cfg.grid.dt)
    rng = np.random.default_rng(3)
    W = noise.path
    t = cfg.grid.nodes[None, :, None]
    perts = []
    for _ in range(20):
        a = rng.normal(size=6) * 0.3
        perts.append(q.shifted(a[0], a[1], a[2] * np.sin(W) + a[3] * t, a[4] * np.cos(W) + a[5] * W))
    r = optimality_gap_check(lc, q, perts, cfg.grid, noise)
    worst = min(e.margin for e in r.entries)
    floor = all(e.gap >= -e.mc_tol for e in r.entries)
    report(3, r.passed and floor,
           f"20 perturbations, min margin gap - (delta/2) dev + 3 sigma = {worst:.4g} >= 0; "
           f"min gap {min(e.gap for e in r.entries):.4g} >= -3 sigma: {floor}")


def test_criterion_4_lq_cross_validation(tmp_path):
    code = cli.run("lqic-compare", out=tmp_path)
    rep = json.loads((tmp_path / "compare.json").read_text())
    du = rep["control_relative_l2"]
    ok = (code == cli.EXIT_OK and rep["cost_difference"] <= LQ_COST * max(1.0, rep["direct"]["cost"]["total"])
          and max(du.values()) <= LQ_CONTROL)
    report(4, ok,
           f"|J_ham - J_direct| = {rep['cost_difference']:.3e} <= {rep['cost_tolerance']:.1e}; "
           f"control L2 u1 {du['u1']:.2%}, u2 {du['u2']:.2%} <= {LQ_CONTROL:.0%}")


def test_criterion_5_projection_suite():
    ok, worst = run_projection_suite(1000, seed=0, tol=SUITE_TOL_PROJ)
    report(5, ok, f"1000 cases, worst variational {worst['vi']:.2e}, firm {worst['firm']:.2e}, "
                  f"lipschitz {worst['lip']:.2e} (>= -{SUITE_TOL_PROJ:g}), membership {worst['member']}")


def test_criterion_6_gradient_inverse_suite():
    ok, worst = run_grad_inverse_suite(1000, seed=0, tol=SUITE_TOL_INV)
    report(6, ok, f"1000 pairs, roundtrip {worst['roundtrip']:.2e}, lipschitz excess "
                  f"{worst['lipschitz_excess']:.2e} (<= {SUITE_TOL_INV:g})")


def test_criterion_7_assumption_checkers():
    good = example_checks(n=10_000)
    dom = checks.check_no_linear_domination(lc_hamiltonian(exponential_lc_example()).structural)
    bad = broken_variants()
    clean = all(r.passed and r.violations == 0 for r in good.values())
    ratio_ok = dom.margins["ratio at 100"] < 0.01 and dom.margins["ratio at 1000"] < 0.01
    caught = all((not r.passed) and bool(r.witness) for r in bad.values())
    report(7, clean and ratio_ok and caught,
           f"example checks {sorted(good)} with 1e4 samples: violations "
           f"{sum(r.violations for r in good.values())}; ratio at 100 {dom.margins['ratio at 100']:.2e} "
           f"< 0.01; broken variants failing with witness {sum(not r.passed for r in bad.values())}/{len(bad)}")


def test_criterion_8_contraction(example):
    c, cfg, noise = example["c"], example["cfg"], example["noise"]
    ratios = example["rep"].ratios[1:]
    B1, B2, _ = picard_solve(c, cfg.grid, noise, cfg)
    diff = m_norm([example["V1"] - B1, example["V2"] - B2])
    bound = 2 * cfg.picard_tol * max(1.0, m_norm([example["V1"], example["V2"]]))
    report(8, max(ratios) < 1 and diff <= bound,
           f"max ratio after the first sweep {max(ratios):.3f} < 1; continuation vs direct "
           f"{diff:.2e} <= {bound:.1e}")


def test_criterion_9_stability(example):
    c, cfg, noise = example["c"], example["cfg"], example["noise"]
    r = stability_probe(c, [1e-2, 1e-3], cfg.grid, noise, cfg, baseline=(example["V1"], example["V2"]))
    spread = max(r) / min(r)
    report(9, spread <= STAB_FACTOR, f"ratios {r[0]:.5f}, {r[1]:.5f}, spread {spread:.4f} <= {STAB_FACTOR}")


def test_criterion_10_determinism(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["lqic-compare", "--out", str(o)]) for o in outs]
    codes += [cli.main(["solve", "--config", str(_lq_file(tmp_path)), "--particles", "512",
                        "--steps", "16", "--seed", "5", "--out", str(o / "solve")]) for o in outs]
    match, mismatch, errs = filecmp.cmpfiles(outs[0], outs[1],
                                             ["compare.json", "controls.csv", "solve/report.json",
                                              "solve/trajectories.csv", "solve/controls.csv"], shallow=False)
    report(10, codes == [0] * 4 and not mismatch and not errs,
           f"two runs each of lqic-compare and solve: {len(match)} files byte-identical, "
           f"{len(mismatch) + len(errs)} differ or missing")


def _lq_file(tmp_path):
    p = tmp_path / "problem.json"
    p.write_text('{"builtin": "exponential-lc-example"}')
    return p
