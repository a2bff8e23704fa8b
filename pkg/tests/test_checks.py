import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mffbsde import checks
from mffbsde.coefficients import exponential_lc_example, lc_hamiltonian, lqic_hamiltonian, scalar_lqic_example
from mffbsde.convex import ConvexFunction, example_family, quadratic

from _suites import broken_variants


@pytest.fixture(scope="module")
def example():
    return lc_hamiltonian(exponential_lc_example())


def test_example_passes_sampled_checks(example):
    for rep in (checks.check_adjoint(example.structural, n=3000),
                checks.check_monotonicity(example, n=3000),
                checks.check_lipschitz(example, n=3000)):
        assert rep.passed, rep.to_dict()
        assert rep.witness is None


def test_example_feedback_is_not_linearly_dominated(example):
    rep = checks.check_no_linear_domination(example.structural)
    assert rep.passed
    assert rep.margins["ratio at 100"] < 0.01
    assert rep.margins["ratio at 1000"] < 0.01
    assert rep.margins["ratio at 0"] > 0.1


def test_domination_forms(example):
    with pytest.warns(UserWarning, match="scale differently"):
        literal = checks.check_domination(example, n=2000)
    assert literal.warnings
    linear = checks.check_domination(example, n=2000, form="linear")
    assert linear.passed, linear.to_dict()


def test_lqic_checks():
    lq = scalar_lqic_example()
    assert checks.check_lqic(lq).passed
    c = lqic_hamiltonian(lq)
    assert checks.check_adjoint(c.structural, n=2000).passed
    assert checks.check_monotonicity(c, n=2000).passed


@pytest.mark.parametrize("name", ["adjoint", "monotonicity", "lipschitz", "no_linear_domination",
                                  "lqic", "convexity"])
def test_broken_variants_fail_with_witness(name):
    rep = broken_variants(n=1000)[name]
    assert not rep.passed
    assert rep.violations > 0
    assert rep.witness
    assert rep.worst_margin < 0


def test_lqic_witness_names_matrix_and_node():
    rep = broken_variants(n=10)["lqic"]
    assert rep.witness["matrix"] == "R1"
    assert rep.witness["t"] == 0.0
    assert rep.witness["margin"] == pytest.approx(-0.4)


def test_convexity_examples():
    quartic = ConvexFunction(lambda x: np.sum(x ** 4, -1), lambda x: 4 * x ** 3, 1.0)
    assert not checks.check_convexity(quartic).passed
    rep = checks.check_convexity(quadratic(np.eye(1)))
    assert rep.passed
    assert abs(rep.margins["gradient form"]) < 1e-9
    assert checks.check_convexity(example_family(), dim=2).passed


def test_report_roundtrip_fields():
    rep = checks.check_lqic(scalar_lqic_example())
    d = rep.to_dict()
    assert d["passed"] and d["violations"] == 0 and d["name"] == "lqic"


def test_same_seed_reproduces(example):
    a = checks.check_monotonicity(example, n=500, seed=4).to_dict()
    b = checks.check_monotonicity(example, n=500, seed=4).to_dict()
    assert a == b


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-12, 1e-3), st.floats(1.0, 1e6))
def test_checkers_monotone_in_tolerance(tol, factor):
    quartic = ConvexFunction(lambda x: np.sum(x ** 4, -1), lambda x: 4 * x ** 3, 0.05)
    r1 = checks.check_convexity(quartic, n=200, tol=tol)
    r2 = checks.check_convexity(quartic, n=200, tol=tol * factor)
    assert r2.violations <= r1.violations
    if r1.passed:
        assert r2.passed


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-12, 1e-2))
def test_violation_count_matches_margin(seed, tol):
    quartic = ConvexFunction(lambda x: np.sum(x ** 4, -1), lambda x: 4 * x ** 3, 0.02)
    rep = checks.check_convexity(quartic, n=100, seed=seed, tol=tol, fd_tol=1.0)
    margins = [v for k, v in rep.margins.items() if k != "finite differences"]
    assert (min(margins) >= -tol) == (rep.violations == 0)


def test_finite_difference_order():
    f = example_family()
    x = np.array([[0.7], [-1.3], [2.1]])
    g = f.grad(x)[:, 0]
    errs = []
    for h in (1e-2, 1e-3):
        fd = (f.eval(x + h) - f.eval(x - h)) / (2 * h)
        errs.append(np.max(np.abs(fd - g)))
    order = np.log10(errs[0] / errs[1])
    assert 1.8 < order < 2.2
    for h in (1e-4, 1e-5):
        fd = (f.eval(x + h) - f.eval(x - h)) / (2 * h)
        assert np.max(np.abs(fd - g)) <= 10 * h
