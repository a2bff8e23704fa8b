import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mffbsde.coefficients import (Dynamics, LQICProblemData, PerturbationData, StructuralData,
                                  base_coefficients, exponential_lc_example, interpolate,
                                  lc_hamiltonian, lqic_hamiltonian, scalar_lqic_example)
from mffbsde.convex import box, full_space, singleton
from mffbsde.core import ExtendedStateView, InvalidArgument, make_grid, sample_brownian
from mffbsde.oracle import example_reference


def view(rng, S=16, n=1, d=1, w=True):
    return ExtendedStateView(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n),
                             rng.normal(size=n), rng.normal(size=(S, n)), rng.normal(size=(S, n)),
                             rng.normal(size=(S, d, n)), rng.normal(size=(S, d)) if w else None)


def identity_structural(tau=0.0):
    o = np.ones((1, 1))
    neg = lambda t, u: -np.asarray(u)
    lin = lambda v: -np.asarray(v)
    return StructuralData(o, o, o, o, o, np.ones((1, 1, 1)), np.ones((1, 1, 1)), tau,
                          lin, lin, lin, lin, neg, neg)


def test_base_coefficients_examples():
    c0 = base_coefficients(identity_structural())
    rng = np.random.default_rng(0)
    v = view(rng)
    x1, x2 = rng.normal(size=(2, 5, 1))
    assert np.all(c0.phi1(x1, x2) == 0) and np.all(c0.phi2(x1, x2) == 0)
    f, b, s = c0.gamma1(0.3, v)
    assert np.all(f == 0)
    assert np.allclose(b, -(v.y + v.z[:, 0]))
    assert np.allclose(s[:, 0], -(v.y + v.z[:, 0]))
    assert np.allclose(c0.psi1(np.zeros((1, 1)), np.zeros((1, 1))), 0.0)


def test_structural_validation():
    with pytest.raises(InvalidArgument):
        identity_structural(tau=1.0)


def test_interpolate_endpoints_and_midpoint():
    c = lc_hamiltonian(exponential_lc_example())
    c0 = base_coefficients(c.structural)
    rng = np.random.default_rng(1)
    v = view(rng)
    for a, ref in ((1.0, c), (0.0, c0)):
        ci = interpolate(c, c0, a)
        for got, want in zip(ci.gamma1(0.2, v), ref.gamma1(0.2, v)):
            assert np.array_equal(np.broadcast_to(got, np.shape(want)), want)
    y = rng.normal(size=(4, 1))
    mid = interpolate(c, c0, 0.5)
    assert np.allclose(mid.psi1(y, y), 0.5 * c.psi1(y, y) + 0.5 * c0.psi1(y, y))
    with pytest.raises(InvalidArgument):
        interpolate(c, c0, 1.5)


def test_interpolate_arithmetic():
    c = lc_hamiltonian(exponential_lc_example())
    two = type(c)(*(lambda *a: 2.0,) * 4, lambda t, v: (2.0, 2.0, 2.0), lambda t, v: (2.0, 2.0, 2.0), 1, 1)
    four = type(c)(*(lambda *a: 4.0,) * 4, lambda t, v: (4.0, 4.0, 4.0), lambda t, v: (4.0, 4.0, 4.0), 1, 1)
    mid = interpolate(two, four, 0.5)
    assert mid.psi1(0, 0) == 3.0
    assert mid.gamma2(0.0, None) == (3.0, 3.0, 3.0)


def test_forcing_is_added():
    c = lc_hamiltonian(exponential_lc_example())
    p = PerturbationData(xi1=np.array([0.5]), zeta2=np.array([-1.0]), beta1=(None, np.array([2.0]), None))
    ci = interpolate(c, c, 1.0, p)
    rng = np.random.default_rng(2)
    v = view(rng)
    y = np.zeros((3, 1))
    assert np.allclose(ci.psi1(y, y) - c.psi1(y, y), 0.5)
    assert np.allclose(ci.phi2(y, y) - c.phi2(y, y), -1.0)
    assert np.allclose(ci.gamma1(0.0, v)[1] - c.gamma1(0.0, v)[1], 2.0)
    half = p.scaled(0.5)
    assert np.allclose(half.xi1, 0.25)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 ** 31 - 1))
def test_interpolate_affine_in_alpha(alpha, seed):
    lq = scalar_lqic_example()
    c = lqic_hamiltonian(lq)
    c0 = base_coefficients(c.structural)
    rng = np.random.default_rng(seed)
    v = view(rng)
    mix = interpolate(c, c0, alpha).gamma2(0.4, v)
    for got, hi, lo in zip(mix, c.gamma2(0.4, v), c0.gamma2(0.4, v)):
        assert np.allclose(got, alpha * np.asarray(hi) + (1 - alpha) * np.asarray(lo), rtol=0, atol=1e-12)
    y1, y2 = rng.normal(size=(2, 4, 1))
    got = interpolate(c, c0, alpha).psi2(y1, y2)
    assert np.allclose(got, alpha * c.psi2(y1, y2) + (1 - alpha) * c0.psi2(y1, y2), atol=1e-12)


def test_example_hamiltonian_values():
    lc = exponential_lc_example()
    c = lc_hamiltonian(lc)
    rng = np.random.default_rng(3)
    x1, x2 = rng.normal(size=(2, 6, 1))
    assert np.allclose(c.phi1(x1, x2), 0.5 * (x1 + x2))
    assert np.allclose(c.phi2(x1, x2), 0.5 * (x1 + x2))
    v = view(rng)
    assert np.allclose(c.gamma1(0.5, v)[0], -1e-3 * v.mean_y2)
    assert np.allclose(c.gamma2(0.5, v)[0], -1e-3 * v.mean_y1)
    z = np.zeros((1, 1))
    assert np.allclose(c.psi1(z, z), lc.dyn.x0)


def test_example_hamiltonian_is_pure():
    c = lc_hamiltonian(exponential_lc_example())
    rng = np.random.default_rng(4)
    v = view(rng)
    a = c.gamma1(0.1, v)
    b = c.gamma1(0.1, v)
    for p, q in zip(a, b):
        assert np.array_equal(p, q)
    zero = ExtendedStateView(*(np.zeros(1),) * 4, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)))
    assert all(np.all(np.isfinite(o)) for o in c.gamma1(0.0, zero))


def test_example_relations_on_closed_form():
    grid = make_grid(1.0, 32)
    noise = sample_brownian(grid, 256, 1, seed=5)
    ref = example_reference(noise, grid)
    lc = exponential_lc_example()
    c = lc_hamiltonian(lc)
    N = grid.N
    zero = np.zeros(1)
    u = np.stack([lc.feedback(1, t, ref.Y1[:, k], zero, ref.Z1[:, k]) for k, t in enumerate(grid.nodes)], 1)
    assert np.max(np.abs(u - ref.u1)) <= 1e-12
    assert np.allclose(c.phi1(ref.X1[:, N], ref.X2[:, N]), ref.Y1[:, N], atol=1e-14)
    xi1, xi2 = lc.initial_controls(ref.Y1[:1, 0], ref.Y2[:1, 0])
    assert np.allclose(xi1, 0) and np.allclose(xi2, 0)


def _lq(U, R=1.0, B=1.0, D=0.0, tau=0.0, U0=None):
    o = np.ones((1, 1))
    dyn = Dynamics(A1=0 * o, A2=0 * o, Abar1=0 * o, Abar2=0 * o, B1=B * o, B2=B * o, Bbar1=o, Bbar2=o,
                   C1=np.zeros((1, 1, 1)), C2=np.zeros((1, 1, 1)), D1=D * np.ones((1, 1, 1)),
                   D2=D * np.ones((1, 1, 1)), H=o, x0=np.zeros(1), tau=tau)
    return LQICProblemData(dyn, o, o, 0 * o, 0 * o, 0 * o, 0 * o, R * o, R * o, 0.5,
                           U0 or full_space(1), U)


def test_lqic_feedback_examples():
    lq = _lq(box(-1, 1), R=2.0)
    assert lq.feedback(1, 0.0, np.array([[6.0]]), np.zeros(1), np.zeros((1, 1, 1)))[0, 0] == pytest.approx(-1.0)
    lq = _lq(singleton([0.0]), D=1.0)
    assert np.all(lq.feedback(1, 0.0, np.array([[6.0]]), np.zeros(1), np.ones((1, 1, 1))) == 0)
    lq = _lq(full_space(1), R=2.0, D=0.5, tau=0.3)
    rng = np.random.default_rng(6)
    y, z, my = rng.normal(size=(5, 1)), rng.normal(size=(5, 1, 1)), rng.normal(size=1)
    want = -(y + 0.3 * my + 0.5 * z[:, 0]) / 2.0
    assert np.allclose(lq.feedback(2, 0.0, y, my, z), want)


def test_lqic_terminal_map_and_initial_coupling():
    lq = scalar_lqic_example()
    c = lqic_hamiltonian(lq)
    x1, x2 = np.array([[1.0]]), np.array([[2.0]])
    assert np.allclose(c.phi1(x1, x2), 1.5 * 3.0)
    # unconstrained in the interior: xi = -M^{-1} H^T y
    assert np.allclose(c.psi1(np.array([[0.2]]), None), -0.2 + 1.0)
    # clipped at the box
    assert np.allclose(c.psi1(np.array([[5.0]]), None), -0.5 + 1.0)


def test_problem_validation():
    o = np.ones((1, 1))
    lq = scalar_lqic_example()
    with pytest.raises(InvalidArgument):
        LQICProblemData(lq.dyn, o, o, o, o, o, o, np.array([[1.0, 2.0], [0.0, 1.0]]), o, 0.5,
                        box(-1, 1), box(-1, 1))
    with pytest.raises(InvalidArgument):
        Dynamics(A1=0 * o, A2=0 * o, Abar1=0.5 * o, Abar2=0 * o, B1=o, B2=o, Bbar1=o, Bbar2=o,
                 C1=np.zeros((1, 1, 1)), C2=np.zeros((1, 1, 1)), D1=np.zeros((1, 1, 1)),
                 D2=np.zeros((1, 1, 1)), H=o, x0=np.zeros(1), tau1=0.01)
