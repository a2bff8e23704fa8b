import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mffbsde.convex import (WeightedNorm, ball, box, example_family, full_space, grad_inverse,
                            halfspace, linear, product, project, quadratic, singleton, weighted_inner)
from mffbsde.core import InvalidArgument

from _suites import random_set, random_spd, run_grad_inverse_suite, run_projection_suite

seeds = st.integers(0, 2 ** 31 - 1)


def test_example_family_values():
    f = example_family()
    assert f.delta == 1.0
    assert f.eval(np.zeros(1)) == 0.0
    assert f.grad(np.array([1.0]))[0] == pytest.approx(math.e - 1)
    assert f.grad(np.array([-1.0]))[0] == pytest.approx(-(math.e - 1))


def test_grad_inverse_examples():
    f = example_family()
    assert grad_inverse(f, math.e - 1) == pytest.approx(1.0, abs=1e-12)
    assert grad_inverse(f, -(math.e - 1)) == pytest.approx(-1.0, abs=1e-12)
    assert grad_inverse(f, 0.0) == 0.0
    q = quadratic(np.diag([2.0, 3.0]))
    assert np.allclose(grad_inverse(q, np.zeros(2)), 0.0)


def test_grad_inverse_newton_without_closed_form():
    f = example_family()
    v = np.linspace(-30, 30, 41)[:, None]
    x = grad_inverse(f, v, method="newton")
    assert np.max(np.abs(f.grad(x) - v)) <= 1e-10 * (1 + np.abs(v)).max()


def test_grad_inverse_needs_strong_convexity():
    with pytest.raises(InvalidArgument):
        grad_inverse(linear([1.0]), 0.5)


def test_projection_examples():
    assert project(box(-1, 1), 7.0, 2.0) == pytest.approx(1.0)
    assert np.allclose(project(box([-1, -1], [1, 1]), np.diag([2.0, 5.0]), np.array([3.0, 0.0])), [1, 0])
    assert np.allclose(project(ball([0, 0], 1.0), np.eye(2), np.array([2.0, 0.0])), [1, 0])
    assert np.allclose(project(full_space(2), np.eye(2), np.array([5.0, -4.0])), [5, -4])
    assert np.allclose(project(singleton([0.5]), 1.0, np.array([9.0])), [0.5])
    assert np.allclose(project(halfspace([1.0, 0.0], 1.0), np.eye(2), np.array([3.0, 2.0])), [1, 2])


def test_projection_nondiagonal_box():
    W = np.array([[2.0, 1.0], [1.0, 2.0]])
    K = box([-1, -1], [1, 1])
    x = np.array([3.0, -3.0])
    p = project(K, W, x)
    # brute force on a fine grid of the box
    g = np.linspace(-1, 1, 401)
    P = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    d = np.einsum("ij,jk,ik->i", P - x, W, P - x)
    assert np.allclose(p, P[np.argmin(d)], atol=5e-3)
    assert K.contains(p)


def test_weighted_inner_examples():
    assert weighted_inner(np.eye(2), np.ones(2), np.ones(2)) == pytest.approx(2.0)
    assert weighted_inner(np.diag([2.0, 5.0]), np.array([1.0, 0]), np.array([0, 1.0])) == 0.0
    assert weighted_inner(3.0, np.array(2.0), np.array(2.0)) == pytest.approx(12.0)


def test_weighted_norm_validation():
    with pytest.raises(InvalidArgument):
        WeightedNorm(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(InvalidArgument):
        WeightedNorm(np.diag([1.0, -1.0]))
    with pytest.raises(InvalidArgument):
        WeightedNorm(np.eye(2), delta=2.0)


def test_set_validation():
    with pytest.raises(InvalidArgument):
        box(1, 0)
    with pytest.raises(InvalidArgument):
        ball([0.0], -1)
    with pytest.raises(InvalidArgument):
        halfspace([0.0, 0.0], 1)
    with pytest.raises(InvalidArgument):
        project(box([0, 0], [1, 1]), None, np.zeros(3))


def test_product_set_membership():
    K = product(box(0, 1), ball([0.0, 0.0], 1.0))
    assert K.dim == 3
    assert K.contains(np.array([0.5, 0.1, 0.1]))
    assert not K.contains(np.array([1.5, 0.1, 0.1]))
    assert K.contains(K.feasible_point())


def test_projection_suite_small():
    ok, worst = run_projection_suite(cases=200, seed=11)
    assert ok, worst


def test_grad_inverse_suite_small():
    ok, worst = run_grad_inverse_suite(pairs=200, seed=11)
    assert ok, worst


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_set_midpoint_convexity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    K = random_set(rng, n)
    a, b = project(K, np.eye(n), 5 * rng.normal(size=(2, n)))
    assert K.contains(a, 1e-10) and K.contains(b, 1e-10)
    assert K.contains(0.5 * (a + b), 1e-10)
    assert K.contains(K.feasible_point())


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_projection_idempotent_and_w_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    K = random_set(rng, n)
    W = random_spd(rng, n)
    x, xb = 3 * rng.normal(size=(2, n))
    p, pb = project(K, W, x), project(K, W, xb)
    assert np.allclose(project(K, W, p), p, atol=1e-10)
    dp, dx = p - pb, x - xb
    assert math.sqrt(dp @ W @ dp) <= math.sqrt(dx @ W @ dx) + 1e-10


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_weighted_norm_bounds(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    Wn = WeightedNorm(random_spd(rng, n))
    u = rng.normal(size=n)
    q = weighted_inner(Wn, u, u)
    assert Wn.delta * (u @ u) - 1e-12 <= q <= Wn.norm * (u @ u) + 1e-12


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_quadratic_strong_convexity_forms_agree(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    f = quadratic(random_spd(rng, n) + 0.1 * np.eye(n))
    d = f.delta
    x, y = rng.normal(size=(2, n))
    # gradient monotonicity form
    assert (f.grad(x) - f.grad(y)) @ (x - y) >= d * (x - y) @ (x - y) - 1e-10
    # first-order form f(y) >= f(x) + <grad f(x), y - x> + d/2 |y - x|^2
    assert f.eval(y) >= f.eval(x) + f.grad(x) @ (y - x) + 0.5 * d * (y - x) @ (y - x) - 1e-10


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_example_family_strongly_monotone(a, b):
    f = example_family()
    x, y = np.array([a]), np.array([b])
    assert (f.grad(x) - f.grad(y)) @ (x - y) >= (x - y) @ (x - y) * (1 - 1e-12)
