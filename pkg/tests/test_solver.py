import numpy as np
import pytest

from mffbsde.coefficients import (CoefficientSet, base_coefficients, exponential_lc_example,
                                  lc_hamiltonian)
from mffbsde.core import (BrownianEnsemble, InvalidArgument, NonConvergence, m_norm, make_grid,
                          sample_brownian)
from mffbsde.solver import (Frozen, RegressionBasis, SolverConfig, backward_solve, continuation_solve,
                            design_matrix, forward_solve, picard_solve, regress_conditional,
                            stability_probe)


def constant_set(f=0.0, b=0.0, s=0.0, psi=0.0, phi=None):
    """Scalar system with constant generator; phi defaults to zero."""
    def gamma(t, view):
        S = view.x.shape[0]
        return np.full((S, 1), f), np.full((S, 1), b), np.full((S, 1, 1), s)
    ps = lambda y1, y2: np.full((np.shape(y1)[0], 1), psi)
    ph = phi or (lambda x1, x2, w=None: np.zeros_like(np.asarray(x1)))
    return CoefficientSet(ps, ps, ph, ph, gamma, gamma, 1, 1)


@pytest.fixture(scope="module")
def noise():
    return sample_brownian(make_grid(1.0, 8), 400, 1, seed=1)


def test_forward_pure_noise(noise):
    X = forward_solve(constant_set(s=1.0), Frozen(), noise.grid, noise)
    assert np.allclose(X.values, noise.path)


def test_forward_deterministic_drift(noise):
    X = forward_solve(constant_set(b=1.0), Frozen(), noise.grid, noise, eq=2)
    assert np.allclose(X.values[0, :, 0], noise.grid.nodes)


def test_backward_constant_terminal(noise):
    c = constant_set(phi=lambda x1, x2, w=None: np.full_like(np.asarray(x1), 2.5))
    Y, Z = backward_solve(c, Frozen(), noise.grid, noise, RegressionBasis("noise", 2))
    assert np.allclose(Y.values, 2.5) and np.allclose(Z.values, 0.0, atol=1e-12)


def test_backward_martingale_terminal(noise):
    c = constant_set(phi=lambda x1, x2, w=None: np.asarray(w, dtype=float))
    Y, Z = backward_solve(c, Frozen(), noise.grid, noise, RegressionBasis("noise", 1))
    N = noise.grid.N
    assert np.allclose(Y.values, noise.path, atol=1e-10)
    assert np.allclose(Z.values[:, :N], 1.0, atol=1e-10)
    assert np.all(Z.values[:, N] == 0)


def test_backward_deterministic_generator(noise):
    Y, Z = backward_solve(constant_set(f=1.0), Frozen(), noise.grid, noise, RegressionBasis("noise", 2))
    assert np.allclose(Y.values[0, :, 0], -(1.0 - noise.grid.nodes))
    assert np.allclose(Z.values, 0.0, atol=1e-12)


def test_regression_examples():
    rng = np.random.default_rng(0)
    w = rng.normal(size=50)
    F = np.stack([np.ones(50), w], 1)
    coef, fit = regress_conditional(2 * w + 3, F)
    assert np.allclose(coef, [3, 2])
    coef, fit = regress_conditional(np.full(50, 5.0), F)
    assert np.allclose(fit, 5.0)
    M = 100_000
    past = rng.normal(size=M)
    future = rng.normal(size=M)
    coef, fit = regress_conditional(future, np.stack([np.ones(M), past, past ** 2 - 1], 1))
    assert np.max(np.abs(coef)) <= 5 / np.sqrt(M)


def test_regression_residual_orthogonal():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(200, 6))
    y = rng.normal(size=200)
    for method in ("svd", "gram"):
        _, fit = regress_conditional(y, A, method=method)
        assert np.max(np.abs(A.T @ (y - fit))) <= 1e-10 * np.linalg.norm(A) * np.linalg.norm(y)


def test_regression_rejects_underdetermined():
    from mffbsde.core import NumericFailure
    with pytest.raises(NumericFailure):
        regress_conditional(np.zeros(3), np.ones((3, 5)))


def test_rank_deficient_basis_is_reduced():
    noise = sample_brownian(make_grid(1.0, 4), 12, 1, seed=2)
    c = constant_set(phi=lambda x1, x2, w=None: np.sin(3 * np.asarray(w)))
    cfg = SolverConfig(particles=12, steps=4, basis=RegressionBasis("noise", 11), picard_max=3)
    V1, V2, rep = picard_solve(c, noise.grid, noise, cfg)
    assert rep.rank_drops > 0
    assert np.all(np.isfinite(V1.Y))


def test_design_matrix_shapes():
    rng = np.random.default_rng(3)
    P = design_matrix(RegressionBasis("joint", 2), rng.normal(size=(30, 1)), rng.normal(size=(30, 2)))
    assert P.shape == (30, 10)
    P = design_matrix(RegressionBasis("noise", 2, 5), rng.normal(size=(30, 1)), None)
    assert P.shape == (30, 6)
    with pytest.raises(InvalidArgument):
        RegressionBasis("spline", 2)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SolverConfig(picard_tol=0)
    with pytest.raises(InvalidArgument):
        SolverConfig(alpha_schedule=(0.5, 1.0))
    with pytest.raises(InvalidArgument):
        SolverConfig(alpha_schedule=(0.0, 0.6, 0.4, 1.0))
    with pytest.raises(InvalidArgument):
        SolverConfig(damping=1.5)


def test_constant_system_one_sweep():
    noise = sample_brownian(make_grid(1.0, 4), 50, 1, seed=4)
    c = constant_set(psi=0.7)
    V1, V2, rep = picard_solve(c, noise.grid, noise, SolverConfig(particles=50, steps=4))
    assert rep.iterations <= 2 and rep.residuals[-1] == 0.0
    assert np.allclose(V1.X, 0.7) and np.allclose(V1.Y, 0) and np.allclose(V1.Z, 0)


@pytest.fixture(scope="module")
def example_small():
    lc = exponential_lc_example()
    c = lc_hamiltonian(lc)
    cfg = SolverConfig(particles=1024, steps=16, basis=RegressionBasis("joint", 3, 3), damping=2 / 3,
                       alpha_schedule=(0.0, 0.5, 1.0), picard_tol=1e-7, seed=42)
    noise = sample_brownian(cfg.grid, cfg.particles, 1, cfg.seed)
    return lc, c, cfg, noise


def test_base_system_converges_fast(example_small):
    _, c, cfg, noise = example_small
    c0 = base_coefficients(c.structural)
    _, _, rep = picard_solve(c0, cfg.grid, noise, cfg)
    assert rep.iterations <= 2


def test_example_contracts_and_drivers_agree(example_small):
    _, c, cfg, noise = example_small
    c0 = base_coefficients(c.structural)
    A1, A2, rep = continuation_solve(c, c0, cfg, noise)
    assert rep.alpha_trace == [0.0, 0.5, 1.0]
    assert all(r < 1 for r in rep.ratios[1:])
    assert rep.final_residual < cfg.picard_tol
    B1, B2, rep2 = picard_solve(c, cfg.grid, noise, cfg)
    assert m_norm([A1 - B1, A2 - B2]) <= 2 * cfg.picard_tol * max(1.0, m_norm([A1, A2]))
    cfg01 = SolverConfig(**{**cfg.__dict__, "alpha_schedule": (0.0, 1.0)})
    C1, C2, _ = continuation_solve(c, c0, cfg01, noise)
    assert m_norm([A1 - C1, A2 - C2]) <= 2 * cfg.picard_tol * max(1.0, m_norm([A1, A2]))


def test_nonconvergence_carries_trace(example_small):
    _, c, cfg, noise = example_small
    tight = SolverConfig(**{**cfg.__dict__, "picard_max": 2, "picard_tol": 1e-14})
    with pytest.raises(NonConvergence) as e:
        picard_solve(c, cfg.grid, noise, tight)
    assert len(e.value.report.residuals) == 2


def test_solution_norm_stable_across_seeds(example_small):
    _, c, cfg, _ = example_small
    norms = []
    for seed in (1, 2):
        nz = sample_brownian(cfg.grid, cfg.particles, 1, seed)
        V1, V2, _ = picard_solve(c, cfg.grid, nz, cfg)
        norms.append(m_norm([V1, V2]))
    assert abs(norms[0] - norms[1]) <= 0.1 * max(norms)


def test_adaptedness_under_future_resampling():
    """Two particles sharing their past up to node n get identical (Y_n, Z_n)
    and identical features, whatever their futures."""
    grid = make_grid(1.0, 6)
    base = sample_brownian(grid, 300, 1, seed=5).increments.copy()
    other = sample_brownian(grid, 300, 1, seed=6).increments
    n = 3
    inc = np.concatenate([base, base], axis=0)
    inc[300:, n:] = other[:, n:]
    noise = BrownianEnsemble(grid, inc, 0)
    c = constant_set(s=1.0, phi=lambda x1, x2, w=None: np.sin(np.asarray(x1)) + np.asarray(w) ** 2)
    cfg = SolverConfig(particles=600, steps=6, basis=RegressionBasis("joint", 2), picard_max=50)
    V1, _, _ = picard_solve(c, grid, noise, cfg)
    assert np.allclose(V1.Y[:300, n], V1.Y[300:, n], atol=1e-12)
    assert np.allclose(V1.Z[:300, n], V1.Z[300:, n], atol=1e-12)
    assert np.allclose(V1.X[:300, :n + 1], V1.X[300:, :n + 1], atol=1e-12)


def test_discrete_martingale_property():
    noise = sample_brownian(make_grid(1.0, 8), 2000, 1, seed=8)
    c = constant_set(phi=lambda x1, x2, w=None: np.cos(np.asarray(w)))
    Y, _ = backward_solve(c, Frozen(), noise.grid, noise, RegressionBasis("noise", 4))
    inc = Y.values[:, 1:, 0] - Y.values[:, :-1, 0]
    band = 5 * inc.std(axis=0) / np.sqrt(noise.M)
    assert np.all(np.abs(inc.mean(axis=0)) <= band + 1e-14)


def test_stability_probe_linear_response():
    noise = sample_brownian(make_grid(2.0, 8), 20, 1, seed=9)
    c = constant_set()
    cfg = SolverConfig(particles=20, steps=8, T=2.0)
    r = stability_probe(c, [0.0, 0.5, 1e-3], noise.grid, noise, cfg)
    assert r[0] == 0.0
    assert r[1] == pytest.approx(2.0, rel=1e-12) and r[2] == pytest.approx(2.0, rel=1e-9)
