"""Reference solutions used to judge the particle solver.

* the closed form of the exponential-cost example, evaluated on the same
  noise and with the same Euler recursion as the solver;
* a direct projected-gradient optimizer for small constrained
  linear-quadratic instances;
* the exact zero-control cost of the example.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import LQICProblemData
from .control import ControlQuartet, cost_lqic
from .convex import WeightedNorm, project
from .core import BrownianEnsemble, EnsembleProcess, InvalidArgument, NonConvergence, TimeGrid
from .solver import RegressionBasis, _gram_solve, design_matrix, _normalized_noise


def _grad_example(u):
    return np.sign(u) * np.expm1(np.abs(u))


def implicit_u(w, tol: float = 1e-14):
    """Root u of grad f(u) + u + w = 0 with f(u) = exp|u| - |u| - 1.

    The map u -> grad f(u) + u is odd and increasing with slope >= 2, so
    the root lies in [-|w|/2, |w|/2]; bisection keeps a bracket and Newton
    steps inside it finish the job.  Works elementwise on arrays.
    """
    w = np.asarray(w, dtype=float)
    lo = -0.5 * np.abs(w)
    hi = 0.5 * np.abs(w)
    u = np.zeros_like(w)
    for _ in range(200):
        g = _grad_example(u) + u + w
        done = np.abs(g) <= tol
        if np.all(done):
            break
        hi = np.where(g > 0, u, hi)
        lo = np.where(g > 0, lo, u)
        step = u - g / (np.exp(np.abs(u)) + 1.0)
        inside = (step > lo) & (step < hi)
        u = np.where(done, u, np.where(inside, step, 0.5 * (lo + hi)))
    return u if u.ndim else float(u)


@dataclass
class OracleSolution:
    X1: np.ndarray
    X2: np.ndarray
    Y1: np.ndarray
    Y2: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    xi1: float
    xi2: float
    residual: float
    tol: float


def example_reference(noise: BrownianEnsemble, grid: TimeGrid | None = None,
                      tol: float = 1e-14) -> OracleSolution:
    """Closed-form solution of the exponential-cost example on an ensemble.

    u* = implicit_u(sin W), Z = u* + sin W, X = Y with X the zero-drift
    Euler recursion X_{n+1} = X_n + Z_n dW_n from X_0 = 0, xi* = 0.  The
    mean-field drift terms are taken at their exact value zero.
    Arrays have shape (M, N + 1, 1) and (M, N + 1, 1, 1) for Z.
    """
    if noise.d != 1:
        raise InvalidArgument("the example is driven by scalar noise")
    W = noise.path[:, :, 0]
    dW = noise.increments[:, :, 0]
    s = np.sin(W)
    u = implicit_u(s, tol)
    residual = float(np.max(np.abs(_grad_example(u) + u + s)))
    Z = u + s
    X = np.zeros_like(W)
    X[:, 1:] = np.cumsum(Z[:, :-1] * dW, axis=1)
    X3 = X[..., None]
    Z4 = Z[..., None, None]
    u3 = u[..., None]
    return OracleSolution(X3, X3, X3, X3, Z4, Z4, u3, u3, 0.0, 0.0, residual, tol)


def ito_isometry_cost() -> float:
    """Cost of the example at zero controls.

    With zero controls X_1 = X_2 = int sin(W) dW and the cost reduces to
    E|X_1(1)|^2 = int_0^1 E sin^2(W_s) ds = int_0^1 (1 - exp(-2s)) / 2 ds,
    using E cos(2 W_s) = exp(-2s).
    """
    return 0.5 - (1.0 - np.exp(-2.0)) / 4.0


def relative_l2(a, b, nodes: slice | None = None) -> float:
    """sqrt(mean |a - b|^2 / mean |b|^2) over particles and nodes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if nodes is not None:
        a, b = a[:, nodes], b[:, nodes]
    den = np.mean(b ** 2)
    return float(np.sqrt(np.mean((a - b) ** 2) / den)) if den > 0 else float(np.sqrt(np.mean((a - b) ** 2)))


# ---------------------------------------------------------- direct optimizer

@dataclass
class BruteForceResult:
    xi1: np.ndarray
    xi2: np.ndarray
    u1: np.ndarray  # (M, N, k)
    u2: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    cost: float
    costs: list
    stationarity: float
    iterations: int
    step: float
    dt: float = 0.0

    def quartet(self):
        """Controls padded to N + 1 nodes like the solver's output."""
        pad = lambda u: np.concatenate([u, u[:, -1:]], axis=1)
        return ControlQuartet(self.xi1, self.xi2, EnsembleProcess(pad(self.u1)), EnsembleProcess(pad(self.u2)))

    def breakdown(self, lq: LQICProblemData, noise: BrownianEnsemble):
        return cost_lqic(lq, self.quartet(), (self.X1, self.X2), noise, self.dt)


def _lq_forward(lq: LQICProblemData, grid, noise, xi1, xi2, u1, u2):
    dyn = lq.dyn
    M, N = noise.M, grid.N
    n, dt = dyn.n, grid.dt
    dW = noise.increments
    W = noise.path
    X = {i: np.empty((M, N + 1, n)) for i in (1, 2)}
    X[1][:, 0] = dyn.H @ xi1 + dyn.x0
    X[2][:, 0] = dyn.H @ xi2 + dyn.x0
    u = {1: u1, 2: u2}
    from .core import ExtendedStateView
    for k in range(N):
        t = k * dt
        mx1, mx2 = X[1][:, k].mean(0), X[2][:, k].mean(0)
        for i in (1, 2):
            view = ExtendedStateView(mx1, None, mx2, None, X[i][:, k], None, None, W[:, k], k)
            ui = u[i][:, k]
            b = dyn.drift(i, t, X[i][:, k], mx1, mx2, ui, ui.mean(0), view)
            sig = np.broadcast_to(dyn.diffusion(i, t, X[i][:, k], ui, view), (M, dyn.d, n))
            X[i][:, k + 1] = X[i][:, k] + b * dt + np.einsum("mjn,mj->mn", sig, dW[:, k])
    return X[1], X[2]


def _lq_cost(lq, grid, noise, xi1, xi2, u1, u2, X1, X2):
    dt, N = grid.dt, grid.N
    S = X1[:, N] + X2[:, N]
    G = lq.G_sum(noise.path[:, N])
    term = np.einsum("mi,mi->m", S, np.einsum("mij,mj->mi", G, S) if G.ndim == 3 else S @ G.T)
    run = np.zeros(noise.M)
    for k in range(N):
        t = k * dt
        for i, X, u in ((1, X1, u1), (2, X2, u2)):
            run += (np.einsum("mi,mi->m", X[:, k], X[:, k] @ lq.Q(i, t).T)
                    + np.einsum("mi,mi->m", u[:, k], u[:, k] @ lq.R(i, t).T)) * dt
    init = xi1 @ lq.M1 @ xi1 + xi2 @ lq.M2 @ xi2
    return 0.5 * (init + np.mean(term + run))


def _lq_gradient(lq, grid, noise, basis, xi1, xi2, u1, u2, X1, X2):
    """L2 gradient of the discrete cost: pathwise adjoint, then its
    conditional mean and martingale loadings at each node by regression."""
    dyn = lq.dyn
    M, N, dt = noise.M, grid.N, grid.dt
    n, d = dyn.n, dyn.d
    dW, W = noise.increments, noise.path
    S = X1[:, N] + X2[:, N]
    G = lq.G_sum(W[:, N])
    lamT = np.einsum("mij,mj->mi", G, S) if G.ndim == 3 else S @ G.T
    lam = {1: lamT.copy(), 2: lamT.copy()}
    g = {1: np.zeros_like(u1), 2: np.zeros_like(u2)}
    X = {1: X1, 2: X2}
    u = {1: u1, 2: u2}
    use_state = basis.kind in ("state", "joint")
    for k in range(N - 1, -1, -1):
        t = k * dt
        mean_lam = {i: lam[i].mean(0) for i in (1, 2)}
        state = np.concatenate([X1[:, k], X2[:, k]], axis=1) if use_state else None
        P = design_matrix(basis, _normalized_noise(noise, k, basis.kind), state)
        # joint regression of lam_{k+1} on [P, P dW_j]: conditional mean and
        # the martingale loadings, the same estimator the particle solver uses
        p = P.shape[1]
        Pd = np.concatenate([P] + [P * dW[:, k, j:j + 1] for j in range(d)], axis=1)
        coef, _ = _gram_solve(Pd, np.concatenate([lam[1], lam[2]], axis=1), basis.cutoff)
        fit = (P @ coef.reshape(d + 1, p, 2 * n).transpose(1, 0, 2).reshape(p, -1)).reshape(M, d + 1, 2 * n)
        for pos, i in enumerate((1, 2)):
            yh = fit[:, 0, pos * n:(pos + 1) * n]
            z = fit[:, 1:, pos * n:(pos + 1) * n]
            arg = dyn.control_argument(i, t, yh, yh.mean(0), z)
            g[i][:, k] = (u[i][:, k] @ lq.R(i, t).T + arg) * dt
        # adjoint step: lam_k = (I + A dt + C dW)^T lam_{k+1} + Q X_k dt + mean-field terms
        new = {}
        for i in (1, 2):
            A = dyn.mat(f"A{i}", t)
            C = dyn.mat(f"C{i}", t)
            li = (lam[i] + (lam[i] @ A) * dt + np.einsum("mn,mj,jnp->mp", lam[i], dW[:, k], C)
                  + (X[i][:, k] @ lq.Q(i, t).T) * dt)
            if i == 1:
                li = li + (mean_lam[1] @ dyn.mat("Abar1", t) + mean_lam[2] @ dyn.mat("Abar2", t)) * dt
            else:
                li = li + (mean_lam[1] @ dyn.mat("Abar2", t)) * dt
            new[i] = li
        lam = new
    gxi1 = lq.M1 @ xi1 + dyn.H.T @ lam[1].mean(0)
    gxi2 = lq.M2 @ xi2 + dyn.H.T @ lam[2].mean(0)
    return gxi1, gxi2, g[1], g[2]


def _lipschitz_estimate(grad, x, size, dt, iters: int = 12) -> float:
    """Power iteration on the (affine) gradient map around x."""
    rng = np.random.default_rng(0)
    g0 = grad(x)
    v = tuple(rng.standard_normal(np.shape(a)) for a in x)
    L = 1.0
    for _ in range(iters):
        v = tuple(a / size(*v) for a in v)
        g1 = grad(tuple(a + b for a, b in zip(x, v)))
        w = (g1[0] - g0[0], g1[1] - g0[1], (g1[2] - g0[2]) / dt, (g1[3] - g0[3]) / dt)
        L = size(*w)
        if not L > 0:
            return 1.0
        v = w
    return 1.1 * L


def brute_force_lqic(lq: LQICProblemData, grid: TimeGrid, noise: BrownianEnsemble,
                     max_iter: int = 5000, step: float | None = None, tol: float = 1e-10,
                     basis: RegressionBasis | None = None, budget: int = 10 ** 7) -> BruteForceResult:
    """Projected gradient descent on the fully discretized cost.

    Variables are the deterministic initial controls and the per-particle,
    per-node process controls.  Process-control gradients are conditional
    expectations estimated by regression on the information at each node,
    so every iterate stays adapted.  The default step is the inverse of a
    power-iteration estimate of the gradient's Lipschitz constant.  A step is accepted when the
    projected-gradient fixed-point residual does not grow, otherwise the
    step size is halved; iteration stops when that residual falls below
    ``tol`` relative to the control size.
    """
    dyn = lq.dyn
    M, N = noise.M, grid.N
    k, m = dyn.k, dyn.m
    if dyn.n * k * N * M > budget:
        raise InvalidArgument(f"instance exceeds the brute-force budget ({budget})")
    basis = basis or RegressionBasis("path", 3)
    dt = grid.dt
    I0 = WeightedNorm(np.eye(m))
    Ik = WeightedNorm(np.eye(k))

    def proj_u(v):
        out = np.empty_like(v)
        for n_ in range(N):
            out[:, n_] = project(lq.Uset(n_ * dt), Ik, v[:, n_])
        return out

    xi1 = project(lq.U0, I0, np.zeros(m))
    xi2 = project(lq.U0, I0, np.zeros(m))
    u1 = proj_u(np.zeros((M, N, k)))
    u2 = proj_u(np.zeros((M, N, k)))

    def evaluate(a, b, c, e):
        X1, X2 = _lq_forward(lq, grid, noise, a, b, c, e)
        return _lq_cost(lq, grid, noise, a, b, c, e, X1, X2), X1, X2

    def size(a, b, c, e):
        return np.sqrt(np.sum(a ** 2) + np.sum(b ** 2)
                       + np.mean(np.sum(c ** 2 + e ** 2, axis=(1, 2))) * dt)

    # process-control gradients come per unit time, hence the 1 / dt
    def candidate(x, g, s_):
        return (project(lq.U0, I0, x[0] - s_ * g[0]), project(lq.U0, I0, x[1] - s_ * g[1]),
                proj_u(x[2] - s_ * g[2] / dt), proj_u(x[3] - s_ * g[3] / dt))

    def state(x):
        J_, Y1, Y2 = evaluate(*x)
        return J_, Y1, Y2, _lq_gradient(lq, grid, noise, basis, *x, Y1, Y2)

    x = (xi1, xi2, u1, u2)
    J, X1, X2, g = state(x)
    costs = [J]
    s = step if step is not None else 1.0 / _lipschitz_estimate(lambda y: state(y)[3], x, size, dt)
    stat = np.inf
    it = 0
    while True:
        it += 1
        if it > max_iter:
            raise NonConvergence(f"projected gradient did not reach {tol} in {max_iter} steps "
                                 f"(stationarity {stat:.3e})")
        c = candidate(x, g, s)
        res = size(*(a - b for a, b in zip(c, x))) / s
        stat = res / max(size(*x), 1.0)
        if stat < tol:
            break
        Jc, Y1, Y2, gc = state(c)
        res_c = size(*(a - b for a, b in zip(candidate(c, gc, s), c))) / s
        if (not np.isfinite(res_c) or res_c > res * (1.0 + 1e-9)) and s > 1e-8:
            # the fixed-point residual is nonincreasing once the step is small enough
            s *= 0.5
            continue
        x, J, X1, X2, g = c, Jc, Y1, Y2, gc
        costs.append(J)
    xi1, xi2, u1, u2 = x
    return BruteForceResult(xi1, xi2, u1, u2, X1, X2, J, costs, stat, it, s, dt)
