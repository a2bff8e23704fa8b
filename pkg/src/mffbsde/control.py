"""Control pipelines built on the Hamiltonian systems.

Extract optimal controls from a solved system, simulate controlled
states, evaluate costs on an ensemble and compare against perturbed
controls on common noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .coefficients import Dynamics, LCProblemData, LQICProblemData
from .core import (AdmissibilityViolation, BrownianEnsemble, EnsembleProcess, ExtendedStateView,
                   InvalidArgument, NumericFailure, TimeGrid)


@dataclass
class ControlQuartet:
    xi1: np.ndarray
    xi2: np.ndarray
    u1: EnsembleProcess  # (M, N + 1, k); the last node is never used
    u2: EnsembleProcess

    def shifted(self, dxi1=0.0, dxi2=0.0, du1=0.0, du2=0.0) -> "ControlQuartet":
        return ControlQuartet(self.xi1 + dxi1, self.xi2 + dxi2,
                              EnsembleProcess(self.u1.values + du1), EnsembleProcess(self.u2.values + du2))


@dataclass
class CostBreakdown:
    initial: float
    terminal: float
    running_state: float
    running_control: float
    total: float
    per_particle: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_particle")
        return d


def _mean(a):
    return np.add.reduce(a, axis=0) / a.shape[0]


def _common_value(a: np.ndarray, what: str) -> np.ndarray:
    """Initial controls are deterministic; the solver returns them per particle."""
    v = _mean(a)
    if np.max(np.abs(a - v)) > 1e-8 * (1.0 + np.max(np.abs(v))):
        raise NumericFailure(f"{what} varies across particles")
    return v


def _process_controls(feedback, V, grid_dt):
    y = V.y_slot
    M, N1 = y.shape[:2]
    my = _mean(y)
    out = [feedback(n * grid_dt, y[:, n], my[n], V.Z[:, n]) for n in range(N1)]
    return np.stack(out, axis=1)


def extract_lc_controls(sol, lc: LCProblemData, dt: float | None = None) -> ControlQuartet:
    """Initial controls from Y(0) through the inverse gradients of f11, f12;
    process controls (grad f4i)^{-1}(-(B^T Y + tau Bbar^T E Y + D^T Z))."""
    V1, V2 = sol
    dt = dt if dt is not None else V1.dt
    a, b = lc.initial_controls(V1.Y[:, 0], V2.Y[:, 0])
    xi1 = _common_value(a, "xi1")
    xi2 = _common_value(b, "xi2")
    u1 = _process_controls(lambda t, y, my, z: lc.feedback(1, t, y, my, z), V1, dt)
    u2 = _process_controls(lambda t, y, my, z: lc.feedback(2, t, y, my, z), V2, dt)
    return ControlQuartet(xi1, xi2, EnsembleProcess(u1), EnsembleProcess(u2))


def extract_lqic_controls(sol, lq: LQICProblemData, dt: float | None = None) -> ControlQuartet:
    """Initial controls Pi_0(-M^{-1} H^T Y(0)); process controls
    Pi(t, -R^{-1}(B^T Y + tau Bbar^T E Y + D^T Z)), both weighted projections."""
    V1, V2 = sol
    dt = dt if dt is not None else V1.dt
    xi1 = _common_value(lq.initial_control(1, V1.Y[:, 0]), "xi1")
    xi2 = _common_value(lq.initial_control(2, V2.Y[:, 0]), "xi2")
    u1 = _process_controls(lambda t, y, my, z: lq.feedback(1, t, y, my, z), V1, dt)
    u2 = _process_controls(lambda t, y, my, z: lq.feedback(2, t, y, my, z), V2, dt)
    return ControlQuartet(xi1, xi2, EnsembleProcess(u1), EnsembleProcess(u2))


def simulate_state(dyn: Dynamics, q: ControlQuartet, grid: TimeGrid, noise: BrownianEnsemble):
    """Euler-Maruyama for the controlled linear dynamics, X_i(0) = H xi_i + x0."""
    M, N, dt = noise.M, grid.N, grid.dt
    n, d = dyn.n, dyn.d
    if noise.grid.N != N:
        raise InvalidArgument("grid does not match the noise ensemble")
    W, dW = noise.path, noise.increments
    X = {i: np.empty((M, N + 1, n)) for i in (1, 2)}
    X[1][:, 0] = dyn.H @ np.asarray(q.xi1, dtype=float) + dyn.x0
    X[2][:, 0] = dyn.H @ np.asarray(q.xi2, dtype=float) + dyn.x0
    u = {1: q.u1.values, 2: q.u2.values}
    for k in range(N):
        t = k * dt
        mx1, mx2 = _mean(X[1][:, k]), _mean(X[2][:, k])
        for i in (1, 2):
            ui = u[i][:, k]
            view = ExtendedStateView(mx1, None, mx2, None, X[i][:, k], None, None, W[:, k], k)
            b = dyn.drift(i, t, X[i][:, k], mx1, mx2, ui, _mean(ui), view)
            sig = np.broadcast_to(dyn.diffusion(i, t, X[i][:, k], ui, view), (M, d, n))
            X[i][:, k + 1] = X[i][:, k] + b * dt + np.einsum("mjn,mj->mn", sig, dW[:, k])
        if not (np.all(np.isfinite(X[1][:, k + 1])) and np.all(np.isfinite(X[2][:, k + 1]))):
            raise NumericFailure(f"nonfinite controlled state at node {k + 1}")
    return EnsembleProcess(X[1]), EnsembleProcess(X[2])


def _finite(name, v):
    if not np.all(np.isfinite(v)):
        raise AdmissibilityViolation(f"{name} is not finite on the ensemble")
    return v


def cost_lc(lc: LCProblemData, q: ControlQuartet, states, noise: BrownianEnsemble | None = None,
            dt: float | None = None) -> CostBreakdown:
    """Initial, terminal and left-endpoint running costs of the linear-convex problem."""
    X1, X2 = (s.values if isinstance(s, EnsembleProcess) else s for s in states)
    N = X1.shape[1] - 1
    dt = dt if dt is not None else (noise.grid.dt if noise is not None else lc.dyn.T / N)
    tau = lc.dyn.tau
    xi1, xi2 = np.asarray(q.xi1, float), np.asarray(q.xi2, float)
    with np.errstate(over="ignore", invalid="ignore"):
        init = float(lc.f11.eval(xi1 + tau * xi2) + lc.f12.eval(xi2 + tau * xi1))
        S = X1[:, N] + X2[:, N]
        term = _finite("terminal cost", lc.f21.eval(S) + lc.f22.eval(S))
        rs = np.zeros(X1.shape[0])
        rc = np.zeros(X1.shape[0])
        u1, u2 = q.u1.values, q.u2.values
        for k in range(N):
            t = k * dt
            rs += (lc.f3(1, t).eval(X1[:, k]) + lc.f3(2, t).eval(X2[:, k])) * dt
            rc += (lc.f4(1, t).eval(u1[:, k]) + lc.f4(2, t).eval(u2[:, k])) * dt
    _finite("running state cost", rs)
    _finite("running control cost", rc)
    if not np.isfinite(init):
        raise AdmissibilityViolation("initial cost is not finite")
    per = init + term + rs + rc
    return CostBreakdown(init, float(_mean(term)), float(_mean(rs)), float(_mean(rc)),
                         float(_mean(per)), per)


def _check_admissible(lq: LQICProblemData, q: ControlQuartet, dt: float, tol: float = 1e-9):
    for name, xi in (("xi1", q.xi1), ("xi2", q.xi2)):
        if not bool(np.all(lq.U0.contains(np.asarray(xi, float), tol))):
            raise AdmissibilityViolation(f"{name} lies outside the initial control set")
    for name, u in (("u1", q.u1.values), ("u2", q.u2.values)):
        for k in range(u.shape[1] - 1):
            if not np.all(lq.Uset(k * dt).contains(u[:, k], tol)):
                raise AdmissibilityViolation(f"{name} leaves the control set at node {k}")


def cost_lqic(lq: LQICProblemData, q: ControlQuartet, states, noise: BrownianEnsemble | None = None,
              dt: float | None = None, check: bool = True) -> CostBreakdown:
    """Quadratic cost with weights M_i, G_1 + G_2, Q_i and R_i, all halved."""
    X1, X2 = (s.values if isinstance(s, EnsembleProcess) else s for s in states)
    N = X1.shape[1] - 1
    dt = dt if dt is not None else (noise.grid.dt if noise is not None else lq.dyn.T / N)
    if check:
        _check_admissible(lq, q, dt)
    xi1, xi2 = np.asarray(q.xi1, float), np.asarray(q.xi2, float)
    init = 0.5 * float(xi1 @ lq.M1 @ xi1 + xi2 @ lq.M2 @ xi2)
    S = X1[:, N] + X2[:, N]
    G = lq.G_sum(noise.path[:, N] if noise is not None else None)
    GS = np.einsum("mij,mj->mi", G, S) if G.ndim == 3 else S @ G.T
    term = 0.5 * np.einsum("mi,mi->m", S, GS)
    rs = np.zeros(X1.shape[0])
    rc = np.zeros(X1.shape[0])
    u1, u2 = q.u1.values, q.u2.values
    for k in range(N):
        t = k * dt
        for i, X, u in ((1, X1, u1), (2, X2, u2)):
            rs += 0.5 * np.einsum("mi,mi->m", X[:, k], X[:, k] @ lq.Q(i, t).T) * dt
            rc += 0.5 * np.einsum("mi,mi->m", u[:, k], u[:, k] @ lq.R(i, t).T) * dt
    per = init + term + rs + rc
    return CostBreakdown(init, float(_mean(term)), float(_mean(rs)), float(_mean(rc)),
                         float(_mean(per)), per)


# --------------------------------------------------------------- optimality

@dataclass
class GapEntry:
    gap: float
    bound: float
    deviation: float
    mc_tol: float
    margin: float  # gap - bound + mc_tol
    passed: bool


@dataclass
class GapReport:
    entries: list
    delta: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_dict(self) -> dict:
        return {"delta": self.delta, "passed": self.passed, "entries": [asdict(e) for e in self.entries]}


def _deviation(problem, q_opt: ControlQuartet, q: ControlQuartet, dt: float) -> float:
    d1 = np.asarray(q.xi1, float) - np.asarray(q_opt.xi1, float)
    d2 = np.asarray(q.xi2, float) - np.asarray(q_opt.xi2, float)
    if isinstance(problem, LCProblemData):
        tau = problem.dyn.tau
        init = float(np.sum((d1 + tau * d2) ** 2) + np.sum((d2 + tau * d1) ** 2))
    else:
        init = float(np.sum(d1 ** 2) + np.sum(d2 ** 2))
    N = q.u1.values.shape[1] - 1
    du = (q.u1.values - q_opt.u1.values)[:, :N] ** 2 + (q.u2.values - q_opt.u2.values)[:, :N] ** 2
    return init + float(np.mean(np.sum(du, axis=(1, 2)))) * dt


def _cost(problem, q, grid, noise):
    states = simulate_state(problem.dyn, q, grid, noise)
    if isinstance(problem, LCProblemData):
        return cost_lc(problem, q, states, noise)
    return cost_lqic(problem, q, states, noise)


def optimality_gap_check(problem, q_opt: ControlQuartet, perturbations, grid: TimeGrid,
                         noise: BrownianEnsemble, sigmas: float = 3.0) -> GapReport:
    """J(q) - J(q_opt) against (delta / 2) times the control deviation.

    Both costs use the same noise; the Monte Carlo tolerance is ``sigmas``
    standard errors of the per-particle cost difference.  An entry passes
    when gap >= bound - tol and gap >= -tol.
    """
    delta = problem.delta
    base = _cost(problem, q_opt, grid, noise)
    entries = []
    for q in perturbations:
        c = _cost(problem, q, grid, noise)
        diff = c.per_particle - base.per_particle
        gap = float(_mean(diff))
        tol = sigmas * float(np.std(diff, ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
        dev = _deviation(problem, q_opt, q, grid.dt)
        bound = 0.5 * delta * dev
        margin = gap - bound + tol
        entries.append(GapEntry(gap, bound, dev, tol, margin, bool(margin >= 0 and gap >= -tol)))
    return GapReport(entries, delta)


@dataclass
class DualityCheck:
    left: float
    right: float
    residual: float  # |left - right|
    mc_error: float  # standard error of the per-particle difference

    def to_dict(self) -> dict:
        return asdict(self)


def duality_residual(sol, problem, q: ControlQuartet, grid: TimeGrid, noise: BrownianEnsemble,
                     q_opt: ControlQuartet | None = None) -> DualityCheck:
    """Both sides of the duality identity for the control difference q - q_opt.

    Left:  sum_i E <Y_i(T), X~_i(T)> - <Y_i(0), H xi~_i>
    Right: sum_i sum_n E[ -<grad running state cost, X~_i> + <B^T Y + tau Bbar^T E Y + D^T Z, u~_i> ] dt
    where ~ marks differences between the controlled and the optimal
    trajectories.  The identity holds in expectation, so the residual of
    the discrete estimate is of Monte Carlo size; ``mc_error`` is the
    standard error of the per-particle difference of the two sides.
    """
    V1, V2 = sol
    dyn = problem.dyn
    if q_opt is None:
        q_opt = (extract_lc_controls(sol, problem, grid.dt) if isinstance(problem, LCProblemData)
                 else extract_lqic_controls(sol, problem, grid.dt))
    Xs = simulate_state(dyn, q_opt, grid, noise)
    Xq = simulate_state(dyn, q, grid, noise)
    N, dt = grid.N, grid.dt
    dX = {1: Xq[0].values - Xs[0].values, 2: Xq[1].values - Xs[1].values}
    du = {1: q.u1.values - q_opt.u1.values, 2: q.u2.values - q_opt.u2.values}
    dxi = {1: np.asarray(q.xi1, float) - q_opt.xi1, 2: np.asarray(q.xi2, float) - q_opt.xi2}
    V = {1: V1, 2: V2}
    left = np.zeros(noise.M)
    right = np.zeros(noise.M)
    for i in (1, 2):
        left += np.sum(V[i].Y[:, N] * dX[i][:, N], axis=1)
        left -= (V[i].Y[:, 0] @ dyn.H) @ dxi[i]
        y = V[i].y_slot
        my = _mean(y)
        Xopt = Xs[i - 1].values
        for k in range(N):
            t = k * dt
            if isinstance(problem, LCProblemData):
                g3 = problem.f3(i, t).grad(Xopt[:, k])
            else:
                g3 = Xopt[:, k] @ problem.Q(i, t).T
            arg = dyn.control_argument(i, t, y[:, k], my[k], V[i].Z[:, k])
            right += (-np.sum(g3 * dX[i][:, k], axis=1) + np.sum(arg * du[i][:, k], axis=1)) * dt
    diff = left - right
    se = float(np.std(diff, ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
    return DualityCheck(float(_mean(left)), float(_mean(right)), abs(float(_mean(diff))), se)
