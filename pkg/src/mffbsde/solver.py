"""Particle solver: Euler forward passes, least-squares backward passes,
damped Picard iteration and the alpha-continuation driver.

Discrete scheme, per equation i and node n (dt = T / N):

    Yhat_n = E[Y_{n+1} | F_n],      Z_n = E[Y_{n+1} dW_n | F_n] / dt
    Y_n    = Yhat_n - f(t_n, theta_n) dt
    X_{n+1} = X_n + b(t_n, theta_n) dt + sum_j sigma_j(t_n, theta_n) dW_{n,j}

where theta_n carries Yhat_n in its Y-slot (both passes) and the particle
means of X and Yhat.  With that choice the scheme is the exact first-order
condition of the Euler-discretized control problem, so costs computed on
the same grid are comparable with a direct optimizer.  Conditional
expectations are regressions of Y_{n+1} on [P, P dW_1, ..., P dW_d] with
P a Hermite polynomial basis of the information at n.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermevander

from .coefficients import CoefficientSet, PerturbationData, apply_forcing, interpolate
from .core import (BrownianEnsemble, EnsembleProcess, ExtendedStateView, InvalidArgument,
                   NonConvergence, NumericFailure, TimeGrid, TripleProcess, make_grid,
                   m_norm, sample_brownian)


# ----------------------------------------------------------------- regression

@dataclass(frozen=True)
class RegressionBasis:
    """Hermite polynomial basis of the information available at a node.

    kind: "noise" (cumulative noise only), "state" (frozen forward states
    only), "joint" (both) or "path" (every past increment; exact
    adaptedness, only practical for a handful of steps), all monomials of
    total degree <= ``degree``.
    ``noise_degree`` adds pure-noise terms above ``degree`` up to that order.
    """

    kind: str = "joint"
    degree: int = 3
    noise_degree: int | None = None
    cutoff: float = 1e-11

    def __post_init__(self):
        if self.kind not in ("noise", "state", "joint", "path"):
            raise InvalidArgument(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or (self.noise_degree is not None and self.noise_degree < 0):
            raise InvalidArgument("basis degree must be nonnegative")


@lru_cache(maxsize=None)
def _multi_indices(q: int, deg: int):
    out = []
    for tot in range(deg + 1):
        for idx in itertools.product(range(tot + 1), repeat=q):
            if sum(idx) == tot:
                out.append(idx)
    return tuple(out)


def _standardize(x: np.ndarray) -> np.ndarray:
    """Center and scale columns; drop columns that are constant."""
    if x.shape[1] == 0:
        return x
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    keep = sd > 1e-12 * (1.0 + np.abs(mu))
    return (x[:, keep] - mu[keep]) / sd[keep]


def design_matrix(basis: RegressionBasis, noise: np.ndarray | None, state: np.ndarray | None) -> np.ndarray:
    """Evaluate the basis on standardized features.

    noise: (M, d) already normalized cumulative noise (or None)
    state: (M, q) raw state features (or None)
    """
    M = (noise if noise is not None else state).shape[0]
    feats = []
    if basis.kind in ("noise", "joint", "path") and noise is not None:
        nz = noise[:, np.abs(noise).max(axis=0) > 0] if noise.size else noise
        feats.append(nz)
    n_noise = feats[0].shape[1] if feats else 0
    if basis.kind in ("state", "joint") and state is not None:
        feats.append(_standardize(state))
    F = np.concatenate(feats, axis=1) if feats else np.zeros((M, 0))
    q = F.shape[1]
    top = max(basis.degree, basis.noise_degree or 0)
    V = [hermevander(F[:, c], top) for c in range(q)]
    terms = list(_multi_indices(q, basis.degree))
    if basis.noise_degree and basis.noise_degree > basis.degree and n_noise:
        terms += [idx + (0,) * (q - n_noise) for idx in _multi_indices(n_noise, basis.noise_degree)
                  if sum(idx) > basis.degree]
    out = np.empty((M, len(terms)))
    for col, idx in enumerate(terms):
        used = [(c, a) for c, a in enumerate(idx) if a]
        if not used:
            out[:, col] = 1.0
            continue
        c0, a0 = used[0]
        out[:, col] = V[c0][:, a0]
        for c, a in used[1:]:
            out[:, col] *= V[c][:, a]
    return out


def _gram_solve(A: np.ndarray, y: np.ndarray, cutoff: float):
    G = A.T @ A
    rhs = A.T @ y
    ev, Q = np.linalg.eigh(G)
    top = ev[-1] if ev.size else 0.0
    if not top > 0:
        raise NumericFailure("regression design has rank 0")
    keep = ev > top * cutoff
    coef = Q[:, keep] @ ((Q[:, keep].T @ rhs) / ev[keep].reshape((-1,) + (1,) * (rhs.ndim - 1)))
    return coef, int(keep.sum())


def regress_conditional(values, features, cutoff: float = 1e-11, method: str = "svd"):
    """Least-squares projection of ``values`` on the columns of ``features``.

    Returns (coefficients, fitted).  Near-collinear directions below
    ``cutoff`` relative to the largest singular value are dropped, which
    gives the minimum-norm solution.
    """
    y = np.asarray(values, dtype=float)
    A = np.asarray(features, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[0] < A.shape[1]:
        raise NumericFailure(f"{A.shape[0]} samples for {A.shape[1]} basis functions")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(A)):
        raise NumericFailure("nonfinite regression input")
    if method == "gram":
        coef, _ = _gram_solve(A, y, cutoff ** 2)
    else:
        coef, _, rank, sv = np.linalg.lstsq(A, y, rcond=cutoff)
        if rank == 0:
            raise NumericFailure("regression design has rank 0")
    return coef, A @ coef


# --------------------------------------------------------------- configuration

@dataclass
class SolverConfig:
    particles: int = 4096
    steps: int = 64
    T: float = 1.0
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    picard_tol: float = 1e-6
    damping: float = 1.0
    picard_max: int = 200
    alpha_schedule: tuple = (0.0, 1.0)
    seed: int = 0
    min_alpha_step: float = 1.0 / 64
    anderson: int = 0

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise InvalidArgument("picard_tol must be positive")
        if self.anderson < 0:
            raise InvalidArgument("anderson memory must be nonnegative")
        if not 0.0 < self.damping <= 1.0:
            raise InvalidArgument("damping must lie in (0, 1]")
        if self.picard_max < 1 or self.particles < 1 or self.steps < 1:
            raise InvalidArgument("particles, steps and picard_max must be positive")
        sched = [float(a) for a in self.alpha_schedule]
        if not sched or sched[0] != 0.0:
            raise InvalidArgument("alpha schedule must start at 0")
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise InvalidArgument("alpha schedule must be increasing")
        if sched[-1] > 1.0:
            raise InvalidArgument("alpha schedule must stay in [0, 1]")
        self.alpha_schedule = tuple(sched)

    @property
    def grid(self) -> TimeGrid:
        return make_grid(self.T, self.steps)


@dataclass
class SolveReport:
    residuals: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    final_residual: float = float("nan")
    alpha_trace: list = field(default_factory=list)
    norms: tuple = (float("nan"), float("nan"))
    wall_time: float = 0.0
    iterations: int = 0
    rank_drops: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norms"] = list(self.norms)
        return d


# ------------------------------------------------------------------ passes

@dataclass
class Frozen:
    """Data held fixed during a single pass.  Missing entries read as zero."""

    X1: np.ndarray | None = None
    X2: np.ndarray | None = None
    Y1: np.ndarray | None = None
    Y2: np.ndarray | None = None
    Z1: np.ndarray | None = None
    Z2: np.ndarray | None = None
    Yhat1: np.ndarray | None = None
    Yhat2: np.ndarray | None = None

    def get(self, name, i, shape):
        v = getattr(self, f"{name}{i}")
        if v is None and name == "Yhat":
            v = getattr(self, f"Y{i}")
        return np.zeros(shape) if v is None else v


def _mean(a):
    return np.add.reduce(a, axis=0) / a.shape[0]


def _full(v, shape):
    return np.broadcast_to(np.asarray(v, dtype=float), shape)


def _normalized_noise(noise: BrownianEnsemble, n: int, kind: str = "noise") -> np.ndarray:
    if kind == "path":
        return noise.increments[:, :n].reshape(noise.M, -1) / np.sqrt(noise.grid.dt)
    t = n * noise.grid.dt
    return noise.path[:, n] / np.sqrt(max(t, noise.grid.dt))


def _forward(c: CoefficientSet, fr: Frozen, noise: BrownianEnsemble, eqs=(1, 2)) -> dict:
    grid = noise.grid
    M, N, d, n = noise.M, grid.N, c.d, c.n
    dt = grid.dt
    W, dW = noise.path, noise.increments
    Y = {i: fr.get("Y", i, (M, N + 1, n)) for i in (1, 2)}
    Yh = {i: fr.get("Yhat", i, (M, N + 1, n)) for i in (1, 2)}
    Z = {i: fr.get("Z", i, (M, N + 1, d, n)) for i in (1, 2)}
    X = {i: fr.get("X", i, (M, N + 1, n)) for i in (1, 2)}
    mean_yh = {i: _mean(Yh[i]) for i in (1, 2)}
    out = {}
    for i in eqs:
        x = np.empty((M, N + 1, n))
        x[:, 0] = _full(c.psi(i)(Y[1][:, 0], Y[2][:, 0]), (M, n))
        out[i] = x
        X[i] = x
    for k in range(N):
        mx = {i: _mean(X[i][:, k]) for i in (1, 2)}
        t = k * dt
        for i in eqs:
            view = ExtendedStateView(mx[1], mean_yh[1][k], mx[2], mean_yh[2][k],
                                     X[i][:, k], Yh[i][:, k], Z[i][:, k], W[:, k], k, "bs")
            _, b, sig = c.gamma(i)(t, view)
            step = _full(b, (M, n)) * dt + np.einsum("mjn,mj->mn", _full(sig, (M, d, n)), dW[:, k])
            X[i][:, k + 1] = X[i][:, k] + step
            if not np.all(np.isfinite(X[i][:, k + 1])):
                raise NumericFailure(f"nonfinite forward state at node {k + 1}")
    return out


def _backward(c: CoefficientSet, fr: Frozen, noise: BrownianEnsemble, basis: RegressionBasis,
              eqs=(1, 2)):
    grid = noise.grid
    M, N, d, n = noise.M, grid.N, c.d, c.n
    dt = grid.dt
    W, dW = noise.path, noise.increments
    X = {i: fr.get("X", i, (M, N + 1, n)) for i in (1, 2)}
    Yfix = {i: fr.get("Yhat", i, (M, N + 1, n)) for i in (1, 2)}
    mx = {i: _mean(X[i]) for i in (1, 2)}
    Y, Yh, Z = {}, {}, {}
    for i in eqs:
        Y[i] = np.empty((M, N + 1, n))
        Yh[i] = np.empty((M, N + 1, n))
        Z[i] = np.zeros((M, N + 1, d, n))
        Y[i][:, N] = _full(c.phi(i)(X[1][:, N], X[2][:, N], W[:, N]), (M, n))
        Yh[i][:, N] = Y[i][:, N]
    use_state = basis.kind in ("state", "joint")
    drops = 0
    for k in range(N - 1, -1, -1):
        state = np.concatenate([X[1][:, k], X[2][:, k]], axis=1) if use_state else None
        P = design_matrix(basis, _normalized_noise(noise, k, basis.kind), state)
        p = P.shape[1]
        A = np.empty((M, p * (d + 1)))
        A[:, :p] = P
        for j in range(d):
            np.multiply(P, dW[:, k, j:j + 1], out=A[:, (j + 1) * p:(j + 2) * p])
        target = np.concatenate([Y[i][:, k + 1] for i in eqs], axis=1)
        coef, rank = _gram_solve(A, target, basis.cutoff)
        drops += A.shape[1] - rank
        # one product gives the conditional mean and every Z_j
        r = target.shape[1]
        fit = (P @ coef.reshape(d + 1, p, r).transpose(1, 0, 2).reshape(p, -1)).reshape(M, d + 1, r)
        my = {}
        for pos, i in enumerate(eqs):
            Yh[i][:, k] = fit[:, 0, pos * n:(pos + 1) * n]
            Z[i][:, k] = fit[:, 1:, pos * n:(pos + 1) * n]
            my[i] = _mean(Yh[i][:, k])
        for i in (1, 2):
            if i not in my:
                my[i] = _mean(Yfix[i][:, k])
        t = k * dt
        for i in eqs:
            view = ExtendedStateView(mx[1][k], my[1], mx[2][k], my[2],
                                     X[i][:, k], Yh[i][:, k], Z[i][:, k], W[:, k], k, "f")
            f, _, _ = c.gamma(i)(t, view)
            Y[i][:, k] = Yh[i][:, k] - _full(f, (M, n)) * dt
        if not all(np.all(np.isfinite(Y[i][:, k])) for i in eqs):
            raise NumericFailure(f"nonfinite backward state at node {k}")
    return Y, Yh, Z, drops


def forward_solve(c: CoefficientSet, frozen: Frozen, grid: TimeGrid, noise: BrownianEnsemble,
                  eq: int = 1, forcing: PerturbationData | None = None) -> EnsembleProcess:
    """Euler-Maruyama pass for equation ``eq`` with (Y, Z) and the other state frozen."""
    _check_grid(grid, noise)
    c = apply_forcing(c, forcing)
    return EnsembleProcess(_forward(c, frozen, noise, (eq,))[eq])


def backward_solve(c: CoefficientSet, frozen: Frozen, grid: TimeGrid, noise: BrownianEnsemble,
                   basis: RegressionBasis | None = None, eq: int = 1,
                   forcing: PerturbationData | None = None):
    """Regression pass for equation ``eq`` with both forward states frozen.

    Returns (Y, Z) as ensemble processes of widths n and d * n.
    """
    _check_grid(grid, noise)
    c = apply_forcing(c, forcing)
    Y, _, Z, _ = _backward(c, frozen, noise, basis or RegressionBasis(), (eq,))
    M, N1 = Y[eq].shape[:2]
    return EnsembleProcess(Y[eq]), EnsembleProcess(Z[eq].reshape(M, N1, -1))


def _check_grid(grid, noise):
    if grid.N != noise.grid.N or grid.T != noise.grid.T:
        raise InvalidArgument("grid does not match the noise ensemble")


# ------------------------------------------------------------------ Picard

def initial_guess(c: CoefficientSet, noise: BrownianEnsemble):
    """X at the initial coupling of zero Y, Y and Z zero."""
    M, N = noise.M, noise.grid.N
    n, d = c.n, c.d
    zero = np.zeros((M, n))
    out = []
    for i in (1, 2):
        v = TripleProcess.zeros(M, N, n, d, noise.grid.dt)
        v.X[:] = _full(c.psi(i)(zero, zero), (M, n))[:, None, :]
        v.Yhat = np.zeros_like(v.Y)
        out.append(v)
    return out


def _sweep(c, V1, V2, noise, basis):
    fr = Frozen(X1=V1.X, X2=V2.X)
    Y, Yh, Z, drops = _backward(c, fr, noise, basis)
    fr = Frozen(Y1=Y[1], Y2=Y[2], Yhat1=Yh[1], Yhat2=Yh[2], Z1=Z[1], Z2=Z[2])
    X = _forward(c, fr, noise)
    dt = noise.grid.dt
    return (TripleProcess(X[1], Y[1], Z[1], dt, Yh[1]),
            TripleProcess(X[2], Y[2], Z[2], dt, Yh[2]), drops)


def _anderson_mix(V1, V2, G1, G2, beta, hist_f, hist_x, memory):
    """Anderson update of the forward states; (Y, Z) follow the latest sweep."""
    x = np.concatenate([V1.X.ravel(), V2.X.ravel()])
    f = np.concatenate([G1.X.ravel(), G2.X.ravel()]) - x
    hist_x.append(x)
    hist_f.append(f)
    if len(hist_f) > memory + 1:
        del hist_x[0], hist_f[0]
    new = x + beta * f
    if len(hist_f) > 1:
        dF = np.stack([b - a for a, b in zip(hist_f, hist_f[1:])], axis=1)
        dX = np.stack([b - a for a, b in zip(hist_x, hist_x[1:])], axis=1)
        gamma = np.linalg.lstsq(dF, f, rcond=1e-10)[0]
        new = new - (dX + beta * dF) @ gamma
    k = V1.X.size
    out = []
    for G, part in ((G1, new[:k]), (G2, new[k:])):
        out.append(TripleProcess(part.reshape(G.X.shape), G.Y, G.Z, G.dt, G.Yhat))
    return out


def picard_solve(c: CoefficientSet, grid: TimeGrid, noise: BrownianEnsemble, config: SolverConfig,
                 init=None, tol: float | None = None):
    """Damped frozen-coupling Picard iteration.

    Each sweep runs the backward pass with the current forward states,
    then the forward pass with the fresh (Y, Z); the iterate moves by
    ``damping`` times the difference.  With ``config.anderson`` = m > 0 the
    forward states are instead extrapolated from the last m sweeps
    (Anderson mixing), which copes with strongly negative modes of the
    map that plain damping only tames slowly.  Iteration stops once the relative
    update is below ``tol`` and, when a contraction ratio rho < 1 has been
    observed, rho / (1 - rho) times the update is below ``tol`` as well;
    the second test bounds the distance to the fixed point.
    """
    _check_grid(grid, noise)
    tol = config.picard_tol if tol is None else tol
    start = time.perf_counter()
    V1, V2 = init if init is not None else initial_guess(c, noise)
    rep = SolveReport()
    theta = config.damping
    hist_f, hist_x = [], []
    for it in range(1, config.picard_max + 1):
        try:
            N1, N2, drops = _sweep(c, V1, V2, noise, config.basis)
        except NumericFailure as e:
            rep.wall_time = time.perf_counter() - start
            raise NonConvergence(f"sweep {it} failed: {e}", rep) from e
        rep.rank_drops = drops
        if config.anderson:
            N1, N2 = _anderson_mix(V1, V2, N1, N2, theta, hist_f, hist_x, config.anderson)
        elif theta != 1.0:
            N1 = V1 + (N1 - V1) * theta
            N2 = V2 + (N2 - V2) * theta
        diff = m_norm([N1 - V1, N2 - V2])
        scale = m_norm([N1, N2])
        res = diff / scale if scale > 0 else diff
        rep.residuals.append(res)
        if len(rep.residuals) > 1:
            prev = rep.residuals[-2]
            rep.ratios.append(res / prev if prev > 0 else 0.0)
        V1, V2 = N1, N2
        rep.iterations = it
        if not np.isfinite(res) or (it > 5 and res > 1e6 * max(rep.residuals[0], tol)):
            rep.wall_time = time.perf_counter() - start
            raise NonConvergence(f"Picard iteration diverged at sweep {it}", rep)
        rho = rep.ratios[-1] if rep.ratios else 0.0
        est = res * rho / (1.0 - rho) if rho < 1.0 else np.inf
        if res < tol and (not rep.ratios or est < tol):
            break
    else:
        rep.final_residual = rep.residuals[-1]
        rep.wall_time = time.perf_counter() - start
        raise NonConvergence(f"no convergence in {config.picard_max} sweeps "
                             f"(last residual {rep.residuals[-1]:.3e})", rep)
    rep.final_residual = rep.residuals[-1]
    rep.norms = (m_norm(V1), m_norm(V2))
    rep.wall_time = time.perf_counter() - start
    return V1, V2, rep


def continuation_solve(c: CoefficientSet, c0: CoefficientSet, config: SolverConfig,
                       noise: BrownianEnsemble | None = None, forcing: PerturbationData | None = None,
                       init=None, tol: float | None = None):
    """Walk the schedule from the base system to the target, warm-starting each step.

    A failed step is halved until it drops below ``config.min_alpha_step``.
    The returned report concatenates residuals of all accepted solves.
    """
    grid = config.grid
    if noise is None:
        noise = sample_brownian(grid, config.particles, c.d, config.seed)
    _check_grid(grid, noise)
    start = time.perf_counter()
    total = SolveReport()
    sched = list(config.alpha_schedule)
    a_prev = None
    V = init
    queue = sched[:]
    while queue:
        a = queue[0]
        ca = interpolate(c, c0, a, forcing)
        try:
            V1, V2, rep = picard_solve(ca, grid, noise, config, init=V, tol=tol)
        except NonConvergence as e:
            if a_prev is None or (a - a_prev) / 2 < config.min_alpha_step:
                total.wall_time = time.perf_counter() - start
                raise NonConvergence(f"continuation stalled at alpha={a:g} "
                                     f"(accepted {total.alpha_trace})", total) from e
            queue.insert(0, 0.5 * (a_prev + a))
            continue
        queue.pop(0)
        V = (V1, V2)
        a_prev = a
        total.alpha_trace.append(a)
        total.residuals.extend(rep.residuals)
        total.ratios.extend(rep.ratios)
        total.iterations += rep.iterations
        total.rank_drops = rep.rank_drops
        total.final_residual = rep.final_residual
    total.norms = (m_norm(V[0]), m_norm(V[1]))
    total.wall_time = time.perf_counter() - start
    return V[0], V[1], total


def stability_probe(c: CoefficientSet, sizes, grid: TimeGrid, noise: BrownianEnsemble,
                    config: SolverConfig, direction: PerturbationData | None = None,
                    baseline=None, tol: float | None = None):
    """Response ratios |V(s) - V(0)| / s for forcing ``s * direction``.

    The default direction is a unit constant in the forward drift of the
    first equation.  Solves are warm-started from the unforced solution.
    """
    direction = direction or PerturbationData(beta1=(None, 1.0, None))
    tol = tol if tol is not None else min(config.picard_tol, 1e-9)
    if baseline is None:
        V1, V2, _ = picard_solve(c, grid, noise, config, tol=tol)
    else:
        V1, V2 = baseline
    out = []
    for s in sizes:
        if s == 0:
            out.append(0.0)
            continue
        cs = apply_forcing(c, direction.scaled(s))
        W1, W2, _ = picard_solve(cs, grid, noise, config, init=(V1.copy(), V2.copy()), tol=tol)
        out.append(m_norm([W1 - V1, W2 - V2]) / abs(s))
    return out
