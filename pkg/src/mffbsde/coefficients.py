"""Coefficient bundles for coupled mean-field forward-backward systems.

A system is described by initial couplings psi_i(y1, y2), terminal
couplings phi_i(x1, x2, w) and generator triples
gamma_i(t, view) -> (f, b, sigma) where f is the backward drift, b the
forward drift and sigma the forward diffusion with shape (S, d, n).

Row-vector convention: a state batch ``x`` of shape (S, n) is mapped by a
matrix A as ``x @ A.T`` and by its transpose as ``x @ A``.  Stacked
diffusion matrices are stored as (d, n, .) arrays.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .convex import (ConvexFunction, ConvexSet, WeightedNorm, box,
                     grad_inverse, project, example_family, quadratic, zero_function)
from .core import InvalidArgument


def at(obj, t):
    """Evaluate a time-indexed quantity; constants pass through."""
    if callable(obj) and not isinstance(obj, (ConvexFunction, ConvexSet)):
        return obj(t)
    return obj


def _opnorm(A, ts=None) -> float:
    ts = [0.0] if ts is None else ts
    vals = []
    for t in ts:
        a = np.asarray(at(A, t), dtype=float)
        if a.ndim == 3:
            vals.append(sum(np.linalg.norm(aj, 2) for aj in a))
        elif a.size:
            vals.append(np.linalg.norm(np.atleast_2d(a), 2))
        else:
            vals.append(0.0)
    return float(max(vals))


def _stack(D, d: int, n: int, k: int) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim == 2:
        D = D.reshape(d, n, k)
    return D


@dataclass
class StructuralData:
    """Matrices, adjoint maps and constants behind the standing assumptions."""

    H: np.ndarray
    B1: object
    B2: object
    Bbar1: object
    Bbar2: object
    D1: object  # (d, n, k)
    D2: object
    tau: float
    hbar11: Callable
    hbar12: Callable
    hbar21: Callable
    hbar22: Callable
    h1: Callable  # (t, u) -> same shape as u
    h2: Callable
    L: float = np.inf
    L_b: float = 1.0
    L_sigma: float = 1.0
    L_f: float = 1.0
    L_Phi: float = 1.0
    L_Psi: float = 1.0
    L1: float = 1.0
    L2: float = 1.0
    L3: float = 1.0
    eps_mean: float = 0.0
    eps_cross: float = 0.0
    # False when each initial coupling sees only its own Y(0) (no tau mixing)
    mixing: bool = True

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if not 0.0 <= self.tau < 1.0:
            raise InvalidArgument(f"tau must lie in [0, 1), got {self.tau}")
        if not self.L3 > 0:
            raise InvalidArgument("L3 must be positive")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    def B(self, i, t):
        return np.asarray(at(self.B1 if i == 1 else self.B2, t), dtype=float)

    def Bbar(self, i, t):
        return np.asarray(at(self.Bbar1 if i == 1 else self.Bbar2, t), dtype=float)

    def D(self, i, t):
        return np.asarray(at(self.D1 if i == 1 else self.D2, t), dtype=float)

    def h(self, i):
        return self.h1 if i == 1 else self.h2

    def control_argument(self, i, t, y, mean_y, z):
        """B_i^T y + tau Bbar_i^T E[Y_i] + sum_j D_ij^T z_j."""
        return (y @ self.B(i, t) + self.tau * (np.asarray(mean_y) @ self.Bbar(i, t))
                + np.einsum("...jn,jnk->...k", z, self.D(i, t)))

    def initial_arguments(self, y1, y2):
        """(H^T y1 - tau H^T y2, H^T y2 - tau H^T y1) / (1 - tau^2), or
        (H^T y1, H^T y2) without mixing."""
        s = 1.0 - self.tau ** 2
        a1 = y1 @ self.H
        a2 = y2 @ self.H
        if not self.mixing:
            return a1, a2
        return (a1 - self.tau * a2) / s, (a2 - self.tau * a1) / s


@dataclass
class CoefficientSet:
    psi1: Callable
    psi2: Callable
    phi1: Callable
    phi2: Callable
    gamma1: Callable
    gamma2: Callable
    n: int
    d: int
    structural: StructuralData | None = None
    # per-equation hook for the feedback used by control extraction
    feedback1: Callable | None = None
    feedback2: Callable | None = None

    def psi(self, i):
        return self.psi1 if i == 1 else self.psi2

    def phi(self, i):
        return self.phi1 if i == 1 else self.phi2

    def gamma(self, i):
        return self.gamma1 if i == 1 else self.gamma2


@dataclass
class PerturbationData:
    """Forcing terms: initial shifts, terminal shifts and integrand shifts.

    Each integrand entry may be None, an array broadcastable to the
    evaluated block, or a callable (t, view) returning such an array.
    ``zeta`` entries may be arrays or callables of the terminal noise.
    """

    xi1: object = None
    xi2: object = None
    zeta1: object = None
    zeta2: object = None
    beta1: tuple = (None, None, None)  # (on f, on b, on sigma)
    beta2: tuple = (None, None, None)

    def scaled(self, s: float) -> "PerturbationData":
        def sc(v):
            if v is None:
                return None
            if callable(v):
                return lambda *a, _v=v: s * np.asarray(_v(*a))
            return s * np.asarray(v, dtype=float)
        return PerturbationData(sc(self.xi1), sc(self.xi2), sc(self.zeta1), sc(self.zeta2),
                                tuple(sc(v) for v in self.beta1), tuple(sc(v) for v in self.beta2))


def _force(v, *args):
    if v is None:
        return 0.0
    if callable(v):
        return np.asarray(v(*args), dtype=float)
    return np.asarray(v, dtype=float)


def apply_forcing(c: CoefficientSet, p: PerturbationData | None) -> CoefficientSet:
    if p is None:
        return c
    return interpolate(c, c, 1.0, p)


def interpolate(c: CoefficientSet, c0: CoefficientSet, alpha: float,
                p: PerturbationData | None = None) -> CoefficientSet:
    """alpha * c + (1 - alpha) * c0 plus the forcing p."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must lie in [0, 1], got {alpha}")
    if c.n != c0.n or c.d != c0.d:
        raise InvalidArgument("coefficient sets have different dimensions")
    p = p or PerturbationData()
    a = float(alpha)

    def mix(u, v):
        if a == 1.0:
            return u()
        if a == 0.0:
            return v()
        return a * u() + (1.0 - a) * v()

    def make_psi(i, xi):
        f, g = c.psi(i), c0.psi(i)
        return lambda y1, y2: mix(lambda: f(y1, y2), lambda: g(y1, y2)) + _force(xi)

    def make_phi(i, zeta):
        f, g = c.phi(i), c0.phi(i)
        return lambda x1, x2, w=None: (mix(lambda: f(x1, x2, w), lambda: g(x1, x2, w))
                                       + _force(zeta, w))

    def make_gamma(i, beta):
        f, g = c.gamma(i), c0.gamma(i)

        def gamma(t, view):
            if a == 1.0:
                out = f(t, view)
            elif a == 0.0:
                out = g(t, view)
            else:
                u, v = f(t, view), g(t, view)
                out = tuple(a * ui + (1.0 - a) * vi for ui, vi in zip(u, v))
            if beta == (None, None, None):
                return out
            return tuple(o + _force(bv, t, view) for o, bv in zip(out, beta))
        return gamma

    return CoefficientSet(make_psi(1, p.xi1), make_psi(2, p.xi2),
                          make_phi(1, p.zeta1), make_phi(2, p.zeta2),
                          make_gamma(1, tuple(p.beta1)), make_gamma(2, tuple(p.beta2)),
                          c.n, c.d, c.structural,
                          c.feedback1 if a == 1.0 else None,
                          c.feedback2 if a == 1.0 else None)


def base_coefficients(s: StructuralData, d: int | None = None) -> CoefficientSet:
    """The decoupled reference system built from the adjoint maps alone.

    Initial couplings are H times the hbar maps of the H-weighted
    combinations, terminal couplings and backward drifts vanish, and the
    forward drift/diffusion are B_i h_i(.) and D_i h_i(.) of the control
    argument.
    """
    n = s.n
    d = d if d is not None else s.D(1, 0.0).shape[0]
    H = s.H

    def psi1(y1, y2):
        a1, a2 = s.initial_arguments(np.asarray(y1, float), np.asarray(y2, float))
        return s.hbar11(a1) @ H.T + s.hbar12(a2) @ H.T

    def psi2(y1, y2):
        a1, a2 = s.initial_arguments(np.asarray(y1, float), np.asarray(y2, float))
        return s.hbar21(a2) @ H.T + s.hbar22(a1) @ H.T

    def phi0(x1, x2, w=None):
        return np.zeros(np.broadcast_shapes(np.shape(x1), np.shape(x2)))

    def make_gamma(i):
        def gamma(t, view):
            if "b" not in view.parts and "s" not in view.parts:
                return 0.0, 0.0, 0.0
            mean_y = view.mean_y1 if i == 1 else view.mean_y2
            u = s.control_argument(i, t, view.y, mean_y, view.z)
            hv = s.h(i)(t, u)
            b = hv @ s.B(i, t).T
            sig = np.einsum("...k,jnk->...jn", hv, s.D(i, t))
            f = np.zeros_like(b)
            return f, b, sig
        return gamma

    return CoefficientSet(psi1, psi2, phi0, phi0, make_gamma(1), make_gamma(2), n, d, s)


# ------------------------------------------------------------ control data

@dataclass
class Dynamics:
    """Linear controlled dynamics shared by both control problems.

    dX_1 = [A_1 X_1 + Abar_1 E X_1 + Abar_2 E X_2 + B_1 u_1 + tau Bbar_1 E u_1 + rho_1] dt
           + sum_j [C_1j X_1 + D_1j u_1 + kappa_1j] dW_j
    dX_2 = [A_2 X_2 + Abar_2 E X_1 + B_2 u_2 + tau Bbar_2 E u_2 + rho_2] dt
           + sum_j [C_2j X_2 + D_2j u_2 + kappa_2j] dW_j
    X_i(0) = H xi_i + x0.

    ``rho`` may be a constant (n,) vector or a callable (t, view) -> (S, n);
    ``kappa`` a constant (d, n) array or a callable (t, view) -> (S, d, n).
    """

    A1: object
    A2: object
    Abar1: object
    Abar2: object
    B1: object
    B2: object
    Bbar1: object
    Bbar2: object
    C1: object  # (d, n, n)
    C2: object
    D1: object  # (d, n, k)
    D2: object
    H: np.ndarray
    x0: np.ndarray
    rho1: object = None
    rho2: object = None
    kappa1: object = None
    kappa2: object = None
    tau: float = 0.0
    tau1: float = 0.01
    T: float = 1.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if not 0.0 <= self.tau < 1.0:
            raise InvalidArgument(f"tau must lie in [0, 1), got {self.tau}")
        for name in ("Abar1", "Abar2"):
            if _opnorm(getattr(self, name), self.sample_times()) >= self.tau1:
                raise InvalidArgument(f"{name} exceeds the mean-coupling bound tau1={self.tau1}")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def k(self) -> int:
        return np.atleast_2d(np.asarray(at(self.B1, 0.0))).shape[1]

    @property
    def d(self) -> int:
        return np.asarray(at(self.D1, 0.0)).shape[0]

    def sample_times(self, count: int = 11):
        return list(np.linspace(0.0, self.T, count))

    def mat(self, name, t):
        return np.asarray(at(getattr(self, name), t), dtype=float)

    def is_zero(self, name) -> bool:
        """True for a constant all-zero coefficient (its terms are skipped)."""
        v = getattr(self, name)
        return v is None or (not callable(v) and not np.any(np.asarray(v)))

    def rho(self, i, t, view):
        r = self.rho1 if i == 1 else self.rho2
        return _force(r, t, view)

    def kappa(self, i, t, view):
        r = self.kappa1 if i == 1 else self.kappa2
        return _force(r, t, view)

    def drift(self, i, t, x, mean_x1, mean_x2, u, mean_u, view):
        out = self.rho(i, t, view) + np.zeros_like(x)
        if not self.is_zero(f"A{i}"):
            out = out + x @ self.mat(f"A{i}", t).T
        if not self.is_zero(f"B{i}"):
            out = out + u @ self.mat(f"B{i}", t).T
        if self.tau and not self.is_zero(f"Bbar{i}"):
            out = out + self.tau * (mean_u @ self.mat(f"Bbar{i}", t).T)
        means = (("Abar1", mean_x1), ("Abar2", mean_x2)) if i == 1 else (("Abar2", mean_x1),)
        for name, mx in means:
            if not self.is_zero(name):
                out = out + np.asarray(mx) @ self.mat(name, t).T
        return out

    def diffusion(self, i, t, x, u, view):
        out = self.kappa(i, t, view)
        if not self.is_zero(f"C{i}"):
            out = out + np.einsum("...n,jmn->...jm", x, self.mat(f"C{i}", t))
        if not self.is_zero(f"D{i}"):
            out = out + np.einsum("...k,jnk->...jn", u, self.mat(f"D{i}", t))
        return out

    def adjoint_drift(self, i, t, x_grad, y, mean_y1, mean_y2, z):
        """Backward drift -(grad + A_i^T y + C_i^T z + mean-field transposes)."""
        out = x_grad + np.zeros_like(y)
        if not self.is_zero(f"A{i}"):
            out = out + y @ self.mat(f"A{i}", t)
        if not self.is_zero(f"C{i}"):
            out = out + np.einsum("...jn,jnm->...m", z, self.mat(f"C{i}", t))
        means = (("Abar1", mean_y1), ("Abar2", mean_y2)) if i == 1 else (("Abar2", mean_y1),)
        for name, my in means:
            if not self.is_zero(name):
                out = out + np.asarray(my) @ self.mat(name, t)
        return -out

    def control_argument(self, i, t, y, mean_y, z):
        out = np.zeros(y.shape[:-1] + (self.k,))
        if not self.is_zero(f"B{i}"):
            out = out + y @ self.mat(f"B{i}", t)
        if self.tau and not self.is_zero(f"Bbar{i}"):
            out = out + self.tau * (np.asarray(mean_y) @ self.mat(f"Bbar{i}", t))
        if not self.is_zero(f"D{i}"):
            out = out + np.einsum("...jn,jnk->...k", z, self.mat(f"D{i}", t))
        return out


@dataclass
class LCProblemData:
    """Linear dynamics with a separable convex cost.

    J = f11(xi1 + tau xi2) + f12(xi2 + tau xi1)
        + E[ f21(S) + f22(S) + int f31(X1) + f32(X2) + f41(u1) + f42(u2) dt ],
    S = X1(T) + X2(T).  Running functions may be time-indexed callables
    t -> ConvexFunction.
    """

    dyn: Dynamics
    f11: ConvexFunction
    f12: ConvexFunction
    f21: ConvexFunction
    f22: ConvexFunction
    f31: object
    f32: object
    f41: object
    f42: object

    def __post_init__(self):
        for name in ("f11", "f12"):
            if not getattr(self, name).delta > 0:
                raise InvalidArgument(f"{name} must be uniformly convex")
        for name in ("f41", "f42"):
            if not at(getattr(self, name), 0.0).delta > 0:
                raise InvalidArgument(f"{name} must be uniformly convex")

    @property
    def delta(self) -> float:
        return float(min(self.f11.delta, self.f12.delta,
                         min(at(self.f41, t).delta for t in self.dyn.sample_times()),
                         min(at(self.f42, t).delta for t in self.dyn.sample_times())))

    def f4(self, i, t) -> ConvexFunction:
        return at(self.f41 if i == 1 else self.f42, t)

    def f3(self, i, t) -> ConvexFunction:
        return at(self.f31 if i == 1 else self.f32, t)

    def feedback(self, i, t, y, mean_y, z):
        """(grad f4i)^{-1}(-(B_i^T y + tau Bbar_i^T E[Y_i] + D_i^T z))."""
        return grad_inverse(self.f4(i, t), -self.dyn.control_argument(i, t, y, mean_y, z))

    def initial_controls(self, y1, y2):
        """Optimal initial controls from Y_1(0), Y_2(0)."""
        tau = self.dyn.tau
        s = 1.0 - tau ** 2
        H = self.dyn.H
        a1 = np.asarray(y1) @ H
        a2 = np.asarray(y2) @ H
        p = grad_inverse(self.f11, -(a1 - tau * a2) / s)
        q = grad_inverse(self.f12, -(a2 - tau * a1) / s)
        return (p - tau * q) / s, (q - tau * p) / s


@dataclass
class LQICProblemData:
    """Linear dynamics, quadratic cost and closed convex input constraints.

    J = 1/2 <M1 xi1, xi1> + 1/2 <M2 xi2, xi2>
        + 1/2 E[ <(G1 + G2) S, S> + int <Q1 X1, X1> + <Q2 X2, X2>
                 + <R1 u1, u1> + <R2 u2, u2> dt ].
    ``U`` may be a ConvexSet or a callable t -> ConvexSet; G1, G2 may be
    callables of the terminal noise returning per-particle matrices.
    """

    dyn: Dynamics
    M1: np.ndarray
    M2: np.ndarray
    G1: object
    G2: object
    Q1: object
    Q2: object
    R1: object
    R2: object
    delta: float
    U0: ConvexSet
    U: object

    def __post_init__(self):
        for name in ("M1", "M2"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("M1", "M2", "G1", "G2", "Q1", "Q2", "R1", "R2"):
            v = getattr(self, name)
            if callable(v):
                continue
            v = np.atleast_2d(np.asarray(v, dtype=float))
            if not np.allclose(v, v.T):
                raise InvalidArgument(f"{name} must be symmetric")
            setattr(self, name, v)
        if not self.delta > 0:
            raise InvalidArgument("delta must be positive")

    def R(self, i, t):
        return np.atleast_2d(np.asarray(at(self.R1 if i == 1 else self.R2, t), dtype=float))

    def Q(self, i, t):
        return np.atleast_2d(np.asarray(at(self.Q1 if i == 1 else self.Q2, t), dtype=float))

    def M(self, i):
        return self.M1 if i == 1 else self.M2

    def Uset(self, t) -> ConvexSet:
        return at(self.U, t)

    def G_sum(self, w=None):
        g = []
        for G in (self.G1, self.G2):
            g.append(np.asarray(G(w), dtype=float) if callable(G) else G)
        return g[0] + g[1]

    def feedback(self, i, t, y, mean_y, z):
        """Pi_U(-R_i^{-1}(B_i^T y + tau Bbar_i^T E[Y_i] + D_i^T z)) in the R_i-norm."""
        R = self.R(i, t)
        v = -np.linalg.solve(R, self.dyn.control_argument(i, t, y, mean_y, z)[..., None])[..., 0]
        return project(self.Uset(t), WeightedNorm(R), v)

    def initial_control(self, i, y):
        M = self.M(i)
        v = -np.linalg.solve(M, (np.asarray(y) @ self.dyn.H)[..., None])[..., 0]
        return project(self.U0, WeightedNorm(M), v)


# ------------------------------------------------------- Hamiltonian systems

def _hamiltonian_gammas(dyn: Dynamics, feedback, grad3):
    """Generator triples shared by both control problems."""

    def make(i):
        def gamma(t, view):
            f = b = sig = 0.0
            if "b" in view.parts or "s" in view.parts:
                mean_y = view.mean_y1 if i == 1 else view.mean_y2
                u = feedback(i, t, view.y, mean_y, view.z)
                mean_u = np.add.reduce(u, axis=0) / u.shape[0] if u.ndim > 1 else u
                b = dyn.drift(i, t, view.x, view.mean_x1, view.mean_x2, u, mean_u, view)
                sig = dyn.diffusion(i, t, view.x, u, view)
            if "f" in view.parts:
                f = dyn.adjoint_drift(i, t, grad3(i, t, view.x), view.y, view.mean_y1,
                                      view.mean_y2, view.z)
            return f, b, sig
        return gamma
    return make(1), make(2)


def _lc_constants(lc: LCProblemData) -> dict:
    dyn = lc.dyn
    ts = dyn.sample_times()
    tau = dyn.tau
    s = 1.0 - tau ** 2
    Lh = max(1.0 / min(lc.f4(i, t).delta for t in ts) for i in (1, 2))
    nH = _opnorm(dyn.H)
    out = {"L_b": 0.0, "L_sigma": 0.0, "L_f": 0.0, "eps_mean": 0.0}
    for i in (1, 2):
        nA, nB, nBb = (_opnorm(getattr(dyn, f"{x}{i}"), ts) for x in ("A", "B", "Bbar"))
        nC, nD = _opnorm(getattr(dyn, f"C{i}"), ts), _opnorm(getattr(dyn, f"D{i}"), ts)
        lip3 = max((lc.f3(i, t).lip_grad or 0.0) for t in ts)
        gain = Lh * (nB + nD)
        out["L_b"] = max(out["L_b"], nA + nB * gain + tau * nBb * gain)
        out["L_sigma"] = max(out["L_sigma"], nC + nD * gain)
        out["L_f"] = max(out["L_f"], lip3 + nA + nC)
        mean_part = (_opnorm(dyn.Abar1, ts) + _opnorm(dyn.Abar2, ts)
                     + Lh * tau * nBb * (nB + nD + tau * nBb))
        out["eps_mean"] = max(out["eps_mean"], mean_part)
    lip2 = (lc.f21.lip_grad or 0.0) + (lc.f22.lip_grad or 0.0)
    i11, i12 = 1.0 / lc.f11.delta, 1.0 / lc.f12.delta
    own = nH / s * (nH / s) * (i11 + tau * tau * i12)
    cross = nH / s * (nH / s) * (tau * i11 + tau * i12)
    own2 = nH / s * (nH / s) * (i12 + tau * tau * i11)
    out["L_Phi"] = lip2
    out["L_Psi"] = max(own, own2)
    out["eps_cross"] = max(lip2, cross)
    out["L2"] = max(Lh, i11 / s, i12 / s, tau * i11 / s, tau * i12 / s)
    out["L3"] = min(min(lc.f4(i, t).delta for t in ts for i in (1, 2)), lc.f11.delta * s, lc.f12.delta * s)
    out["L1"] = out["L2"]
    return out


def lc_hamiltonian(lc: LCProblemData) -> CoefficientSet:
    """Stochastic Hamiltonian system of the linear-convex problem."""
    dyn = lc.dyn
    tau = dyn.tau
    s = 1.0 - tau ** 2

    def psi1(y1, y2):
        xi1, _ = lc.initial_controls(y1, y2)
        return xi1 @ dyn.H.T + dyn.x0

    def psi2(y1, y2):
        _, xi2 = lc.initial_controls(y1, y2)
        return xi2 @ dyn.H.T + dyn.x0

    def phi(x1, x2, w=None):
        S = np.asarray(x1) + np.asarray(x2)
        return lc.f21.grad(S) + lc.f22.grad(S)

    def grad3(i, t, x):
        return lc.f3(i, t).grad(x)

    g1, g2 = _hamiltonian_gammas(dyn, lc.feedback, grad3)

    def inv(f, scale):
        return lambda v: scale * grad_inverse(f, -np.asarray(v, dtype=float))

    sd = StructuralData(
        dyn.H, dyn.B1, dyn.B2, dyn.Bbar1, dyn.Bbar2, dyn.D1, dyn.D2, tau,
        inv(lc.f11, 1.0 / s), inv(lc.f12, -tau / s), inv(lc.f12, 1.0 / s), inv(lc.f11, -tau / s),
        lambda t, u: grad_inverse(lc.f4(1, t), -np.asarray(u, dtype=float)),
        lambda t, u: grad_inverse(lc.f4(2, t), -np.asarray(u, dtype=float)),
        **_lc_constants(lc))
    return CoefficientSet(psi1, psi2, phi, phi, g1, g2, dyn.n, dyn.d, sd,
                          lambda t, y, my, z: lc.feedback(1, t, y, my, z),
                          lambda t, y, my, z: lc.feedback(2, t, y, my, z))


def lqic_hamiltonian(lq: LQICProblemData) -> CoefficientSet:
    """Stochastic Hamiltonian system of the constrained linear-quadratic problem."""
    dyn = lq.dyn
    ts = dyn.sample_times()
    for i in (1, 2):
        for t in ts:
            if np.linalg.eigvalsh(lq.R(i, t))[0] <= 0:
                raise InvalidArgument(f"R{i}({t:g}) is singular or indefinite")

    def psi(i):
        def f(y1, y2):
            y = y1 if i == 1 else y2
            return lq.initial_control(i, y) @ dyn.H.T + dyn.x0
        return f

    def phi(x1, x2, w=None):
        S = np.asarray(x1) + np.asarray(x2)
        G = lq.G_sum(w)
        if G.ndim == 3:
            return np.einsum("sij,sj->si", G, S)
        return S @ G.T

    def grad3(i, t, x):
        return x @ lq.Q(i, t).T

    g1, g2 = _hamiltonian_gammas(dyn, lq.feedback, grad3)

    def hbar(i):
        def f(v):
            v = -np.linalg.solve(lq.M(i), np.asarray(v, dtype=float)[..., None])[..., 0]
            return project(lq.U0, WeightedNorm(lq.M(i)), v)
        return f

    def h(i):
        def f(t, u):
            R = lq.R(i, t)
            v = -np.linalg.solve(R, np.asarray(u, dtype=float)[..., None])[..., 0]
            return project(lq.Uset(t), WeightedNorm(R), v)
        return f

    zero = lambda v: np.zeros_like(np.asarray(v, dtype=float))
    Rnorm = max(np.linalg.eigvalsh(lq.R(i, t))[-1] for i in (1, 2) for t in ts)
    Rmin = min(np.linalg.eigvalsh(lq.R(i, t))[0] for i in (1, 2) for t in ts)
    Mmin = min(np.linalg.eigvalsh(lq.M(i))[0] for i in (1, 2))
    nB = max(_opnorm(dyn.B1, ts), _opnorm(dyn.B2, ts))
    nD = max(_opnorm(dyn.D1, ts), _opnorm(dyn.D2, ts))
    Lh = np.sqrt(Rnorm / Rmin) / Rmin
    const = dict(
        L_b=max(_opnorm(dyn.A1, ts), _opnorm(dyn.A2, ts)) + nB * Lh * (nB + nD),
        L_sigma=max(_opnorm(dyn.C1, ts), _opnorm(dyn.C2, ts)) + nD * Lh * (nB + nD),
        L_f=max(np.linalg.norm(lq.Q(i, t), 2) for i in (1, 2) for t in ts)
        + max(_opnorm(dyn.A1, ts), _opnorm(dyn.A2, ts)) + max(_opnorm(dyn.C1, ts), _opnorm(dyn.C2, ts)),
        L_Phi=float(np.linalg.norm(lq.G_sum(None), 2)) if not callable(lq.G1) and not callable(lq.G2) else 1.0,
        L_Psi=_opnorm(dyn.H) ** 2 / Mmin,
        L2=max(Lh, 1.0 / Mmin),
        L3=min(lq.delta, Rmin, Mmin),
        eps_mean=_opnorm(dyn.Abar1, ts) + _opnorm(dyn.Abar2, ts)
        + dyn.tau * max(_opnorm(dyn.Bbar1, ts), _opnorm(dyn.Bbar2, ts)) * Lh * (nB + nD + 1.0),
        eps_cross=float(np.linalg.norm(lq.G_sum(None), 2)) if not callable(lq.G1) and not callable(lq.G2) else 1.0,
    )
    sd = StructuralData(dyn.H, dyn.B1, dyn.B2, dyn.Bbar1, dyn.Bbar2, dyn.D1, dyn.D2, dyn.tau,
                        hbar(1), zero, hbar(2), zero, h(1), h(2), mixing=False, **const)
    return CoefficientSet(psi(1), psi(2), phi, phi, g1, g2, dyn.n, dyn.d, sd,
                          lambda t, y, my, z: lq.feedback(1, t, y, my, z),
                          lambda t, y, my, z: lq.feedback(2, t, y, my, z))


# ------------------------------------------------------------- the example

class _SineOfNoise:
    """sin(W(t)) as a (S, d, 1) diffusion shift.

    Solver views slice one shared path array; sin of the whole array is
    computed once per ensemble and then indexed by node.
    """

    def __init__(self):
        self._base = None
        self._vals = None

    def __call__(self, t, view):
        w = view.w
        if w is None:
            return np.zeros((1, 1, 1))
        base = w.base
        if (view.node is not None and isinstance(base, np.ndarray) and base.ndim == 3
                and base.shape[0] == w.shape[0] and np.shares_memory(base[:, view.node], w)
                and np.array_equal(base[:, view.node], w)):
            if self._base is None or self._base() is not base:
                self._base = weakref.ref(base)
                self._vals = np.sin(base)
            return self._vals[:, view.node][..., None]
        return np.sin(w)[..., None]


def exponential_lc_example(coupling: float = 1e-3) -> LCProblemData:
    """Scalar problem with exponential running costs and sin(W) volatility.

    dX_1 = c E[X_2] dt + [u_1 + sin W] dW,  dX_2 = c E[X_1] dt + [u_2 + sin W] dW,
    X_i(0) = xi_i,  J = f(xi1) + f(xi2) + E[1/4 |X_1(1) + X_2(1)|^2 + int f(u1) + f(u2)]
    with f(u) = exp|u| - |u| - 1 and c = 1/1000.
    """
    f = example_family()
    z1 = np.zeros((1, 1))

    kappa = _SineOfNoise()

    dyn = Dynamics(A1=z1, A2=z1, Abar1=z1, Abar2=coupling * np.ones((1, 1)),
                   B1=z1, B2=z1, Bbar1=z1, Bbar2=z1,
                   C1=np.zeros((1, 1, 1)), C2=np.zeros((1, 1, 1)),
                   D1=np.ones((1, 1, 1)), D2=np.ones((1, 1, 1)),
                   H=np.ones((1, 1)), x0=np.zeros(1), kappa1=kappa, kappa2=kappa,
                   tau=0.0, tau1=0.01, T=1.0)
    return LCProblemData(dyn, f, f, quadratic(0.5 * np.eye(1)), zero_function(1),
                         zero_function(1), zero_function(1), f, f)


def scalar_lqic_example() -> LQICProblemData:
    """Scalar constrained linear-quadratic instance with active bounds.

    Every coefficient is nonzero, the mean-field couplings included; the
    box constraints bind for xi1 and for a large share of both process
    controls.  Small enough for the direct optimizer.
    """
    o = np.ones((1, 1))
    o3 = np.ones((1, 1, 1))
    dyn = Dynamics(A1=0.2 * o, A2=-0.1 * o, Abar1=0.005 * o, Abar2=0.005 * o,
                   B1=o, B2=0.5 * o, Bbar1=0.3 * o, Bbar2=0.3 * o,
                   C1=0.1 * o3, C2=0.2 * o3, D1=0.5 * o3, D2=0.3 * o3,
                   H=o, x0=np.ones(1), rho1=np.array([0.1]), rho2=np.array([0.1]),
                   kappa1=0.2 * o, kappa2=0.2 * o, tau=0.5)
    return LQICProblemData(dyn, o, 2.0 * o, o, 0.5 * o, o, 0.5 * o, o, 2.0 * o, 0.5,
                           box(-0.5, 0.5, 1), box(-0.6, -0.25, 1))
