"""Time grids, Brownian ensembles, ensemble containers and solution norms.

Arrays follow one layout throughout the package: particles first, then
time nodes, then the state components.  A forward or backward state of
width ``n`` is stored as ``(M, N + 1, n)``.  A volatility process is
stored as ``(M, N + 1, d, n)`` so that ``z[..., j, :]`` is the loading on
the j-th Brownian coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidArgument(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


class NonConvergence(NumericFailure):
    """Iteration budget or step floor exhausted; ``report`` holds the trace."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class AdmissibilityViolation(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def __len__(self):
        return self.N + 1


def make_grid(T: float, N: int) -> TimeGrid:
    """Uniform grid with ``N`` steps on ``[0, T]``."""
    if not T > 0:
        raise InvalidArgument(f"horizon must be positive, got T={T}")
    if int(N) != N or N < 1:
        raise InvalidArgument(f"step count must be a positive integer, got N={N}")
    return TimeGrid(float(T), int(N))


@dataclass(frozen=True)
class BrownianEnsemble:
    grid: TimeGrid
    increments: np.ndarray  # (M, N, d)
    seed: int
    _path: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def path(self) -> np.ndarray:
        """Cumulative noise W(t_n), shape (M, N + 1, d), W(0) = 0."""
        if self._path is None:
            w = np.zeros((self.M, self.grid.N + 1, self.d))
            np.cumsum(self.increments, axis=1, out=w[:, 1:])
            object.__setattr__(self, "_path", w)
        return self._path


def sample_brownian(grid: TimeGrid, M: int, d: int = 1, seed: int = 0) -> BrownianEnsemble:
    """Gaussian increments with variance ``grid.dt``.

    Every particle owns a Philox stream keyed on ``(seed, particle)``; the
    counter then runs over (node, dim).  Particle ``m`` therefore sees the
    same path whatever the ensemble size.
    """
    if M < 1 or d < 1:
        raise InvalidArgument(f"need M >= 1 and d >= 1, got M={M}, d={d}")
    seed = int(seed)
    if seed < 0:
        raise InvalidArgument("seed must be nonnegative")
    out = np.empty((M, grid.N, d))
    scale = np.sqrt(grid.dt)
    for m in range(M):
        gen = np.random.Generator(np.random.Philox(key=seed + (m << 64)))
        out[m] = gen.standard_normal((grid.N, d))
    out *= scale
    out.setflags(write=False)
    return BrownianEnsemble(grid, out, seed)


@dataclass
class EnsembleProcess:
    values: np.ndarray  # (M, N + 1, width)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise InvalidArgument("ensemble process must be shaped (M, N+1, width)")

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def particles(self) -> int:
        return self.values.shape[0]

    def mean(self) -> np.ndarray:
        """Particle means at every node, shape (N + 1, width)."""
        return _fixed_order_mean(self.values)


def _fixed_order_mean(a: np.ndarray) -> np.ndarray:
    # pairwise summation along axis 0 is deterministic for a given shape
    return np.add.reduce(a, axis=0) / a.shape[0]


def empirical_mean(p, node: int | None = None) -> np.ndarray:
    """Particle average of an ensemble, at one node or at all nodes."""
    values = p.values if isinstance(p, EnsembleProcess) else np.asarray(p, dtype=float)
    if values.shape[0] == 0:
        raise InvalidArgument("empty ensemble")
    if node is None:
        return _fixed_order_mean(values)
    if node > values.shape[1] - 1:
        raise InvalidArgument(f"node {node} beyond last node {values.shape[1] - 1}")
    return _fixed_order_mean(values[:, node])


@dataclass
class TripleProcess:
    """One equation's unknowns V = (X, Y, Z) on a shared ensemble."""

    X: np.ndarray  # (M, N + 1, n)
    Y: np.ndarray  # (M, N + 1, n)
    Z: np.ndarray  # (M, N + 1, d, n)
    dt: float | None = None
    # regression estimate of E[Y_{n+1} | F_n]; the discrete scheme feeds it
    # into drift, diffusion and feedback controls
    Yhat: np.ndarray | None = None

    @classmethod
    def zeros(cls, M: int, N: int, n: int, d: int, dt: float | None = None) -> "TripleProcess":
        return cls(np.zeros((M, N + 1, n)), np.zeros((M, N + 1, n)),
                   np.zeros((M, N + 1, d, n)), dt)

    @property
    def shape(self):
        M, N1, n = self.X.shape
        return M, N1 - 1, n, self.Z.shape[2]

    def as_processes(self):
        """X, Y and Z as width-n, width-n and width-n*d ensemble processes."""
        M, N1 = self.X.shape[:2]
        return (EnsembleProcess(self.X), EnsembleProcess(self.Y),
                EnsembleProcess(self.Z.reshape(M, N1, -1)))

    def copy(self) -> "TripleProcess":
        return TripleProcess(self.X.copy(), self.Y.copy(), self.Z.copy(), self.dt,
                             None if self.Yhat is None else self.Yhat.copy())

    @property
    def y_slot(self) -> np.ndarray:
        return self.Y if self.Yhat is None else self.Yhat

    def _combine(self, other, op):
        yh = None
        if self.Yhat is not None and other.Yhat is not None:
            yh = op(self.Yhat, other.Yhat)
        return TripleProcess(op(self.X, other.X), op(self.Y, other.Y), op(self.Z, other.Z), self.dt, yh)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, a: float):
        return TripleProcess(a * self.X, a * self.Y, a * self.Z, self.dt,
                             None if self.Yhat is None else a * self.Yhat)

    __rmul__ = __mul__


@dataclass
class ExtendedStateView:
    """Arguments of a drift/diffusion/generator evaluation at one node.

    The four mean blocks are vectors of width n (or one row per sample when
    a checker draws them independently).  ``x``, ``y`` have shape (S, n) and
    ``z`` has shape (S, d, n).  ``w`` is the cumulative noise at the node,
    shape (S, d), used by random coefficients such as sin(W(t)).  ``node``
    is the grid index when the view comes from a solver sweep.  ``parts``
    names the outputs the caller will use ("f", "b", "s"); generators may
    return 0.0 for the others.
    """

    mean_x1: np.ndarray
    mean_y1: np.ndarray
    mean_x2: np.ndarray
    mean_y2: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray | None = None
    node: int | None = None
    parts: str = "fbs"

    def replace(self, **kw) -> "ExtendedStateView":
        d = dict(self.__dict__)
        d.update(kw)
        return ExtendedStateView(**d)


def _sup_sq(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    return np.max(np.sum(flat * flat, axis=2), axis=1)


def _int_sq(a: np.ndarray, dt: float) -> np.ndarray:
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    return np.sum(np.sum(flat * flat, axis=2), axis=1) * dt


def m_norm(v, dt: float | None = None) -> float:
    """Discrete solution norm of one triple or of a pair of triples.

    Per particle: grid sup of |X|^2 plus grid sup of |Y|^2 plus the
    left-endpoint sum of |Z|^2 dt (node N excluded), then particle mean,
    then square root.  A pair (V1, V2) adds both contributions.  The step
    comes from ``dt``, else from the triple, else a unit horizon is assumed.
    """
    triples = v if isinstance(v, (tuple, list)) else (v,)
    total = 0.0
    for tr in triples:
        N = tr.X.shape[1] - 1
        step = dt if dt is not None else (tr.dt if tr.dt is not None else 1.0 / N)
        per = _sup_sq(tr.X) + _sup_sq(tr.Y) + _int_sq(tr.Z[:, :N], step)
        total += float(_fixed_order_mean(per))
    return float(np.sqrt(total))


def script_m_norm(phi1, phi2=None, phi3=None, dt: float | None = None) -> float:
    """Discrete integrand norm: sqrt(mean over particles of sum |phi|^2 dt).

    Each component is shaped (M, N + 1, ...) and the left-endpoint rule
    over nodes 0..N-1 is used.
    """
    parts = [p for p in (phi1, phi2, phi3) if p is not None]
    total = 0.0
    for p in parts:
        p = np.asarray(p, dtype=float)
        N = p.shape[1] - 1
        step = (1.0 / N) if dt is None else dt
        total += float(_fixed_order_mean(_int_sq(p[:, :N], step)))
    return float(np.sqrt(total))
