"""Convex functions, gradient inversion and weighted projections.

Vectors live on the last axis; every routine broadcasts over leading
axes so a whole particle ensemble can be processed in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import InvalidArgument, NumericFailure


@dataclass
class ConvexFunction:
    """A convex function bundle.

    ``eval`` maps (..., n) to (...), ``grad`` maps (..., n) to (..., n).
    ``delta`` is the strong convexity parameter (0 for merely convex).
    ``hess`` (optional) returns (..., n, n) and drives Newton steps;
    ``grad_inv`` (optional) is a closed-form inverse gradient.
    """

    eval: Callable
    grad: Callable
    delta: float = 0.0
    lip_grad: float | None = None
    hess: Callable | None = None
    grad_inv: Callable | None = None
    name: str = ""


def example_family() -> ConvexFunction:
    """f(u) = sum(exp|u| - |u| - 1), strongly convex with delta = 1."""

    def ev(u):
        a = np.abs(u)
        return np.sum(np.expm1(a) - a, axis=-1)

    def gr(u):
        return np.sign(u) * np.expm1(np.abs(u))

    def he(u):
        e = np.exp(np.abs(u))
        return e[..., :, None] * np.eye(u.shape[-1])

    def inv(v):
        return np.sign(v) * np.log1p(np.abs(v))

    return ConvexFunction(ev, gr, 1.0, None, he, inv, "exponential")


def quadratic(Q, c=None) -> ConvexFunction:
    """f(x) = 1/2 <Qx, x> + <c, x> for symmetric Q."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if not np.allclose(Q, Q.T):
        raise InvalidArgument("quadratic needs a symmetric matrix")
    n = Q.shape[0]
    c = np.zeros(n) if c is None else np.asarray(c, dtype=float).reshape(n)
    eig = np.linalg.eigvalsh(Q)
    delta = max(float(eig[0]), 0.0)

    def ev(x):
        return 0.5 * np.einsum("...i,ij,...j->...", x, Q, x) + x @ c

    def gr(x):
        return x @ Q.T + c

    def he(x):
        return np.broadcast_to(Q, x.shape[:-1] + Q.shape)

    inv = None
    if delta > 0:
        Qinv = np.linalg.inv(Q)

        def inv(v):
            return (v - c) @ Qinv.T

    return ConvexFunction(ev, gr, delta, float(eig[-1]), he, inv, "quadratic")


def linear(c) -> ConvexFunction:
    c = np.atleast_1d(np.asarray(c, dtype=float))

    def ev(x):
        return x @ c

    def gr(x):
        return np.broadcast_to(c, x.shape).copy()

    def he(x):
        return np.zeros(x.shape + (c.size,))

    return ConvexFunction(ev, gr, 0.0, 0.0, he, None, "linear")


def zero_function(n: int = 1) -> ConvexFunction:
    return linear(np.zeros(n))


def grad_inverse(f: ConvexFunction, v, tol: float = 1e-10, max_iter: int = 200,
                 method: str = "auto") -> np.ndarray:
    """Solve grad f(x) = v for a strongly convex f.

    ``method='auto'`` starts from the closed form when one is supplied and
    polishes with Newton; ``method='newton'`` ignores the closed form.
    Newton steps are damped by backtracking on |grad f(x) - v|; a
    bisection (scalar case) or a monotone gradient iteration takes over
    when backtracking stalls.
    """
    if not f.delta > 0:
        raise InvalidArgument("gradient inversion needs a strongly convex function")
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 0
    vv = v.reshape(1, 1) if scalar else v
    if vv.ndim == 1:
        vv = vv[None, :]
        squeeze = True
    else:
        squeeze = False
    shape = vv.shape
    vv = vv.reshape(-1, shape[-1])

    if method == "auto" and f.grad_inv is not None:
        x = np.array(f.grad_inv(vv), dtype=float)
    else:
        x = np.zeros_like(vv)
    x = _newton(f, x, vv, tol, max_iter)

    x = x.reshape(shape)
    if scalar:
        return x.reshape(())
    return x[0] if squeeze else x


def _residual(f, x, v):
    with np.errstate(over="ignore", invalid="ignore"):
        r = f.grad(x) - v
    nr = np.sqrt(np.sum(r * r, axis=-1))
    nr = np.where(np.isfinite(nr), nr, np.inf)
    return r, nr


def _newton(f, x, v, tol, max_iter):
    # tolerance is relative for large targets, where rounding dominates
    tol = tol * np.maximum(1.0, np.sqrt(np.sum(v * v, axis=-1)))
    r, nr = _residual(f, x, v)
    active = nr > tol
    it = 0
    while np.any(active) and it < max_iter:
        it += 1
        idx = np.nonzero(active)[0]
        xa, ra, na = x[idx], r[idx], nr[idx]
        if f.hess is not None:
            H = f.hess(xa)
            try:
                p = np.linalg.solve(H, ra[..., None])[..., 0]
            except np.linalg.LinAlgError:
                p = ra / f.delta
        else:
            p = ra / (f.lip_grad if f.lip_grad else f.delta)
        t = np.ones(len(idx))
        accepted = np.zeros(len(idx), dtype=bool)
        xn = xa.copy()
        nn = na.copy()
        for _ in range(60):
            trial = xa - t[:, None] * p
            _, nt = _residual(f, trial, v[idx])
            ok = (~accepted) & (nt < (1.0 - 1e-4 * t) * na)
            xn[ok] = trial[ok]
            nn[ok] = nt[ok]
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, 0.5 * t)
        stalled = ~accepted
        if np.any(stalled):
            xn[stalled] = _fallback(f, xa[stalled], v[idx[stalled]], tol[idx[stalled]])
            _, nn[stalled] = _residual(f, xn[stalled], v[idx[stalled]])
        x[idx] = xn
        rr, nr_new = _residual(f, xn, v[idx])
        r[idx] = rr
        nr[idx] = nr_new
        active = nr > tol
    if np.any(active):
        raise NumericFailure(f"gradient inversion stalled: worst residual {nr.max():.3e}")
    return x


def _fallback(f, x, v, tol):
    _, nr = _residual(f, x, v)
    if x.shape[-1] == 1:
        # grad f is increasing; the root lies within |r|/delta of x
        rad = nr / f.delta
        lo = x[:, 0] - rad
        hi = x[:, 0] + rad
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            g, _ = _residual(f, mid[:, None], v)
            up = g[:, 0] > 0
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
            if np.all(hi - lo < tol * 1e-3):
                break
        return (0.5 * (lo + hi))[:, None]
    if f.lip_grad is None:
        raise NumericFailure("Newton stalled and no gradient Lipschitz constant for the fallback")
    step = f.delta / f.lip_grad ** 2
    for _ in range(100000):
        r, nr = _residual(f, x, v)
        if np.all(nr <= tol):
            break
        x = x - step * r
    return x


# ---------------------------------------------------------------- sets

@dataclass
class ConvexSet:
    """Closed convex set from a fixed catalog.

    kinds: ``full``, ``box`` (lo, hi), ``ball`` (center, radius),
    ``halfspace`` (a, b meaning <a, x> <= b), ``singleton`` (point),
    ``product`` (parts, a list of sets stacked along the vector axis).
    """

    kind: str
    dim: int
    params: dict = field(default_factory=dict)

    def contains(self, x, tol: float = 1e-12):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "full":
            return np.ones(x.shape[:-1], dtype=bool)
        if self.kind == "box":
            return np.all((x >= p["lo"] - tol) & (x <= p["hi"] + tol), axis=-1)
        if self.kind == "ball":
            return np.linalg.norm(x - p["center"], axis=-1) <= p["radius"] + tol
        if self.kind == "halfspace":
            return x @ p["a"] <= p["b"] + tol
        if self.kind == "singleton":
            return np.all(np.abs(x - p["point"]) <= tol, axis=-1)
        if self.kind == "product":
            out = np.ones(x.shape[:-1], dtype=bool)
            for part, sl in zip(p["parts"], _slices(p["parts"])):
                out &= part.contains(x[..., sl], tol)
            return out
        raise InvalidArgument(f"unsupported set kind {self.kind!r}")

    def feasible_point(self) -> np.ndarray:
        p = self.params
        if self.kind == "full":
            return np.zeros(self.dim)
        if self.kind == "box":
            return np.clip(np.zeros(self.dim), p["lo"], p["hi"])
        if self.kind == "ball":
            return p["center"].copy()
        if self.kind == "halfspace":
            a, b = p["a"], p["b"]
            return np.zeros(self.dim) if b >= 0 else a * (b / (a @ a))
        if self.kind == "singleton":
            return p["point"].copy()
        if self.kind == "product":
            return np.concatenate([q.feasible_point() for q in p["parts"]])
        raise InvalidArgument(f"unsupported set kind {self.kind!r}")


def _slices(parts):
    out, start = [], 0
    for q in parts:
        out.append(slice(start, start + q.dim))
        start += q.dim
    return out


def full_space(n: int) -> ConvexSet:
    return ConvexSet("full", n)


def box(lo, hi, n: int | None = None) -> ConvexSet:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    n = n or max(lo.size, hi.size)
    lo = np.broadcast_to(lo, (n,)).copy()
    hi = np.broadcast_to(hi, (n,)).copy()
    if np.any(lo > hi):
        raise InvalidArgument("box needs lo <= hi")
    return ConvexSet("box", n, {"lo": lo, "hi": hi})


def ball(center, radius: float) -> ConvexSet:
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if radius < 0:
        raise InvalidArgument("ball radius must be nonnegative")
    return ConvexSet("ball", center.size, {"center": center, "radius": float(radius)})


def halfspace(a, b: float) -> ConvexSet:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if not np.any(a):
        raise InvalidArgument("halfspace normal must be nonzero")
    return ConvexSet("halfspace", a.size, {"a": a, "b": float(b)})


def singleton(point) -> ConvexSet:
    point = np.atleast_1d(np.asarray(point, dtype=float))
    return ConvexSet("singleton", point.size, {"point": point})


def product(*parts: ConvexSet) -> ConvexSet:
    return ConvexSet("product", sum(q.dim for q in parts), {"parts": list(parts)})


# ---------------------------------------------------------- weighted norms

@dataclass
class WeightedNorm:
    """Inner product <W x, y> with W symmetric and W - delta I >= 0."""

    W: np.ndarray
    delta: float | None = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        if W.shape[0] != W.shape[1] or not np.allclose(W, W.T, atol=1e-12):
            raise InvalidArgument("weight matrix must be square and symmetric")
        eig = np.linalg.eigvalsh(W)
        if self.delta is None:
            self.delta = float(eig[0])
        if not self.delta > 0 or eig[0] < self.delta - 1e-12:
            raise InvalidArgument(f"weight matrix needs W - delta I >= 0 with delta > 0 (min eig {eig[0]:.3e})")
        self.W = W
        self.norm = float(eig[-1])

    @property
    def dim(self) -> int:
        return self.W.shape[0]


def _as_weight(W, n: int) -> WeightedNorm:
    if W is None:
        return WeightedNorm(np.eye(n))
    if isinstance(W, WeightedNorm):
        return W
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        W = W * np.eye(n)
    return WeightedNorm(W)


def weighted_inner(W, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x1 = np.atleast_1d(x)
    Wn = _as_weight(W, x1.shape[-1])
    out = np.einsum("...i,ij,...j->...", np.atleast_1d(x), Wn.W, np.atleast_1d(y))
    return out


def project(K: ConvexSet, W, x, tol: float = 1e-13, max_iter: int = 100000) -> np.ndarray:
    """Nearest point of K to x in the W-norm; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    xv = np.atleast_1d(x)
    if xv.shape[-1] != K.dim:
        if K.dim == 1:
            xv = xv[..., None]
        else:
            raise InvalidArgument(f"point of width {xv.shape[-1]} for a set of dimension {K.dim}")
    Wn = _as_weight(W, K.dim)
    out = _project(K, Wn.W, xv, tol, max_iter)
    if scalar:
        return out.reshape(())
    return out.reshape(x.shape) if out.size == x.size else out


def _is_diag(W):
    return np.count_nonzero(W - np.diag(np.diag(W))) == 0


def _project(K, W, x, tol, max_iter):
    p = K.params
    if K.kind == "full":
        return x.copy()
    if K.kind == "singleton":
        return np.broadcast_to(p["point"], x.shape).copy()
    if K.kind == "box":
        if _is_diag(W):
            return np.clip(x, p["lo"], p["hi"])
        parts = [box(p["lo"][i], p["hi"][i]) for i in range(K.dim)]
        return _block_descent(parts, W, x, tol, max_iter)
    if K.kind == "halfspace":
        a, b = p["a"], p["b"]
        Wa = np.linalg.solve(W, a)
        s = (x @ a - b) / (a @ Wa)
        return x - np.maximum(s, 0.0)[..., None] * Wa
    if K.kind == "ball":
        return _project_ball(p["center"], p["radius"], W, x)
    if K.kind == "product":
        parts = p["parts"]
        sls = _slices(parts)
        block_diag = all(
            not np.any(W[si, sj]) for a, si in enumerate(sls) for b, sj in enumerate(sls) if a != b)
        if block_diag:
            return np.concatenate([_project(q, W[s, s], x[..., s], tol, max_iter)
                                   for q, s in zip(parts, sls)], axis=-1)
        return _block_descent(parts, W, x, tol, max_iter)
    raise InvalidArgument(f"unsupported set kind {K.kind!r}")


def _project_ball(c, r, W, x):
    u = x - c
    out = x.copy()
    outside = np.linalg.norm(u, axis=-1) > r
    if not np.any(outside):
        return out
    lam_W, Q = np.linalg.eigh(W)
    if np.allclose(lam_W, lam_W[0]):
        nu = np.linalg.norm(u[outside], axis=-1, keepdims=True)
        out[outside] = c + u[outside] * (r / nu)
        return out
    uq = u[outside] @ Q
    # |y(lam) - c| decreases in lam; bracket then bisect
    lo = np.zeros(len(uq))
    hi = np.full(len(uq), lam_W[-1] * np.linalg.norm(uq, axis=-1).max() / max(r, 1e-300) + 1.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rad = np.linalg.norm(uq * (lam_W / (lam_W + mid[:, None])), axis=-1)
        big = rad > r
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
    lam = hi
    yq = uq * (lam_W / (lam_W + lam[:, None]))
    y = yq @ Q.T
    # land exactly on the sphere to absorb the bisection residual
    y *= (r / np.linalg.norm(y, axis=-1))[:, None]
    out[outside] = c + y
    return out


def _block_descent(parts, W, x, tol, max_iter):
    """Block coordinate descent on 1/2 |y - x|_W^2 over a product set."""
    sls = _slices(parts)
    y = np.concatenate([_project(q, W[s, s], x[..., s], tol, max_iter)
                        for q, s in zip(parts, sls)], axis=-1)
    scale = 1.0 + np.max(np.abs(x))
    for _ in range(max_iter):
        change = 0.0
        for q, s in zip(parts, sls):
            Wss = W[s, s]
            rest = (y - x) @ W[s, :].T - (y[..., s] - x[..., s]) @ Wss.T
            target = x[..., s] - np.linalg.solve(Wss, rest[..., None])[..., 0] \
                if Wss.shape[0] > 1 else x[..., s] - rest / Wss[0, 0]
            new = _project(q, Wss, target, tol, max_iter)
            change = max(change, float(np.max(np.abs(new - y[..., s]))) if new.size else 0.0)
            y[..., s] = new
        if change <= tol * scale:
            return y
    raise NumericFailure("weighted projection did not converge")
