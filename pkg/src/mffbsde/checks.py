"""Sampled verification of the standing assumptions on a coefficient set.

Each checker draws random inputs from a compact box (half uniform, half
Gaussian), evaluates both sides of an inequality and reports the slack
rhs - lhs.  A sample violates the inequality when its slack is below
``-tol``.  Results are reproducible for a fixed seed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, LQICProblemData, StructuralData, at
from .convex import ConvexFunction, ConvexSet
from .core import ExtendedStateView


@dataclass
class CheckReport:
    name: str
    samples: int = 0
    violations: int = 0
    worst_margin: float = np.inf
    witness: dict | None = None
    margins: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def absorb(self, label: str, slack: np.ndarray, inputs: dict, tol: float):
        """Fold one inequality's per-sample slack into the report."""
        slack = np.asarray(slack, dtype=float).ravel()
        bad = ~(slack >= -tol)
        self.samples = max(self.samples, slack.size)
        self.violations += int(bad.sum())
        worst = int(np.nanargmin(np.where(np.isnan(slack), -np.inf, slack))) if slack.size else 0
        w = float(slack[worst]) if slack.size else np.inf
        self.margins[label] = min(self.margins.get(label, np.inf), w)
        if w < self.worst_margin:
            self.worst_margin = w
            if bad.any():
                self.witness = {"inequality": label, "slack": w,
                                **{k: _row(v, worst) for k, v in inputs.items()}}

    def to_dict(self) -> dict:
        return {"name": self.name, "samples": self.samples, "violations": self.violations,
                "worst_margin": self.worst_margin, "witness": self.witness,
                "margins": self.margins, "warnings": self.warnings, "passed": self.passed}


def _row(v, i):
    v = np.asarray(v)
    if v.ndim == 0:
        return float(v)
    return np.asarray(v[i]).tolist()


def _draw(rng, shape, box):
    """Half uniform on [-box, box], half Gaussian with std box / 3, clipped."""
    S = shape[0]
    h = S // 2
    u = rng.uniform(-box, box, (h,) + shape[1:])
    g = np.clip(rng.normal(0.0, box / 3.0, (S - h,) + shape[1:]), -box, box)
    return np.concatenate([u, g], axis=0)


def _norm(a):
    a = np.asarray(a, dtype=float)
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def _inner(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.sum((a * b).reshape(a.shape[0], -1), axis=1)


def _full(v, shape):
    return np.broadcast_to(np.asarray(v, dtype=float), shape)


def _times(T, count):
    return np.linspace(0.0, T, count)


def _chunks(n, k):
    base = [n // k] * k
    for i in range(n % k):
        base[i] += 1
    return [b for b in base if b > 0]


# ----------------------------------------------------------------- Lipschitz

def check_lipschitz(c: CoefficientSet, n: int = 10_000, seed: int = 0, box: float = 10.0,
                    tol: float = 1e-9, T: float = 1.0, time_points: int = 4,
                    sampler=None) -> CheckReport:
    """Mixed Lipschitz bounds: eps on mean blocks, L on own blocks (sums of norms),
    and the (L_Phi, eps_cross) / (L_Psi, eps_cross) bounds on the couplings.

    ``sampler(rng, shape)`` may replace the default box sampler.
    """
    s = c.structural
    rep = CheckReport("lipschitz")
    rng = np.random.default_rng(seed)
    draw = sampler or (lambda r, shape: _draw(r, shape, box))
    nn, d = c.n, c.d
    for t, S in zip(_times(T, time_points), _chunks(n, time_points)):
        a = [draw(rng, (S, nn)) for _ in range(4)]
        abar = [draw(rng, (S, nn)) for _ in range(4)]
        w = draw(rng, (S, d))
        for i in (1, 2):
            x, y, xb, yb = (draw(rng, (S, nn)) for _ in range(4))
            z, zb = draw(rng, (S, d, nn)), draw(rng, (S, d, nn))
            v = ExtendedStateView(*a, x, y, z, w)
            vb = ExtendedStateView(*abar, xb, yb, zb, w)
            out, outb = c.gamma(i)(t, v), c.gamma(i)(t, vb)
            mean_part = sum(_norm(p - q) for p, q in zip(a, abar))
            own = _norm(x - xb) + _norm(y - yb) + _norm(z - zb)
            shapes = ((S, nn), (S, nn), (S, d, nn))
            inputs = {"t": t, "means": np.concatenate(a, 1), "means_bar": np.concatenate(abar, 1),
                      "x": x, "y": y, "z": z.reshape(S, -1), "x_bar": xb, "y_bar": yb,
                      "z_bar": zb.reshape(S, -1), "w": w}
            for label, L, k in (("f", s.L_f, 0), ("b", s.L_b, 1), ("sigma", s.L_sigma, 2)):
                lhs = _norm(_full(out[k], shapes[k]) - _full(outb[k], shapes[k]))
                rhs = s.eps_mean * mean_part + L * own
                rep.absorb(f"{label}{i}", rhs - lhs, inputs, tol)
        # couplings: own argument with L, the other with eps_cross
        p1, p2, q1, q2 = (draw(rng, (S, nn)) for _ in range(4))
        own1, oth1 = _norm(p1 - q1), _norm(p2 - q2)
        inputs = {"first": p1, "second": p2, "first_bar": q1, "second_bar": q2, "w": w}
        for i in (1, 2):
            own, oth = (own1, oth1) if i == 1 else (oth1, own1)
            lhs = _norm(_full(c.phi(i)(p1, p2, w), (S, nn)) - _full(c.phi(i)(q1, q2, w), (S, nn)))
            rep.absorb(f"Phi{i}", s.L_Phi * own + s.eps_cross * oth - lhs, inputs, tol)
            lhs = _norm(_full(c.psi(i)(p1, p2), (S, nn)) - _full(c.psi(i)(q1, q2), (S, nn)))
            rep.absorb(f"Psi{i}", s.L_Psi * own + s.eps_cross * oth - lhs, inputs, tol)
    return rep


# ----------------------------------------------------------- adjoint maps

def check_adjoint(s: StructuralData, n: int = 10_000, seed: int = 0, box: float = 10.0,
                  tol: float = 1e-9, T: float = 1.0, time_points: int = 4) -> CheckReport:
    """Lipschitz bound L2 and dissipativity with L3 for every hbar and h map."""
    rep = CheckReport("adjoint")
    rng = np.random.default_rng(seed)
    m = s.m
    S = n
    v1, v2 = _draw(rng, (S, m), box), _draw(rng, (S, m), box)
    for label in ("hbar11", "hbar12", "hbar21", "hbar22"):
        h = getattr(s, label)
        dh = _full(h(v1), (S, m)) - _full(h(v2), (S, m))
        dv = v1 - v2
        inputs = {"v1": v1, "v2": v2}
        rep.absorb(f"{label} lipschitz", s.L2 * _norm(dv) - _norm(dh), inputs, tol)
        rep.absorb(f"{label} dissipative", -s.L3 * _norm(dh) ** 2 - _inner(dh, dv), inputs, tol)
    k = np.asarray(at(s.B1, 0.0)).shape[-1] if np.asarray(at(s.B1, 0.0)).ndim else 1
    for t, St in zip(_times(T, time_points), _chunks(n, time_points)):
        u1, u2 = _draw(rng, (St, k), box), _draw(rng, (St, k), box)
        for i in (1, 2):
            h = s.h(i)
            dh = _full(h(t, u1), (St, k)) - _full(h(t, u2), (St, k))
            du = u1 - u2
            inputs = {"t": t, "u1": u1, "u2": u2}
            rep.absorb(f"h{i} lipschitz", s.L2 * _norm(du) - _norm(dh), inputs, tol)
            rep.absorb(f"h{i} dissipative", -s.L3 * _norm(dh) ** 2 - _inner(dh, du), inputs, tol)
    return rep


def check_no_linear_domination(s: StructuralData, probes=(0.0, 1.0, 10.0, 100.0, 1000.0),
                               threshold: float = 0.01, gap: float = 1.0, t: float = 0.0) -> CheckReport:
    """Ratio |h(u) - h(u + gap)|^2 / gap^2 along growing |u|.

    A linear domination bound |h(u) - h(v)| >= c |u - v| would keep the
    ratio above c^2; the report's worst margin is ``threshold - ratio`` at
    the largest probe, so a positive margin means the ratio collapsed.
    """
    rep = CheckReport("no_linear_domination")
    ratios = {}
    for p in probes:
        u = np.array([[float(p)]])
        v = u + gap
        r = []
        for i in (1, 2):
            dh = np.asarray(s.h(i)(t, u)) - np.asarray(s.h(i)(t, v))
            r.append(float(np.sum(dh ** 2) / gap ** 2))
        ratios[float(p)] = min(r)
    rep.samples = len(probes)
    rep.margins = {f"ratio at {k:g}": v for k, v in ratios.items()}
    big = max(probes)
    rep.worst_margin = threshold - ratios[float(big)]
    if rep.worst_margin < 0:
        rep.violations = 1
        rep.witness = {"probe": float(big), "ratio": ratios[float(big)]}
    return rep


# -------------------------------------------------------------- domination

def check_domination(c: CoefficientSet, n: int = 10_000, seed: int = 0, box: float = 10.0,
                     tol: float = 1e-9, T: float = 1.0, time_points: int = 4,
                     form: str = "literal") -> CheckReport:
    """Domination of the couplings by the hbar maps and of b, sigma, f by h.

    form="literal": squared hbar differences on the right for psi; the two
    sides then scale differently and a warning is attached.  form="linear":
    unsquared hbar differences.  The generator bounds always use unsquared
    h differences.
    """
    s = c.structural
    rep = CheckReport(f"domination[{form}]")
    rng = np.random.default_rng(seed)
    nn, d = c.n, c.d
    power = 2 if form == "literal" else 1
    y1, y2, yb1, yb2 = (_draw(rng, (n, nn), box) for _ in range(4))

    def psi_sides(scale):
        a, b = s.initial_arguments(scale * y1, scale * y2)
        ab, bb = s.initial_arguments(scale * yb1, scale * yb2)
        l1 = _norm(_full(c.psi1(scale * y1, scale * y2), (n, nn)) - _full(c.psi1(scale * yb1, scale * yb2), (n, nn)))
        r1 = s.L2 * (_norm(s.hbar11(a) - s.hbar11(ab)) ** power + _norm(s.hbar12(b) - s.hbar12(bb)) ** power)
        l2 = _norm(_full(c.psi2(scale * y1, scale * y2), (n, nn)) - _full(c.psi2(scale * yb1, scale * yb2), (n, nn)))
        r2 = s.L2 * (_norm(s.hbar21(b) - s.hbar21(bb)) ** power + _norm(s.hbar22(a) - s.hbar22(ab)) ** power)
        return (l1, r1), (l2, r2)

    sides = psi_sides(1.0)
    inputs = {"y1": y1, "y2": y2, "y1_bar": yb1, "y2_bar": yb2}
    for i, (lhs, rhs) in enumerate(sides, start=1):
        rep.absorb(f"Psi{i}", rhs - lhs, inputs, tol)
    if form == "literal":
        big = psi_sides(10.0)
        for (l0, r0), (l1, r1) in zip(sides, big):
            ok = (l0 > 1e-12) & (r0 > 1e-12)
            if ok.any():
                gl = np.median(l1[ok] / l0[ok])
                gr = np.median(r1[ok] / r0[ok])
                if abs(np.log(gl) - np.log(gr)) > np.log(1.5):
                    msg = (f"domination sides scale differently under 10x input rescaling "
                           f"(left x{gl:.3g}, right x{gr:.3g})")
                    rep.warnings.append(msg)
                    warnings.warn(msg, stacklevel=2)
                    break

    for t, S in zip(_times(T, time_points), _chunks(n, time_points)):
        means = [_draw(rng, (S, nn), box) for _ in range(4)]
        w = _draw(rng, (S, d), box)
        for i in (1, 2):
            x = _draw(rng, (S, nn), box)
            ya, yb = _draw(rng, (S, nn), box), _draw(rng, (S, nn), box)
            za, zb = _draw(rng, (S, d, nn), box), _draw(rng, (S, d, nn), box)
            mya, myb = _draw(rng, (S, nn), box), _draw(rng, (S, nn), box)
            slot = 1 if i == 1 else 3  # the own mean-Y block changes with y
            ma, mb = list(means), list(means)
            ma[slot], mb[slot] = mya, myb
            va = ExtendedStateView(*ma, x, ya, za, w)
            vb = ExtendedStateView(*mb, x, yb, zb, w)
            oa, ob = c.gamma(i)(t, va), c.gamma(i)(t, vb)
            ua = s.control_argument(i, t, ya, mya, za)
            ub = s.control_argument(i, t, yb, myb, zb)
            rhs = s.L2 * _norm(np.asarray(s.h(i)(t, ua)) - np.asarray(s.h(i)(t, ub)))
            shapes = ((S, nn), (S, nn), (S, d, nn))
            inputs = {"t": t, "x": x, "y": ya, "y_bar": yb, "z": za.reshape(S, -1),
                      "z_bar": zb.reshape(S, -1), "mean_y": mya, "mean_y_bar": myb}
            for label, k in (("f", 0), ("b", 1), ("sigma", 2)):
                lhs = _norm(_full(oa[k], shapes[k]) - _full(ob[k], shapes[k]))
                rep.absorb(f"{label}{i}", rhs - lhs, inputs, tol)
    return rep


# ------------------------------------------------------------ monotonicity

def check_monotonicity(c: CoefficientSet, n: int = 10_000, seed: int = 0, box: float = 5.0,
                       tol: float = 1e-9, T: float = 1.0, time_points: int = 4) -> CheckReport:
    """One-sided bounds on psi, phi and the generator pairing.

    The generator inequality is tested with squared h differences on the
    right: sum_i <Gamma_i(theta_i) - Gamma_i(theta_bar_i), V_i - V_bar_i>
    <= -L3 (|dh_1|^2 + |dh_2|^2), with the mean blocks shared.
    """
    s = c.structural
    rep = CheckReport("monotonicity")
    rng = np.random.default_rng(seed)
    nn, d = c.n, c.d
    # psi: move the own argument, hold the other
    y1, yb1, y = (_draw(rng, (n, nn), box) for _ in range(3))
    for i in (1, 2):
        if i == 1:
            pa, pb = c.psi1(y1, y), c.psi1(yb1, y)
            a, b = s.initial_arguments(y1, y)
            ab, bb = s.initial_arguments(yb1, y)
            h1, h2 = s.hbar11, s.hbar12
        else:
            pa, pb = c.psi2(y, y1), c.psi2(y, yb1)
            b, a = s.initial_arguments(y, y1)
            bb, ab = s.initial_arguments(y, yb1)
            h1, h2 = s.hbar21, s.hbar22
        lhs = _inner(_full(pa, (n, nn)) - _full(pb, (n, nn)), y1 - yb1)
        rhs = -s.L3 * (_norm(h1(a) - h1(ab)) ** 2 + _norm(h2(b) - h2(bb)) ** 2)
        rep.absorb(f"Psi{i}", rhs - lhs, {"own": y1, "own_bar": yb1, "other": y}, tol)
    # phi
    x1, x2, xb1, xb2 = (_draw(rng, (n, nn), box) for _ in range(4))
    w = _draw(rng, (n, d), box)
    lhs = (_inner(_full(c.phi1(x1, x2, w), (n, nn)) - _full(c.phi1(xb1, x2, w), (n, nn)), x1 - xb1)
           + _inner(_full(c.phi2(x1, x2, w), (n, nn)) - _full(c.phi2(x1, xb2, w), (n, nn)), x2 - xb2))
    rep.absorb("Phi", lhs, {"x1": x1, "x2": x2, "x1_bar": xb1, "x2_bar": xb2}, tol)
    # generators with shared mean blocks
    for t, S in zip(_times(T, time_points), _chunks(n, time_points)):
        means = [_draw(rng, (S, nn), box) for _ in range(4)]
        w = _draw(rng, (S, d), box)
        lhs = np.zeros(S)
        rhs = np.zeros(S)
        inputs = {"t": t, "means": np.concatenate(means, 1)}
        for i in (1, 2):
            x, y, xb, yb = (_draw(rng, (S, nn), box) for _ in range(4))
            z, zb = _draw(rng, (S, d, nn), box), _draw(rng, (S, d, nn), box)
            va = ExtendedStateView(*means, x, y, z, w)
            vb = ExtendedStateView(*means, xb, yb, zb, w)
            (fa, ba, sa), (fb, bb, sb) = c.gamma(i)(t, va), c.gamma(i)(t, vb)
            lhs += (_inner(_full(fa, (S, nn)) - _full(fb, (S, nn)), x - xb)
                    + _inner(_full(ba, (S, nn)) - _full(bb, (S, nn)), y - yb)
                    + _inner(_full(sa, (S, d, nn)) - _full(sb, (S, d, nn)), z - zb))
            my = means[1] if i == 1 else means[3]
            ua = s.control_argument(i, t, y, my, z)
            ub = s.control_argument(i, t, yb, my, zb)
            rhs -= s.L3 * _norm(np.asarray(s.h(i)(t, ua)) - np.asarray(s.h(i)(t, ub))) ** 2
            inputs.update({f"V{i}": np.concatenate([x, y, z.reshape(S, -1)], 1),
                           f"V{i}_bar": np.concatenate([xb, yb, zb.reshape(S, -1)], 1)})
        rep.absorb("Gamma", rhs - lhs, inputs, tol)
    return rep


# ------------------------------------------------------------- LQ data

def check_lqic(lq: LQICProblemData, nodes: int = 17, samples: int = 200, seed: int = 0,
               tol: float = 1e-9) -> CheckReport:
    """Eigenvalue checks of M - delta I, R(t) - delta I, G, Q(t) on grid nodes,
    nonemptiness through a feasible point and a midpoint convexity probe."""
    rep = CheckReport("lqic")
    dyn = lq.dyn
    ts = np.linspace(0.0, dyn.T, nodes)
    rng = np.random.default_rng(seed)

    def note(label, margin, where):
        rep.samples += 1
        if margin < rep.worst_margin:
            rep.worst_margin = float(margin)
        rep.margins[label] = min(rep.margins.get(label, np.inf), float(margin))
        if margin < -tol:
            rep.violations += 1
            if rep.witness is None or margin < rep.witness["margin"]:
                rep.witness = {"matrix": label.split("(")[0], "margin": float(margin), **where}

    for i in (1, 2):
        note(f"M{i}", np.linalg.eigvalsh(lq.M(i) - lq.delta * np.eye(lq.M(i).shape[0]))[0], {})
        for t in ts:
            R = lq.R(i, t)
            note(f"R{i}", np.linalg.eigvalsh(R - lq.delta * np.eye(R.shape[0]))[0], {"t": float(t)})
            note(f"Q{i}", np.linalg.eigvalsh(lq.Q(i, t))[0], {"t": float(t)})
        G = getattr(lq, f"G{i}")
        if not callable(G):
            note(f"G{i}", np.linalg.eigvalsh(G)[0], {})
    for label, K, tt in [("U0", lq.U0, None)] + [("U", lq.Uset(t), float(t)) for t in ts]:
        a = K.feasible_point()
        note(f"{label} nonempty", 0.0 if K.contains(a, 1e-9) else -1.0, {"t": tt})
        pts = _set_samples(K, rng, samples)
        if pts is not None:
            mid = 0.5 * (pts[: samples // 2] + pts[samples // 2:])
            inside = K.contains(mid, 1e-9)
            note(f"{label} convex", 0.0 if np.all(inside) else -1.0, {"t": tt})
    return rep


def _set_samples(K: ConvexSet, rng, count):
    """Random members of K via projection of wide Gaussian draws."""
    from .convex import WeightedNorm, project
    x = rng.normal(0.0, 5.0, (count, K.dim))
    try:
        return project(K, WeightedNorm(np.eye(K.dim)), x)
    except Exception:
        return None


# ------------------------------------------------------------- convexity

def check_convexity(f: ConvexFunction, n: int = 1000, dim: int = 1, seed: int = 0,
                    box: float = 3.0, tol: float = 1e-9, fd_step: float = 1e-5,
                    fd_tol: float = 1e-5) -> CheckReport:
    """Strong convexity in gradient form and in function-value form, plus a
    central-difference gradient comparison."""
    rep = CheckReport(f"convexity[{f.name or 'f'}]")
    rng = np.random.default_rng(seed)
    x, y = _draw(rng, (n, dim), box), _draw(rng, (n, dim), box)
    dx = x - y
    inputs = {"x": x, "y": y}
    gx, gy = f.grad(x), f.grad(y)
    rep.absorb("gradient form", _inner(gx - gy, dx) - f.delta * _norm(dx) ** 2, inputs, tol)
    rep.absorb("value form", f.eval(y) - f.eval(x) - _inner(gx, y - x) - 0.5 * f.delta * _norm(dx) ** 2,
               inputs, tol)
    fd = np.empty_like(x)
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = fd_step
        fd[:, j] = (f.eval(x + e) - f.eval(x - e)) / (2 * fd_step)
    scale = 1.0 + np.abs(gx).max(axis=1)
    rep.absorb("finite differences", fd_tol * scale - np.abs(fd - gx).max(axis=1), inputs, 0.0)
    return rep
