"""Command line driver: problem files, experiment runs and result files.

Subcommands: solve, check, example-lc, lqic-compare, stability.  Problem
and run files are YAML or JSON (YAML is a superset, so JSON files parse
either way).  Results are written atomically as JSON reports and CSV
trajectories; no wall-clock data goes into them, so two runs with the
same configuration produce byte-identical files.

Exit codes: 0 ok, 2 configuration error, 3 non-convergence,
4 admissibility or assumption violation, 5 acceptance failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import checks
from .coefficients import (Dynamics, LCProblemData, LQICProblemData, at, base_coefficients,
                           exponential_lc_example, lc_hamiltonian, lqic_hamiltonian,
                           scalar_lqic_example)
from .control import (cost_lc, cost_lqic, extract_lc_controls, extract_lqic_controls,
                      simulate_state)
from .convex import ball, box, example_family, full_space, halfspace, linear, quadratic, singleton, zero_function
from .core import AdmissibilityViolation, InvalidArgument, NonConvergence, NumericFailure, sample_brownian
from .oracle import brute_force_lqic, example_reference, relative_l2
from .solver import RegressionBasis, SolverConfig, continuation_solve, stability_probe

log = logging.getLogger("mffbsde")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_ADMISSIBILITY, EXIT_ACCEPTANCE = 0, 2, 3, 4, 5
MODES = ("solve", "check", "example-lc", "lqic-compare", "stability")

BUILTINS = {
    "exponential-lc-example": exponential_lc_example,
    "scalar-lqic-example": scalar_lqic_example,
}
_ALIASES = {"paper-example-lc": "exponential-lc-example"}


class ConfigError(InvalidArgument):
    """Schema or invariant violation in a problem or run file; ``path`` names the field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


# ------------------------------------------------------------- problem files

def _array(v, path, ndim=None, finite=True):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a number or a nested list of numbers") from None
    if np.any(np.isnan(a)) or (finite and not np.all(np.isfinite(a))):
        raise ConfigError(path, "entries must be finite")
    if ndim is not None:
        while a.ndim < ndim:
            a = a[None]
        if a.ndim != ndim:
            raise ConfigError(path, f"expected at most {ndim} dimensions, got {a.ndim}")
    return a


def _number(v, path, lo=None, hi=None, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, "expected a number")
    if integer and int(v) != v:
        raise ConfigError(path, "expected an integer")
    if not math.isfinite(v) or (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigError(path, f"value {v} outside [{lo}, {hi}]")
    return int(v) if integer else float(v)


def _mapping(v, path):
    if not isinstance(v, dict):
        raise ConfigError(path, "expected a mapping")
    return v


def _known(d, keys, path):
    extra = sorted(set(d) - set(keys))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


def _listify(a):
    return np.asarray(a).tolist()


_DYN_MATS = ("A1", "A2", "Abar1", "Abar2", "B1", "B2", "Bbar1", "Bbar2")


def _parse_dynamics(d, path):
    d = _mapping(d, path)
    keys = _DYN_MATS + ("C1", "C2", "D1", "D2", "H", "x0", "rho1", "rho2", "kappa1", "kappa2",
                        "tau", "tau1", "T")
    _known(d, keys, path)
    for k in _DYN_MATS + ("C1", "C2", "D1", "D2", "H", "x0"):
        if k not in d:
            raise ConfigError(f"{path}.{k}", "missing field")
    canon = {}
    kw = {}
    for k in _DYN_MATS + ("H",):
        kw[k] = _array(d[k], f"{path}.{k}", 2)
    for k in ("C1", "C2", "D1", "D2"):
        kw[k] = _array(d[k], f"{path}.{k}", 3)
    kw["x0"] = _array(d["x0"], f"{path}.x0", 1)
    for k in ("rho1", "rho2"):
        if d.get(k) is not None:
            kw[k] = _array(d[k], f"{path}.{k}", 1)
    for k in ("kappa1", "kappa2"):
        if d.get(k) is not None:
            kw[k] = _array(d[k], f"{path}.{k}", 2)
    kw["tau"] = _number(d.get("tau", 0.0), f"{path}.tau", 0.0, 1.0)
    kw["tau1"] = _number(d.get("tau1", 0.01), f"{path}.tau1", 0.0)
    kw["T"] = _number(d.get("T", 1.0), f"{path}.T", 0.0)
    n = kw["H"].shape[0]
    for k, want in (("A1", (n, n)), ("A2", (n, n)), ("Abar1", (n, n)), ("Abar2", (n, n)),
                    ("x0", (n,))):
        if kw[k].shape != want:
            raise ConfigError(f"{path}.{k}", f"expected shape {want}, got {kw[k].shape}")
    for k, v in kw.items():
        canon[k] = _listify(v) if isinstance(v, np.ndarray) else v
    try:
        return Dynamics(**kw), canon
    except InvalidArgument as e:
        raise ConfigError(path, str(e)) from None


def _parse_set(v, path):
    v = _mapping(v, path)
    kind = v.get("kind", "box" if "lo" in v or "hi" in v else None)
    try:
        if kind == "box":
            _known(v, ("kind", "lo", "hi", "dim"), path)
            lo = _array(v.get("lo", -np.inf), f"{path}.lo", finite=False)
            hi = _array(v.get("hi", np.inf), f"{path}.hi", finite=False)
            dim = _number(v["dim"], f"{path}.dim", 1, integer=True) if "dim" in v else None
            K = box(lo, hi, dim)
            canon = {"kind": "box", "lo": _clean(K.params["lo"]), "hi": _clean(K.params["hi"])}
        elif kind == "full":
            _known(v, ("kind", "dim"), path)
            K = full_space(_number(v.get("dim", 1), f"{path}.dim", 1, integer=True))
            canon = {"kind": "full", "dim": K.dim}
        elif kind == "ball":
            _known(v, ("kind", "center", "radius"), path)
            K = ball(_array(v["center"], f"{path}.center", 1), _number(v["radius"], f"{path}.radius", 0.0))
            canon = {"kind": "ball", "center": _listify(K.params["center"]), "radius": K.params["radius"]}
        elif kind == "halfspace":
            _known(v, ("kind", "a", "b"), path)
            K = halfspace(_array(v["a"], f"{path}.a", 1), _number(v["b"], f"{path}.b"))
            canon = {"kind": "halfspace", "a": _listify(K.params["a"]), "b": float(K.params["b"])}
        elif kind == "singleton":
            _known(v, ("kind", "point"), path)
            K = singleton(_array(v["point"], f"{path}.point", 1))
            canon = {"kind": "singleton", "point": _listify(K.params["point"])}
        else:
            raise ConfigError(f"{path}.kind", f"unknown set kind {kind!r}")
    except KeyError as e:
        raise ConfigError(f"{path}.{e.args[0]}", "missing field") from None
    except ConfigError:
        raise
    except InvalidArgument as e:
        raise ConfigError(path, str(e)) from None
    return K, canon


def _parse_function(v, path, dim):
    v = _mapping(v, path)
    fam = v.get("family")
    try:
        if fam == "quadratic":
            _known(v, ("family", "Q", "c"), path)
            Q = _array(v["Q"], f"{path}.Q", 2)
            c = _array(v["c"], f"{path}.c", 1) if v.get("c") is not None else np.zeros(Q.shape[0])
            if Q.shape != (dim, dim):
                raise ConfigError(f"{path}.Q", f"expected shape {(dim, dim)}, got {Q.shape}")
            if not np.allclose(Q, Q.T):
                raise ConfigError(f"{path}.Q", "must be symmetric")
            f = quadratic(Q, c)
            canon = {"family": "quadratic", "Q": _listify(Q), "c": _listify(c)}
        elif fam == "exponential":
            _known(v, ("family",), path)
            if dim != 1:
                raise ConfigError(path, "the exponential family is scalar")
            f = example_family()
            canon = {"family": "exponential"}
        elif fam == "linear":
            _known(v, ("family", "c"), path)
            c = _array(v["c"], f"{path}.c", 1)
            f = linear(c)
            canon = {"family": "linear", "c": _listify(c)}
        elif fam == "zero":
            _known(v, ("family",), path)
            f = zero_function(dim)
            canon = {"family": "zero"}
        else:
            raise ConfigError(f"{path}.family", f"unknown function family {fam!r}")
    except KeyError as e:
        raise ConfigError(f"{path}.{e.args[0]}", "missing field") from None
    return f, canon


_LQ_MATS = ("M1", "M2", "G1", "G2", "Q1", "Q2", "R1", "R2")
_LC_FUNCS = ("f11", "f12", "f21", "f22", "f31", "f32", "f41", "f42")


def parse_problem_data(d: dict, path: str = "problem"):
    """Validated problem object from a parsed mapping.

    The canonical rendering of the input is kept on the result as
    ``source`` so that ``serialize_problem`` can reproduce it.
    """
    d = _mapping(d, path)
    if "builtin" in d:
        _known(d, ("builtin", "coupling"), path)
        tag = _ALIASES.get(d["builtin"], d["builtin"])
        if tag not in BUILTINS:
            raise ConfigError(f"{path}.builtin", f"unknown builtin {d['builtin']!r}")
        canon = {"builtin": tag}
        if "coupling" in d:
            if tag != "exponential-lc-example":
                raise ConfigError(f"{path}.coupling", "only the exponential example takes a coupling")
            canon["coupling"] = _number(d["coupling"], f"{path}.coupling")
            try:
                obj = BUILTINS[tag](canon["coupling"])
            except InvalidArgument as e:
                raise ConfigError(f"{path}.coupling", str(e)) from None
        else:
            obj = BUILTINS[tag]()
        obj.source = canon
        return obj
    kind = d.get("type")
    if kind not in ("lqic", "lc"):
        raise ConfigError(f"{path}.type", "expected 'lqic', 'lc' or a builtin tag")
    dyn, dcanon = _parse_dynamics(d.get("dynamics"), f"{path}.dynamics")
    canon = {"type": kind, "dynamics": dcanon}
    if kind == "lqic":
        _known(d, ("type", "dynamics", "delta", "U0", "U") + _LQ_MATS, path)
        mats = {}
        for k in _LQ_MATS:
            if k not in d:
                raise ConfigError(f"{path}.{k}", "missing field")
            mats[k] = _array(d[k], f"{path}.{k}", 2)
            if not np.allclose(mats[k], mats[k].T):
                raise ConfigError(f"{path}.{k}", f"{k} must be symmetric")
            canon[k] = _listify(mats[k])
        if "delta" not in d:
            raise ConfigError(f"{path}.delta", "missing field")
        delta = _number(d["delta"], f"{path}.delta", 0.0)
        U0, canon["U0"] = _parse_set(d.get("U0", {"kind": "full", "dim": dyn.m}), f"{path}.U0")
        U, canon["U"] = _parse_set(d.get("U", {"kind": "full", "dim": dyn.k}), f"{path}.U")
        canon["delta"] = delta
        try:
            obj = LQICProblemData(dyn, mats["M1"], mats["M2"], mats["G1"], mats["G2"], mats["Q1"],
                                  mats["Q2"], mats["R1"], mats["R2"], delta, U0, U)
        except InvalidArgument as e:
            raise ConfigError(path, str(e)) from None
    else:
        _known(d, ("type", "dynamics") + _LC_FUNCS, path)
        fs = {}
        for k in _LC_FUNCS:
            if k not in d:
                raise ConfigError(f"{path}.{k}", "missing field")
            dim = dyn.m if k in ("f11", "f12") else dyn.n if k[1] in "23" else dyn.k
            fs[k], canon[k] = _parse_function(d[k], f"{path}.{k}", dim)
        try:
            obj = LCProblemData(dyn, **fs)
        except InvalidArgument as e:
            raise ConfigError(path, str(e)) from None
    obj.source = canon
    return obj


def _load_mapping(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError("", f"cannot parse {path}: {e}") from None
    return data if data is not None else {}


def parse_problem(path):
    """Load a problem file (YAML or JSON)."""
    data = _load_mapping(path)
    if isinstance(data, dict) and "problem" in data and isinstance(data["problem"], dict):
        data = data["problem"]
    return parse_problem_data(data)


def serialize_problem(obj) -> dict:
    """Canonical mapping of a parsed problem; parsing it again gives an equal problem."""
    src = getattr(obj, "source", None)
    if src is None:
        raise InvalidArgument("only problems loaded from a mapping can be serialized")
    return copy.deepcopy(src)


# -------------------------------------------------------------- run config

_RUN_KEYS = ("problem", "particles", "steps", "seed", "tol", "alpha_schedule", "damping",
             "anderson", "picard_max", "basis", "T", "levels", "sizes", "out")

_DEFAULTS = {
    "solve": dict(particles=4096, steps=64, seed=0, tol=1e-6, alpha_schedule=[0.0, 0.5, 1.0],
                  damping=2.0 / 3.0, anderson=0, basis={"kind": "joint", "degree": 3}),
    "check": dict(particles=0, steps=0, seed=0),
    "example-lc": dict(particles=4096, steps=64, seed=42, tol=1e-6, alpha_schedule=[0.0, 0.5, 1.0],
                       damping=2.0 / 3.0, anderson=0, levels=1,
                       basis={"kind": "joint", "degree": 3, "noise_degree": 3}),
    "lqic-compare": dict(particles=512, steps=4, seed=7, tol=1e-10, alpha_schedule=[0.0, 1.0],
                         damping=0.5, anderson=5, basis={"kind": "path", "degree": 3}),
    "stability": dict(particles=4096, steps=64, seed=42, tol=1e-6, alpha_schedule=[0.0, 0.5, 1.0],
                      damping=2.0 / 3.0, anderson=0, sizes=[1e-2, 1e-3],
                      basis={"kind": "joint", "degree": 3, "noise_degree": 3}),
}
_DEFAULT_PROBLEM = {"solve": None, "check": None,
                    "example-lc": {"builtin": "exponential-lc-example"},
                    "lqic-compare": {"builtin": "scalar-lqic-example"},
                    "stability": {"builtin": "exponential-lc-example"}}


def build_run(mode: str, file_cfg: dict, overrides: dict, base_dir: Path | None = None) -> dict:
    """Merge defaults, the run file and command-line overrides; validate."""
    if mode not in MODES:
        raise ConfigError("mode", f"unknown mode {mode!r}")
    file_cfg = _mapping(file_cfg, "config")
    _known(file_cfg, _RUN_KEYS, "")
    run = dict(_DEFAULTS[mode])
    run.update({k: v for k, v in file_cfg.items() if v is not None})
    run.update({k: v for k, v in overrides.items() if v is not None})
    prob = run.get("problem", _DEFAULT_PROBLEM[mode])
    if prob is None:
        raise ConfigError("problem", f"mode {mode} needs a problem")
    if isinstance(prob, str):
        p = Path(prob)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        prob = _load_mapping(p)
        if "problem" in prob and isinstance(prob["problem"], dict):
            prob = prob["problem"]
    run["problem"] = parse_problem_data(prob)
    if mode == "check":
        return run
    run["particles"] = _number(run["particles"], "particles", 2, integer=True)
    run["steps"] = _number(run["steps"], "steps", 1, integer=True)
    run["seed"] = _number(run["seed"], "seed", 0, integer=True)
    run["tol"] = _number(run["tol"], "tol", 0.0)
    if not run["tol"] > 0:
        raise ConfigError("tol", "must be positive")
    run["damping"] = _number(run["damping"], "damping", 0.0, 1.0)
    run["anderson"] = _number(run["anderson"], "anderson", 0, integer=True)
    if "picard_max" in run:
        run["picard_max"] = _number(run["picard_max"], "picard_max", 1, integer=True)
    sched = run["alpha_schedule"]
    if isinstance(sched, str):
        try:
            sched = [float(a) for a in sched.split(",")]
        except ValueError:
            raise ConfigError("alpha_schedule", "expected a comma-separated list of numbers") from None
    if not isinstance(sched, (list, tuple)):
        raise ConfigError("alpha_schedule", "expected a list")
    run["alpha_schedule"] = [_number(a, f"alpha_schedule[{i}]", 0.0, 1.0) for i, a in enumerate(sched)]
    b = _mapping(run["basis"], "basis")
    _known(b, ("kind", "degree", "noise_degree", "cutoff"), "basis")
    try:
        run["basis"] = RegressionBasis(**b)
    except (InvalidArgument, TypeError) as e:
        raise ConfigError("basis", str(e)) from None
    if "levels" in run:
        run["levels"] = _number(run["levels"], "levels", 1, 3, integer=True)
    if "sizes" in run:
        if not isinstance(run["sizes"], (list, tuple)) or not run["sizes"]:
            raise ConfigError("sizes", "expected a nonempty list")
        run["sizes"] = [_number(s, f"sizes[{i}]") for i, s in enumerate(run["sizes"])]
        if any(s == 0 for s in run["sizes"]):
            raise ConfigError("sizes", "perturbation sizes must be nonzero")
    try:
        run["solver"] = SolverConfig(particles=run["particles"], steps=run["steps"],
                                     T=run["problem"].dyn.T, basis=run["basis"],
                                     picard_tol=run["tol"], picard_max=run.get("picard_max", 200),
                                     damping=run["damping"], alpha_schedule=tuple(run["alpha_schedule"]),
                                     seed=run["seed"], anderson=run["anderson"])
    except InvalidArgument as e:
        raise ConfigError("solver", str(e)) from None
    return run


# ------------------------------------------------------------------ output

def _clean(v):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to strings."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else ("nan" if math.isnan(f) else ("inf" if f > 0 else "-inf"))
    return v


def write_atomic(path: Path, text: str):
    """Write through a temporary file in the target directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj):
    write_atomic(path, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def trajectory_table(times, fields: dict):
    """Header and rows of the trajectory CSV.

    ``fields`` maps a name to an (M, N + 1, w) array; every component gets
    a mean column and one column per quantile.
    """
    header = ["t"]
    cols = []
    for name, arr in fields.items():
        arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
        w = arr.shape[2]
        for c in range(w):
            tag = name if w == 1 else f"{name}[{c}]"
            header.append(f"{tag}_mean")
            cols.append(np.add.reduce(arr[:, :, c], axis=0) / arr.shape[0])
            qs = np.quantile(arr[:, :, c], QUANTILES, axis=0)
            for q, row in zip(QUANTILES, qs):
                header.append(f"{tag}_q{int(round(q * 100)):02d}")
                cols.append(row)
    rows = [[_fmt(t)] + [_fmt(c[k]) for c in cols] for k, t in enumerate(times)]
    return header, rows


def write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_atomic(path, buf.getvalue())


def _triple_fields(V1, V2):
    M, N1 = V1.X.shape[:2]
    return {"X1": V1.X, "Y1": V1.Y, "Z1": V1.Z.reshape(M, N1, -1),
            "X2": V2.X, "Y2": V2.Y, "Z2": V2.Z.reshape(M, N1, -1)}


def _report_dict(rep) -> dict:
    d = rep.to_dict()
    d.pop("wall_time", None)
    return d


# ------------------------------------------------------------------- modes

def _hamiltonian(problem):
    if isinstance(problem, LQICProblemData):
        return lqic_hamiltonian(problem)
    return lc_hamiltonian(problem)


def _solve(run, problem, noise=None):
    c = _hamiltonian(problem)
    c0 = base_coefficients(c.structural)
    cfg = run["solver"]
    if noise is None:
        noise = sample_brownian(cfg.grid, cfg.particles, c.d, cfg.seed)
    V1, V2, rep = continuation_solve(c, c0, cfg, noise)
    log.info("solved: %d sweeps, residual %.3e, %.2fs", rep.iterations, rep.final_residual, rep.wall_time)
    return c, noise, V1, V2, rep


def _costs(problem, q, grid, noise):
    states = simulate_state(problem.dyn, q, grid, noise)
    if isinstance(problem, LQICProblemData):
        return cost_lqic(problem, q, states, noise)
    return cost_lc(problem, q, states, noise)


def _extract(problem, V1, V2, dt):
    if isinstance(problem, LQICProblemData):
        return extract_lqic_controls((V1, V2), problem, dt)
    return extract_lc_controls((V1, V2), problem, dt)


def _control_fields(q, N):
    return {"u1": q.u1.values[:, :N + 1], "u2": q.u2.values[:, :N + 1]}


def mode_check(run, out: Path) -> int:
    problem = run["problem"]
    reports = []
    if isinstance(problem, LQICProblemData):
        rep = checks.check_lqic(problem)
        reports.append(rep)
        if rep.passed:
            c = lqic_hamiltonian(problem)
            reports.append(checks.check_adjoint(c.structural))
    else:
        for name in ("f11", "f12", "f41", "f42"):
            f = at(getattr(problem, name), 0.0)
            r = checks.check_convexity(f, dim=problem.dyn.m if name in ("f11", "f12") else problem.dyn.k)
            r.name = f"convexity {name}"
            reports.append(r)
        c = lc_hamiltonian(problem)
        reports += [checks.check_lipschitz(c), checks.check_adjoint(c.structural),
                    checks.check_monotonicity(c)]
    ok = all(r.passed for r in reports)
    write_json(out / "check.json", {"passed": ok, "reports": [r.to_dict() for r in reports]})
    for r in reports:
        log.info("%s: %s (%d violations)", r.name, "pass" if r.passed else "FAIL", r.violations)
        if not r.passed:
            log.error("witness: %s", r.witness)
    return EXIT_OK if ok else EXIT_ADMISSIBILITY


def mode_solve(run, out: Path) -> int:
    problem = run["problem"]
    if isinstance(problem, LQICProblemData):
        pre = checks.check_lqic(problem)
        if not pre.passed:
            write_json(out / "check.json", {"passed": False, "reports": [pre.to_dict()]})
            log.error("preflight failed: %s", pre.witness)
            return EXIT_ADMISSIBILITY
    c, noise, V1, V2, rep = _solve(run, problem)
    grid = run["solver"].grid
    q = _extract(problem, V1, V2, grid.dt)
    cost = _costs(problem, q, grid, noise)
    write_csv(out / "trajectories.csv", *trajectory_table(grid.nodes, _triple_fields(V1, V2)))
    write_csv(out / "controls.csv", *trajectory_table(grid.nodes, _control_fields(q, grid.N)))
    write_json(out / "report.json", {"solve": _report_dict(rep), "cost": cost.to_dict(),
                                     "xi1": q.xi1, "xi2": q.xi2,
                                     "problem": serialize_problem(problem)})
    return EXIT_OK


def _example_errors(problem, V1, V2, noise, grid):
    ref = example_reference(noise, grid)
    N = grid.N
    q = extract_lc_controls((V1, V2), problem, grid.dt)
    return {
        "X": relative_l2(np.concatenate([V1.X, V2.X], axis=1), np.concatenate([ref.X1, ref.X2], axis=1)),
        "Y": relative_l2(np.concatenate([V1.Y, V2.Y], axis=1), np.concatenate([ref.Y1, ref.Y2], axis=1)),
        "Z": relative_l2(np.concatenate([V1.Z[:, :N], V2.Z[:, :N]], axis=1),
                         np.concatenate([ref.Z1[:, :N], ref.Z2[:, :N]], axis=1)),
        "u": relative_l2(np.concatenate([q.u1.values[:, :N], q.u2.values[:, :N]], axis=1),
                         np.concatenate([ref.u1[:, :N], ref.u2[:, :N]], axis=1)),
    }


def refinement_level(run, level: int) -> dict:
    """Run parameters of refinement level ``level``: 4x particles, 4x steps
    and two more pure-noise basis degrees per level."""
    cfg = run["solver"]
    b = cfg.basis
    nd = (b.noise_degree or b.degree) + 2 * level
    basis = RegressionBasis(b.kind, b.degree, nd, b.cutoff)
    sched = cfg.alpha_schedule if level == 0 else (0.0, 1.0)
    tol = cfg.picard_tol if level == 0 else max(cfg.picard_tol, 1e-5)
    solver = SolverConfig(particles=cfg.particles * 4 ** level, steps=cfg.steps * 4 ** level, T=cfg.T,
                          basis=basis, picard_tol=tol, picard_max=cfg.picard_max, damping=cfg.damping,
                          alpha_schedule=sched, seed=cfg.seed, anderson=cfg.anderson)
    return dict(run, solver=solver)


def mode_example(run, out: Path, threshold: float = 0.10) -> int:
    problem = run["problem"]
    if not isinstance(problem, LCProblemData) or problem.source.get("builtin") != "exponential-lc-example":
        raise ConfigError("problem", "example-lc runs the builtin exponential example only")
    table = []
    first = None
    for level in range(run.get("levels", 1)):
        lr = refinement_level(run, level)
        grid = lr["solver"].grid
        _, noise, V1, V2, rep = _solve(lr, problem)
        err = _example_errors(problem, V1, V2, noise, grid)
        table.append({"level": level, "particles": lr["solver"].particles, "steps": grid.N,
                      "noise_degree": lr["solver"].basis.noise_degree, "errors": err,
                      "sweeps": rep.iterations, "final_residual": rep.final_residual})
        log.info("level %d: %s", level, {k: round(v, 5) for k, v in err.items()})
        if first is None:
            first = (grid, V1, V2, rep)
    grid, V1, V2, rep = first
    within = all(v <= threshold for v in table[0]["errors"].values())
    decreasing = all(table[i + 1]["errors"][k] < table[i]["errors"][k]
                     for i in range(len(table) - 1) for k in table[i]["errors"])
    ok = within and decreasing
    write_csv(out / "trajectories.csv", *trajectory_table(grid.nodes, _triple_fields(V1, V2)))
    write_json(out / "oracle.json", {"errors": table[0]["errors"], "threshold": threshold,
                                     "within_threshold": within, "refinement": table,
                                     "errors_decrease": decreasing, "passed": ok,
                                     "solve": _report_dict(rep)})
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def mode_lqic_compare(run, out: Path, cost_tol: float = 1e-3, control_tol: float = 0.05) -> int:
    problem = run["problem"]
    if not isinstance(problem, LQICProblemData):
        raise ConfigError("problem", "lqic-compare needs a constrained linear-quadratic problem")
    pre = checks.check_lqic(problem)
    if not pre.passed:
        write_json(out / "check.json", {"passed": False, "reports": [pre.to_dict()]})
        return EXIT_ADMISSIBILITY
    _, noise, V1, V2, rep = _solve(run, problem)
    grid = run["solver"].grid
    N = grid.N
    q = extract_lqic_controls((V1, V2), problem, grid.dt)
    ham = _costs(problem, q, grid, noise)
    bf = brute_force_lqic(problem, grid, noise, basis=run["solver"].basis)
    direct = bf.breakdown(problem, noise)
    du = {"u1": relative_l2(q.u1.values[:, :N], bf.u1), "u2": relative_l2(q.u2.values[:, :N], bf.u2)}
    gap = abs(ham.total - direct.total)
    ok = gap <= cost_tol * max(1.0, abs(direct.total)) and all(v <= control_tol for v in du.values())
    write_csv(out / "controls.csv", *trajectory_table(grid.nodes[:N], {
        "u1_hamiltonian": q.u1.values[:, :N], "u1_direct": bf.u1,
        "u2_hamiltonian": q.u2.values[:, :N], "u2_direct": bf.u2}))
    write_json(out / "compare.json", {
        "hamiltonian": {"cost": ham.to_dict(), "xi1": q.xi1, "xi2": q.xi2, "solve": _report_dict(rep)},
        "direct": {"cost": direct.to_dict(), "xi1": bf.xi1, "xi2": bf.xi2, "iterations": bf.iterations,
                   "stationarity": bf.stationarity},
        "cost_difference": gap, "cost_tolerance": cost_tol * max(1.0, abs(direct.total)),
        "control_relative_l2": du, "control_tolerance": control_tol, "passed": ok,
        "problem": serialize_problem(problem)})
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def mode_stability(run, out: Path, factor: float = 2.0) -> int:
    problem = run["problem"]
    c, noise, V1, V2, rep = _solve(run, problem)
    cfg = run["solver"]
    ratios = stability_probe(c, run["sizes"], cfg.grid, noise, cfg, baseline=(V1, V2))
    spread = max(ratios) / min(ratios) if min(ratios) > 0 else math.inf
    ok = spread <= factor
    write_json(out / "stability.json", {"sizes": run["sizes"], "ratios": ratios, "spread": spread,
                                        "factor": factor, "passed": ok, "solve": _report_dict(rep)})
    return EXIT_OK if ok else EXIT_ACCEPTANCE


_RUNNERS = {"solve": mode_solve, "check": mode_check, "example-lc": mode_example,
            "lqic-compare": mode_lqic_compare, "stability": mode_stability}


def run(mode: str, config_path=None, overrides: dict | None = None, out=None) -> int:
    """Execute one mode; returns the exit status."""
    try:
        cfg = _load_mapping(config_path) if config_path else {}
        base = Path(config_path).parent if config_path else None
        r = build_run(mode, cfg, overrides or {}, base)
        out_dir = Path(out or r.get("out") or "out")
        if out_dir.exists() and not out_dir.is_dir():
            raise ConfigError("out", f"{out_dir} is not a directory")
        return _RUNNERS[mode](r, out_dir)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except NonConvergence as e:
        log.error("no convergence: %s", e)
        return EXIT_NONCONV
    except AdmissibilityViolation as e:
        log.error("admissibility: %s", e)
        return EXIT_ADMISSIBILITY
    except InvalidArgument as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except NumericFailure as e:
        log.error("numerical failure: %s", e)
        return EXIT_NONCONV


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mffbsde", description=__doc__.split("\n\n")[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="run or problem file (YAML or JSON)")
    p.add_argument("--particles", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--alpha-steps", help="comma-separated continuation schedule, e.g. 0,0.5,1")
    p.add_argument("--out", help="output directory (default ./out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {"particles": args.particles, "steps": args.steps, "seed": args.seed,
                 "tol": args.tol, "alpha_schedule": args.alpha_steps}
    config = args.config
    # a bare problem file is accepted in place of a run file
    if config:
        try:
            data = _load_mapping(config)
        except ConfigError as e:
            log.error("config error: %s", e)
            return EXIT_CONFIG
        if isinstance(data, dict) and ("builtin" in data or "type" in data):
            overrides["problem"] = data
            config = None
    return run(args.mode, config, overrides, args.out)


if __name__ == "__main__":
    sys.exit(main())
