"""
Scenario representation, loading and validation for cascaded diffusions.

A scenario is a chain of subsystems where subsystem 1 carries the noise
``sqrt(eps) * sigma(x1) dW`` and every downstream subsystem ``l`` is an ODE
driven by the states of subsystems ``1..l`` and its own control ``u_l``.
Domains and control sets are axis-aligned boxes.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .expr import (ExprEvalError, affine_form, compile_expr, parse_expr,
                   split_var, to_text, variables)

__all__ = [
    "SubsystemSpec", "CascadeSpec", "Diagnostic", "ScenarioError",
    "load_scenario", "scenario_from_dict", "scenario_to_dict", "builtin_scenarios",
    "validate_scenario", "drift_slope_report", "hormander_rank_check", "probe_points",
]


class ScenarioError(ValueError):
    """Scenario file cannot be read or does not match the schema."""


@dataclass(frozen=True)
class SubsystemSpec:
    """One subsystem: ``dim`` states, drift expressions, boxes and theta.

    ``control`` holds the fixed control schedule used whenever this subsystem
    is upstream of the one under study, as ``(breakpoints, values)``; None
    means the centre of ``control_box``.
    """
    dim: int
    drift: tuple
    control_box: np.ndarray
    domain: np.ndarray
    theta: float
    control: Optional[tuple] = None

    @property
    def control_dim(self):
        return len(self.control_box)


@dataclass(frozen=True)
class CascadeSpec:
    subsystems: tuple
    sigma: tuple
    epsilon: float
    initial: tuple
    dt: float
    t_max: float
    lambda_floor: float = 1e-6
    name: str = ""

    @property
    def n(self):
        return len(self.subsystems)

    @property
    def noise_dim(self):
        return len(self.sigma[0]) if self.sigma else 0

    @property
    def n_steps(self):
        return int(np.ceil(self.t_max / self.dt - 1e-9))

    def subsystem(self, ell):
        """1-based access, matching the ``x<i>_<j>`` naming."""
        if not 1 <= ell <= self.n:
            raise IndexError(f"subsystem index {ell} outside 1..{self.n}")
        return self.subsystems[ell - 1]

    def sigma_is_constant(self):
        return all(not variables(e) for row in self.sigma for e in row)

    def with_(self, **changes):
        """Copy with top-level fields replaced (``epsilon``, ``dt``, ...)."""
        return replace(self, **changes)

    def with_subsystem(self, ell, **changes):
        subs = list(self.subsystems)
        subs[ell - 1] = replace(subs[ell - 1], **changes)
        return replace(self, subsystems=tuple(subs))

    def content_hash(self):
        # the name is a label, not content: renamed copies hash equal
        data = scenario_to_dict(self)
        data.pop("name")
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    blocking: bool = True

    def __str__(self):
        return f"{self.code}: {self.message}"


# --------------------------------------------------------------------------
# file schema

def _box(rows, what):
    arr = np.asarray(rows, dtype=float).reshape(-1, 2) if len(rows) else np.zeros((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ScenarioError(f"{what} must be a list of [low, high] pairs")
    arr.setflags(write=False)
    return arr


def _parse_control(obj, where):
    if obj is None:
        return None
    try:
        if "constant" in obj:
            return ((), (tuple(float(c) for c in obj["constant"]),))
        bps = tuple(float(b) for b in obj["breakpoints"])
        vals = tuple(tuple(float(c) for c in row) for row in obj["values"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}.control: {exc}") from None
    return (bps, vals)


def scenario_from_dict(data: dict, name: str = "") -> CascadeSpec:
    try:
        system = data["system"]
        subs = []
        for i, s in enumerate(data["subsystem"], start=1):
            subs.append(SubsystemSpec(
                dim=int(s["dim"]),
                drift=tuple(parse_expr(str(d)) for d in s["drift"]),
                control_box=_box(s.get("control_box", []), f"subsystem[{i}].control_box"),
                domain=_box(s["domain"], f"subsystem[{i}].domain"),
                theta=float(s["theta"]),
                control=_parse_control(s.get("control"), f"subsystem[{i}]"),
            ))
        sigma = tuple(tuple(parse_expr(str(c)) for c in row) for row in data["sigma"])
        initial = tuple(np.asarray(x, dtype=float) for x in data["initial"])
        n = int(system.get("n", len(subs)))
        if n != len(subs):
            raise ScenarioError(f"system.n = {n} but {len(subs)} subsystems given")
        return CascadeSpec(
            subsystems=tuple(subs),
            sigma=sigma,
            epsilon=float(system["epsilon"]),
            initial=initial,
            dt=float(system["dt"]),
            t_max=float(system["t_max"]),
            lambda_floor=float(system.get("lambda_floor", 1e-6)),
            name=name or str(data.get("name", "")),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"ill-formed scenario: {exc!r}") from None


def scenario_to_dict(spec: CascadeSpec) -> dict:
    subs = []
    for s in spec.subsystems:
        d = {
            "dim": s.dim,
            "drift": [to_text(e) for e in s.drift],
            "control_box": s.control_box.tolist(),
            "domain": s.domain.tolist(),
            "theta": s.theta,
        }
        if s.control is not None:
            bps, vals = s.control
            d["control"] = ({"constant": list(vals[0])} if not bps else
                            {"breakpoints": list(bps), "values": [list(v) for v in vals]})
        subs.append(d)
    return {
        "name": spec.name,
        "system": {"n": spec.n, "epsilon": spec.epsilon, "dt": spec.dt,
                   "t_max": spec.t_max, "lambda_floor": spec.lambda_floor},
        "subsystem": subs,
        "sigma": [[to_text(e) for e in row] for row in spec.sigma],
        "initial": [x.tolist() for x in spec.initial],
    }


def builtin_scenarios():
    """Names of the scenarios shipped with the package."""
    root = resources.files("riskescape") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(path) -> CascadeSpec:
    """Load a scenario from a JSON file, or a shipped one by bare name."""
    p = Path(path)
    if not p.exists() and str(path) in builtin_scenarios():
        text = (resources.files("riskescape") / "scenarios" / f"{path}.json").read_text()
        return scenario_from_dict(json.loads(text), name=str(path))
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return scenario_from_dict(data, name=p.stem)


# --------------------------------------------------------------------------
# validation

def probe_points(box):
    """Per-axis probes ``low + w/4, mid, high - w/4`` for a box of shape (k, 2)."""
    box = np.asarray(box, dtype=float)
    w = box[:, 1] - box[:, 0]
    return np.stack([box[:, 0] + 0.25 * w, box[:, 0] + 0.5 * w, box[:, 1] - 0.25 * w], axis=1)


def _probe_env(spec, upto):
    """Cartesian probe grid over D_1..D_upto plus the initial point, as arrays."""
    names, axes, init = [], [], []
    for i in range(1, upto + 1):
        s = spec.subsystem(i)
        for j, pts in enumerate(probe_points(s.domain), start=1):
            names.append(f"x{i}_{j}")
            axes.append(pts)
            init.append(spec.initial[i - 1][j - 1])
    grid = np.array(list(itertools.product(*axes)), dtype=float) if axes else np.zeros((1, 0))
    grid = np.vstack([grid, np.asarray(init, dtype=float)[None, :]])
    return {name: grid[:, k] for k, name in enumerate(names)}, len(grid)


def _control_probes(s):
    if s.control_dim == 0:
        return [np.zeros(0)]
    box = np.asarray(s.control_box)
    return [box[:, 0], box.mean(axis=1), box[:, 1]]


def validate_scenario(spec: CascadeSpec) -> list:
    """Blocking consistency checks; an empty list means the scenario is usable.

    Checks dimensions, the cascade dependency rule, interior initial point,
    sampled ellipticity of ``sigma sigma^T`` on the D_1 probe grid, and
    finiteness of every drift at the probe points.
    """
    diags = []
    if spec.n < 1:
        return [Diagnostic("dimension", "scenario has no subsystems")]
    if not (spec.epsilon > 0):
        diags.append(Diagnostic("parameter", f"epsilon must be > 0, got {spec.epsilon}"))
    if not (spec.dt > 0 and spec.t_max >= spec.dt):
        diags.append(Diagnostic("parameter", f"need dt > 0 and t_max >= dt (dt={spec.dt}, t_max={spec.t_max})"))
    if not (spec.lambda_floor > 0):
        diags.append(Diagnostic("parameter", "lambda_floor must be > 0"))
    if len(spec.initial) != spec.n:
        diags.append(Diagnostic("dimension", f"initial has {len(spec.initial)} blocks for {spec.n} subsystems"))
        return diags

    shape_ok = True
    for i, s in enumerate(spec.subsystems, start=1):
        if s.dim < 1:
            diags.append(Diagnostic("dimension", f"subsystem {i}: dim must be positive"))
            shape_ok = False
            continue
        if len(s.drift) != s.dim:
            diags.append(Diagnostic("dimension", f"subsystem {i}: {len(s.drift)} drift entries for dim {s.dim}"))
            shape_ok = False
        if s.domain.shape != (s.dim, 2):
            diags.append(Diagnostic("dimension", f"subsystem {i}: domain needs {s.dim} intervals"))
            shape_ok = False
        elif np.any(s.domain[:, 0] >= s.domain[:, 1]):
            diags.append(Diagnostic("box", f"subsystem {i}: domain bounds not strictly ordered"))
            shape_ok = False
        if s.control_dim and np.any(s.control_box[:, 0] > s.control_box[:, 1]):
            diags.append(Diagnostic("box", f"subsystem {i}: control box bounds reversed"))
        if not (s.theta >= 0):
            diags.append(Diagnostic("parameter", f"subsystem {i}: theta must be nonnegative"))
        if spec.initial[i - 1].shape != (s.dim,):
            diags.append(Diagnostic("dimension", f"subsystem {i}: initial point has wrong length"))
            shape_ok = False
        if s.control is not None:
            bps, vals = s.control
            if any(len(v) != s.control_dim for v in vals) or (bps and len(bps) != len(vals) + 1):
                diags.append(Diagnostic("dimension", f"subsystem {i}: fixed control schedule has wrong shape"))

        for e in s.drift:
            for name in sorted(variables(e)):
                kind, a, b = split_var(name)
                if kind == "x" and a > i:
                    diags.append(Diagnostic("cascade violation",
                                            f"subsystem {i} drift references downstream state {name}"))
                elif kind == "x" and b > spec.subsystem(a).dim:
                    diags.append(Diagnostic("dimension", f"{name} exceeds dim of subsystem {a}"))
                elif kind == "u" and a != i:
                    diags.append(Diagnostic("cascade violation",
                                            f"subsystem {i} drift references control {name} of subsystem {a}"))
                elif kind == "u" and b > s.control_dim:
                    diags.append(Diagnostic("dimension", f"{name} exceeds control dim of subsystem {i}"))

    d1 = spec.subsystems[0].dim
    if len(spec.sigma) != d1 or len({len(r) for r in spec.sigma}) != 1 or spec.noise_dim < 1:
        diags.append(Diagnostic("dimension", f"sigma must be a {d1} x m matrix with m >= 1"))
        shape_ok = False
    else:
        for row in spec.sigma:
            for e in row:
                for name in variables(e):
                    kind, a, b = split_var(name)
                    if kind != "x" or a != 1 or b > d1:
                        diags.append(Diagnostic("cascade violation",
                                                f"sigma may depend on x1 only, found {name}"))
    if not shape_ok or any(d.code in ("cascade violation", "dimension") for d in diags):
        return diags

    for i, s in enumerate(spec.subsystems, start=1):
        x0 = spec.initial[i - 1]
        if np.any(x0 <= s.domain[:, 0]) or np.any(x0 >= s.domain[:, 1]):
            diags.append(Diagnostic("initial point not interior",
                                    f"x_0 of subsystem {i} = {x0.tolist()} is not inside D_{i}"))

    env, npts = _probe_env(spec, 1)
    env["t"] = 0.0
    try:
        sig = np.empty((npts, d1, spec.noise_dim))
        for r, row in enumerate(spec.sigma):
            for c, e in enumerate(row):
                sig[:, r, c] = compile_expr(e)(env)
        lam = np.linalg.eigvalsh(sig @ np.swapaxes(sig, 1, 2)).min()
        if lam < spec.lambda_floor:
            diags.append(Diagnostic("ellipticity",
                                    f"min eigenvalue of sigma sigma^T on probes is {lam:.4g} < {spec.lambda_floor}"))
    except ExprEvalError as exc:
        diags.append(Diagnostic("non-finite", f"sigma: {exc}"))

    for i, s in enumerate(spec.subsystems, start=1):
        env, npts = _probe_env(spec, i)
        env["t"] = 0.0
        for u in _control_probes(s):
            for j, val in enumerate(u, start=1):
                env[f"u{i}_{j}"] = float(val)
            for k, e in enumerate(s.drift, start=1):
                try:
                    compile_expr(e)(env)
                except ExprEvalError as exc:
                    diags.append(Diagnostic("non-finite", f"drift of x{i}_{k}: {exc}"))
                    break
    return diags


def drift_slope_report(spec: CascadeSpec, h: float = 1e-5) -> list:
    """Advisory finite-difference slopes of each drift at the probe points.

    Returns rows ``{subsystem, coordinate, wrt, max_abs_slope}``. Nothing is
    asserted: Lipschitz bounds are not decidable for the expression language.
    """
    rows = []
    for i, s in enumerate(spec.subsystems, start=1):
        env, _ = _probe_env(spec, i)
        env["t"] = 0.0
        u_mid = _control_probes(s)[1 if s.control_dim else 0]
        for j, val in enumerate(u_mid, start=1):
            env[f"u{i}_{j}"] = float(val)
        for k, e in enumerate(s.drift, start=1):
            f = compile_expr(e)
            # unknown names only occur in scenarios that already fail validation
            for name in sorted(v for v in variables(e) if v in env and v != "t"):
                hi, lo = dict(env), dict(env)
                hi[name] = env[name] + h
                lo[name] = env[name] - h
                try:
                    slope = (np.asarray(f(hi)) - np.asarray(f(lo))) / (2 * h)
                except ExprEvalError:
                    continue
                rows.append({"subsystem": i, "coordinate": k, "wrt": name,
                             "max_abs_slope": float(np.max(np.abs(slope)))})
    return rows


def hormander_rank_check(spec: CascadeSpec) -> dict:
    """Kalman-type rank of the noise reachability matrix for affine cascades.

    Applicable only when every drift is affine in (x, u) and sigma is
    constant. Stacks the states into one vector of size k, builds the state
    coupling matrix A and the noise injection B (rows of subsystem 1 only),
    and returns the rank of ``[B, AB, ..., A^{k-1} B]``.
    """
    if not spec.sigma_is_constant():
        return {"applicable": False, "rank": 0, "full": False}
    offsets, k = {}, 0
    for i, s in enumerate(spec.subsystems, start=1):
        offsets[i] = k
        k += s.dim
    A = np.zeros((k, k))
    for i, s in enumerate(spec.subsystems, start=1):
        for r, e in enumerate(s.drift):
            form = affine_form(e)
            if form is None:
                return {"applicable": False, "rank": 0, "full": False}
            for name, c in form[0].items():
                kind, a, b = split_var(name)
                if kind == "x":
                    if a not in offsets or b > spec.subsystem(a).dim:
                        return {"applicable": False, "rank": 0, "full": False}
                    A[offsets[i] + r, offsets[a] + b - 1] += c
    m = spec.noise_dim
    B = np.zeros((k, m))
    for r, row in enumerate(spec.sigma):
        for c, e in enumerate(row):
            B[r, c] = float(compile_expr(e)({}))
    blocks, cur = [], B
    for _ in range(k):
        blocks.append(cur)
        cur = A @ cur
    rank = int(np.linalg.matrix_rank(np.hstack(blocks)))
    return {"applicable": True, "rank": rank, "full": rank == k}
