"""
Euler-Maruyama integration of the cascade, exit detection and control laws.

Noise enters subsystem 1 only::

    dx1 = m1(x1, u1) dt + sigma(x1) v(t) dt + sqrt(eps) sigma(x1) dW
    dxl = ml(x1, ..., xl, ul) dt,          l = 2..n

``v`` is an optional deterministic shift. Paths are integrated in blocks of
``BLOCK_SIZE``; block ``b`` draws its Gaussian increments from a Philox
stream keyed by ``(seed, b)``, one row of the block per path and step, so a
path sees the same noise whatever controls are applied and whichever worker
runs the block.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .expr import ExprEvalError, compile_expr, variables
from .model import CascadeSpec

__all__ = [
    "PiecewiseConstant", "PathStrategy", "DisturbanceLaw", "Trajectory", "ExitRecord",
    "BatchResult", "SimulationError", "default_controls", "simulate_path", "simulate_batch",
    "exit_time", "check_exit_ordering", "shift_strategy", "noise_generator", "BLOCK_SIZE",
    "simulate_replicas",
]

BLOCK_SIZE = 8192
_CHUNK_STEPS = 64
# breakpoints closer than this fraction of dt to a grid time count as on-grid
_SNAP = 1e-9


class SimulationError(RuntimeError):
    pass


def _clip_box(values, box):
    if box is None or len(box) == 0:
        return values
    box = np.asarray(box, dtype=float)
    return np.clip(values, box[:, 0], box[:, 1])


def _piece_index(breakpoints, t, n_pieces, snap=0.0):
    k = np.searchsorted(breakpoints, np.asarray(t) + snap, side="right") - 1
    return np.clip(k, 0, n_pieces - 1)


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """Open-loop control ``u(t) = values[k]`` on ``[t_k, t_{k+1})``.

    Values are clipped into ``box`` at construction. After the last
    breakpoint the final value is held.
    """
    breakpoints: np.ndarray
    values: np.ndarray
    box: Optional[np.ndarray] = None

    def __post_init__(self):
        bps = np.asarray(self.breakpoints, dtype=float)
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if vals.shape[0] != len(bps) - 1 and len(bps) >= 2:
            vals = vals.reshape(len(bps) - 1, -1)
        if len(bps) < 2 or vals.shape[0] != len(bps) - 1:
            raise ValueError("need K+1 breakpoints for K values")
        if bps[0] != 0 or np.any(np.diff(bps) <= 0):
            raise ValueError("breakpoints must start at 0 and increase strictly")
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "values", _clip_box(vals, self.box))

    @classmethod
    def constant(cls, value, t_max, box=None):
        return cls(np.array([0.0, float(t_max)]), np.atleast_2d(np.asarray(value, dtype=float)), box)

    @classmethod
    def uniform(cls, values, horizon, box=None):
        """K equal pieces on ``[0, horizon]``; ``values`` has shape (K, r)."""
        vals = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(np.linspace(0.0, float(horizon), len(vals) + 1), vals, box)

    depends_on_noise = False

    @property
    def dim(self):
        return self.values.shape[1]

    def __call__(self, t, w=None):
        return self.values[_piece_index(self.breakpoints, t, len(self.values))]

    def on_grid(self, n_steps, dt):
        t = np.arange(n_steps + 1) * dt
        return self.values[_piece_index(self.breakpoints, t, len(self.values), _SNAP * dt)]

    def params(self):
        return self.values.ravel().copy()


@dataclass(frozen=True, eq=False)
class DisturbanceLaw:
    """Piecewise-constant shift ``v(t)`` in R^m, zero after the last breakpoint."""
    breakpoints: np.ndarray
    values: np.ndarray
    l2sq: float = field(init=False)
    sup_norm: float = field(init=False)

    def __post_init__(self):
        bps = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(len(bps) - 1, -1)
        if len(bps) < 2 or vals.shape[0] != len(bps) - 1:
            raise ValueError("need K+1 breakpoints for K values")
        if bps[0] != 0 or np.any(np.diff(bps) <= 0):
            raise ValueError("breakpoints must start at 0 and increase strictly")
        if not np.all(np.isfinite(vals)):
            raise ValueError("disturbance values must be finite")
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "values", vals)
        sq = np.sum(vals ** 2, axis=1)
        object.__setattr__(self, "l2sq", float(np.sum(sq * np.diff(bps))))
        object.__setattr__(self, "sup_norm", float(np.sqrt(sq.max())))

    @classmethod
    def zero(cls, m, t_max=1.0):
        return cls(np.array([0.0, float(t_max)]), np.zeros((1, m)))

    @classmethod
    def constant(cls, value, t_max):
        return cls(np.array([0.0, float(t_max)]), np.atleast_2d(np.asarray(value, dtype=float)))

    @classmethod
    def uniform(cls, values, horizon):
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return cls(np.linspace(0.0, float(horizon), len(vals) + 1), vals)

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def is_zero(self):
        return not np.any(self.values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = _piece_index(self.breakpoints, t, len(self.values))
        inside = (t >= 0) & (t < self.breakpoints[-1])
        return np.where(np.asarray(inside)[..., None], self.values[k], 0.0)

    def on_grid(self, n_steps, dt):
        """Left-point values at ``t_k = k dt``, shape (n_steps + 1, m)."""
        t = np.arange(n_steps + 1) * dt
        k = _piece_index(self.breakpoints, t, len(self.values), _SNAP * dt)
        inside = t + _SNAP * dt < self.breakpoints[-1]
        return np.where(inside[:, None], self.values[k], 0.0)

    def integral(self, t):
        """Exact ``int_0^t v(s) ds``."""
        t = float(t)
        lo = self.breakpoints[:-1]
        hi = self.breakpoints[1:]
        w = np.clip(np.minimum(hi, t) - lo, 0.0, None)
        return w @ self.values

    def running_cost(self, crossing_index, fraction, dt):
        """Left Riemann sum of ``0.5 |v|^2`` up to an exit on the dt grid.

        Cells before ``crossing_index`` count fully, the crossing cell with
        weight ``fraction``. Arrays are accepted for the exit description.
        """
        ci = np.asarray(crossing_index)
        n = int(np.max(ci)) + 1 if ci.size else 1
        half = 0.5 * np.sum(self.on_grid(n, dt) ** 2, axis=1) * dt
        cum = np.concatenate([[0.0], np.cumsum(half)])
        return cum[ci] + np.asarray(fraction) * half[ci]

    def params(self):
        return self.values.ravel().copy()


@dataclass(frozen=True, eq=False)
class PathStrategy:
    """Nonanticipative control from the current time and noise value.

    ``u = clip(bias + gain_t * t + gain_w @ W(t))`` by default, or
    ``clip(func(t, W(t)))`` when ``func`` is given; ``W`` has shape (P, m) in
    vectorized use. ``shifts`` holds ``(v, scale)`` pairs that translate the
    noise feature by ``scale * int_0^t v`` before the map is applied.
    """
    bias: np.ndarray
    gain_w: np.ndarray
    box: Optional[np.ndarray] = None
    gain_t: Optional[np.ndarray] = None
    func: Optional[Callable] = None
    shifts: tuple = ()

    depends_on_noise = True

    def __post_init__(self):
        bias = np.atleast_1d(np.asarray(self.bias, dtype=float))
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "gain_w", np.atleast_2d(np.asarray(self.gain_w, dtype=float)))
        gt = np.zeros_like(bias) if self.gain_t is None else np.asarray(self.gain_t, dtype=float)
        object.__setattr__(self, "gain_t", gt)

    @property
    def dim(self):
        return len(self.bias)

    def raw(self, t, w):
        if self.func is not None:
            return np.asarray(self.func(t, w), dtype=float)
        return self.bias + self.gain_t * t + w @ self.gain_w.T

    def __call__(self, t, w):
        """Control at time ``t`` given the noise value ``W(t)``."""
        w = np.asarray(w, dtype=float)
        for v, scale in self.shifts:
            w = w + scale * v.integral(t)
        return _clip_box(self.raw(t, w), self.box)

    def params(self):
        return np.concatenate([self.bias, self.gain_w.ravel()])


def shift_strategy(gamma, v: DisturbanceLaw, epsilon: float):
    """Control seen by the shifted system: ``gamma(t, W + eps^{-1/2} int v)``.

    Noise-independent laws and the zero shift come back unchanged.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not getattr(gamma, "depends_on_noise", False) or v.is_zero:
        return gamma
    return PathStrategy(gamma.bias, gamma.gain_w, gamma.box, gamma.gain_t, gamma.func,
                        gamma.shifts + ((v, 1.0 / np.sqrt(epsilon)),))


def default_controls(spec: CascadeSpec) -> list:
    """Fixed control schedules from the scenario (box centre when absent)."""
    out = []
    for s in spec.subsystems:
        if s.control is not None:
            bps, vals = s.control
            if not bps:
                out.append(PiecewiseConstant.constant(vals[0], spec.t_max, s.control_box))
            else:
                out.append(PiecewiseConstant(np.array(bps), np.array(vals), s.control_box))
        else:
            centre = s.control_box.mean(axis=1) if s.control_dim else np.zeros(0)
            out.append(PiecewiseConstant(np.array([0.0, spec.t_max]), centre.reshape(1, -1), s.control_box))
    return out


@dataclass(frozen=True)
class ExitRecord:
    """First exit of one subsystem; censored records carry the horizon as tau."""
    tau: float
    censored: bool
    crossing_index: int
    fraction: float


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    controls: list
    shift: np.ndarray
    noise: Optional[np.ndarray]
    dt: float
    t_max: float

    def to_csv(self, dest=None):
        """Write ``t, x.., u.., v_.., dW_..`` rows; returns the text if no dest."""
        header = ["t"]
        for i, x in enumerate(self.states, start=1):
            header += [f"x{i}_{j}" for j in range(1, x.shape[1] + 1)]
        for i, u in enumerate(self.controls, start=1):
            header += [f"u{i}_{j}" for j in range(1, u.shape[1] + 1)]
        m = self.shift.shape[1]
        header += [f"v_{j}" for j in range(1, m + 1)] + [f"dW_{j}" for j in range(1, m + 1)]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for k, t in enumerate(self.times):
            row = [repr(float(t))]
            for x in self.states:
                row += [repr(float(c)) for c in x[k]]
            for u in self.controls:
                row += [repr(float(c)) for c in u[k]]
            row += [repr(float(c)) for c in self.shift[k]]
            if self.noise is not None and k < len(self.noise):
                row += [repr(float(c)) for c in self.noise[k]]
            else:
                row += [""] * m
            wr.writerow(row)
        text = buf.getvalue()
        if dest is None:
            return text
        with open(dest, "w", newline="") as fh:
            fh.write(text)


# --------------------------------------------------------------------------
# exit detection

def _crossing(x_old, x_new, low, high):
    """Exit mask and crossing fraction for a step from x_old to x_new (P, d)."""
    out_lo = x_new <= low
    out_hi = x_new >= high
    out = out_lo | out_hi
    hit = out.any(axis=1)
    bound = np.where(out_lo, low, high)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (bound - x_old) / (x_new - x_old)
    f = np.where(out, np.clip(np.nan_to_num(f, nan=0.0), 0.0, 1.0), np.inf)
    frac = np.where(hit, f.min(axis=1), 0.0)
    return hit, frac


def _outside(x, low, high):
    return np.any((x <= low) | (x >= high), axis=-1)


def exit_time(traj: Trajectory, ell: int, domain) -> ExitRecord:
    """First exit of subsystem ``ell`` (1-based) of ``traj`` from the box ``domain``.

    Linear interpolation inside the crossing interval on the earliest-crossing
    coordinate; a start outside the box exits at tau = 0.
    """
    x = traj.states[ell - 1]
    box = np.asarray(domain, dtype=float)
    low, high = box[:, 0], box[:, 1]
    out = _outside(x, low, high)
    horizon = min(traj.t_max, float(traj.times[-1]))
    if not out.any():
        return ExitRecord(horizon, True, len(traj.times) - 1, 0.0)
    k = int(np.argmax(out))
    if k == 0:
        return ExitRecord(0.0, False, 0, 0.0)
    _, frac = _crossing(x[k - 1][None, :], x[k][None, :], low, high)
    tau = float(k - 1) * traj.dt + float(frac[0]) * traj.dt
    if tau > traj.t_max:
        return ExitRecord(traj.t_max, True, k - 1, float(frac[0]))
    return ExitRecord(tau, False, k - 1, float(frac[0]))


def check_exit_ordering(records) -> dict:
    """Check ``tau_1 >= tau_2 >= ... >= tau_l``; censored records count as their horizon."""
    taus = [r.tau if isinstance(r, ExitRecord) else float(r) for r in records]
    violations = [(i + 1, i + 2) for i in range(len(taus) - 1) if taus[i] < taus[i + 1]]
    return {"ok": not violations, "violations": violations}


# --------------------------------------------------------------------------
# integration engine

def noise_generator(seed, block):
    """Counter-based Philox stream for one block of paths."""
    key = (int(seed) % (1 << 64)) * (1 << 64) + int(block)
    return np.random.Generator(np.random.Philox(key=key))


class _Model:
    """Compiled drift and noise maps of a scenario (first ``n`` subsystems)."""

    def __init__(self, spec, n):
        self.spec = spec
        self.n = n
        self.dims = [spec.subsystem(i).dim for i in range(1, n + 1)]
        self.rdims = [spec.subsystem(i).control_dim for i in range(1, n + 1)]
        self.drifts = [[compile_expr(e) for e in spec.subsystem(i).drift] for i in range(1, n + 1)]
        self.m = spec.noise_dim
        self.sigma_const = spec.sigma_is_constant()
        if self.sigma_const:
            self.sigma = np.array([[float(compile_expr(e)({})) for e in row] for row in spec.sigma])
        else:
            self.sigma_f = [[compile_expr(e) for e in row] for row in spec.sigma]
        self.uses_t = any("t" in variables(e) for i in range(1, n + 1) for e in spec.subsystem(i).drift)
        self.boxes = [spec.subsystem(i).domain for i in range(1, n + 1)]

    def sigma_at(self, env, P):
        if self.sigma_const:
            return self.sigma
        out = np.empty((P, len(self.sigma_f), self.m))
        for r, row in enumerate(self.sigma_f):
            for c, f in enumerate(row):
                out[:, r, c] = f(env)
        return out


def _law_grid(law, n_steps, dt):
    return None if law.depends_on_noise else law.on_grid(n_steps, dt)


def _shift_cumulative(v_grid, dt):
    """Left Riemann sums ``sum_{j<k} v(t_j) dt`` on the grid (rows k = 0..n)."""
    cum = np.zeros_like(v_grid)
    np.cumsum(v_grid[..., :-1, :] * dt, axis=-2, out=cum[..., 1:, :])
    return cum


@dataclass
class BatchResult:
    """Exit description of a batch; arrays have shape (N, n_simulated).

    Subsystems that had not exited when a path stopped early (``stop_at``)
    are marked censored with tau = NaN.
    """
    tau: np.ndarray
    censored: np.ndarray
    crossing_index: np.ndarray
    fraction: np.ndarray

    def record(self, path, ell):
        return ExitRecord(float(self.tau[path, ell - 1]), bool(self.censored[path, ell - 1]),
                          int(self.crossing_index[path, ell - 1]), float(self.fraction[path, ell - 1]))

    def taus(self, ell, t_max):
        """Exit times of subsystem ``ell`` with censored paths set to ``t_max``."""
        tau = self.tau[:, ell - 1].copy()
        tau[self.censored[:, ell - 1]] = t_max
        return tau


@dataclass(frozen=True, eq=False)
class _LawSet:
    """Several laws for one subsystem; ``index`` maps each row to its law."""
    laws: tuple
    index: np.ndarray


def _law_set(laws):
    """Deduplicate a per-path list of laws by identity."""
    seen, uniq, index = {}, [], np.empty(len(laws), dtype=np.int64)
    for p, law in enumerate(laws):
        j = seen.get(id(law))
        if j is None:
            j = seen[id(law)] = len(uniq)
            uniq.append(law)
        index[p] = j
    return _LawSet(tuple(uniq), index)


def _same_box(a, b):
    return (a is None) == (b is None) and (a is None or np.array_equal(a, b))


def _same_map(a, b):
    return (a.func is b.func and np.array_equal(a.bias, b.bias) and np.array_equal(a.gain_w, b.gain_w)
            and np.array_equal(a.gain_t, b.gain_t) and _same_box(a.box, b.box))


def _strategy_shift(law, n_steps, dt, m):
    cum = np.zeros((n_steps + 1, m))
    for v, scale in law.shifts:
        cum = cum + scale * _shift_cumulative(v.on_grid(n_steps, dt), dt)
    return cum


def _affine_rows(laws, n_steps, dt, m):
    """Stacked per-law ``(bias, gain_t, gain_w, open-loop grid, low, high)``.

    Open-loop laws enter through their grid with zero feature gains;
    strategies through their affine coefficients with a zero grid.
    """
    r = laws[0].dim
    b, gt, gw = np.zeros((len(laws), r)), np.zeros((len(laws), r)), np.zeros((len(laws), r, m))
    og = np.zeros((len(laws), n_steps + 1, r))
    lo, hi = np.full((len(laws), r), -np.inf), np.full((len(laws), r), np.inf)
    for j, l in enumerate(laws):
        if l.depends_on_noise:
            b[j], gt[j], gw[j] = l.bias, l.gain_t, l.gain_w
        else:
            og[j] = l.on_grid(n_steps, dt)
        if l.box is not None and len(l.box):
            lo[j], hi[j] = l.box[:, 0], l.box[:, 1]
    return b, gt, gw, og, lo, hi


def _run_block(spec, n_sim, controls, shift, P, seed, block, epsilon, stop_at,
               record=False, noise_increments=None, replicas=1):
    """Integrate ``replicas * P`` rows; row ``r`` uses the noise of path ``r % P``."""
    model = _Model(spec, n_sim)
    dt = spec.dt
    n_steps = spec.n_steps
    sqdt = np.sqrt(dt)
    stochastic = seed is not None or noise_increments is not None
    sqeps = np.sqrt(epsilon) if stochastic else 0.0
    m = model.m
    n_base = P
    P = P * replicas

    # control kinds: shared open-loop grid, per-row open-loop grids ("stack"),
    # a noise-driven strategy ("path"), or one strategy map with per-row
    # noise translations ("pathset")
    ctrl_kind, ctrl_grid, ctrl_idx = [], [], []
    shift_cum = {}
    for i, law in enumerate(controls):
        if isinstance(law, _LawSet):
            ctrl_idx.append(law.index)
            first = law.laws[0]
            noisy = [l.depends_on_noise for l in law.laws]
            if any(noisy):
                if all(noisy) and all(_same_map(first, l) for l in law.laws):
                    ctrl_grid.append(None)
                elif all(l.func is None for l in law.laws if l.depends_on_noise):
                    ctrl_grid.append(_affine_rows(law.laws, n_steps, dt, m))
                else:
                    raise ValueError("per-path strategies must be affine or share one feature map")
                ctrl_kind.append("pathset")
                shift_cum[i] = np.stack([_strategy_shift(l, n_steps, dt, m) if l.depends_on_noise
                                         else np.zeros((n_steps + 1, m)) for l in law.laws])
            else:
                ctrl_kind.append("stack")
                ctrl_grid.append(np.stack([l.on_grid(n_steps, dt) for l in law.laws]))
        elif law.depends_on_noise:
            ctrl_kind.append("path")
            ctrl_grid.append(None)
            ctrl_idx.append(None)
            if law.shifts:
                shift_cum[i] = _strategy_shift(law, n_steps, dt, m)
        else:
            ctrl_kind.append("shared")
            ctrl_grid.append(law.on_grid(n_steps, dt))
            ctrl_idx.append(None)
    need_w = "path" in ctrl_kind or "pathset" in ctrl_kind
    v_idx = None
    if shift is None:
        v_grid = None
    elif isinstance(shift, _LawSet):
        v_grid = np.stack([v.on_grid(n_steps, dt) for v in shift.laws])
        v_idx = shift.index
    else:
        v_grid = None if shift.is_zero else shift.on_grid(n_steps, dt)
    if model.sigma_const:
        sig_dt = model.sigma.T * dt
        sig_noise = model.sigma.T * sqeps

    x = [np.repeat(spec.initial[i][None, :].astype(float), P, axis=0) for i in range(n_sim)]
    ids = np.arange(P)
    W = np.zeros((P, m)) if need_w else None

    tau = np.full((P, n_sim), np.nan)
    censored = np.zeros((P, n_sim), dtype=bool)
    cidx = np.zeros((P, n_sim), dtype=np.int64)
    frac = np.zeros((P, n_sim))
    exited = np.zeros((P, n_sim), dtype=bool)
    for i in range(n_sim):
        if _outside(spec.initial[i], model.boxes[i][:, 0], model.boxes[i][:, 1]):
            tau[:, i] = 0.0
            exited[:, i] = True

    def finished(rows):
        return exited[rows, stop_at - 1] if stop_at is not None else exited[rows].all(axis=1)

    # rows of the working arrays whose path is still running; finished rows
    # are dropped lazily to keep the per-step cost low
    live = ~finished(ids)
    n_dead = int(P - live.sum())

    if record:
        rec_x = [np.empty((n_steps + 1, P, d)) for d in model.dims]
        rec_u = [np.empty((n_steps + 1, P, r)) for r in model.rdims]
        rec_v = np.zeros((n_steps + 1, P, m))
        rec_dw = np.empty((n_steps, P, m)) if stochastic else None

    def compact():
        nonlocal ids, x, W, live, n_dead
        ids = ids[live]
        x = [xi[live] for xi in x]
        if W is not None:
            W = W[live]
        live = np.ones(len(ids), dtype=bool)
        n_dead = 0

    def advance(k, t, us, env):
        n_rows = len(ids)
        drifts = []
        for i in range(n_sim):
            d = np.empty((n_rows, model.dims[i]))
            for j, f in enumerate(model.drifts[i]):
                d[:, j] = f(env)
            drifts.append(d)
        step1 = x[0] + drifts[0] * dt
        sig = None if model.sigma_const else model.sigma_at(env, n_rows)
        if v_grid is not None:
            vk = v_grid[k] if v_idx is None else v_grid[v_idx[ids], k]
            if sig is None:
                step1 = step1 + vk @ sig_dt
            else:
                step1 = step1 + np.einsum("pij,pj->pi", sig, np.broadcast_to(vk, (n_rows, m))) * dt
        dw = None
        if stochastic:
            if noise_increments is not None:
                dw = np.broadcast_to(noise_increments[k], (n_rows, m))
            else:
                z = chunk[k % _CHUNK_STEPS]
                if replicas > 1:
                    dw = z[ids % n_base] * sqdt
                else:
                    dw = (z if n_rows == P else z[ids]) * sqdt
            if sig is None:
                step1 = step1 + dw @ sig_noise
            else:
                step1 = step1 + sqeps * np.einsum("pij,pj->pi", sig, dw)
        new = [step1] + [x[i] + drifts[i] * dt for i in range(1, n_sim)]
        for xi in new:
            if not np.isfinite(xi.sum()):
                bad = ~np.isfinite(xi).all(axis=1) & live
                if bad.any():
                    raise SimulationError(f"non-finite state at step {k + 1} (t={(k + 1) * dt:.6g})")
        return new, dw

    def prepare(k, t):
        env = {"t": t} if model.uses_t else {}
        for i in range(n_sim):
            for j in range(model.dims[i]):
                env[f"x{i + 1}_{j + 1}"] = x[i][:, j]
        us = []
        for i in range(n_sim):
            kind = ctrl_kind[i]
            if kind == "shared":
                u = ctrl_grid[i][k]
            elif kind == "stack":
                u = ctrl_grid[i][ctrl_idx[i][ids], k]
            elif kind == "pathset":
                law = controls[i].laws[0]
                rows = ctrl_idx[i][ids]
                w_eff = W + shift_cum[i][rows, k]
                if ctrl_grid[i] is None:
                    u = _clip_box(law.raw(t, w_eff), law.box)
                else:
                    b, gt, gw, og, lo, hi = ctrl_grid[i]
                    u = b[rows] + gt[rows] * t + np.einsum("prm,pm->pr", gw[rows], w_eff) + og[rows, k]
                    u = np.clip(u, lo[rows], hi[rows])
            elif i in shift_cum:
                u = _clip_box(controls[i].raw(t, W + shift_cum[i][k]), controls[i].box)
            else:
                u = controls[i](t, W)
            us.append(u)
            for j in range(model.rdims[i]):
                env[f"u{i + 1}_{j + 1}"] = u[..., j]
        return env, us

    rng = noise_generator(seed, block) if seed is not None else None
    chunk = None
    last_k = 0
    for k in range(n_steps + 1):
        if not record and n_dead and (n_dead == len(ids) or 8 * n_dead > len(ids)):
            compact()
        if len(ids) == 0:
            break
        last_k = k
        t = k * dt
        env, us = prepare(k, t)
        if record:
            for i in range(n_sim):
                rec_x[i][k] = x[i]
                rec_u[i][k] = np.broadcast_to(us[i], (len(ids), model.rdims[i]))
            if v_grid is not None:
                rec_v[k] = v_grid[k] if v_idx is None else v_grid[v_idx[ids], k]
        if k == n_steps or not live.any():
            break
        if rng is not None and k % _CHUNK_STEPS == 0:
            chunk = rng.standard_normal((_CHUNK_STEPS, n_base, m))

        try:
            new, dw = advance(k, t, us, env)
        except (ExprEvalError, SimulationError) as exc:
            if n_dead == 0 or record:
                raise SimulationError(f"step {k} (t={t:.6g}): {exc}") from exc
            # finished rows may have wandered where the drift is undefined
            compact()
            env, us = prepare(k, t)
            try:
                new, dw = advance(k, t, us, env)
            except (ExprEvalError, SimulationError) as exc2:
                raise SimulationError(f"step {k} (t={t:.6g}): {exc2}") from exc2
        if record and dw is not None:
            rec_dw[k] = dw
        if W is not None:
            W = W + dw

        for i in range(n_sim):
            lo, hi = model.boxes[i][:, 0], model.boxes[i][:, 1]
            out = (new[i] <= lo) | (new[i] >= hi)
            hit = out[:, 0] if model.dims[i] == 1 else out.any(axis=1)
            if not hit.any():
                continue
            cand = np.flatnonzero(hit)
            cand = cand[live[cand] & ~exited[ids[cand], i]]
            if len(cand) == 0:
                continue
            _, f = _crossing(x[i][cand], new[i][cand], lo, hi)
            rows = ids[cand]
            exited[rows, i] = True
            tau[rows, i] = float(k) * dt + f * dt
            cidx[rows, i] = k
            frac[rows, i] = f
            done = cand[finished(rows)]
            if len(done):
                live[done] = False
                n_dead += len(done)
        x = new

    for i in range(n_sim):
        late = exited[:, i] & (tau[:, i] > spec.t_max)
        tau[late, i] = spec.t_max
        censored[late, i] = True
        never = ~exited[:, i]
        censored[never, i] = True
        cidx[never, i] = n_steps
        if stop_at is None or record:
            tau[never, i] = spec.t_max
    if stop_at is not None:
        sub = stop_at - 1
        tau[~exited[:, sub], sub] = spec.t_max

    result = BatchResult(tau, censored, cidx, frac)
    if not record:
        return result
    return result, rec_x, rec_u, rec_v, rec_dw, last_k


def _resolve_controls(spec, controls, n_sim, base=None):
    base = default_controls(spec) if base is None else base
    if controls is None:
        controls = base
    if len(controls) < n_sim:
        raise ValueError(f"need controls for {n_sim} subsystems, got {len(controls)}")
    return [base[i] if controls[i] is None else controls[i] for i in range(n_sim)]


def _slice_laws(laws, sl):
    return [_LawSet(l.laws, l.index[sl]) if isinstance(l, _LawSet) else l for l in laws]


def _per_path(entry, n_paths, what):
    if isinstance(entry, (list, tuple)):
        if len(entry) != n_paths:
            raise ValueError(f"per-path {what} list has {len(entry)} entries for {n_paths} paths")
        return _law_set(entry)
    return entry


def _concat(parts):
    return BatchResult(*(np.concatenate([getattr(p, f) for p in parts])
                         for f in ("tau", "censored", "crossing_index", "fraction")))


def _run_jobs(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_block_job, jobs))
    return [_run_block_job(job) for job in jobs]


def simulate_batch(spec: CascadeSpec, controls=None, shift=None, n_paths: int = 1, seed: Optional[int] = 0,
                   epsilon: Optional[float] = None, stop_at: Optional[int] = None,
                   workers: int = 1, block_size: int = BLOCK_SIZE) -> BatchResult:
    """Integrate ``n_paths`` paths and return their exit description.

    Parameters
    ----------
    controls : list, optional
        One entry per subsystem: a control law, None (scenario default), or a
        list of ``n_paths`` laws to give every path its own control. Per-path
        strategies must share one feature map and may differ in their shifts.
    shift : DisturbanceLaw or list, optional
        Deterministic shift ``v`` entering through ``sigma(x1)``; a list gives
        one shift per path.
    seed : int or None
        None integrates the deterministic (eps = 0) system.
    stop_at : int, optional
        Stop each path when subsystem ``stop_at`` exits; only subsystems
        ``1..stop_at`` are integrated.
    workers : int
        Process count; blocks are reduced in path order so results do not
        depend on it.
    """
    n_sim = spec.n if stop_at is None else stop_at
    eps = spec.epsilon if epsilon is None else float(epsilon)
    laws = [_per_path(l, n_paths, "control") for l in _resolve_controls(spec, controls, n_sim)]
    shift = _per_path(shift, n_paths, "shift")
    jobs = []
    for b, s0 in enumerate(range(0, n_paths, block_size)):
        sl = slice(s0, min(s0 + block_size, n_paths))
        sh = _LawSet(shift.laws, shift.index[sl]) if isinstance(shift, _LawSet) else shift
        jobs.append((spec, n_sim, _slice_laws(laws, sl), sh, sl.stop - sl.start, seed, b, eps, stop_at))
    return _concat(_run_jobs(jobs, workers))


def simulate_replicas(spec: CascadeSpec, candidates, n_paths: int, seed: Optional[int] = 0,
                      epsilon: Optional[float] = None, stop_at: Optional[int] = None,
                      workers: int = 1, block_size: int = BLOCK_SIZE) -> list:
    """Run every candidate on the same ``n_paths`` noise paths (common random numbers).

    ``candidates`` is a list of ``(controls, shift)`` pairs in the format of
    :func:`simulate_batch`, except that per-path lists are not accepted.
    Candidate ``c`` sees exactly the noise that ``simulate_batch`` with the
    same ``seed`` would give it; all candidates of a block advance together.
    Returns one :class:`BatchResult` per candidate.
    """
    C = len(candidates)
    if C == 0:
        return []
    n_sim = spec.n if stop_at is None else stop_at
    eps = spec.epsilon if epsilon is None else float(epsilon)
    base = default_controls(spec)
    resolved = [(_resolve_controls(spec, c, n_sim, base), v) for c, v in candidates]
    laws = []
    for i in range(n_sim):
        column = [r[0][i] for r in resolved]
        laws.append(column[0] if all(l is column[0] for l in column) else column)
    shifts = [r[1] for r in resolved]
    if all(v is None or v.is_zero for v in shifts):
        shift = None
    else:
        m = spec.noise_dim
        shift = [DisturbanceLaw.zero(m, spec.t_max) if v is None else v for v in shifts]

    jobs, sizes = [], []
    for b, s0 in enumerate(range(0, n_paths, block_size)):
        Pb = min(s0 + block_size, n_paths) - s0
        rows = np.repeat(np.arange(C), Pb)
        bl = [_LawSet(tuple(l), rows) if isinstance(l, list) else l for l in laws]
        sh = None if shift is None else _LawSet(tuple(shift), rows)
        jobs.append((spec, n_sim, bl, sh, Pb, seed, b, eps, stop_at, False, None, C))
        sizes.append(Pb)
    parts = _run_jobs(jobs, workers)
    out = []
    for c in range(C):
        out.append(_concat([BatchResult(*(getattr(p, f)[c * Pb:(c + 1) * Pb]
                                          for f in ("tau", "censored", "crossing_index", "fraction")))
                            for p, Pb in zip(parts, sizes)]))
    return out


def _run_block_job(job):
    return _run_block(*job)


def simulate_path(spec: CascadeSpec, controls=None, shift: Optional[DisturbanceLaw] = None,
                  noise: str = "stochastic", seed: int = 0, epsilon: Optional[float] = None,
                  stop_at: Optional[int] = None, noise_increments: Optional[np.ndarray] = None):
    """Integrate one path and record it.

    ``noise`` is ``"stochastic"`` (Philox stream of ``seed``) or
    ``"deterministic"``. ``noise_increments`` of shape (n_steps, m) replaces
    the drawn Wiener increments. Returns ``(Trajectory, [ExitRecord, ...])``
    with one record per integrated subsystem.
    """
    if noise not in ("stochastic", "deterministic"):
        raise ValueError("noise must be 'stochastic' or 'deterministic'")
    n_sim = spec.n if stop_at is None else stop_at
    eps = spec.epsilon if epsilon is None else float(epsilon)
    laws = _resolve_controls(spec, controls, n_sim)
    if noise_increments is not None:
        noise_increments = np.asarray(noise_increments, dtype=float).reshape(spec.n_steps, -1)
        seed_ = None
    else:
        seed_ = seed if noise == "stochastic" else None
    res, rx, ru, rv, rdw, k_last = _run_block(spec, n_sim, laws, shift, 1, seed_, 0, eps, stop_at,
                                              record=True, noise_increments=noise_increments)
    n = k_last + 1
    traj = Trajectory(
        times=np.arange(n) * spec.dt,
        states=[a[:n, 0] for a in rx],
        controls=[a[:n, 0] for a in ru],
        shift=rv[:n, 0],
        noise=None if rdw is None else rdw[:n - 1, 0],
        dt=spec.dt,
        t_max=spec.t_max,
    )
    records = [exit_time(traj, i, spec.subsystem(i).domain) for i in range(1, n_sim + 1)]
    return traj, records
