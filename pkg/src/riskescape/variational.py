"""
Variational representation of the risk-sensitive criterion and the
relative-entropy bound for Girsanov shifts.

For a deterministic shift ``v`` the shifted system replaces the noise path
``W`` by ``W + eps^{-1/2} int v``. The representation states

    -eps log E exp(-theta tau / eps) = inf_v E[ 1/2 int_0^tau~ |v|^2 + theta tau~ ]

over adapted ``v``; restricting ``v`` to piecewise-constant deterministic
laws gives an upper bound whose distance to the left side is reported as the
gap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import (
    BLOCK_SIZE, DisturbanceLaw, Trajectory, default_controls, noise_generator,
    shift_strategy, simulate_replicas,
)
from .model import CascadeSpec
from .optimize import OptimizerConfig, cross_entropy_search
from .risk import Estimate, estimate_risk_sensitive

__all__ = [
    "GirsanovSample", "girsanov_log_density", "girsanov_sample", "relative_entropy_check",
    "VariationalResult", "shifted_costs", "solve_variational_rhs", "variational_study",
]

_STEP_CHUNK = 64


def _log_density(v_grid, dw, epsilon, dt):
    """``sum_k eps^{-1/2} v_k . dW_k - |v_k|^2 dt / (2 eps)`` along the last two axes."""
    drift = np.einsum("...km,km->...", dw, v_grid) / math.sqrt(epsilon)
    return drift - 0.5 * float(np.sum(v_grid * v_grid)) * dt / epsilon


@dataclass
class GirsanovSample:
    """Log density of the shifted path law against the reference law on one path."""
    trajectory: Trajectory = field(repr=False)
    log_density: float
    running_cost: float


def girsanov_log_density(traj: Trajectory, v: DisturbanceLaw, epsilon: float) -> float:
    """Discrete Girsanov exponent of the shift ``eps^{-1/2} int v`` along ``traj``.

    ``v`` is evaluated at the left end of each Euler step. The zero shift
    gives exactly 0.

    Raises
    ------
    ValueError
        If the trajectory was integrated without noise or ``epsilon <= 0``.
    """
    if traj.noise is None:
        raise ValueError("trajectory carries no noise increments (deterministic mode)")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = len(traj.noise)
    if v.is_zero or n == 0:
        return 0.0
    v_grid = v.on_grid(n, traj.dt)[:n]
    return float(_log_density(v_grid, traj.noise, epsilon, traj.dt))


def girsanov_sample(traj: Trajectory, v: DisturbanceLaw, epsilon: float) -> GirsanovSample:
    n = 0 if traj.noise is None else len(traj.noise)
    cost = float(v.running_cost(n, 0.0, traj.dt)) if n else 0.0
    return GirsanovSample(traj, girsanov_log_density(traj, v, epsilon), cost)


def relative_entropy_check(v: DisturbanceLaw, T: float, epsilon: float = 1.0,
                           n_samples: int = 10_000, seed: int = 0, dt: float = 1e-3) -> dict:
    """Monte Carlo relative entropy of the shifted Wiener law against the unshifted one.

    Paths are drawn under the shifted law (increments ``dB + eps^{-1/2} v dt``)
    and the log density is averaged. At ``epsilon = 1`` the exact value is
    ``1/2 int_0^T |v|^2`` and the bound is ``int_0^T |v|^2``; other values of
    ``epsilon`` rescale both by ``1/epsilon``.

    Returns
    -------
    dict
        ``kl_estimate``, ``std_error``, ``kl_exact`` (grid quadrature),
        ``bound`` and ``ok`` (estimate <= bound + 3 SE).
    """
    n_steps = int(math.ceil(T / dt - 1e-9))
    v_grid = v.on_grid(n_steps, dt)[:n_steps]
    m = v_grid.shape[1]
    energy = float(np.sum(v_grid * v_grid)) * dt
    drift = v_grid * dt / math.sqrt(epsilon)
    total = np.zeros(n_samples)
    if not v.is_zero:
        for b, s0 in enumerate(range(0, n_samples, BLOCK_SIZE)):
            P = min(s0 + BLOCK_SIZE, n_samples) - s0
            rng = noise_generator(seed, b)
            acc = np.zeros(P)
            for k0 in range(0, n_steps, _STEP_CHUNK):
                k1 = min(k0 + _STEP_CHUNK, n_steps)
                dw = rng.standard_normal((_STEP_CHUNK, P, m))[: k1 - k0] * math.sqrt(dt)
                dw = dw + drift[k0:k1, None, :]
                acc += np.einsum("kpm,km->p", dw, v_grid[k0:k1]) / math.sqrt(epsilon)
            total[s0:s0 + P] = acc - 0.5 * energy / epsilon
    kl = float(math.fsum(total) / n_samples)
    se = float(np.std(total, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("inf")
    w = np.clip(np.minimum(v.breakpoints[1:], T) - v.breakpoints[:-1], 0.0, None)
    bound = float(np.sum(w * np.sum(v.values ** 2, axis=1))) / epsilon
    return {"kl_estimate": kl, "std_error": se, "kl_exact": 0.5 * energy / epsilon,
            "bound": bound, "ok": bool(kl <= bound + 3 * se)}


# --------------------------------------------------------------------------
# restricted minimization of the right-hand side

@dataclass
class VariationalResult:
    lhs: Estimate
    rhs: Estimate
    best_v: DisturbanceLaw
    gap: float
    gap_se: float
    class_descriptor: str
    history: list = field(default_factory=list)

    @property
    def relative_gap(self):
        return self.gap / abs(self.lhs.value) if self.lhs.value else float("inf")

    def to_dict(self):
        return {
            "lhs": self.lhs.to_dict(), "rhs": self.rhs.to_dict(),
            "gap": self.gap, "gap_se": self.gap_se, "v_class": self.class_descriptor,
            "best_v_breakpoints": self.best_v.breakpoints.tolist(),
            "best_v_values": self.best_v.values.tolist(),
        }


def _shifted_laws(controls, v, epsilon):
    return [shift_strategy(c, v, epsilon) for c in controls]


def shifted_costs(spec: CascadeSpec, controls, ell: int, shifts: Sequence[DisturbanceLaw],
                  n_samples: int, seed: int, epsilon: Optional[float] = None,
                  workers: int = 1) -> list:
    """Per-path costs ``1/2 int_0^tau~ |v|^2 + theta tau~`` for each shift on common noise.

    Every noise-driven control is composed with the same translation of the
    noise path, so each candidate runs the shifted system with the strategy
    the unshifted system would use. Returns one array of ``n_samples`` costs
    per shift.
    """
    eps = spec.epsilon if epsilon is None else float(epsilon)
    theta = spec.subsystem(ell).theta
    cands = [(_shifted_laws(controls, v, eps), v) for v in shifts]
    results = simulate_replicas(spec, cands, n_samples, seed, epsilon=eps, stop_at=ell,
                                workers=workers)
    out = []
    for v, res in zip(shifts, results):
        tau = res.taus(ell, spec.t_max)
        run = v.running_cost(res.crossing_index[:, ell - 1], res.fraction[:, ell - 1], spec.dt)
        out.append(run + theta * tau)
    return out


def _cost_estimate(costs, meta):
    n = len(costs)
    se = float(np.std(costs, ddof=1) / math.sqrt(n))
    return Estimate(float(math.fsum(costs) / n), se, n, float(n), 0.0, dict(meta))


def solve_variational_rhs(spec: CascadeSpec, gamma=None, ell: int = 1, pieces: int = 4,
                          horizon: Optional[float] = None, v_bound: float = 3.0,
                          optimizer_cfg: OptimizerConfig = OptimizerConfig(),
                          n_samples: int = 2000, seed: int = 0, epsilon: Optional[float] = None,
                          workers: int = 1, controls=None, initial=(),
                          lhs: Optional[Estimate] = None) -> VariationalResult:
    """Minimize the shifted cost over ``pieces`` equal pieces of ``v`` on ``[0, horizon]``.

    Parameters
    ----------
    gamma : control law, optional
        Control of subsystem ``ell``; the scenario default when omitted.
    horizon : float, optional
        Support of ``v`` (zero afterwards); defaults to ``t_max``.
    v_bound : float
        Search box ``|v_j| <= v_bound`` per piece and noise coordinate.
    initial : sequence of arrays
        Warm starts (flattened ``(pieces, m)`` values). The zero shift is
        always evaluated, so ``rhs`` never exceeds the risk-neutral cost.
    lhs : Estimate, optional
        Reuse a left-hand side computed on the same seed.

    Notes
    -----
    All candidates and the left side share the noise of ``seed``; the
    returned ``rhs`` is the common-random-number value of the minimizer, so
    enriching the class with a warm start never raises it.
    """
    eps = spec.epsilon if epsilon is None else float(epsilon)
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    m = spec.noise_dim
    horizon = spec.t_max if horizon is None else float(horizon)
    laws = list(default_controls(spec) if controls is None else controls)
    if gamma is not None:
        laws[ell - 1] = gamma
    if lhs is None:
        lhs = estimate_risk_sensitive(spec, laws, ell, n_samples, seed, eps, workers)

    def make_v(p):
        return DisturbanceLaw.uniform(np.asarray(p, dtype=float).reshape(pieces, m), horizon)

    def objective(points):
        costs = shifted_costs(spec, laws, ell, [make_v(p) for p in points], n_samples, seed,
                              eps, workers)
        return [float(math.fsum(c) / len(c)) for c in costs]

    dim = pieces * m
    starts = [np.zeros(dim)] + [np.asarray(x, dtype=float).ravel() for x in initial]
    res = cross_entropy_search(objective, np.full(dim, -v_bound), np.full(dim, v_bound),
                               optimizer_cfg, maximize=False, initial=starts, batch=True)
    best_v = make_v(res.x)
    costs = shifted_costs(spec, laws, ell, [best_v], n_samples, seed, eps, workers)[0]
    descriptor = f"piecewise-constant K={pieces} on [0, {horizon:g}], |v|<={v_bound:g}"
    rhs = _cost_estimate(costs, {"theta": spec.subsystem(ell).theta, "epsilon": eps,
                                 "subsystem": ell, "seed": seed, "n_evaluations": res.n_evals})
    gap = rhs.value - lhs.value
    gap_se = math.hypot(rhs.std_error, lhs.std_error)
    return VariationalResult(lhs, rhs, best_v, gap, gap_se, descriptor, res.history)


def _refine(values, pieces, m):
    """Repeat each piece so a K-piece law becomes the same law with ``pieces`` pieces."""
    values = np.asarray(values, dtype=float).reshape(-1, m)
    return np.repeat(values, pieces // len(values), axis=0).ravel()


def variational_study(spec: CascadeSpec, gamma=None, ell: int = 1, ks=(1, 2, 4), **kwargs) -> list:
    """Solve the right-hand side for each K in ``ks``, warm-starting from the previous K.

    Each K must be a multiple of its predecessor, so the classes are nested
    and the minimized value is nonincreasing along ``ks`` on common noise.
    """
    ks = list(ks)
    for a, b in zip(ks, ks[1:]):
        if b % a:
            raise ValueError(f"piece counts must nest: {b} is not a multiple of {a}")
    m = spec.noise_dim
    out = []
    lhs = kwargs.pop("lhs", None)
    prev = None
    for K in ks:
        init = [] if prev is None else [_refine(prev.best_v.values, K, m)]
        r = solve_variational_rhs(spec, gamma, ell, pieces=K, initial=init, lhs=lhs, **kwargs)
        lhs = r.lhs
        out.append(r)
        prev = r
    return out
