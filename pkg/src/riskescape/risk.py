"""
Risk-sensitive escape criterion: Monte Carlo estimation, its supremum over
finite-dimensional control classes, and a 1-D Feynman-Kac oracle.

The criterion for subsystem ``l`` is ``-eps log E exp(-theta_l tau_l / eps)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .dynamics import (PathStrategy, PiecewiseConstant, default_controls, simulate_batch,
                       simulate_replicas)
from .expr import compile_expr, parse_expr, variables
from .model import CascadeSpec
from .optimize import OptimizerConfig, cross_entropy_search, enumerate_candidates

__all__ = [
    "Estimate", "DegenerateEstimateError", "risk_sensitive_value", "estimate_risk_sensitive",
    "estimate_many",
    "BVPResult", "bvp_oracle_1d", "ControlClass", "estimate_value_sup", "fresh_seed",
]

# exp() underflows to zero below this exponent
_EXP_FLOOR = 709.0


class DegenerateEstimateError(ArithmeticError):
    """No path exited and the horizon weight is below floating-point range."""


@dataclass
class Estimate:
    value: float
    std_error: float
    n_samples: int
    ess: float
    censored_fraction: float = 0.0
    meta: dict = field(default_factory=dict)
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self):
        out = {"value": self.value, "std_error": self.std_error, "n_samples": self.n_samples,
               "ess": self.ess, "censored_fraction": self.censored_fraction}
        for key in ("theta", "epsilon", "subsystem"):
            if key in self.meta:
                out[key] = self.meta[key]
        return out


def risk_sensitive_value(tau, theta, epsilon):
    """``-eps log mean exp(-theta tau / eps)`` with max-shift stabilization.

    Returns ``(value, std_error, ess)``. The weights are shifted by the
    smallest exit time so the largest weight is exactly one; the standard
    error comes from the delta method on the log of the sample mean.
    """
    tau = np.asarray(tau, dtype=float)
    n = len(tau)
    if theta == 0:
        return 0.0, 0.0, float(n)
    t_min = float(tau.min())
    w = np.exp(-theta * (tau - t_min) / epsilon)
    mean_w = math.fsum(w) / n
    value = theta * t_min - epsilon * math.log(mean_w)
    # exp/log rounding can leave the exact bracket [theta min tau, theta mean tau] by an ulp
    value = min(max(value, theta * t_min), theta * math.fsum(tau) / n)
    se = epsilon * float(np.std(w, ddof=1)) / (math.sqrt(n) * mean_w) if n > 1 else float("inf")
    ess = math.fsum(w) ** 2 / math.fsum(w * w)
    return float(value), float(se), float(min(ess, n))


def _estimate(res, spec, ell, eps, seed, keep_samples):
    n = len(res.tau)
    theta = spec.subsystem(ell).theta
    tau = res.taus(ell, spec.t_max)
    cens = float(res.censored[:, ell - 1].mean())
    if cens == 1.0 and theta * spec.t_max / eps > _EXP_FLOOR:
        raise DegenerateEstimateError(
            f"all {n} paths censored at t_max={spec.t_max} and theta*t_max/eps = "
            f"{theta * spec.t_max / eps:.4g} exceeds the exponent range")
    value, se, ess = risk_sensitive_value(tau, theta, eps)
    meta = {"theta": theta, "epsilon": eps, "subsystem": ell, "seed": seed, "dt": spec.dt,
            "t_max": spec.t_max}
    return Estimate(value, se, n, ess, cens, meta, tau if keep_samples else None)


def estimate_risk_sensitive(spec: CascadeSpec, controls, ell: int, n_samples: int, seed: int,
                            epsilon: Optional[float] = None, workers: int = 1,
                            keep_samples: bool = False) -> Estimate:
    """Monte Carlo estimate of the criterion for subsystem ``ell``.

    Paths stop when subsystem ``ell`` leaves its domain; unexited paths enter
    with tau = t_max and are counted in ``censored_fraction``.

    Raises
    ------
    DegenerateEstimateError
        Every path censored while ``theta * t_max / eps`` is beyond the
        exponent range.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    eps = spec.epsilon if epsilon is None else float(epsilon)
    res = simulate_batch(spec, controls, n_paths=n_samples, seed=seed, epsilon=eps,
                         stop_at=ell, workers=workers)
    return _estimate(res, spec, ell, eps, seed, keep_samples)


def estimate_many(spec: CascadeSpec, control_sets, ell: int, n_samples: int, seed: int,
                  epsilon: Optional[float] = None, workers: int = 1) -> list:
    """:func:`estimate_risk_sensitive` for several control sets on common noise."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    eps = spec.epsilon if epsilon is None else float(epsilon)
    results = simulate_replicas(spec, [(c, None) for c in control_sets], n_samples, seed,
                                epsilon=eps, stop_at=ell, workers=workers)
    return [_estimate(r, spec, ell, eps, seed, False) for r in results]


# --------------------------------------------------------------------------
# 1-D oracle

@dataclass
class BVPResult:
    """Solution of the Feynman-Kac problem for ``u(x) = E_x exp(-theta tau / eps)``."""
    x: np.ndarray
    u: np.ndarray
    epsilon: float
    x0: float
    value: float            # -eps log u(x0) from the Richardson-extrapolated u
    value_plain: float      # same on the requested grid only
    u_x0: float
    coarse: bool
    diagnostics: list

    def __call__(self, x):
        return CubicSpline(self.x, self.u)(x)


def _fd_solve(m, s, a, b, theta, eps, n):
    x = np.linspace(a, b, n)
    h = x[1] - x[0]
    xi = x[1:-1]
    diff = 0.5 * eps * s * s / h ** 2
    adv = np.broadcast_to(np.asarray(m(xi), dtype=float), xi.shape) / (2 * h)
    lower = diff - adv
    diag = np.full(n - 2, -2 * diff - theta / eps)
    upper = diff + adv
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    rhs = np.zeros(n - 2)
    rhs[0] -= lower[0]
    rhs[-1] -= upper[-1]
    u = np.ones(n)
    u[1:-1] = solve_banded((1, 1), ab, rhs)
    return x, u


def bvp_oracle_1d(drift, sigma_const: float, domain, theta: float, epsilon: float,
                  grid_points: int = 401, x0: float = None, params: dict = None) -> BVPResult:
    """Solve ``(eps s^2/2) u'' + m(x) u' - (theta/eps) u = 0``, ``u = 1`` on the boundary.

    Central differences on ``grid_points`` nodes (tridiagonal solve), repeated
    on the twice-refined nested grid and Richardson-extrapolated once at
    ``x0``. ``coarse`` is set when the refinement moves ``u(x0)`` by more than
    1e-4 relative. ``drift`` is an expression in ``x1_1`` only; ``params``
    binds any constant control symbols it uses.
    """
    if isinstance(drift, str):
        drift = parse_expr(drift)
    free = variables(drift) - set(params or {})
    if not free <= {"x1_1"}:
        raise ValueError(f"1-D autonomous drift required, found variables {sorted(free)}")
    if grid_points < 51:
        raise ValueError("grid_points must be at least 51")
    a, b = (float(c) for c in np.asarray(domain, dtype=float).ravel()[:2])
    x0 = 0.5 * (a + b) if x0 is None else float(x0)
    f = compile_expr(drift)
    extra = dict(params or {})

    def m(xs):
        return f({**extra, "x1_1": xs})

    x, u = _fd_solve(m, sigma_const, a, b, theta, epsilon, grid_points)
    xf, uf = _fd_solve(m, sigma_const, a, b, theta, epsilon, 2 * grid_points - 1)
    if a < x0 < b:
        uc = float(CubicSpline(x, u)(x0))
        ufine = float(CubicSpline(xf, uf)(x0))
    else:
        uc = ufine = 1.0
    u_rich = (4.0 * ufine - uc) / 3.0
    diags = []
    coarse = abs(ufine - uc) > 1e-4 * abs(ufine)
    if coarse:
        diags.append(f"grid too coarse: doubling moves u(x0) by {abs(ufine - uc) / abs(ufine):.3g} relative")
    return BVPResult(
        x=xf, u=uf, epsilon=epsilon, x0=x0,
        value=float(-epsilon * math.log(u_rich)),
        value_plain=float(-epsilon * math.log(uc)),
        u_x0=u_rich, coarse=coarse, diagnostics=diags,
    )


# --------------------------------------------------------------------------
# supremum over a control class

def fresh_seed(seed):
    """Deterministic seed independent of ``seed``'s own stream."""
    state = np.random.SeedSequence([int(seed), 0x5EED]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1] >> 1)


@dataclass(frozen=True)
class ControlClass:
    """Finite-dimensional family of controls for one subsystem.

    ``kind="piecewise"``: ``pieces`` equal pieces on ``[0, horizon]`` with
    values in the control box. ``kind="feature"``: ``u = clip(b + G W(t))``
    with ``b`` in the box and ``|G_ij| <= gain_bound``. ``candidates`` (a list
    of laws) switches to exhaustive enumeration.
    """
    kind: str = "piecewise"
    pieces: int = 1
    horizon: Optional[float] = None
    gain_bound: float = 1.0
    candidates: Optional[tuple] = None

    def describe(self):
        if self.candidates is not None:
            return f"enumerated[{len(self.candidates)}]"
        if self.kind == "piecewise":
            return f"piecewise-constant K={self.pieces}"
        return f"feature gain<={self.gain_bound}"

    def bounds(self, spec, ell):
        s = spec.subsystem(ell)
        box = s.control_box
        if self.kind == "piecewise":
            if self.pieces < 1:
                raise ValueError("piecewise class needs at least one piece")
            return np.tile(box[:, 0], self.pieces), np.tile(box[:, 1], self.pieces)
        if self.kind == "feature":
            m = spec.noise_dim
            g = np.full(s.control_dim * m, float(self.gain_bound))
            return np.concatenate([box[:, 0], -g]), np.concatenate([box[:, 1], g])
        raise ValueError(f"unknown control class {self.kind!r}")

    def build(self, params, spec, ell):
        s = spec.subsystem(ell)
        r = s.control_dim
        if self.kind == "piecewise":
            horizon = spec.t_max if self.horizon is None else self.horizon
            return PiecewiseConstant.uniform(np.asarray(params).reshape(self.pieces, r), horizon, s.control_box)
        return PathStrategy(params[:r], np.asarray(params[r:]).reshape(r, spec.noise_dim), s.control_box)


def _control_norm(law):
    return float(np.linalg.norm(law.params()))


def estimate_value_sup(spec: CascadeSpec, ell: int, control_class: ControlClass = ControlClass(),
                       optimizer_cfg: OptimizerConfig = OptimizerConfig(), n_samples: int = 2000,
                       seed: int = 0, epsilon: Optional[float] = None, workers: int = 1,
                       controls=None):
    """Maximize the criterion over ``control_class`` with common random numbers.

    Every candidate is scored on the same noise (``seed``); the winner is
    re-evaluated on :func:`fresh_seed` ``(seed)``, and that estimate is
    returned together with the winning law. ``meta["search_value"]`` keeps
    the common-random-number score used for the selection.
    """
    base = list(default_controls(spec) if controls is None else controls)

    def with_law(law):
        laws = list(base)
        laws[ell - 1] = law
        return laws

    def score(laws_for_ell):
        ests = estimate_many(spec, [with_law(l) for l in laws_for_ell], ell, n_samples, seed,
                             epsilon, workers)
        return [e.value for e in ests]

    if control_class.candidates is not None:
        cands = list(control_class.candidates)
        if not cands:
            raise ValueError("empty candidate list")
        i, best_val, _ = enumerate_candidates(score, cands, maximize=True, norm=_control_norm,
                                              batch=True)
        best = cands[i]
        n_evals = len(cands)
    else:
        lo, hi = control_class.bounds(spec, ell)
        if np.any(lo > hi):
            raise ValueError("control class has an empty parameter box")
        res = cross_entropy_search(
            lambda pts: score([control_class.build(p, spec, ell) for p in pts]), lo, hi,
            optimizer_cfg, maximize=True, batch=True)
        best = control_class.build(res.x, spec, ell)
        best_val = res.value
        n_evals = res.n_evals
    laws = list(base)
    laws[ell - 1] = best
    est = estimate_risk_sensitive(spec, laws, ell, n_samples, fresh_seed(seed), epsilon, workers)
    est.meta.update({"search_value": best_val, "control_class": control_class.describe(),
                     "n_evaluations": n_evals})
    return est, best
