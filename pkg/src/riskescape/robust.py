"""
Robustness margins from the deterministic value ``V0``.

``V0`` is the cheapest way, in ``1/2 int |v|^2 + theta tau``, for a
disturbance ``v`` entering through ``sigma(x1)`` to push subsystem ``l`` out
of its domain while all controls stay frozen. Any disturbance ``v`` then
satisfies ``tau >= V0 / (|v|_inf^2 / 2 + theta)``, which turns a specification
``tau >= L`` into a sup-norm budget on additive modeling errors.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import DisturbanceLaw, default_controls, simulate_batch
from .game import GameConfig, game_table
from .model import CascadeSpec
from .optimize import OptimizerConfig, cross_entropy_search

__all__ = [
    "InfeasibleSpecification", "UnboundedSpecification", "DisturbanceClass", "value_v0",
    "exit_bound", "error_budget", "verify_guarantee", "RobustReport", "robust_report",
    "stage_chain", "chain_nonincreasing", "chain_csv",
]


class InfeasibleSpecification(ValueError):
    """``V0 / theta* <= L``: no modeling error budget can guarantee ``tau >= L``."""


class UnboundedSpecification(ArithmeticError):
    """Every candidate disturbance leaves the subsystem inside its domain up to t_max."""


@dataclass(frozen=True)
class DisturbanceClass:
    """``pieces`` equal pieces on ``[0, horizon]`` with ``|v_j| <= bound``, searched by cross-entropy."""
    pieces: int = 1
    bound: float = 3.0
    horizon: Optional[float] = None

    def describe(self):
        return f"piecewise-constant K={self.pieces}, |v|<={self.bound:g}"


def _costs(spec, ell, shifts, controls, cfg):
    """One row of the game table: the frozen stage control against every shift."""
    laws = list(default_controls(spec) if controls is None else controls)
    table, cens = game_table(spec, ell, [laws[ell - 1]], shifts, laws, cfg)
    return table[0], cens[0]


def value_v0(spec: CascadeSpec, ell: int, v_class, optimizer_cfg: OptimizerConfig = OptimizerConfig(),
             controls=None, theta: Optional[float] = None, cfg: GameConfig = GameConfig()):
    """Minimize ``1/2 int_0^tau |v|^2 + theta tau`` over ``v_class`` with frozen controls.

    Parameters
    ----------
    v_class : list of DisturbanceLaw or DisturbanceClass
        Explicit candidates (exhaustive, ties to the smaller sup-norm) or a
        piecewise-constant class searched by cross-entropy.
    theta : float, optional
        Design weight; defaults to the subsystem's theta.

    Returns
    -------
    (float, DisturbanceLaw)

    Raises
    ------
    UnboundedSpecification
        If no candidate makes subsystem ``ell`` exit before t_max.
    """
    if theta is not None:
        spec = spec.with_subsystem(ell, theta=float(theta))
    if isinstance(v_class, DisturbanceClass):
        m = spec.noise_dim
        horizon = spec.t_max if v_class.horizon is None else v_class.horizon

        def make(p):
            return DisturbanceLaw.uniform(np.asarray(p, dtype=float).reshape(v_class.pieces, m), horizon)

        seen_exit = [False]

        def objective(points):
            costs, cens = _costs(spec, ell, [make(p) for p in points], controls, cfg)
            seen_exit[0] |= bool((~cens).any())
            return costs

        dim = v_class.pieces * m
        res = cross_entropy_search(objective, np.full(dim, -v_class.bound), np.full(dim, v_class.bound),
                                   optimizer_cfg, maximize=False, initial=[np.zeros(dim)], batch=True)
        if not seen_exit[0]:
            raise UnboundedSpecification(
                f"subsystem {ell} never exits before t_max={spec.t_max} for any searched disturbance")
        return float(res.value), make(res.x)
    cands = list(v_class)
    if not cands:
        raise ValueError("empty disturbance class")
    costs, cens = _costs(spec, ell, cands, controls, cfg)
    if cens.all():
        raise UnboundedSpecification(
            f"subsystem {ell} never exits before t_max={spec.t_max} for any of {len(cands)} candidates")
    best = min(range(len(cands)), key=lambda j: (costs[j], cands[j].sup_norm))
    return float(costs[best]), cands[best]


def exit_bound(v0: float, vhat_norm_inf: float, theta: float) -> float:
    """Lower bound ``v0 / (|v|_inf^2 / 2 + theta)`` on the exit time."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    return v0 / (0.5 * vhat_norm_inf ** 2 + theta)


def error_budget(v0: float, L: float, theta_star: float) -> float:
    """Largest ``|dm|_inf^2`` that still guarantees ``tau >= L``: ``2 (v0 / L - theta*)``.

    Raises
    ------
    InfeasibleSpecification
        Unless ``v0 / theta* > L``.
    """
    if not L > 0 or not theta_star > 0:
        raise ValueError("L and theta_star must be positive")
    if not v0 / theta_star > L:
        raise InfeasibleSpecification(
            f"infeasible specification: V0/theta* = {v0 / theta_star:.6g} does not exceed "
            f"L = {L:.6g} (feasibility requires V0 > L * theta*)")
    return 2.0 * (v0 / L - theta_star)


def verify_guarantee(spec: CascadeSpec, ell: int, delta_m: DisturbanceLaw, L: float,
                     theta_star: float, v0: float, controls=None) -> dict:
    """Simulate the perturbed deterministic cascade and test ``tau >= L - dt``."""
    res = simulate_batch(spec, controls, delta_m, n_paths=1, seed=None, stop_at=ell)
    tau0 = float(res.taus(ell, spec.t_max)[0])
    try:
        budget = error_budget(v0, L, theta_star)
    except InfeasibleSpecification:
        budget = None
    return {
        "holds": tau0 >= L - spec.dt,
        "tau0": tau0,
        "margin": tau0 - L,
        "within_budget": budget is not None and delta_m.sup_norm ** 2 <= budget,
        "bound": exit_bound(v0, delta_m.sup_norm, theta_star),
    }


@dataclass
class RobustReport:
    v0: float
    v_hat: DisturbanceLaw
    theta_star: float
    L: float
    budget: Optional[float]
    feasible: bool
    chain: list = field(default_factory=list)
    stage: int = 1
    v_class: str = ""

    def to_dict(self):
        return {
            "stage": self.stage, "v0": self.v0, "theta_star": self.theta_star, "L": self.L,
            "budget": self.budget, "feasible": self.feasible, "v_class": self.v_class,
            "v_hat": {"breakpoints": self.v_hat.breakpoints.tolist(),
                      "values": self.v_hat.values.tolist()},
            "chain": self.chain,
        }


def _describe(v_class):
    if isinstance(v_class, DisturbanceClass):
        return v_class.describe()
    return f"enumerated[{len(v_class)}]"


def robust_report(spec: CascadeSpec, ell: int, L: float, v_class, theta_star: Optional[float] = None,
                  optimizer_cfg: OptimizerConfig = OptimizerConfig(), controls=None,
                  cfg: GameConfig = GameConfig(), chain: Sequence = ()) -> RobustReport:
    """``V0`` at the design weight, feasibility and the modeling-error budget for one stage.

    The budget is None when the specification is infeasible; callers that
    need the exception use :func:`error_budget` directly.
    """
    theta_star = spec.subsystem(ell).theta if theta_star is None else float(theta_star)
    v0, v_hat = value_v0(spec, ell, v_class, optimizer_cfg, controls, theta_star, cfg)
    feasible = v0 / theta_star > L
    budget = error_budget(v0, L, theta_star) if feasible else None
    return RobustReport(v0, v_hat, theta_star, float(L), budget, feasible, list(chain), ell,
                        _describe(v_class))


def stage_chain(spec: CascadeSpec, v_classes: dict, theta_stars: Optional[dict] = None,
                specs_L: Optional[dict] = None, delta_m: Optional[dict] = None,
                optimizer_cfg: OptimizerConfig = OptimizerConfig(), controls=None,
                cfg: GameConfig = GameConfig()) -> list:
    """Per-stage rows ``{stage, v0, theta_star, budget, bound}`` for stages ``1..n``.

    ``bound`` is ``v0 / (|dm|_inf^2 / 2 + theta*)`` with the stage's modeling
    error (zero by default); when the exit times are ordered the bounds
    should not increase along the chain. ``budget`` is reported only for
    stages with a feasible specification ``L``.
    """
    theta_stars = theta_stars or {}
    specs_L = specs_L or {}
    delta_m = delta_m or {}
    rows = []
    for i in range(1, spec.n + 1):
        th = float(theta_stars.get(i, spec.subsystem(i).theta))
        v0, _ = value_v0(spec, i, v_classes[i], optimizer_cfg, controls, th, cfg)
        dm = delta_m.get(i)
        norm = 0.0 if dm is None else dm.sup_norm
        budget = None
        if i in specs_L:
            try:
                budget = error_budget(v0, specs_L[i], th)
            except InfeasibleSpecification:
                budget = None
        rows.append({"stage": i, "v0": v0, "theta_star": th, "budget": budget,
                     "bound": exit_bound(v0, norm, th)})
    return rows


def chain_nonincreasing(rows) -> bool:
    b = [r["bound"] for r in rows]
    return all(x >= y for x, y in zip(b, b[1:]))


def chain_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["stage", "v0", "theta_star", "budget", "bound"])
    for r in rows:
        wr.writerow([r["stage"], repr(r["v0"]), repr(r["theta_star"]),
                     "" if r["budget"] is None else repr(r["budget"]), repr(r["bound"])])
    return buf.getvalue()
