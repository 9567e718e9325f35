"""
Deterministic escape game (eps = 0) between the stage control ``u`` and the
disturbance ``v``, on static open-loop candidate grids.

The maximizing player picks ``u`` to delay the exit of subsystem ``l``; the
minimizing player picks ``v`` and pays ``1/2 int |v|^2`` for it. On a finite
table of costs the lower value is ``min_v max_u`` and the upper value
``max_u min_v``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import DisturbanceLaw, PiecewiseConstant, default_controls, simulate_batch
from .model import CascadeSpec
from .optimize import OptimizerConfig
from .risk import ControlClass, estimate_value_sup

__all__ = [
    "GridSizeError", "GameConfig", "GameCost", "GameResult", "EpsilonStudy",
    "play", "game_cost", "game_table", "matrix_lower", "matrix_upper",
    "lower_value", "upper_value", "solve_game", "staged_game",
    "control_grid", "disturbance_grid", "epsilon_study", "band_distance",
]

MAX_TABLE = 10_000_000


class GridSizeError(ValueError):
    pass


@dataclass(frozen=True)
class GameConfig:
    workers: int = 1
    rel_tol: float = 0.05
    # absolute tolerance floor in units of dt * theta
    abs_tol_steps: float = 10.0
    max_table: int = MAX_TABLE


@dataclass(frozen=True)
class GameCost:
    value: float
    tau: float
    censored: bool


def _stage_controls(spec, ell, u, controls):
    laws = list(default_controls(spec) if controls is None else controls)
    if u is not None:
        laws[ell - 1] = u
    return laws


def play(spec: CascadeSpec, u, v: DisturbanceLaw, ell: int, controls=None) -> GameCost:
    """Run the deterministic shifted cascade once and price the exit of subsystem ``ell``."""
    res = simulate_batch(spec, _stage_controls(spec, ell, u, controls), v, n_paths=1, seed=None,
                         stop_at=ell)
    tau = float(res.taus(ell, spec.t_max)[0])
    run = float(v.running_cost(res.crossing_index[0, ell - 1], res.fraction[0, ell - 1], spec.dt))
    return GameCost(run + spec.subsystem(ell).theta * tau, tau, bool(res.censored[0, ell - 1]))


def game_cost(spec: CascadeSpec, u, v: DisturbanceLaw, ell: int, controls=None) -> float:
    """``1/2 int_0^tau |v|^2 + theta tau`` for the deterministic game; censored tau = t_max."""
    return play(spec, u, v, ell, controls).value


def game_table(spec: CascadeSpec, ell: int, u_grid: Sequence, v_grid: Sequence,
               controls=None, cfg: GameConfig = GameConfig()):
    """Cost table (rows: ``u`` candidates, columns: ``v`` candidates) and its censoring mask."""
    U, V = len(u_grid), len(v_grid)
    if U == 0 or V == 0:
        raise ValueError("candidate grids must be non-empty")
    if U * V > cfg.max_table:
        raise GridSizeError(f"cost table {U}x{V} exceeds {cfg.max_table} entries")
    laws = _stage_controls(spec, ell, None, controls)
    frozen = laws[ell - 1]
    laws[ell - 1] = [frozen if u is None else u for u in u_grid for _ in range(V)]
    shifts = [v for _ in range(U) for v in v_grid]
    res = simulate_batch(spec, laws, shifts, n_paths=U * V, seed=None, stop_at=ell,
                         workers=cfg.workers)
    tau = res.taus(ell, spec.t_max).reshape(U, V)
    ci = res.crossing_index[:, ell - 1].reshape(U, V)
    fr = res.fraction[:, ell - 1].reshape(U, V)
    run = np.stack([v.running_cost(ci[:, j], fr[:, j], spec.dt) for j, v in enumerate(v_grid)], axis=1)
    table = run + spec.subsystem(ell).theta * tau
    return table, res.censored[:, ell - 1].reshape(U, V)


def matrix_lower(table):
    """``min over columns of the column max``; returns ``(value, row, col)``."""
    table = np.asarray(table, dtype=float)
    col_max = table.max(axis=0)
    j = int(np.argmin(col_max))
    return float(col_max[j]), int(np.argmax(table[:, j])), j


def matrix_upper(table):
    """``max over rows of the row min``; returns ``(value, row, col)``."""
    table = np.asarray(table, dtype=float)
    row_min = table.min(axis=1)
    i = int(np.argmax(row_min))
    return float(row_min[i]), i, int(np.argmin(table[i]))


def lower_value(spec, ell, u_grid, v_grid, cfg: GameConfig = GameConfig(), controls=None):
    """Static lower value ``min_v max_u``; returns ``(value, (u, v))``."""
    table, _ = game_table(spec, ell, u_grid, v_grid, controls, cfg)
    val, i, j = matrix_lower(table)
    return val, (u_grid[i], v_grid[j])


def upper_value(spec, ell, u_grid, v_grid, cfg: GameConfig = GameConfig(), controls=None):
    """Static upper value ``max_u min_v``; returns ``(value, (u, v))``."""
    table, _ = game_table(spec, ell, u_grid, v_grid, controls, cfg)
    val, i, j = matrix_upper(table)
    return val, (u_grid[i], v_grid[j])


@dataclass
class GameResult:
    """Bracket ``[upper, lower]`` of the game on one candidate table.

    ``u_star`` is the max-min control (the row attaining the upper value);
    ``v_star`` is the min-max disturbance (the column attaining the lower
    value).
    """
    lower: float
    upper: float
    u_star: object
    v_star: DisturbanceLaw
    has_value: bool
    tol: float
    table: np.ndarray = field(repr=False)
    censored: np.ndarray = field(repr=False)
    stage: int = 1

    def to_dict(self):
        return {
            "stage": self.stage, "lower": self.lower, "upper": self.upper,
            "has_value": self.has_value, "tol": self.tol,
            "u_star": {"breakpoints": self.u_star.breakpoints.tolist(),
                       "values": self.u_star.values.tolist()},
            "v_star": {"breakpoints": self.v_star.breakpoints.tolist(),
                       "values": self.v_star.values.tolist()},
            "table_shape": list(self.table.shape),
            "censored_entries": int(self.censored.sum()),
        }


def game_tolerance(spec, ell, lower, cfg: GameConfig = GameConfig()):
    return max(cfg.rel_tol * abs(lower), cfg.abs_tol_steps * spec.dt * spec.subsystem(ell).theta)


def solve_game(spec: CascadeSpec, ell: int, u_grid, v_grid, cfg: GameConfig = GameConfig(),
               controls=None) -> GameResult:
    table, cens = game_table(spec, ell, u_grid, v_grid, controls, cfg)
    lo, _, j_lo = matrix_lower(table)
    up, i_up, _ = matrix_upper(table)
    tol = game_tolerance(spec, ell, lo, cfg)
    return GameResult(lo, up, u_grid[i_up], v_grid[j_lo], abs(lo - up) <= tol, tol, table, cens, ell)


def staged_game(spec: CascadeSpec, grids: dict, cfg: GameConfig = GameConfig(), controls=None) -> list:
    """Play the stages in order, freezing each stage's max-min control for the next.

    ``grids`` maps a stage ``l`` to its ``(u_grid, v_grid)``. Stages run from
    2 to n (stage 1 only for single-subsystem scenarios).
    """
    laws = list(default_controls(spec) if controls is None else controls)
    stages = [1] if spec.n == 1 else list(range(2, spec.n + 1))
    out = []
    for ell in stages:
        if ell not in grids:
            raise KeyError(f"no candidate grids for stage {ell}")
        u_grid, v_grid = grids[ell]
        r = solve_game(spec, ell, u_grid, v_grid, cfg, laws)
        laws[ell - 1] = r.u_star
        out.append(r)
    return out


# --------------------------------------------------------------------------
# candidate grids

def control_grid(box, levels: int = 5, pieces: int = 1, horizon: float = 1.0) -> list:
    """All piecewise-constant controls with ``levels`` equispaced values per piece and coordinate."""
    box = np.asarray(box, dtype=float)
    axes = [np.linspace(lo, hi, levels) if hi > lo else np.array([lo]) for lo, hi in box]
    per_piece = list(itertools.product(*axes))
    out = []
    for combo in itertools.product(per_piece, repeat=pieces):
        out.append(PiecewiseConstant.uniform(np.array(combo, dtype=float).reshape(pieces, len(box)),
                                             horizon, box))
    return out


def disturbance_grid(values, m: int = 1, pieces: int = 1, horizon: float = 1.0) -> list:
    """All piecewise-constant disturbances with per-piece, per-coordinate values from ``values``."""
    values = np.asarray(values, dtype=float)
    per_piece = list(itertools.product(values, repeat=m))
    out = []
    for combo in itertools.product(per_piece, repeat=pieces):
        out.append(DisturbanceLaw.uniform(np.array(combo, dtype=float).reshape(pieces, m), horizon))
    return out


# --------------------------------------------------------------------------
# small-noise study

def band_distance(value, upper, lower):
    """Distance from ``value`` to the interval ``[upper, lower]``."""
    return max(0.0, upper - value, value - lower)


@dataclass
class EpsilonStudy:
    epsilons: list
    values: list
    upper: float
    lower: float
    tol: float
    game: Optional[GameResult] = None

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be strictly decreasing")

    @property
    def below_lower(self):
        """``value <= lower + tol`` at every epsilon."""
        return [e.value <= self.lower + self.tol for e in self.values]

    @property
    def distances(self):
        return [band_distance(e.value, self.upper, self.lower) for e in self.values]

    def rows(self):
        return [{"epsilon": eps, "value": e.value, "se": e.std_error, "lower": self.lower,
                 "upper": self.upper} for eps, e in zip(self.epsilons, self.values)]

    def to_dict(self):
        return {"epsilons": list(self.epsilons), "values": [e.to_dict() for e in self.values],
                "upper": self.upper, "lower": self.lower, "tol": self.tol,
                "below_lower": self.below_lower, "distances": self.distances}


def epsilon_study(spec: CascadeSpec, ell: int, epsilons: Sequence[float], u_grid, v_grid,
                  control_class: ControlClass = ControlClass(),
                  optimizer_cfg: OptimizerConfig = OptimizerConfig(), n_samples: int = 2000,
                  seed: int = 0, cfg: GameConfig = GameConfig(), controls=None) -> EpsilonStudy:
    """Sup-estimates of the criterion along ``epsilons`` next to the game band.

    The band comes from :func:`solve_game` on ``(u_grid, v_grid)``; each
    estimate is :func:`estimate_value_sup` re-evaluated on a fresh seed.
    """
    epsilons = [float(e) for e in epsilons]
    if any(e <= 0 for e in epsilons):
        raise ValueError("epsilons must be positive")
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilons must be strictly decreasing")
    game = solve_game(spec, ell, u_grid, v_grid, cfg, controls)
    values = []
    for eps in epsilons:
        est, _ = estimate_value_sup(spec, ell, control_class, optimizer_cfg, n_samples, seed,
                                    epsilon=eps, workers=cfg.workers, controls=controls)
        values.append(est)
    return EpsilonStudy(epsilons, values, game.upper, game.lower, game.tol, game)
