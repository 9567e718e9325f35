"""Derivative-free population search used by the sup/inf problems."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimizerConfig", "SearchResult", "cross_entropy_search", "enumerate_candidates"]


@dataclass(frozen=True)
class OptimizerConfig:
    population: int = 32
    iterations: int = 50
    elite_frac: float = 0.2
    seed: int = 0
    # stop once every coordinate's sampling spread falls below this
    min_std: float = 1e-6


@dataclass
class SearchResult:
    x: np.ndarray
    value: float
    n_evals: int
    history: list = field(default_factory=list)


def _better(f_new, n_new, f_old, n_old, maximize):
    if f_new == f_old:
        return n_new < n_old
    return f_new > f_old if maximize else f_new < f_old


def _evaluate(objective, points, batch):
    if batch:
        return [float(f) for f in objective(points)]
    return [float(objective(x)) for x in points]


def enumerate_candidates(objective, candidates, maximize=True, norm=np.linalg.norm, batch=False):
    """Exhaustive search over an explicit list; ties go to the smaller norm.

    With ``batch=True`` the objective receives the whole list and returns
    one value per candidate.
    """
    best = None
    values = _evaluate(objective, list(candidates), batch)
    for i, (x, f) in enumerate(zip(candidates, values)):
        n = float(norm(x))
        if best is None or _better(f, n, best[1], best[2], maximize):
            best = (i, f, n)
    return best[0], best[1], values


def cross_entropy_search(objective, lower, upper, config=OptimizerConfig(), maximize=True,
                         initial=(), norm=np.linalg.norm, batch=False) -> SearchResult:
    """Cross-entropy search over the box ``[lower, upper]``.

    Each iteration samples ``population`` points from an axis-aligned
    Gaussian, keeps the elite fraction together with the incumbent, and refits
    mean and spread to the elites. Points in ``initial`` are evaluated first
    and can seed the incumbent, which is never discarded, so the returned
    value is monotone in the budget. Ties are broken by smaller ``norm``.
    With ``batch=True`` the objective maps an array of points (rows) to an
    array of values, so a population can be evaluated in one call.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rng = np.random.default_rng(config.seed)
    n_elite = max(1, int(round(config.elite_frac * config.population)))

    best_x, best_f, best_n = None, None, None
    n_evals = 0
    history = []

    def consider(x, f):
        nonlocal best_x, best_f, best_n
        n = float(norm(x))
        if best_x is None or _better(f, n, best_f, best_n, maximize):
            best_x, best_f, best_n = x.copy(), f, n

    starts = [np.clip(np.asarray(x0, dtype=float), lower, upper) for x0 in initial]
    if not starts:
        starts = [0.5 * (lower + upper)]
    for x0, f in zip(starts, _evaluate(objective, np.array(starts), batch)):
        consider(x0, f)
    n_evals += len(starts)
    mean = best_x.copy()
    std = 0.5 * (upper - lower)
    for it in range(config.iterations):
        if np.all(std <= config.min_std):
            break
        pop = np.clip(mean + std * rng.standard_normal((config.population, len(mean))), lower, upper)
        vals = np.array(_evaluate(objective, pop, batch))
        n_evals += len(pop)
        for x, f in zip(pop, vals):
            consider(x, f)
        order = np.argsort(-vals if maximize else vals, kind="stable")
        elite = pop[order[:n_elite]]
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)
        history.append(best_f)
    return SearchResult(best_x, best_f, n_evals, history)
