"""
Command-line front end.

Every command reads a scenario (a JSON file or the name of a shipped one),
prints its result as JSON (or writes it to ``--out``) and can write a CSV
series (``--csv``) and PNG figures (``--figures``). Exit status: 0 ok,
2 invalid input, 3 infeasible specification, 4 numerical degeneracy.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .dynamics import SimulationError, default_controls, simulate_batch
from .expr import ExprEvalError, ExprSyntaxError, eval_expr, variables
from .game import (GameConfig, control_grid, disturbance_grid, epsilon_study, solve_game,
                   staged_game)
from .model import (ScenarioError, drift_slope_report, hormander_rank_check, load_scenario,
                    validate_scenario)
from .optimize import OptimizerConfig
from .risk import (ControlClass, DegenerateEstimateError, bvp_oracle_1d, estimate_risk_sensitive,
                   estimate_value_sup)
from .robust import (DisturbanceClass, InfeasibleSpecification, UnboundedSpecification,
                     chain_csv, error_budget, robust_report, stage_chain)
from .variational import variational_study

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_DEGENERATE = 0, 2, 3, 4

# parameters that change scheduling or file placement but never the numbers
_NON_NUMERIC = {"workers", "out", "csv", "figures", "func", "scenario", "command"}


class CommandError(Exception):
    def __init__(self, message, status=EXIT_INVALID):
        super().__init__(message)
        self.status = status


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _linspace(text):
    """``lo:hi:count`` or a comma list."""
    if ":" in text:
        lo, hi, n = text.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    return np.array(_floats(text))


# --------------------------------------------------------------------------
# scenario handling

def _scenario(args):
    try:
        spec = load_scenario(args.scenario)
    except (ScenarioError, ExprSyntaxError) as exc:
        raise CommandError(str(exc)) from None
    changes = {}
    if args.dt is not None:
        changes["dt"] = args.dt
    if args.t_max is not None:
        changes["t_max"] = args.t_max
    if getattr(args, "epsilon", None) is not None:
        changes["epsilon"] = args.epsilon
    if changes:
        spec = spec.with_(**changes)
    return spec


def _require_valid(spec):
    blocking = [d for d in validate_scenario(spec) if d.blocking]
    if blocking:
        raise CommandError("invalid scenario:\n" + "\n".join(f"  {d}" for d in blocking))


def _subsystem(spec, args):
    ell = args.subsystem if args.subsystem is not None else spec.n
    if not 1 <= ell <= spec.n:
        raise CommandError(f"--subsystem must be in 1..{spec.n}")
    return ell


def _optimizer(args):
    return OptimizerConfig(population=args.population, iterations=args.iterations, seed=args.seed)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                     for v in r])
    Path(path).write_text(buf.getvalue())


# --------------------------------------------------------------------------
# commands; each returns (result dict, csv writer or None, figure writer or None)

def cmd_validate(args, spec):
    diags = validate_scenario(spec)
    blocked = any(d.blocking for d in diags)
    result = {
        "diagnostics": [{"code": d.code, "message": d.message, "blocking": d.blocking} for d in diags],
        "advisory": {"drift_slopes": [] if blocked else drift_slope_report(spec)},
        "hormander": hormander_rank_check(spec),
    }
    status = EXIT_INVALID if blocked else EXIT_OK
    for d in diags:
        print(f"diagnostic: {d}", file=sys.stderr)
    return result, None, None, status


def cmd_estimate(args, spec):
    _require_valid(spec)
    ell = _subsystem(spec, args)
    if args.sup:
        cls = ControlClass(kind=args.control_class, pieces=args.pieces, horizon=args.horizon,
                           gain_bound=args.gain_bound)
        est, law = estimate_value_sup(spec, ell, cls, _optimizer(args), args.samples, args.seed,
                                      workers=args.workers)
        result = est.to_dict()
        result["control_class"] = est.meta["control_class"]
        result["search_value"] = est.meta["search_value"]
        result["best_control"] = law.params().tolist()
        controls = list(default_controls(spec))
        controls[ell - 1] = law
        seed = est.meta["seed"]
    else:
        est = estimate_risk_sensitive(spec, None, ell, args.samples, args.seed, workers=args.workers)
        result = est.to_dict()
        controls, seed = None, args.seed

    def series():
        res = simulate_batch(spec, controls, n_paths=args.samples, seed=seed, stop_at=ell,
                             workers=args.workers)
        return res.tau[:, ell - 1], res.censored[:, ell - 1]

    def write_csv(path):
        tau, cens = series()
        _write_csv(path, ["path", "tau", "censored"],
                   ([i, float(t), int(c)] for i, (t, c) in enumerate(zip(tau, cens))))

    def figures(d):
        from .report import plot_exit_times
        tau, cens = series()
        plot_exit_times(tau, cens, spec.t_max, Path(d) / "exit_times.png", f"subsystem {ell}")

    return result, write_csv, figures, EXIT_OK


def cmd_oracle(args, spec):
    _require_valid(spec)
    if spec.n != 1 or spec.subsystem(1).dim != 1 or not spec.sigma_is_constant() or spec.noise_dim != 1:
        raise CommandError("oracle needs a single 1-D subsystem with constant scalar sigma")
    s = spec.subsystem(1)
    drift = s.drift[0]
    if "t" in variables(drift):
        raise CommandError("oracle needs an autonomous drift")
    params = {}
    if s.control_dim:
        u = default_controls(spec)[0]
        if len(u.values) != 1:
            raise CommandError("oracle needs a constant control")
        params = {f"u1_{j + 1}": float(c) for j, c in enumerate(u.values[0])}
    sigma = float(eval_expr(spec.sigma[0][0], {}))
    res = bvp_oracle_1d(drift, sigma, s.domain[0], s.theta, spec.epsilon, args.grid_points,
                        float(spec.initial[0][0]), params)
    result = {"value": res.value, "value_plain": res.value_plain, "u_x0": res.u_x0,
              "coarse": res.coarse, "diagnostics": res.diagnostics, "grid_points": args.grid_points,
              "x0": res.x0, "theta": s.theta, "epsilon": spec.epsilon}

    def write_csv(path):
        _write_csv(path, ["x", "u"], zip(res.x.tolist(), res.u.tolist()))

    def figures(d):
        from .report import plot_oracle
        plot_oracle(res.x, res.u, res.x0, Path(d) / "oracle.png")

    return result, write_csv, figures, EXIT_OK


def cmd_variational(args, spec):
    _require_valid(spec)
    ell = _subsystem(spec, args)
    results = variational_study(spec, None, ell, ks=_ints(args.pieces), horizon=args.horizon,
                                v_bound=args.v_bound, optimizer_cfg=_optimizer(args),
                                n_samples=args.samples, seed=args.seed, workers=args.workers)
    rows = [{"K": int(r.best_v.values.shape[0]), "lhs": r.lhs.value, "lhs_se": r.lhs.std_error,
             "rhs": r.rhs.value, "rhs_se": r.rhs.std_error, "gap": r.gap, "gap_se": r.gap_se}
            for r in results]
    result = {"subsystem": ell, "results": [r.to_dict() for r in results]}

    def write_csv(path):
        keys = ["K", "lhs", "lhs_se", "rhs", "rhs_se", "gap", "gap_se"]
        _write_csv(path, keys, ([r[k] for k in keys] for r in rows))

    def figures(d):
        from .report import plot_variational
        plot_variational(rows, Path(d) / "variational.png")

    return result, write_csv, figures, EXIT_OK


def _grids(spec, ell, args):
    horizon = spec.t_max if args.horizon is None else args.horizon
    u_grid = control_grid(spec.subsystem(ell).control_box, args.u_levels, args.u_pieces, horizon)
    v_grid = disturbance_grid(_linspace(args.v_values), spec.noise_dim, args.v_pieces, horizon)
    return u_grid, v_grid


def cmd_game(args, spec):
    _require_valid(spec)
    cfg = GameConfig(workers=args.workers)
    if args.staged:
        stages = [1] if spec.n == 1 else list(range(2, spec.n + 1))
        results = staged_game(spec, {s: _grids(spec, s, args) for s in stages}, cfg)
    else:
        ell = _subsystem(spec, args)
        u_grid, v_grid = _grids(spec, ell, args)
        results = [solve_game(spec, ell, u_grid, v_grid, cfg)]
    result = results[0].to_dict() if len(results) == 1 else {"stages": [r.to_dict() for r in results]}

    def write_csv(path):
        r = results[-1]
        U, V = r.table.shape
        _write_csv(path, ["u_index", "v_index", "cost", "censored"],
                   ([i, j, float(r.table[i, j]), int(r.censored[i, j])]
                    for i in range(U) for j in range(V)))

    def figures(d):
        from .report import plot_game_table
        for r in results:
            plot_game_table(r.table, Path(d) / f"game_stage{r.stage}.png")

    return result, write_csv, figures, EXIT_OK


def cmd_robust(args, spec):
    _require_valid(spec)
    ell = _subsystem(spec, args)
    horizon = spec.t_max if args.horizon is None else args.horizon
    if args.v_values:
        v_class = disturbance_grid(_linspace(args.v_values), spec.noise_dim, args.v_pieces, horizon)
    else:
        v_class = DisturbanceClass(args.v_pieces, args.v_bound, horizon)
    opt = _optimizer(args)
    cfg = GameConfig(workers=args.workers)
    chain = []
    if args.chain:
        chain = stage_chain(spec, {i: v_class for i in range(1, spec.n + 1)}, optimizer_cfg=opt, cfg=cfg)
    rep = robust_report(spec, ell, args.L, v_class, args.theta_star, opt, cfg=cfg, chain=chain)
    if not rep.feasible:
        # re-raise through the budget formula for its message
        error_budget(rep.v0, rep.L, rep.theta_star)
    result = rep.to_dict()

    def write_csv(path):
        rows = chain or [{"stage": ell, "v0": rep.v0, "theta_star": rep.theta_star,
                          "budget": rep.budget, "bound": rep.v0 / rep.theta_star}]
        Path(path).write_text(chain_csv(rows))

    def figures(d):
        if chain:
            from .report import plot_chain
            plot_chain(chain, Path(d) / "chain.png")

    return result, write_csv, figures, EXIT_OK


def cmd_sweep(args, spec):
    _require_valid(spec)
    ell = _subsystem(spec, args)
    u_grid, v_grid = _grids(spec, ell, args)
    cls = ControlClass(kind=args.control_class, pieces=args.pieces, horizon=args.horizon,
                       gain_bound=args.gain_bound)
    study = epsilon_study(spec, ell, _floats(args.epsilons), u_grid, v_grid, cls, _optimizer(args),
                          args.samples, args.seed, GameConfig(workers=args.workers))
    result = study.to_dict()
    rows = study.rows()

    def write_csv(path):
        keys = ["epsilon", "value", "se", "lower", "upper"]
        _write_csv(path, keys, ([r[k] for k in keys] for r in rows))

    def figures(d):
        from .report import plot_sweep
        plot_sweep(rows, Path(d) / "sweep.png")

    return result, write_csv, figures, EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario JSON file or shipped scenario name")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--dt", type=float, default=None, help="override the integration step")
    common.add_argument("--t-max", dest="t_max", type=float, default=None, help="override the horizon")
    common.add_argument("--workers", type=int, default=1, help="worker processes (results do not change)")
    common.add_argument("--out", default=None, help="write the JSON result here instead of stdout")
    common.add_argument("--csv", default=None, help="write the command's CSV series here")
    common.add_argument("--figures", default=None, metavar="DIR", help="render PNG figures into DIR")

    sub_common = argparse.ArgumentParser(add_help=False)
    sub_common.add_argument("--subsystem", type=int, default=None, help="stage index (default: last)")

    mc = argparse.ArgumentParser(add_help=False)
    mc.add_argument("--samples", type=int, default=10_000)
    mc.add_argument("--population", type=int, default=32)
    mc.add_argument("--iterations", type=int, default=50)
    mc.add_argument("--epsilon", type=float, default=None, help="override the noise level")

    cls = argparse.ArgumentParser(add_help=False)
    cls.add_argument("--control-class", choices=["piecewise", "feature"], default="piecewise")
    cls.add_argument("--gain-bound", type=float, default=1.0)

    grids = argparse.ArgumentParser(add_help=False)
    grids.add_argument("--u-levels", type=int, default=5)
    grids.add_argument("--u-pieces", type=int, default=1)
    grids.add_argument("--v-values", default="-3:3:61", help="lo:hi:count or comma list; write --v-values=-3:3:61 for negative bounds")
    grids.add_argument("--v-pieces", type=int, default=1)
    grids.add_argument("--horizon", type=float, default=None, help="support of piecewise laws")

    p = argparse.ArgumentParser(prog="riskescape", description=__doc__.strip().splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sp = p.add_subparsers(dest="command", required=True)

    s = sp.add_parser("validate", parents=[common], help="check a scenario and report the rank test")
    s.set_defaults(func=cmd_validate)

    s = sp.add_parser("estimate", parents=[common, sub_common, mc, cls],
                      help="Monte Carlo risk-sensitive value (or its sup with --sup)")
    s.add_argument("--sup", action="store_true", help="maximize over a control class")
    s.add_argument("--pieces", type=int, default=1)
    s.add_argument("--horizon", type=float, default=None)
    s.set_defaults(func=cmd_estimate)

    s = sp.add_parser("oracle", parents=[common], help="finite-difference reference for 1-D scenarios")
    s.add_argument("--grid-points", type=int, default=401)
    s.add_argument("--epsilon", type=float, default=None)
    s.set_defaults(func=cmd_oracle)

    s = sp.add_parser("variational", parents=[common, sub_common, mc],
                      help="restricted minimization of the shifted cost")
    s.add_argument("--pieces", default="1,2,4", help="comma list of nested piece counts")
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--v-bound", type=float, default=3.0)
    s.set_defaults(func=cmd_variational)

    s = sp.add_parser("game", parents=[common, sub_common, grids], help="lower and upper game values")
    s.add_argument("--staged", action="store_true", help="play all stages, freezing each max-min control")
    s.set_defaults(func=cmd_game)

    s = sp.add_parser("robust", parents=[common, sub_common], help="V0, feasibility and error budget")
    s.add_argument("--L", type=float, required=True, help="exit-time specification")
    s.add_argument("--theta-star", type=float, default=None)
    s.add_argument("--v-values", default=None, help="enumerate lo:hi:count instead of searching")
    s.add_argument("--v-pieces", type=int, default=1)
    s.add_argument("--v-bound", type=float, default=3.0)
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--population", type=int, default=32)
    s.add_argument("--iterations", type=int, default=50)
    s.add_argument("--chain", action="store_true", help="add the per-stage bound chain")
    s.set_defaults(func=cmd_robust)

    s = sp.add_parser("sweep", parents=[common, sub_common, mc, cls, grids],
                      help="sup-estimates along decreasing epsilon against the game band")
    s.add_argument("--epsilons", default="0.5,0.25,0.125")
    s.add_argument("--pieces", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def _manifest(args, spec, argv):
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _NON_NUMERIC}
    return {
        "command": args.command,
        "scenario": str(args.scenario),
        "scenario_hash": spec.content_hash(),
        "parameters": params,
        "version": _version(),
    }


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        spec = _scenario(args)
        result, write_csv, figures, status = args.func(args, spec)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.status
    except InfeasibleSpecification as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DegenerateEstimateError, UnboundedSpecification, SimulationError) as exc:
        print(f"error: numerical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ScenarioError, ExprSyntaxError, ExprEvalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    manifest = _manifest(args, spec, argv)
    text = json.dumps(_clean({"manifest": manifest, "result": result}), indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        side = dict(manifest, workers=args.workers, output=out.name,
                    wall_clock_seconds=round(time.perf_counter() - start, 3))
        Path(f"{out}.manifest.json").write_text(json.dumps(_clean(side), indent=2) + "\n")
    else:
        sys.stdout.write(text)
    if args.csv and write_csv is not None:
        write_csv(args.csv)
    if args.figures and figures is not None:
        Path(args.figures).mkdir(parents=True, exist_ok=True)
        figures(args.figures)
    return status


if __name__ == "__main__":
    sys.exit(main())
