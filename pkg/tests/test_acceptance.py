"""
Acceptance suite. Each test records one PASS/FAIL line (printed in the
terminal summary) and then asserts it, at the tolerances of the build
contract. Runtimes are sized for a single laptop core.
"""
import math

import numpy as np
import pytest

from conftest import make
from riskescape.cli import main
from riskescape.dynamics import (DisturbanceLaw, PathStrategy, check_exit_ordering, shift_strategy,
                                 simulate_batch, simulate_path)
from riskescape.game import (control_grid, disturbance_grid, epsilon_study, game_table,
                             matrix_lower, matrix_upper)
from riskescape.model import load_scenario
from riskescape.optimize import OptimizerConfig
from riskescape.risk import ControlClass, bvp_oracle_1d, estimate_risk_sensitive, risk_sensitive_value
from riskescape.robust import (DisturbanceClass, InfeasibleSpecification, chain_nonincreasing,
                               error_budget, stage_chain, value_v0, verify_guarantee)
from riskescape.variational import relative_entropy_check, variational_study


def test_c1_oracle_equivalence(criterion):
    spec = load_scenario("ou")
    assert (spec.epsilon, spec.subsystem(1).theta, spec.dt) == (0.25, 0.1, 1e-3)
    est = estimate_risk_sensitive(spec, None, 1, 100_000, seed=0)
    oracle = bvp_oracle_1d("-x1_1", 1.0, (-1.0, 1.0), 0.1, 0.25, 401, 0.0)
    diff = abs(est.value - oracle.value)
    tol = 3 * est.std_error + 5 * spec.dt * 0.1
    criterion("1", diff <= tol,
              f"MC {est.value:.5f} (se {est.std_error:.5f}, censored {est.censored_fraction:.3f}) "
              f"vs oracle {oracle.value:.5f}: |diff| {diff:.5f} vs tol {tol:.5f}")
    assert diff <= tol


VAR_CASES = [("ou", 1), ("bounded_control", 1), ("cascade3", 3)]


@pytest.fixture(scope="module")
def variational_runs():
    cfg = OptimizerConfig(population=16, iterations=12, seed=0)
    return {name: variational_study(load_scenario(name), None, ell, ks=(1, 2, 4), optimizer_cfg=cfg,
                                    n_samples=2000, seed=0)
            for name, ell in VAR_CASES}


def test_c2_variational_one_sided_and_nested(variational_runs, criterion):
    ok, parts = True, []
    for name, runs in variational_runs.items():
        one_sided = all(r.rhs.value >= r.lhs.value - 3 * r.gap_se for r in runs)
        nested = all(b.rhs.value <= a.rhs.value for a, b in zip(runs, runs[1:]))
        ok &= one_sided and nested
        parts.append(f"{name}: rhs {'/'.join(f'{r.rhs.value:.4f}' for r in runs)} "
                     f"lhs {runs[0].lhs.value:.4f}")
    criterion("2a", ok, "rhs >= lhs - 3 SE and nonincreasing in K: " + "; ".join(parts))
    assert ok


def test_c2_variational_gap_ou(variational_runs, criterion):
    r = variational_runs["ou"][-1]
    rel = r.relative_gap
    criterion("2b", rel <= 0.15,
              f"OU K=4 relative gap {rel:.1%} (rhs {r.rhs.value:.4f}, lhs {r.lhs.value:.4f}) vs 15%")
    assert rel <= 0.15


def test_c3_shift_consistency(criterion):
    spec = make({
        "system": {"n": 2, "epsilon": 0.3, "dt": 1e-3, "t_max": 1.0},
        "subsystem": [
            {"dim": 1, "drift": ["-x1_1 + u1_1"], "control_box": [[-1, 1]], "domain": [[-50, 50]], "theta": 1.0},
            {"dim": 1, "drift": ["sin(x1_1) + u2_1"], "control_box": [[-1, 1]], "domain": [[-50, 50]], "theta": 1.0},
        ],
        "sigma": [["1 + 0.2*tanh(x1_1)"]],
        "initial": [[0.0], [0.0]],
    })
    gamma = PathStrategy([0.1], [[0.5]], np.array([[-1.0, 1.0]]))
    v = DisturbanceLaw(np.array([0.0, 0.25, 0.6, 1.0]), np.array([[1.5], [-2.0], [0.7]]))
    a, _ = simulate_path(spec, [shift_strategy(gamma, v, spec.epsilon), None], shift=v, seed=5)
    moved = a.noise + v.on_grid(spec.n_steps, spec.dt)[:-1] * spec.dt / math.sqrt(spec.epsilon)
    b, _ = simulate_path(spec, [gamma, None], noise_increments=moved)
    err = max(float(np.max(np.abs(xa - xb))) for xa, xb in zip(a.states, b.states))
    ok = err <= 1e-10 and len(a.times) == 1001
    criterion("3", ok, f"max |x_shifted - x_translated| = {err:.2e} over {len(a.times) - 1} steps")
    assert ok


def test_c4_entropy_bound(criterion):
    zero = relative_entropy_check(DisturbanceLaw.zero(1, 1.0), 1.0, n_samples=10_000, seed=0)
    ok = zero["kl_estimate"] == 0.0 and zero["bound"] == 0.0
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(10):
        K = int(rng.integers(1, 6))
        v = DisturbanceLaw.uniform(rng.uniform(-2, 2, size=(K, 1)), 1.0)
        rep = relative_entropy_check(v, 1.0, n_samples=10_000, seed=100 + i)
        z = abs(rep["kl_estimate"] - 0.5 * v.l2sq) / rep["std_error"]
        worst = max(worst, z)
        ok &= rep["kl_estimate"] <= v.l2sq and z <= 3
    criterion("4", ok, f"zero shift KL = {zero['kl_estimate']}; 10 random v: max |KL - int|v|^2/2| "
                       f"= {worst:.2f} SE, all below int|v|^2")
    assert ok


def test_c5_minimax_structure(criterion):
    t = np.array([[1.0, 2.0], [3.0, 0.0]])
    ok = matrix_lower(t)[0] == 2.0 and matrix_upper(t)[0] == 1.0
    rng = np.random.default_rng(5)
    tables = []
    bc = load_scenario("bounded_control").with_(dt=2e-3)
    tables.append(game_table(bc, 1, control_grid(bc.subsystem(1).control_box, 7, 1, 10.0),
                             disturbance_grid(np.linspace(-3, 3, 31), 1, 1, 10.0))[0])
    uc = load_scenario("unit_crossing")
    tables.append(game_table(uc, 1, [None], disturbance_grid(np.linspace(-0.9, 3, 40), 1, 1, 10.0))[0])
    c3 = load_scenario("cascade3").with_(dt=5e-3)
    tables.append(game_table(c3, 3, control_grid(c3.subsystem(3).control_box, 3, 2, 2.0),
                             disturbance_grid(np.linspace(-3, 3, 5), 1, 2, 2.0))[0])
    tables += [rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 9)))) for _ in range(200)]
    checks = 0
    for tab in tables:
        ok &= matrix_upper(tab)[0] <= matrix_lower(tab)[0]
        for _ in range(10):
            rows = rng.choice(tab.shape[0], int(rng.integers(1, tab.shape[0] + 1)), replace=False)
            cols = rng.choice(tab.shape[1], int(rng.integers(1, tab.shape[1] + 1)), replace=False)
            ok &= matrix_lower(tab)[0] <= matrix_lower(tab[:, cols])[0]
            ok &= matrix_upper(tab)[0] >= matrix_upper(tab[rows])[0]
            checks += 1
    criterion("5", ok, f"2x2 table lower 2 / upper 1; upper <= lower on {len(tables)} tables "
                       f"(3 from scenarios); {checks} sub-grid monotonicity checks")
    assert ok


def test_c6_small_noise_trend(criterion):
    spec = load_scenario("bounded_control")
    u = control_grid(spec.subsystem(1).control_box, 9, 1, spec.t_max)
    v = disturbance_grid(np.linspace(-3, 3, 61), 1, 1, spec.t_max)
    # the sup ranges over the same control candidates as the game grid
    study = epsilon_study(spec, 1, [0.5, 0.25, 0.125], u, v, ControlClass(candidates=tuple(u)),
                          n_samples=10_000, seed=0)
    tol = 0.05 * abs(study.lower)
    below = [e.value <= study.lower + tol for e in study.values]
    d = study.distances
    ok = all(below) and all(b <= a for a, b in zip(d, d[1:]))
    criterion("6", ok, f"band [{study.upper:.4f}, {study.lower:.4f}], values "
              + ", ".join(f"{e.value:.4f}" for e in study.values)
              + " at eps 0.5/0.25/0.125; distances " + ", ".join(f"{x:.4f}" for x in d))
    assert ok


@pytest.fixture(scope="module")
def cascade_ordering():
    spec = load_scenario("cascade3")
    res = simulate_batch(spec, n_paths=10_000, seed=0)
    ok = [check_exit_ordering([res.tau[p, i] if not res.censored[p, i] else spec.t_max
                               for i in range(3)])["ok"] for p in range(10_000)]
    return float(np.mean(ok))


def test_c7_robustness_calculus(cascade_ordering, criterion):
    ok = error_budget(2, 1, 1) == 2
    try:
        error_budget(1.5, 1.5, 1.0)
        ok = False
    except InfeasibleSpecification:
        pass
    spec = load_scenario("unit_crossing")
    L, theta = 0.5, 1.0
    cls = DisturbanceClass(pieces=1, bound=3.0)
    v0, _ = value_v0(spec, 1, cls, OptimizerConfig(seed=0))
    budget = error_budget(v0, L, theta)
    rng = np.random.default_rng(7)
    margins = []
    for _ in range(20):
        c = rng.uniform(-1, 1) * math.sqrt(budget)
        rep = verify_guarantee(spec, 1, DisturbanceLaw.constant([c], spec.t_max), L, theta, v0)
        ok &= rep["holds"] and rep["within_budget"]
        margins.append(rep["margin"])
    c3 = load_scenario("cascade3")
    grid = disturbance_grid(np.linspace(-4, 4, 17), 1, 1, c3.t_max)
    rows = stage_chain(c3, {i: grid for i in (1, 2, 3)})
    ok &= cascade_ordering >= 0.99 and chain_nonincreasing(rows)
    criterion("7", ok, f"budget(2,1,1)=2, infeasible at v0=L*theta*; v0 {v0:.5f}, budget {budget:.4f}, "
                       f"20 in-budget disturbances min margin {min(margins):.4f}; chain bounds "
                       + ", ".join(f"{r['bound']:.4f}" for r in rows)
                       + f" with ordering on {cascade_ordering:.2%} of paths")
    assert ok


def test_c8_exit_ordering(cascade_ordering, criterion):
    spec = load_scenario("cascade3_reversed")
    res = simulate_batch(spec, n_paths=10_000, seed=0)
    frac_rev = float(np.mean([check_exit_ordering(
        [res.tau[p, i] if not res.censored[p, i] else spec.t_max for i in range(3)])["ok"]
        for p in range(10_000)]))
    ok = cascade_ordering >= 0.99 and frac_rev < 0.99
    criterion("8", ok, f"cascade3 ordered on {cascade_ordering:.2%} of 10^4 paths; "
                       f"counterexample cascade3_reversed on {frac_rev:.2%}")
    assert ok


COMMANDS = [
    ["validate", "cascade3"],
    ["estimate", "ou", "--samples", "3000", "--t-max", "5"],
    ["estimate", "bounded_control", "--sup", "--samples", "400", "--population", "8",
     "--iterations", "3", "--dt", "0.005", "--t-max", "5"],
    ["oracle", "ou"],
    ["variational", "ou", "--pieces", "1,2", "--samples", "400", "--population", "8",
     "--iterations", "3", "--t-max", "5"],
    ["game", "bounded_control", "--u-levels", "5", "--v-values=-3:3:21", "--dt", "0.005"],
    ["game", "cascade3", "--staged", "--u-levels", "3", "--v-values=-3:3:7", "--dt", "0.005"],
    ["robust", "cascade3", "--L", "0.2", "--v-values=-4:4:17", "--chain", "--dt", "0.005"],
    ["robust", "unit_crossing", "--L", "0.5", "--population", "8", "--iterations", "5"],
    ["sweep", "bounded_control", "--epsilons", "0.5,0.25,0.125", "--samples", "300",
     "--population", "8", "--iterations", "3", "--dt", "0.01", "--t-max", "5"],
]


def test_c9_determinism(tmp_path, criterion):
    ok, same = True, 0
    for k, cmd in enumerate(COMMANDS):
        outputs = []
        for w in (1, 4):
            out, table = tmp_path / f"{k}_{w}.json", tmp_path / f"{k}_{w}.csv"
            status = main([*cmd, "--seed", "3", "--workers", str(w), "--out", str(out), "--csv", str(table)])
            assert status == 0, cmd
            outputs.append((out.read_bytes(), table.read_bytes() if table.exists() else b""))
        same += outputs[0] == outputs[1]
        ok &= outputs[0] == outputs[1]
    criterion("9", ok, f"{same}/{len(COMMANDS)} command runs byte-identical (JSON and CSV) "
                       "for workers 1 vs 4")
    assert ok


def test_c10_estimator_properties(criterion):
    rng = np.random.default_rng(10)
    ok, n = True, 0
    for _ in range(100):
        a, b = rng.uniform(0.2, 2.0), rng.uniform(-0.5, 0.5)
        half = rng.uniform(0.5, 1.5)
        eps = float(rng.uniform(0.05, 1.0))
        spec = make({
            "system": {"n": 1, "epsilon": eps, "dt": 1e-2, "t_max": 5.0},
            "subsystem": [{"dim": 1, "drift": [f"-{a}*x1_1 + {b}"], "control_box": [],
                           "domain": [[-half, half]], "theta": float(rng.uniform(0.01, 2.0))}],
            "sigma": [[f"{rng.uniform(0.5, 1.5)}"]],
            "initial": [[0.0]],
        })
        est = estimate_risk_sensitive(spec, None, 1, 200, int(rng.integers(1 << 30)), keep_samples=True)
        tau, theta = est.samples, spec.subsystem(1).theta
        ok &= 0.0 <= est.value <= theta * tau.max()
        ok &= est.value <= theta * math.fsum(tau) / len(tau)
        grid = np.sort(rng.uniform(0.0, 3.0, 8))
        vals = [risk_sensitive_value(tau, th, eps)[0] for th in grid]
        ok &= all(y >= x for x, y in zip(vals, vals[1:]))
        n += 1
    criterion("10", ok, f"range, Jensen and theta-monotonicity exact on {n} randomized scenarios")
    assert ok
