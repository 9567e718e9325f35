import math

import numpy as np
import pytest

from conftest import make
from riskescape.dynamics import (DisturbanceLaw, PathStrategy, PiecewiseConstant, check_exit_ordering,
                                 exit_time, shift_strategy, simulate_batch, simulate_path,
                                 simulate_replicas)
from riskescape.model import load_scenario


def wide_spec(**system):
    """Bounded-control scenario with a domain wide enough that nothing exits in 1 time unit."""
    data = {
        "system": {"n": 2, "epsilon": 0.3, "dt": 1e-3, "t_max": 1.0, **system},
        "subsystem": [
            {"dim": 1, "drift": ["-x1_1 + u1_1"], "control_box": [[-1, 1]], "domain": [[-50, 50]],
             "theta": 1.0},
            {"dim": 1, "drift": ["sin(x1_1) + u2_1"], "control_box": [[-1, 1]], "domain": [[-50, 50]],
             "theta": 1.0},
        ],
        "sigma": [["1 + 0.2*tanh(x1_1)"]],
        "initial": [[0.0], [0.0]],
    }
    return make(data)


def test_same_seed_bit_identical():
    spec = load_scenario("cascade3")
    a, ra = simulate_path(spec, seed=7)
    b, rb = simulate_path(spec, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.states, b.states))
    assert ra == rb
    c, _ = simulate_path(spec, seed=8)
    assert not np.array_equal(a.states[0][:10], c.states[0][:10])


def test_batch_matches_single_paths():
    spec = load_scenario("ou").with_(t_max=2.0)
    res = simulate_batch(spec, n_paths=3, seed=4)
    _, rec = simulate_path(spec, seed=4)
    assert res.record(0, 1) == rec[0]


@pytest.mark.parametrize("gamma", [
    None,
    PathStrategy([0.1], [[0.5]], np.array([[-1.0, 1.0]])),
])
def test_shift_consistency(gamma):
    spec = wide_spec()
    eps = spec.epsilon
    v = DisturbanceLaw(np.array([0.0, 0.3, 0.7]), np.array([[1.5], [-2.0]]))
    controls = None if gamma is None else [gamma, None]
    shifted = None if gamma is None else [shift_strategy(gamma, v, eps), None]
    a, _ = simulate_path(spec, shifted, shift=v, seed=3)
    translated = a.noise + v.on_grid(spec.n_steps, spec.dt)[:-1] * spec.dt / math.sqrt(eps)
    b, _ = simulate_path(spec, controls, noise_increments=translated)
    assert len(a.times) == spec.n_steps + 1 == 1001
    for xa, xb in zip(a.states, b.states):
        assert np.max(np.abs(xa - xb)) <= 1e-10


def test_exit_interpolation_containment():
    spec = load_scenario("ou").with_(t_max=5.0)
    res = simulate_batch(spec, n_paths=500, seed=1)
    ok = ~res.censored[:, 0]
    k = res.crossing_index[ok, 0]
    tau = res.tau[ok, 0]
    assert np.all(tau >= k * spec.dt - 1e-12) and np.all(tau <= (k + 1) * spec.dt + 1e-12)


def test_exit_time_interpolates():
    spec = load_scenario("unit_crossing")
    traj, rec = simulate_path(spec, noise="deterministic")
    # x = 1 + t leaves (0, 2) at t = 1
    assert rec[0].tau == pytest.approx(1.0, abs=1e-9)
    assert not rec[0].censored
    assert exit_time(traj, 1, [[0.0, 2.0]]) == rec[0]


def test_censoring_flag():
    spec = load_scenario("ou").with_(t_max=0.05)
    res = simulate_batch(spec, n_paths=100, seed=0)
    assert res.censored.all()
    assert np.all(res.taus(1, spec.t_max) == 0.05)


def test_grid_refinement_first_order():
    def terminal(dt):
        spec = wide_spec(dt=dt)
        traj, _ = simulate_path(spec, [PiecewiseConstant.constant([0.7], 1.0), None], noise="deterministic")
        return traj.states[1][-1, 0]

    x1, x2, x4 = terminal(1e-2), terminal(5e-3), terminal(2.5e-3)
    ratio = (x1 - x2) / (x2 - x4)
    assert 1.5 <= ratio <= 2.5


def test_workers_do_not_change_results():
    spec = load_scenario("cascade3")
    a = simulate_batch(spec, n_paths=300, seed=2, block_size=64)
    b = simulate_batch(spec, n_paths=300, seed=2, block_size=64, workers=3)
    assert np.array_equal(a.tau, b.tau, equal_nan=True)
    assert np.array_equal(a.censored, b.censored)


def test_replicas_match_separate_batches():
    spec = load_scenario("bounded_control").with_(t_max=3.0, dt=5e-3)
    laws = [PiecewiseConstant.constant([u], 3.0, np.array([[-1.0, 1.0]])) for u in (-0.5, 0.0, 0.8)]
    feat = PathStrategy([0.2], [[-0.7]], np.array([[-1.0, 1.0]]))
    v = DisturbanceLaw.constant([0.4], 3.0)
    cands = [([l], None) for l in laws] + [([feat], v), ([shift_strategy(feat, v, 0.25)], v)]
    reps = simulate_replicas(spec, cands, n_paths=200, seed=11, block_size=64)
    for (c, sh), r in zip(cands, reps):
        ref = simulate_batch(spec, c, sh, n_paths=200, seed=11, block_size=64)
        assert np.array_equal(r.tau, ref.tau)


def test_exit_ordering_diagnostic():
    assert check_exit_ordering([3.0, 2.0, 2.0])["ok"]
    rep = check_exit_ordering([1.0, 2.0, 0.5])
    assert not rep["ok"] and rep["violations"] == [(1, 2)]


def test_trajectory_csv():
    spec = load_scenario("cascade3").with_(t_max=0.01)
    traj, _ = simulate_path(spec, seed=0)
    lines = traj.to_csv().splitlines()
    assert lines[0] == "t,x1_1,x2_1,x3_1,u1_1,u2_1,u3_1,v_1,dW_1".replace("u1_1,", "")
    assert len(lines) == len(traj.times) + 1


def test_law_validation():
    with pytest.raises(ValueError):
        DisturbanceLaw(np.array([0.0, 0.0]), np.array([[1.0]]))
    with pytest.raises(ValueError):
        DisturbanceLaw(np.array([0.0, 1.0]), np.array([[np.inf]]))
    v = DisturbanceLaw.uniform([1.0, -2.0], 2.0)
    assert v.l2sq == pytest.approx(5.0)
    assert v.sup_norm == 2.0
    assert v(5.0)[0] == 0.0
    assert v.integral(2.0)[0] == pytest.approx(-1.0)
