import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make, ou_dict
from riskescape.model import (ScenarioError, builtin_scenarios, hormander_rank_check, load_scenario,
                              scenario_to_dict, validate_scenario)


def codes(spec):
    return [d.code for d in validate_scenario(spec) if d.blocking]


@pytest.mark.parametrize("name", sorted(builtin_scenarios()))
def test_shipped_scenarios_validate(name):
    spec = load_scenario(name)
    assert codes(spec) == []
    assert hormander_rank_check(spec)["full"]


def test_round_trip_and_hash(tmp_path):
    spec = load_scenario("cascade3")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(scenario_to_dict(spec)))
    again = load_scenario(path)
    assert again.content_hash() == spec.content_hash()
    assert spec.with_(dt=2e-3).content_hash() != spec.content_hash()


def _cascade(drift2="1 + x1_1 + u2_1"):
    return {
        "system": {"n": 2, "epsilon": 0.1, "dt": 1e-3, "t_max": 5.0},
        "subsystem": [
            {"dim": 1, "drift": ["-x1_1"], "control_box": [], "domain": [[-1, 1]], "theta": 1.0},
            {"dim": 1, "drift": [drift2], "control_box": [[-1, 1]], "domain": [[-1, 1]], "theta": 1.0},
        ],
        "sigma": [["1"]],
        "initial": [[0.0], [0.0]],
    }


@pytest.mark.parametrize("bad", [
    ("drift1", "x2_1"),      # downstream state upstream
    ("drift2", "u1_1"),      # another subsystem's control
])
def test_cascade_rule(bad):
    data = _cascade()
    where, var = bad
    if where == "drift1":
        data["subsystem"][0]["drift"] = [f"-x1_1 + {var}"]
    else:
        data["subsystem"][1]["drift"] = [f"1 + {var}"]
    assert "cascade violation" in codes(make(data))


def test_sigma_must_depend_on_x1_only():
    data = _cascade()
    data["sigma"] = [["1 + 0.1*x2_1"]]
    assert "cascade violation" in codes(make(data))


def test_initial_point_and_ellipticity():
    data = ou_dict()
    data["initial"] = [[1.0]]
    assert "initial point not interior" in codes(make(data))
    data = ou_dict()
    data["sigma"] = [["x1_1"]]
    assert "ellipticity" in codes(make(data))


def test_non_finite_drift():
    data = ou_dict()
    data["subsystem"][0]["drift"] = ["sqrt(x1_1)"]
    assert "non-finite" in codes(make(data))


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)
    with pytest.raises(ScenarioError):
        make({"system": {"n": 1}})


def test_rank_deficient_cascade():
    # the second subsystem ignores x1, so noise never reaches it
    spec = make(_cascade("1 + u2_1"))
    rep = hormander_rank_check(spec)
    assert rep["applicable"] and rep["rank"] == 1 and not rep["full"]
    spec = make(_cascade("x1_1 * x1_1"))
    assert not hormander_rank_check(spec)["applicable"]


def _chain(dim, perm, coupling):
    """A dim-2 first subsystem driving a 1-D second one, with state labels permuted."""
    lab = [f"x1_{perm[k] + 1}" for k in range(dim)]
    drift1 = ["0"] * dim
    # chain of integrators on the relabeled coordinates: lab[k] driven by lab[k-1]
    for k in range(1, dim):
        drift1[perm[k]] = lab[k - 1]
    sigma = [["0"] for _ in range(dim)]
    sigma[perm[0]] = ["1"]
    drift2 = f"{coupling} * {lab[-1]}"
    return make({
        "system": {"n": 2, "epsilon": 0.1, "dt": 1e-3, "t_max": 5.0},
        "subsystem": [
            {"dim": dim, "drift": drift1, "control_box": [], "domain": [[-1, 1]] * dim, "theta": 1.0},
            {"dim": 1, "drift": [drift2], "control_box": [], "domain": [[-1, 1]], "theta": 1.0},
        ],
        "sigma": sigma,
        "initial": [[0.0] * dim, [0.0]],
    })


@settings(max_examples=30, deadline=None)
@given(st.permutations([0, 1, 2]), st.sampled_from([0.0, 1.0, -2.5]))
def test_rank_check_permutation_consistent(perm, coupling):
    ref = hormander_rank_check(_chain(3, [0, 1, 2], coupling))
    assert hormander_rank_check(_chain(3, list(perm), coupling))["full"] == ref["full"]
    assert ref["full"] == (coupling != 0.0)
