import numpy as np
import pytest

from riskescape.model import scenario_from_dict


def ou_dict(**system):
    base = {"n": 1, "epsilon": 0.25, "dt": 1e-3, "t_max": 25.0}
    base.update(system)
    return {
        "name": "ou-test",
        "system": base,
        "subsystem": [{"dim": 1, "drift": ["-x1_1"], "control_box": [], "domain": [[-1.0, 1.0]],
                       "theta": 0.1}],
        "sigma": [["1"]],
        "initial": [[0.0]],
    }


def make(data, name="test"):
    return scenario_from_dict(data, name)


@pytest.fixture
def ou_spec():
    return make(ou_dict())


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(key, ok, detail):
        ACCEPTANCE[key] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<4} {'PASS' if ok else 'FAIL'}  {detail}")
