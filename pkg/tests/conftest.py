import copy
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: closed-loop scenario runs that take several seconds")


BASE_SCENARIO = {
    "name": "test",
    "n_followers": 3,
    "dt": 0.1,
    "horizon": 10,
    "duration": 1.0,
    "seed": 7,
    "tau": {"values": [0.3, 0.35, 0.4]},
    "input_bounds": {"u_min": -6.0, "u_max": 6.0},
    "topology": {"kind": "pf"},
    "spacing": {"delta_h": 0.2, "delta_safe": 1.0, "zero_first": False},
    "weights": {"q_self": 1.0, "q_neighbor": 1.0, "scheme": "uniform", "r": 1.0},
    "norm_kind": "l1",
    "leader": {"initial_position": 0.0, "segments": [{"duration": 1.0, "start_velocity": 20.0}]},
}


def scenario_dict(**overrides) -> dict:
    """Small scenario document; top-level keys in ``overrides`` replace the defaults."""
    document = copy.deepcopy(BASE_SCENARIO)
    document.update(copy.deepcopy(overrides))
    return document


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
