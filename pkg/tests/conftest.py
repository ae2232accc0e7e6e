import numpy as np
import pytest

from bandit_clusters.config import config_from_dict


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_cfg(**over):
    base = {
        "T": 300,
        "seeds": [0],
        "exploration_scale": 2.5e-5,
        "params": {"threshold_scale": 0.06},
        "env": {"u": 40, "selected_users": 8, "m": 2, "d": 4, "K": 6, "total_arms": 200},
    }
    for k, v in over.items():
        if isinstance(v, dict):
            base.setdefault(k, {}).update(v)
        else:
            base[k] = v
    return config_from_dict(base)


@pytest.fixture
def cfg_factory():
    return small_cfg


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
