from __future__ import annotations

import numpy as np
import pytest

from safa_motion_kit.model import ParamSet, make_toy_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_model():
    return make_toy_model(7, v=30, k_joints=3, dims=(6, 3))


def random_params(model, rng, pose_sigma=0.2, scale=1.0):
    return ParamSet(
        rng.normal(0.0, 1.0, model.num_shape),
        rng.normal(0.0, 1.0, model.num_expression),
        rng.normal(0.0, pose_sigma, model.num_pose),
        scale,
        rng.normal(0.0, 0.05, 2),
    )


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines after the run, since output is captured."""
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
