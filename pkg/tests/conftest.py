import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from flarena import data, models

torch.set_num_threads(1)
settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


def tiny_batch(n=6, side=4, num_classes=3, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((n, 1, side, side))).to(dtype)
    y = torch.from_numpy(rng.integers(0, num_classes, n))
    return data.Batch(x, y, num_classes)


def tiny_model(arch="logreg", side=4, num_classes=3, dtype=torch.float64, width=8):
    return models.Model(models.ModelSpec(arch, (1, side, side), num_classes, width), dtype)


@pytest.fixture
def logreg():
    return tiny_model()


@pytest.fixture
def blobs():
    return data.make_blobs(400, num_classes=4, side=8, cells=4, sigma=0.1, seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.VERDICTS):
            terminalreporter.write_line(line)
