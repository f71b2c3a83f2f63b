import os

import numpy as np
import pytest
import torch

from crossview.model import ModelConfig, init_params

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

SMALL = ModelConfig(image_size=32, patch_size=8, enc_layers=2, dec_layers=2, enc_dim=32, dec_dim=32, n_heads=2)


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_model():
    return init_params(SMALL, seed=0)


@pytest.fixture(scope="session")
def reference():
    """``(model, meta)`` of the cached default-config pretraining run."""
    from reference import reference_pretrain
    return reference_pretrain()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n:2d}: FAIL  did not run to completion in this session"))
