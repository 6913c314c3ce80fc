import sys

import numpy as np
import pytest

from tsquant.runtime import QuantConfig, quantize_model
from tsquant.toy_dit import ToyDiTConfig, build_model, denoise_trajectory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    """Default toy model with its full calibration trajectory."""
    cfg = ToyDiTConfig()
    model = build_model(cfg)
    _, records = denoise_trajectory(model)
    return cfg, model, records


@pytest.fixture(scope="session")
def quantized(toy):
    """Full pipeline (smoothing + low-rank + GPTQ + timestep clipping) on the default toy."""
    _, model, records = toy
    return quantize_model(model, records, QuantConfig.for_variant("svd_gptq_tsclip"))


@pytest.fixture(scope="session")
def rtn_quantized(toy):
    _, model, records = toy
    return quantize_model(model, records, QuantConfig.for_variant("rtn"))


SMALL = dict(d_model=16, n_blocks=2, seq_len=8, n_steps=16, context_len=4)


@pytest.fixture(scope="session")
def small_toy():
    """A cheap toy config for tests that re-run the whole pipeline."""
    cfg = ToyDiTConfig(**SMALL)
    model = build_model(cfg)
    _, records = denoise_trajectory(model)
    return cfg, model, records


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)
