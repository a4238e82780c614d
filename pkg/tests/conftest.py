import numpy as np
import pytest

from milscene.fusenet import ModelConfig, init_params


def tiny_config(n_classes: int = 3) -> ModelConfig:
    """A 16-mel model small enough for exhaustive finite differences."""
    return ModelConfig(n_mels=16, channels=(2, 2, 3, 3), n_blocks=2, n_classes=n_classes)


def tiny_params(cfg: ModelConfig, seed: int = 0):
    params = init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    # nonzero detector bias and batch-norm shifts keep relu units away from symmetric zeros
    for name, t in params:
        if name.endswith(".beta") or name == "det.b":
            t.data[:] = rng.normal(0.0, 0.3, t.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# verdict lines from test_acceptance, echoed after the run so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
