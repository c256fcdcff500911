import numpy as np
import pytest

from xattn import denoiser as dn
from xattn import diffusion as df

TINY_LAYOUT = ("down:4", "down:2", "mid:2", "up:2", "up:4")


def tiny_config(**overrides) -> dn.DenoiserConfig:
    base = dict(frames=2, height=4, width=4, channels=2, model_width=8, head_count=2,
                block_layout=TINY_LAYOUT, token_capacity=6, time_steps=1000)
    base.update(overrides)
    return dn.DenoiserConfig.from_dict(base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny):
    return dn.init_params(tiny, seed=3)


@pytest.fixture
def tiny64(tiny):
    return dn.init_params(tiny, seed=3, dtype=np.float64)


@pytest.fixture(scope="session")
def schedule():
    return df.make_schedule()


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion that ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = sorted(getattr(module, "RESULTS", []), key=lambda s: int(s.split("criterion")[1].split(":")[0]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
