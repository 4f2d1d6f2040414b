import numpy as np
import pytest

from hybridlm.models import LanguageModel, ModelConfig


def tiny_config(mode="autoregressive", d=16, max_len=96):
    return ModelConfig(d_model=d, n_layers=1, n_heads=2, d_ff=2 * d, max_len=max_len, mode=mode)


@pytest.fixture
def tiny_arm():
    return LanguageModel(tiny_config("autoregressive"), seed=1)


@pytest.fixture
def tiny_ddlm():
    return LanguageModel(tiny_config("diffusion", d=24), seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from _verdicts import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
