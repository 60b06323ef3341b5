import numpy as np
import pytest

from attncache.model import ModelConfig, ModelWeights

_acceptance = []


@pytest.fixture
def tiny_weights():
    cfg = ModelConfig(num_layers=2, num_heads=2, hidden_dim=8, head_dim=4, ffn_dim=16, vocab_size=32, max_seq_len=16)
    return ModelWeights.random(cfg, seed=3)


@pytest.fixture
def small_weights():
    cfg = ModelConfig(num_layers=3, num_heads=2, hidden_dim=32, head_dim=16, ffn_dim=64, vocab_size=256, max_seq_len=64)
    return ModelWeights.random(cfg, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))
    elif "test_acceptance.py" in report.nodeid and report.when == "setup" and report.outcome != "passed":
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{tag}  {name}")
