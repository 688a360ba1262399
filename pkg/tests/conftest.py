import numpy as np
import pytest

from sapolab.envs import EnvSpec, make_env


@pytest.fixture
def tiny_env():
    return make_env(EnvSpec("tiny-tree", vocab_size=2, max_len=3), seed=0)


@pytest.fixture
def chain_env():
    return make_env(EnvSpec("chain-arith", vocab_size=12, max_len=5, task_params={"n_steps": 5, "modulus": 10}), seed=0)


@pytest.fixture
def trap_env():
    spec = EnvSpec("format-trap", vocab_size=14, max_len=6, eos_token=13,
                   task_params={"n_steps": 3, "modulus": 10, "marker_bias": 3})
    return make_env(spec, seed=0)


def one_hot_policy(vocab_size, chooser):
    """policy_eval that puts all mass on ``chooser(state)``."""
    def pe(state):
        p = np.zeros(vocab_size)
        p[chooser(state)] = 1.0
        return p
    return pe


CONFIGS = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"


# one line per acceptance criterion, shown after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
