import numpy as np
import pytest

from gridfed.gridworld import Environment, generate_environment, sample_episode
from gridfed.rng import SeededRng


@pytest.fixture
def empty5():
    return Environment("e5", 5, 5)


@pytest.fixture
def small_world():
    """Three seen environments with a handful of episodes each."""
    rng = SeededRng(11)
    envs = [generate_environment(rng.child("env", i).seed, 5, 5, 0.2, f"s{i}") for i in range(3)]
    eps = {e.id: [sample_episode(e, rng, 1, 4) for _ in range(6)] for e in envs}
    return envs, eps


def random_vector(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.normal(size=n)


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for row in sorted(RESULTS):
        terminalreporter.write_line(line(*row))
