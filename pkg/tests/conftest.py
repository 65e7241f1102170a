import numpy as np
import pytest

from inpaintpref import models, toyworld
from inpaintpref.diffusion import make_schedule


@pytest.fixture
def tiny_tasks():
    """Eight 4x4 tasks over two classes."""
    return toyworld.make_dataset(seed=11, K=2, n_tasks=8, noise_sigma=0.05, height=4, width=4)


@pytest.fixture
def tiny_ckpt_factory():
    def make(tag="DDPM", hidden=(6,), seed=3, T=5):
        return models.new_checkpoint(tag, 4, 4, 2, hidden, seed, T=T)
    return make


@pytest.fixture
def tiny_schedule():
    return make_schedule(T=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> (passed, detail), printed after the run."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(log):
        passed, detail = log[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
