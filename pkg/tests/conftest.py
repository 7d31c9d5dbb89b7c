import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sglkt.config import TrainConfig
from sglkt.data import Dataset, GeneratorConfig
from sglkt.gradcheck import tiny_generator

settings.register_profile("sglkt", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sglkt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_gen():
    """A small world that still has every feature of the default one."""
    return GeneratorConfig(rounds=4, candidates=12, k_min=3, k_max=5, d_v=8, seed=3)


@pytest.fixture(scope="session")
def small_sets(small_gen):
    return Dataset.generate(small_gen, "train", 6), Dataset.generate(small_gen, "val", 3)


@pytest.fixture(scope="session")
def tiny_gen():
    return tiny_generator(0)


@pytest.fixture
def make_config():
    def make(**kw):
        base = dict(d_h=8, heads=2, steps=2, lam=1.0, epochs=1, seed=0)
        base.update(kw)
        return TrainConfig(**base).validate()

    return make


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance criterion: prints a PASS/FAIL line and fails the test when not met."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} [{name}] {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
