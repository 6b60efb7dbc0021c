import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dia.policy import PolicyRegistry, SoftmaxPolicy, register
from dia.sim import DgpConfig, Dataset, make_dgp, sample_batch
from dia import rng as rngmod

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def hand_dataset():
    """Z=[1,0,1,0], A=[1,0,0,0], Y=[1,0,1,0] with a raw scalar instrument."""
    return Dataset.from_arrays([1, 0, 1, 0], [1, 0, 0, 0], [1, 0, 1, 0], num_instruments=2)


def collect(dgp, policy, n, seed=0, *path):
    reg = register(PolicyRegistry(), policy, n)
    return sample_batch(dgp, policy, n, reg, rngmod.stream(seed, *path), policy_id=0), reg


@pytest.fixture
def iv10():
    return make_dgp(DgpConfig(kind="iv", num_instruments=10), seed=0)


@pytest.fixture
def binary_dgp():
    cfg = DgpConfig(kind="binary_confounded", num_instruments=2, sigma_u=0.0, sigma0=1.0, sigma1=2 ** 0.5)
    return make_dgp(cfg, seed=0)


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one PASS/FAIL line for the acceptance summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
