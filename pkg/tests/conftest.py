import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from memuda.config import ExperimentConfig
from memuda.data import DomainSpec

settings.register_profile("memuda", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("memuda")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """A few seconds of training: small domains, short schedule."""
    cfg = ExperimentConfig(
        source=DomainSpec(num_identities=12, samples_per_identity=8, num_cameras=3, seed=1),
        target=DomainSpec(num_identities=12, samples_per_identity=8, num_cameras=3, seed=2, label_offset=1000),
    )
    train = cfg.train.replace(epochs=4, ni_start_epoch=2, gpp_start_epoch=1, batch_size=16, hidden_dim=32,
                              embed_dim=16)
    return dataclasses.replace(cfg, train=train)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")
