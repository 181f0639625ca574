import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("GCFN_DATA_DIR", REPO / "data" / "raw"))


def real_data_available(name):
    return (DATA_DIR / f"{name}.csv").exists()


@pytest.fixture(autouse=True)
def _data_dir_env(monkeypatch):
    monkeypatch.setenv("GCFN_DATA_DIR", str(DATA_DIR))


@pytest.fixture(scope="session")
def synthetic_split():
    from gcfn.data import ScmConfig, simulate, split

    return split(simulate(ScmConfig(kind="synthetic-linear", seed=0)), 0.2, 0)


@pytest.fixture(scope="session")
def short_gan(synthetic_split):
    """30-epoch GAN on the seed-0 synthetic split, shared by module tests."""
    from gcfn.gan import GanTrainConfig, train_gan

    return train_gan(synthetic_split[0], GanTrainConfig(epochs=30, seed=0))


ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
