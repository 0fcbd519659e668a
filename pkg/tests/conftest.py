import sys

import pytest

from ec4srec.config import ExperimentConfig
from ec4srec.data import SyntheticConfig, generate_synthetic, split_leave_one_out


@pytest.fixture(scope="session")
def tiny_split():
    syn = generate_synthetic(0, SyntheticConfig(n_users=48))
    return split_leave_one_out(syn.dataset, train_samples="last")


def small_config(**overrides) -> ExperimentConfig:
    flat = {"mode": "full", "epochs": 4, "p": 1, "batch_size": 16, "lr": 0.005, "seed": 3,
            "encoder.d": 8, "encoder.max_len": 12, "encoder.dropout": 0.1, "eval_ks": (3,),
            "select_metric": "NDCG@3"}
    flat.update(overrides)
    return ExperimentConfig().replace(**flat)


@pytest.fixture
def make_config():
    return small_config


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
