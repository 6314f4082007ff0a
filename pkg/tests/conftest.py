import pytest
import torch

from stylerecon import data

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_records():
    """Nine small objects (three per class) at 32x32."""
    return data.make_toy_dataset(data.ToySpec(num_objects=9, seed=3))


@pytest.fixture(scope="session")
def small_train_set(small_records):
    return data.build_training_set(small_records)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
