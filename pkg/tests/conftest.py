import dataclasses

import numpy as np
import pytest

from tinyaction.synthdata import DatasetSpec, generate_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_SPEC = DatasetSpec(num_classes=4, head_class_count=8, tail_ratio=0.7, secondary_label_prob=0.3,
                        frames=8, height=4, width=4, downsample=2, num_groups=2, seed=3)


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_dataset(TINY_SPEC)


@pytest.fixture
def tiny_spec():
    return dataclasses.replace(TINY_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
