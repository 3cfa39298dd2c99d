import numpy as np
import pytest

from taskaug.data import make_split, make_synthetic_dataset, preprocess_volume
from taskaug.training import TrainingData, desk_config

TINY_SIZE = 32


def tiny_config(**overrides):
    """A config small enough for unit tests to train in well under a second per step."""
    base = dict(batch_size=4, iterations=3, val_interval=2, image_size=TINY_SIZE,
                target_spacing=4.0, unet_widths=(4, 4, 8, 8), gen_x_widths=(4, 4),
                gen_z_widths=(8, 8, 4, 4, 4), gen_common_widths=(4, 4, 4),
                disc_widths=(4, 4, 4, 4, 4), disc_dense=(8, 8), z_dim=8, elastic_sigma=2.0)
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture(scope="session")
def raw_records():
    return make_synthetic_dataset(60, seed=3, matrix=64, n_slices_range=(3, 4))


@pytest.fixture(scope="session")
def tiny_records(raw_records):
    return [preprocess_volume(r, 4.0, TINY_SIZE) for r in raw_records]


@pytest.fixture(scope="session")
def tiny_split(tiny_records):
    return make_split(tiny_records, seed=3)


@pytest.fixture()
def tiny_data(tiny_records, tiny_split):
    labelled = tiny_split.labelled_pool_ids[:1]
    data = TrainingData.from_split(tiny_records, tiny_split, labelled)
    # keep unit tests fast: a handful of unlabelled / val / test subjects
    return TrainingData(data.labelled, data.unlabelled[:3], data.val, data.test[:2])


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
