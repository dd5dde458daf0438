import os

# keep test runs from writing log files
os.environ.setdefault('BLOC_INFER_LOG_DIR', '')

import numpy as np
import pytest

from model_core import Hyperparams, Municipality, Question, VoteTable


def make_table(counts, latitudes=None, years=None):
    """Vote table from an (N, Q, 2) count array with generated ids."""
    counts = np.asarray(counts, dtype=np.int64)
    n, q = counts.shape[0], counts.shape[1]
    municipalities = [
        Municipality(
            id=f"m{i + 1}",
            name=f"Town {i + 1}",
            latitude=None if latitudes is None else float(latitudes[i]),
            longitude=None if latitudes is None else 8.0,
        )
        for i in range(n)
    ]
    questions = [
        Question(id=f"q{j + 1}", year=2000 + j if years is None else years[j])
        for j in range(q)
    ]
    return VoteTable(municipalities=municipalities, questions=questions, counts=counts)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_table():
    counts = [
        [[90, 10], [20, 80], [55, 45]],
        [[85, 15], [25, 75], [50, 50]],
        [[10, 90], [70, 30], [40, 60]],
        [[15, 85], [75, 25], [45, 55]],
    ]
    return make_table(counts, latitudes=[46.0, 46.5, 47.0, 47.5])


@pytest.fixture
def empty_table():
    """Two municipalities and no questions: every likelihood is constant."""
    return make_table(np.zeros((2, 0, 2), dtype=np.int64))


@pytest.fixture
def hyper():
    return Hyperparams()
