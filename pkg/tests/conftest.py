import numpy as np
import pytest

from advtransfer.classifiers import DenseNetwork, TrainingSpec, train
from advtransfer.core import Dataset, LabeledSample, RngStream, make_blobs


def linear_two_class(w, b=0.0):
    """Class 1 iff ``w @ x + b > 0`` (ties go to class 0)."""
    w = np.asarray(w, dtype=np.float64)
    return DenseNetwork.linear(np.stack([np.zeros_like(w), w]), [0.0, b])


def random_linear_problem(n, gen):
    """Linear surrogate with boundary through an interior point, a source at known distance, candidates."""
    w = gen.standard_normal(n)
    w /= np.linalg.norm(w)
    c = gen.uniform(0.35, 0.65, n)
    model = linear_two_class(w, -w @ c)
    r = gen.uniform(0.1, 0.3)
    source = LabeledSample(c - r * w, 0)
    pool = gen.uniform(0.0, 1.0, (200, n))
    candidates = Dataset(pool, (pool @ w - w @ c > 0).astype(int), 2)
    return model, source, r, candidates, w, c


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(4, 10, 60, 0.12, RngStream(11, (1,)))


@pytest.fixture(scope="session")
def mlp(blobs):
    return train(blobs, TrainingSpec("mlp", (16,), epochs=20, learning_rate=0.2), RngStream(11, (2,)))


@pytest.fixture(scope="session")
def forest(blobs):
    return train(blobs, TrainingSpec("forest", tree_count=5, max_depth=6), RngStream(11, (3,)))


ACCEPTANCE_RESULTS = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""

    def record(number, passed, detail):
        ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {detail}")
