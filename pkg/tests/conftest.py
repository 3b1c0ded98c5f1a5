import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bincnn.data import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS

_REQUIRED = (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)


def _has_idx_files(d):
    return all(
        os.path.exists(os.path.join(d, n)) or os.path.exists(os.path.join(d, n + ".gz"))
        for n in _REQUIRED
    )


@pytest.fixture(scope="session")
def digits(tmp_path_factory):
    """(data_dir, kind): real MNIST when available, else the cached digit
    surrogate written through the standard IDX files.

    Point BINCNN_DATA_DIR (or MNIST_DIR) at a directory with the four IDX
    files to run the data-dependent acceptance criteria on real MNIST.
    """
    for env in ("BINCNN_DATA_DIR", "MNIST_DIR"):
        d = os.environ.get(env)
        if d and _has_idx_files(d):
            return d, "mnist"
    cache = Path(__file__).resolve().parent.parent / ".cache" / "surrogate-digits"
    if not _has_idx_files(cache):
        from surrogate_digits import write_dataset

        write_dataset(str(cache))
    return str(cache), "surrogate"


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    print(f"\n[ACCEPTANCE] {name}: {report.outcome.upper()}")
