import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"


@pytest.fixture(scope="session")
def mnist_dir():
    from algrad.mnist import have_mnist_subset, prepare_mnist_subset
    if not have_mnist_subset(MNIST_DIR):
        try:
            prepare_mnist_subset(MNIST_DIR)
        except FileNotFoundError as exc:
            pytest.skip(f"MNIST subset unavailable: {exc}")
    return MNIST_DIR
