"""Build the local MNIST subset from the 5,000-digit sample shipped inside mlxtend.

No network access is needed: the CSV is read straight out of the installed
mlxtend package data and rewritten as IDX files with a stratified split.
"""

from __future__ import annotations

import gzip
import importlib.util
import io
from pathlib import Path

import numpy as np

from .pool import write_idx

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _bundled_csv() -> Path:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("mlxtend is not installed; pip install 'algrad[mnist]'")
    path = Path(list(spec.submodule_search_locations)[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise FileNotFoundError(f"bundled MNIST sample not found at {path}")
    return path


def prepare_mnist_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write train/t10k IDX files; returns the output directory."""
    out = Path(out_dir)
    raw = np.loadtxt(io.BytesIO(gzip.decompress(_bundled_csv().read_bytes())), delimiter=",")
    pixels = raw[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = raw[:, -1].astype(np.int64)
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        test_mask[rng.choice(members, size=test_per_class, replace=False)] = True
    out.mkdir(parents=True, exist_ok=True)
    for names, mask in ((TRAIN_FILES, ~test_mask), (TEST_FILES, test_mask)):
        order = np.flatnonzero(mask)
        write_idx(out / names[0], out / names[1], pixels[order], labels[order])
    return out


def have_mnist_subset(out_dir) -> bool:
    out = Path(out_dir)
    return all((out / n).exists() for n in TRAIN_FILES + TEST_FILES)
