"""Candidate subsampling, per-sample scoring rules and batch selection."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import losses
from .models import AuxModel, MainModel


class Strategy(str, Enum):
    LPLGRAD = "lplgrad"
    ENTROPY = "entropy"
    ENT_GRADNORM = "ent-gradnorm"
    LEARNING_LOSS = "learning-loss"
    CORESET = "coreset"
    RANDOM = "random"


@dataclass(frozen=True)
class AcquisitionScore:
    sample_index: int
    score: float


def worker_count() -> int:
    raw = os.environ.get("ALGRAD_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"ALGRAD_THREADS must be an integer, got {raw!r}") from None


def subsample_candidates(unlabeled: Sequence[int], size: int, rng: np.random.Generator) -> list[int]:
    if size < 1:
        raise ValueError(f"candidate size must be >= 1, got {size}")
    pool = np.asarray(list(unlabeled), dtype=np.int64)
    if pool.size == 0:
        raise ValueError("unlabeled pool is empty")
    if size >= pool.size:
        return [int(i) for i in pool]
    picked = rng.choice(pool.size, size=size, replace=False)
    return [int(i) for i in pool[picked]]


def _chunked(fn, n: int, size: int) -> list[np.ndarray]:
    starts = list(range(0, n, size))
    workers = min(worker_count(), len(starts))
    if workers <= 1:
        return [fn(s, s + size) for s in starts]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda s: fn(s, s + size), starts))


def entropy_gradient_norms(model: MainModel, samples: np.ndarray, last_layer_only: bool = False,
                           chunk: int = 128) -> np.ndarray:
    """Frobenius norm of d(entropy of the prediction)/d(parameters), for each sample separately.

    Per-sample gradients are formed from a batched backward pass rather than one pass per
    sample; the result equals the per-sample loop up to float rounding.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        return np.zeros(0)
    names = set(model.last_layer_params) if last_layer_only else None

    def block(lo, hi):
        return model.net.sample_grad_sq_norms(samples[lo:hi], losses.entropy_of_logits, names)

    return np.sqrt(np.concatenate(_chunked(block, len(samples), chunk)))


def _pack(indices: Sequence[int], values) -> list[AcquisitionScore]:
    return [AcquisitionScore(int(i), float(v)) for i, v in zip(indices, values)]


def score_lplgrad(model: MainModel, samples: np.ndarray, indices: Sequence[int],
                  last_layer_only: bool = False) -> list[AcquisitionScore]:
    return _pack(indices, entropy_gradient_norms(model, samples, last_layer_only))


# Same query rule; the two methods differ only in how the model was trained.
score_ent_gradnorm = score_lplgrad


def predictive_entropy(model: MainModel, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(samples), batch_size):
        logits = model.forward(samples[start:start + batch_size]).logits
        out.append(losses.entropy_of_logits(logits).data)
    return np.concatenate(out) if out else np.zeros(0)


def score_entropy(model: MainModel, samples: np.ndarray, indices: Sequence[int]) -> list[AcquisitionScore]:
    return _pack(indices, predictive_entropy(model, samples))


def score_learning_loss(aux: AuxModel, model: MainModel, samples: np.ndarray,
                        indices: Sequence[int], batch_size: int = 256) -> list[AcquisitionScore]:
    out = []
    for start in range(0, len(samples), batch_size):
        fwd = model.forward(samples[start:start + batch_size])
        out.append(aux.forward(fwd.taps).data.reshape(-1))
    values = np.concatenate(out) if out else np.zeros(0)
    return _pack(indices, values)


def embeddings(model: MainModel, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.forward(samples[s:s + batch_size]).embedding.data
           for s in range(0, len(samples), batch_size)]
    if not out:
        return np.zeros((0,) + model.net.shapes[-2])
    return np.concatenate(out).reshape(len(samples), -1)


def select_top_b(scores: Sequence[AcquisitionScore], budget: int) -> list[int]:
    """Indices of the ``budget`` largest scores; ties go to the lower index."""
    if budget <= 0:
        return []
    for s in scores:
        if not np.isfinite(s.score):
            raise ValueError(f"non-finite score for sample {s.sample_index}")
    ranked = sorted(scores, key=lambda s: (-s.score, s.sample_index))
    chosen: list[int] = []
    seen: set[int] = set()
    for s in ranked:
        if s.sample_index in seen:
            continue
        seen.add(s.sample_index)
        chosen.append(s.sample_index)
        if len(chosen) == budget:
            break
    return chosen


def select_random(candidates: Sequence[int], budget: int, rng: np.random.Generator) -> list[int]:
    candidates = list(candidates)
    if budget >= len(candidates):
        return candidates
    if budget <= 0:
        return []
    picked = rng.choice(len(candidates), size=budget, replace=False)
    return [candidates[int(i)] for i in picked]


def select_coreset(labeled_features: np.ndarray, candidate_features: np.ndarray, budget: int,
                   candidate_indices: Sequence[int] | None = None) -> tuple[list[int], list[float]]:
    """Greedy k-center selection.

    Each step picks the candidate farthest from its nearest chosen center,
    where centers are the labeled points plus earlier picks. Returns the
    selected indices and the distance each was chosen at.
    """
    cand = np.asarray(candidate_features, dtype=np.float64)
    cand = cand.reshape(len(cand), -1)
    if candidate_indices is None:
        candidate_indices = list(range(len(cand)))
    candidate_indices = [int(i) for i in candidate_indices]
    order = np.argsort(candidate_indices, kind="stable")
    labeled = np.asarray(labeled_features, dtype=np.float64).reshape(-1, cand.shape[1]) \
        if len(labeled_features) else np.zeros((0, cand.shape[1]))

    min_dist = np.full(len(cand), np.inf)
    if len(labeled):
        for start in range(0, len(labeled), 512):
            block = labeled[start:start + 512]
            d = np.sqrt(((cand[:, None, :] - block[None, :, :]) ** 2).sum(-1))
            min_dist = np.minimum(min_dist, d.min(axis=1))

    selected: list[int] = []
    radii: list[float] = []
    taken = np.zeros(len(cand), dtype=bool)
    for _ in range(min(budget, len(cand))):
        masked = np.where(taken, -np.inf, min_dist)[order]
        pos = int(order[int(np.argmax(masked))])  # argmax keeps the first (lowest index) maximum
        selected.append(candidate_indices[pos])
        radii.append(float(min_dist[pos]))
        taken[pos] = True
        d = np.sqrt(((cand - cand[pos]) ** 2).sum(-1))
        min_dist = np.minimum(min_dist, d)
    return selected, radii


def covering_radius(points: np.ndarray, centers: np.ndarray) -> float:
    """Largest distance from any point to its nearest center."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if len(points) == 0:
        return 0.0
    if len(centers) == 0:
        return float("inf")
    d = np.sqrt(((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    return float(d.min(axis=1).max())


class SelectionLog:
    """Line-delimited JSON record of every query round."""

    def __init__(self, path):
        self.path = path

    def write(self, round_: int, strategy: str, candidate_count: int,
              selected: Sequence[int], scores: Sequence[float | None], trial: int = 0) -> None:
        record = {
            "trial": trial,
            "round": round_,
            "strategy": strategy,
            "candidates": candidate_count,
            "selected": [int(i) for i in selected],
            "scores": [None if s is None else float(s) for s in scores],
        }
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
