"""Classification, uncertainty and loss-prediction objectives."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_CLAMP = 1e-12


class AuxLossMode(str, Enum):
    PAPER_LITERAL = "paper-literal"
    PAIRWISE_SIGN = "pairwise-sign"


@dataclass(frozen=True)
class PairBatch:
    """P/2 disjoint index pairs drawn from one minibatch."""

    size: int
    pairs: tuple[tuple[int, int], ...]

    @property
    def indices(self) -> np.ndarray:
        return np.array([i for pair in self.pairs for i in pair], dtype=np.int64)


def make_pairs(batch_size: int, pair_batch: int, rng: np.random.Generator) -> PairBatch:
    """Shuffle the batch and pair up consecutive entries.

    ``pair_batch`` is clamped to the largest even number not above the batch
    size, so a short final minibatch yields fewer pairs (possibly none).
    """
    if pair_batch < 0:
        raise ValueError("pair_batch must be non-negative")
    p = min(pair_batch, batch_size)
    p -= p % 2
    order = rng.permutation(batch_size)[:p]
    pairs = tuple((int(order[i]), int(order[i + 1])) for i in range(0, p, 2))
    return PairBatch(p, pairs)


def softmax(logits) -> Tensor:
    return ag.softmax(ag.as_tensor(logits), axis=-1)


def entropy(probs, check: bool = True) -> Tensor:
    """Shannon entropy in nats over the last axis, with 0*log(0) taken as 0."""
    probs = ag.as_tensor(probs)
    if check:
        p = probs.data
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("probabilities must sum to 1 within 1e-9")
    plogp = probs * ag.log(ag.clamp_min(probs, LOG_CLAMP))
    return -ag.tsum(plogp, axis=-1)


def entropy_of_logits(logits) -> Tensor:
    return entropy(softmax(logits), check=False)


def cross_entropy(logits, labels) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy and the per-sample losses it averages."""
    logits = ag.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"need logits [N, C] and N labels, got {logits.shape} and {labels.shape}")
    num_classes = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    per_sample = -ag.take_rows(ag.log_softmax(logits), labels)
    return ag.mean(per_sample), per_sample


def aux_margin_loss(l_aux, l_main, margin: float, mode: AuxLossMode | str,
                    pairs: PairBatch) -> Tensor:
    """Hinge loss that teaches the auxiliary head to track the true losses.

    ``l_main`` is used as a constant target. In paper-literal mode each of the
    P paired samples contributes max(0, M - d*(l_aux - l_main)) with
    d = max(0, l_main). In pairwise-sign mode each pair (m, n) contributes
    max(0, M - sign(l_main[m] - l_main[n]) * (l_aux[m] - l_aux[n])).
    """
    mode = AuxLossMode(mode)
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    l_aux = ag.as_tensor(l_aux)
    if l_aux.ndim == 2:
        l_aux = ag.reshape(l_aux, (l_aux.shape[0],))
    target = np.asarray(l_main.data if isinstance(l_main, Tensor) else l_main,
                        dtype=np.float64).reshape(-1)
    if l_aux.shape[0] < pairs.size or target.shape[0] < pairs.size:
        raise ValueError("loss vectors shorter than the pair batch")
    if mode is AuxLossMode.PAIRWISE_SIGN and pairs.size % 2:
        raise ValueError("pairwise-sign mode needs an even pair batch")
    if pairs.size == 0:
        return Tensor(0.0)

    if mode is AuxLossMode.PAPER_LITERAL:
        idx = pairs.indices
        d = np.maximum(0.0, target[idx])
        gap = ag.index(l_aux, idx) - target[idx]
        terms = ag.relu(margin - gap * d)
    else:
        first = np.array([m for m, _ in pairs.pairs])
        second = np.array([n for _, n in pairs.pairs])
        sign = np.sign(target[first] - target[second])
        diff = ag.index(l_aux, first) - ag.index(l_aux, second)
        terms = ag.relu(margin - diff * sign)
    return ag.mean(terms)


def total_loss(l_main, l_aux, aux_weight: float = 1.0) -> Tensor:
    return ag.as_tensor(l_main) + ag.as_tensor(l_aux) * aux_weight
