"""Independent reference computations used to check the library's fast paths."""

import itertools
import math

import numpy as np


def central_difference(loss_fn, tensors, step=1e-5):
    """Finite-difference gradient of ``loss_fn()`` w.r.t. every element of each tensor."""
    out = []
    for t in tensors:
        g = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            up = loss_fn()
            flat[k] = old - step
            down = loss_fn()
            flat[k] = old
            g.reshape(-1)[k] = (up - down) / (2 * step)
        out.append(g)
    return out


def max_relative_error(auto, numeric):
    worst = 0.0
    for a, n in zip(auto, numeric):
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def scalar_loop_norm(arrays):
    total = 0.0
    for a in arrays:
        for v in np.asarray(a).reshape(-1).tolist():
            total += v * v
    return math.sqrt(total)


def brute_force_top_b(pairs, budget):
    """Enumerate every size-B subset; keep the one with the best sorted score profile.

    Tie-break: among subsets with equal multisets of scores, prefer the one
    whose indices are lexicographically smallest once sorted by (-score, index).
    """
    items = list(pairs)
    b = min(budget, len(items))
    if b <= 0:
        return set()
    best_key, best = None, None
    for subset in itertools.combinations(items, b):
        key = sorted(((-s, i) for i, s in subset))
        if best_key is None or key < best_key:
            best_key, best = key, subset
    return {i for i, _ in best}


def exhaustive_kcenter_radius(labeled, candidates, budget):
    """Smallest achievable covering radius over all size-B candidate subsets."""
    labeled = np.asarray(labeled, dtype=float).reshape(-1, 2)
    candidates = np.asarray(candidates, dtype=float)
    everything = np.concatenate([labeled, candidates])
    best = math.inf
    for subset in itertools.combinations(range(len(candidates)), budget):
        centers = np.concatenate([labeled, candidates[list(subset)]])
        d = np.sqrt(((everything[:, None, :] - centers[None, :, :]) ** 2).sum(-1)).min(axis=1).max()
        best = min(best, float(d))
    return best


def pairwise_rank_top_b(pairs, budget):
    """An item is selected iff fewer than B items beat it (higher score, or equal score and lower index)."""
    items = list(pairs)
    chosen = set()
    for i, s in items:
        beaten_by = sum(1 for j, t in items if t > s or (t == s and j < i))
        if beaten_by < budget:
            chosen.add(i)
    return chosen
