"""Seeded adaptive RANSAC loop shared by the minimal-solver estimators."""

import math

import numpy as np

from ..errors import InsufficientCorrespondences


def adaptive_max_iters(inlier_ratio, sample_size, confidence):
    """Iterations needed so that P(at least one all-inlier sample) >= confidence."""
    eps = max(min(inlier_ratio, 1.0 - 1e-12), 1e-12)
    good = eps**sample_size
    if good >= 1.0 - 1e-12:
        return 1
    if good < 1e-300:
        return 10**9
    # log1p keeps tiny success probabilities from flushing the bound to 1.
    denom = math.log1p(-good)
    return int(math.ceil(math.log(1.0 - confidence) / denom))


def ransac(
    n_data,
    sample_size,
    solver,
    scorer,
    rng,
    max_iters=10000,
    confidence=0.9999,
):
    """Generic hypothesize-and-verify loop.

    n_data: number of correspondences to sample from.
    solver(idx) -> iterable of candidate models (may be empty).
    scorer(model) -> boolean inlier mask of shape (n_data,).
    rng: np.random.Generator; the only source of randomness.

    Returns (best_model, best_mask).  Inlier count breaks ties by earlier
    discovery, so results are reproducible for a fixed rng state.
    """
    if n_data < sample_size:
        raise InsufficientCorrespondences(
            f"need at least {sample_size} correspondences, got {n_data}"
        )
    best_model = None
    best_mask = np.zeros(n_data, dtype=bool)
    best_count = -1
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n_data, size=sample_size, replace=False)
        for model in solver(idx):
            mask = scorer(model)
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_model = model
                best_mask = mask
                needed = adaptive_max_iters(count / n_data, sample_size, confidence)
    return best_model, best_mask
