"""Label corruption through row-stochastic transition matrices.

Three corruption structures are provided: symmetric (uniform spill to every
other class), asymmetric (circular shift by one class), and flip (spill into
class 0 only, mimicking a dead sensor; class 0 itself never changes). The
pre-corruption labels travel alongside the corrupted ones in a sealed oracle
so evaluation can score re-labeling without the training path ever seeing
the truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TransitionMatrix:
    k: int
    rows: np.ndarray  # [k, k], row-stochastic
    kind: str
    epsilon: float

    def __post_init__(self):
        sums = self.rows.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-12:
            raise ValueError(f"rows must sum to 1, worst deviation {np.abs(sums - 1.0).max():.2e}")
        if self.rows.min() < 0 or self.rows.max() > 1:
            raise ValueError("entries must lie in [0, 1]")


def _check_args(k, epsilon):
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"noise ratio must be in [0, 1], got {epsilon}")


def build_symmetric(k, epsilon):
    """Diagonal 1-eps, every off-diagonal eps/(k-1)."""
    _check_args(k, epsilon)
    off = epsilon / (k - 1)
    rows = np.full((k, k), off, dtype=np.float64)
    np.fill_diagonal(rows, 0.0)
    np.fill_diagonal(rows, 1.0 - rows.sum(axis=1))
    return TransitionMatrix(k, rows, "symmetric", epsilon)


def build_asymmetric(k, epsilon):
    """Diagonal 1-eps, mass eps on the next class (wrapping around)."""
    _check_args(k, epsilon)
    rows = np.zeros((k, k), dtype=np.float64)
    for j in range(k):
        rows[j, (j + 1) % k] = epsilon
        rows[j, j] = 1.0 - epsilon
    return TransitionMatrix(k, rows, "asymmetric", epsilon)


def build_flip(k, epsilon):
    """Class 0 is kept; every other class sends mass eps to class 0."""
    _check_args(k, epsilon)
    rows = np.zeros((k, k), dtype=np.float64)
    rows[0, 0] = 1.0
    for j in range(1, k):
        rows[j, 0] = epsilon
        rows[j, j] = 1.0 - epsilon
    return TransitionMatrix(k, rows, "flip", epsilon)


def build(kind, k, epsilon):
    builders = {"symmetric": build_symmetric, "asymmetric": build_asymmetric, "flip": build_flip}
    if kind not in builders:
        raise ValueError(f"unknown noise type {kind!r}; choose from {sorted(builders)}")
    return builders[kind](k, epsilon)


class CleanLabelOracle:
    """Pre-corruption labels, readable only through evaluation helpers.

    Training code receives the corrupted labels; this object exists so that
    metrics like the restored fraction can be computed afterwards.
    """

    def __init__(self, labels):
        arr = np.array(labels, dtype=np.int64, copy=True)
        arr.flags.writeable = False
        self._labels = arr

    def reveal(self):
        return self._labels

    def accuracy(self, candidate):
        return float((np.asarray(candidate) == self._labels).mean())

    def restored_fraction(self, corrected, flipped_mask):
        mask = np.asarray(flipped_mask, dtype=bool)
        if not mask.any():
            return float("nan")
        return float((np.asarray(corrected)[mask] == self._labels[mask]).mean())


@dataclass
class CorruptionResult:
    noisy_labels: np.ndarray
    flipped_mask: np.ndarray
    oracle: CleanLabelOracle


def corrupt(labels, tm, gen):
    """Sample a new label for each entry from its row of the transition matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= tm.k:
        raise ValueError(f"labels must lie in [0, {tm.k}), got range [{labels.min()}, {labels.max()}]")
    u = gen.random(len(labels))
    noisy = np.empty_like(labels)
    cdf = np.cumsum(tm.rows, axis=1)
    for j in range(tm.k):
        sel = labels == j
        if sel.any():
            noisy[sel] = np.minimum(np.searchsorted(cdf[j], u[sel], side="right"), tm.k - 1)
    mask = noisy != labels
    return CorruptionResult(noisy, mask, CleanLabelOracle(labels))
