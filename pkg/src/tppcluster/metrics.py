"""Clustering and intensity-fit evaluation metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .sim import EventSequence, empirical_intensity

log = logging.getLogger(__name__)


@dataclass
class ClusteringResult:
    predicted: np.ndarray
    true: np.ndarray | None = None

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        if self.true is not None:
            self.true = np.asarray(self.true, dtype=np.int64)
            if self.true.shape != self.predicted.shape:
                raise ValueError("predicted and true labels differ in length")
            if self.true.size and self.true.min() < 0:
                raise ValueError("true labels must be non-negative")
        if self.predicted.size and self.predicted.min() < 0:
            raise ValueError("predicted labels must be non-negative")

    def _require_truth(self) -> np.ndarray:
        if self.true is None:
            raise ValueError("metric needs true labels")
        return self.true


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Counts n[i, j] of items with label i in ``a`` and label j in ``b``."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _pairs(n):
    n = np.asarray(n, dtype=np.int64)
    return n * (n - 1) // 2


def purity(result: ClusteringResult) -> float:
    """Fraction of items that carry the majority true class of their cluster."""
    true = result._require_truth()
    if true.size == 0:
        raise ValueError("purity of an empty clustering")
    table = contingency(result.predicted, true)
    return float(table.max(axis=1).sum() / true.size)


def rand_index(result: ClusteringResult) -> float:
    """(agreeing same-same pairs + agreeing different-different pairs) / all pairs."""
    true = result._require_truth()
    M = true.size
    if M < 2:
        raise ValueError("rand index needs at least two items")
    table = contingency(result.predicted, true)
    total = M * (M - 1) // 2
    same_both = int(_pairs(table).sum())
    same_pred = int(_pairs(table.sum(axis=1)).sum())
    same_true = int(_pairs(table.sum(axis=0)).sum())
    diff_both = total - same_pred - same_true + same_both
    return (same_both + diff_both) / total


def eid(real: Sequence[EventSequence], generated: Sequence[EventSequence], dt: float = 5.0) -> float:
    """Accumulated absolute gap between two empirical intensities over [0, T]."""
    if len(real) == 0 or len(generated) == 0:
        raise ValueError("eid needs non-empty sequence sets")
    T = real[0].T
    if any(abs(s.T - T) > 1e-12 for s in generated):
        raise ValueError("real and generated sequences must share a horizon")
    a = empirical_intensity(real, dt, T)
    b = empirical_intensity(generated, dt, T)
    return float(np.abs(a.rates - b.rates).sum() * dt)


def matched_eid(
    generated: Sequence[Sequence[EventSequence]],
    dataset: Sequence[EventSequence],
    dt: float = 5.0,
) -> tuple[np.ndarray, list[int]]:
    """Greedily match true classes to generated sets by smallest EID.

    ``generated[i]`` are sequences sampled from learned policy ``i``. Returns
    the EID of every true class (ordered by class label) against its matched
    policy, and the matched policy index per class.
    """
    labels = np.array([-1 if s.label is None else s.label for s in dataset])
    if np.any(labels < 0):
        raise ValueError("matched_eid needs a fully labelled dataset")
    classes = np.unique(labels)
    if len(classes) != len(generated):
        raise ValueError(f"{len(classes)} true classes but {len(generated)} policies")
    real = [[s for s, y in zip(dataset, labels) if y == c] for c in classes]
    cost = np.array([[eid(r, g, dt) for g in generated] for r in real])
    out = np.zeros(len(classes))
    match = [-1] * len(classes)
    free_c, free_p = set(range(len(classes))), set(range(len(generated)))
    while free_c:
        c, p = min(((c, p) for c in free_c for p in free_p), key=lambda cp: (cost[cp], cp))
        out[c], match[c] = cost[c, p], p
        free_c.discard(c)
        free_p.discard(p)
    return out, match


Runner = Callable[[list[EventSequence], list[EventSequence], int], Sequence[int]]


def clustering_consistency(
    runner: Runner,
    dataset: Sequence[EventSequence],
    trials: int = 10,
    split: float = 0.5,
    seed: int = 0,
    return_details: bool = False,
):
    """Minimum over trials of the fraction of co-clustered pairs preserved elsewhere.

    In each trial the dataset is split at random into train and test folds;
    ``runner(train, test, seed)`` fits on ``train`` and returns cluster labels
    for ``test``. For trial j, each other trial j' is checked on the pairs
    that are co-clustered in j and lie in both test folds; the per-j' fractions
    are averaged, and the minimum over j is returned.
    """
    if trials < 2:
        raise ValueError("consistency needs at least two trials")
    if not 0.0 < split < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    M = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCC]))
    n_train = max(1, min(M - 1, int(round(split * M))))
    folds = []  # test index -> label
    for j in range(trials):
        perm = rng.permutation(M)
        train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        labels = np.asarray(
            runner([dataset[i] for i in train], [dataset[i] for i in test], int(rng.integers(2**31))),
            dtype=np.int64,
        )
        full = np.full(M, -1, dtype=np.int64)
        full[test] = labels
        folds.append(full)

    scores = []
    for j in range(trials):
        fracs = []
        for jp in range(trials):
            if jp == j:
                continue
            common = (folds[j] >= 0) & (folds[jp] >= 0)
            if common.sum() < 2:
                continue
            table = contingency(folds[j][common], folds[jp][common])
            together = int(_pairs(table.sum(axis=1)).sum())
            if together == 0:
                continue
            fracs.append(int(_pairs(table).sum()) / together)
        if not fracs:
            log.warning("trial %d has no co-clustered pairs shared with other trials; skipped", j)
            continue
        scores.append(float(np.mean(fracs)))
    if not scores:
        raise ValueError("no trial produced any co-clustered shared pairs")
    value = min(scores)
    if return_details:
        return value, scores
    return value
