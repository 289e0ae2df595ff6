"""Verification metrics over distance scores.

Convention: a pair is declared "same identity" iff its distance is <= the
threshold, so smaller scores mean more similar.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deidkit.errors import ConfigurationError, InputError


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise InputError("scores must be finite")
        if np.any(self.genuine < 0) or np.any(self.impostor < 0):
            raise InputError("distances must be nonnegative")

    def require_nonempty(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise InputError("genuine and impostor score lists must both be nonempty")


def _max_accepted(n_impostor: int, fpr_target: float) -> int:
    """Largest impostor count c with ``c / n_impostor <= fpr_target`` in float arithmetic."""
    c = int(np.floor(fpr_target * n_impostor))
    while c + 1 <= n_impostor and (c + 1) / n_impostor <= fpr_target:
        c += 1
    while c > 0 and c / n_impostor > fpr_target:
        c -= 1
    return c


def tpr_at_fpr(scores: ScoreSet, fpr_target: float) -> float:
    return tpr_and_threshold(scores, fpr_target)[0]


def tpr_and_threshold(scores: ScoreSet, fpr_target: float) -> tuple[float, float]:
    """TPR at the largest pooled threshold whose FPR stays within ``fpr_target``.

    Returns ``(tpr, threshold)``; the threshold is ``-inf`` when no candidate
    qualifies, in which case the TPR is 0.
    """
    scores.require_nonempty()
    if not 0.0 < fpr_target < 1.0:
        raise ConfigurationError(f"fpr_target must lie in (0, 1), got {fpr_target}")
    imp = np.sort(scores.impostor)
    gen = scores.genuine
    k = _max_accepted(imp.size, fpr_target)
    # Any threshold strictly below the (k+1)-th smallest impostor accepts at most k impostors.
    bound = imp[k] if k < imp.size else np.inf
    pooled = np.concatenate([gen, imp])
    below = pooled[pooled < bound]
    if below.size == 0:
        return 0.0, -np.inf
    tau = float(below.max())
    return np.count_nonzero(gen <= tau) / gen.size, tau


def verification_accuracy(scores: ScoreSet) -> float:
    return accuracy_and_threshold(scores)[0]


def accuracy_and_threshold(scores: ScoreSet) -> tuple[float, float]:
    """Best single-threshold accuracy (percent) over the pooled scores.

    Ties between thresholds resolve to the smallest one.
    """
    scores.require_nonempty()
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    candidates = np.unique(np.concatenate([gen, imp]))
    tp = np.searchsorted(gen, candidates, side="right")
    tn = imp.size - np.searchsorted(imp, candidates, side="right")
    correct = tp + tn
    best = int(np.argmax(correct))
    total = gen.size + imp.size
    return 100.0 * int(correct[best]) / total, float(candidates[best])


def roc_points(scores: ScoreSet) -> np.ndarray:
    """(threshold, fpr, tpr) rows at every pooled candidate threshold."""
    scores.require_nonempty()
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    candidates = np.unique(np.concatenate([gen, imp]))
    tpr = np.searchsorted(gen, candidates, side="right") / gen.size
    fpr = np.searchsorted(imp, candidates, side="right") / imp.size
    return np.column_stack([candidates, fpr, tpr])


def histogram(distances, n_bins: int, value_range=(0.0, 2.0)) -> np.ndarray:
    if n_bins < 1:
        raise ConfigurationError("n_bins must be positive")
    lo, hi = value_range
    if not hi > lo:
        raise ConfigurationError("histogram range must be increasing")
    counts, _ = np.histogram(np.asarray(distances, dtype=np.float64), bins=n_bins, range=(lo, hi))
    return counts


def _sample_genuine_pairs(labels, n, rng):
    groups = {}
    for idx, lab in enumerate(labels.tolist()):
        groups.setdefault(lab, []).append(idx)
    eligible = np.array([i for lab, idx in groups.items() if len(idx) > 1 for i in idx], dtype=np.int64)
    if eligible.size == 0:
        raise InputError("no label has two samples; cannot form genuine pairs")
    first = eligible[rng.integers(0, eligible.size, size=n)]
    second = np.empty(n, dtype=np.int64)
    offsets = rng.random(n)
    for t, i in enumerate(first.tolist()):
        mates = groups[labels[i]]
        pick = int(offsets[t] * (len(mates) - 1))
        j = mates[pick]
        second[t] = mates[-1] if j == i else j
    return first, second


def sample_impostor_pairs(labels, n, rng):
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise InputError("need two distinct labels for impostor pairs")
    first = np.empty(0, dtype=np.int64)
    second = np.empty(0, dtype=np.int64)
    while first.size < n:
        a = rng.integers(0, labels.size, size=2 * (n - first.size))
        b = rng.integers(0, labels.size, size=a.size)
        keep = labels[a] != labels[b]
        first = np.concatenate([first, a[keep]])
        second = np.concatenate([second, b[keep]])
    return first[:n], second[:n]


def pair_distances(embeddings, labels, n_genuine: int, n_impostor: int, seed: int) -> ScoreSet:
    """l2 distances over randomly drawn same-label and different-label pairs."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    gi, gj = _sample_genuine_pairs(labels, n_genuine, rng)
    ii, ij = sample_impostor_pairs(labels, n_impostor, rng)
    genuine = np.linalg.norm(emb[gi] - emb[gj], axis=1)
    impostor = np.linalg.norm(emb[ii] - emb[ij], axis=1)
    return ScoreSet(genuine, impostor)


def cross_distances(probe, reference, labels, n_impostor: int, seed: int) -> ScoreSet:
    """Genuine scores pair ``probe[i]`` with ``reference[i]``; impostors pair
    ``probe[i]`` with ``reference[j]`` for a different label."""
    probe = np.asarray(probe, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    rng = np.random.default_rng(seed)
    genuine = np.linalg.norm(probe - reference, axis=1)
    ii, ij = sample_impostor_pairs(labels, n_impostor, rng)
    impostor = np.linalg.norm(probe[ii] - reference[ij], axis=1)
    return ScoreSet(genuine, impostor)
