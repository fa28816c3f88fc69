"""
Sample selection: top-k splits, per-class ranking for SFL+, top-k generator
filtering and instance selection.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import multivariate_normal


class SelectionSplit:
    """Partition of ``range(size)`` into selected and complement indices (both ascending).

    Stored as a boolean mask. The index arrays are built on first access, so
    the training step, which only routes by mask, never pays for them.
    """

    __slots__ = ("_mask", "_selected", "_complement")

    def __init__(self, selected, complement):
        selected = np.asarray(selected, dtype=np.intp)
        complement = np.asarray(complement, dtype=np.intp)
        mask = np.zeros(len(selected) + len(complement), dtype=bool)
        mask[selected] = True
        self._mask, self._selected, self._complement = mask, selected, complement

    @classmethod
    def from_mask(cls, mask):
        split = cls.__new__(cls)
        split._mask = np.asarray(mask, dtype=bool)
        split._selected = split._complement = None
        return split

    @property
    def mask(self):
        return self._mask.copy()

    @property
    def selected(self):
        if self._selected is None:
            self._selected = np.flatnonzero(self._mask)
        return self._selected

    @property
    def complement(self):
        if self._complement is None:
            self._complement = np.flatnonzero(~self._mask)
        return self._complement

    @property
    def k(self):
        return int(np.count_nonzero(self._mask))

    @property
    def size(self):
        return len(self._mask)

    def __repr__(self):
        return f"SelectionSplit(selected={self.selected!r}, complement={self.complement!r})"


def _as_scores(values):
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if np.isnan(a).any():
        raise ValueError("scores contain NaN")
    return a


def top_k_split(scores, k) -> SelectionSplit:
    """Select the ``k`` largest scores; ties go to the lower index."""
    s = _as_scores(scores)
    if not 0 <= k <= len(s):
        raise ValueError(f"k={k} outside [0, {len(s)}]")
    mask = np.zeros(len(s), dtype=bool)
    mask[(-s).argsort(kind="stable")[:k]] = True
    return SelectionSplit.from_mask(mask)


def rank(values):
    """Stable ascending argsort: ``values[rank(values)]`` is non-decreasing."""
    v = _as_scores(values)
    if len(v) == 0:
        raise ValueError("cannot rank an empty list")
    return np.argsort(v, kind="stable")


@dataclass
class RankTable:
    labels: np.ndarray
    probs: np.ndarray
    order: dict[int, np.ndarray]
    percentile: np.ndarray

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset_index", "class", "gt_probability", "percentile"])
            for i in range(len(self.labels)):
                w.writerow([i, int(self.labels[i]), repr(float(self.probs[i])), repr(float(self.percentile[i]))])


def build_rank_table(probs, labels, n_classes=None) -> RankTable:
    """Rank samples within their class by ground-truth-class probability.

    The percentile of a sample is its within-class rank divided by
    ``n_class - 1``; a class with one sample gets percentile 1.0.
    """
    probs = _as_scores(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError("probabilities and labels must have equal length")
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    order = {}
    percentile = np.zeros(len(probs))
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        ranked = members[rank(probs[members])] if len(members) else members
        order[c] = ranked
        n = len(ranked)
        if n == 1:
            percentile[ranked] = 1.0
        elif n > 1:
            percentile[ranked] = np.arange(n) / (n - 1)
    return RankTable(labels, probs, order, percentile)


def sfl_plus_real_mask(table: RankTable, indices, focus) -> SelectionSplit:
    """Select real samples whose within-class percentile is at least ``1 - focus``."""
    if not 0.0 <= focus <= 1.0:
        raise ValueError("focusing rate must lie in [0, 1]")
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= len(table.percentile)):
        raise ValueError("batch index not present in the rank table")
    if focus == 0.0:
        return SelectionSplit.from_mask(np.zeros(len(idx), dtype=bool))
    return SelectionSplit.from_mask(table.percentile[idx] >= 1.0 - focus)


def topk_generated_filter(d_total, k) -> SelectionSplit:
    """Keep the ``k`` most realistic generated samples by full discriminator score."""
    return top_k_split(d_total, k)


def mask_gradient(grad, split: SelectionSplit):
    """Zero the gradient rows of samples outside ``split.selected``."""
    out = np.array(grad, dtype=np.float64, copy=True)
    out[split.complement] = 0.0
    return out


def gaussian_class_scores(x, labels):
    """Log-likelihood of each sample under a Gaussian fitted to its own class.

    Classes with fewer than two samples score ``inf`` (always kept).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    scores = np.full(len(labels), np.inf)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            continue
        pts = x[members]
        cov = np.atleast_2d(np.cov(pts, rowvar=False))
        scores[members] = multivariate_normal(pts.mean(axis=0), cov, allow_singular=True).logpdf(pts)
    return scores


def retained_count(n, retention_ratio):
    # guard against 0.8 * 5 = 4.000000000000001
    return min(n, math.ceil(round(retention_ratio * n, 9)))


def instance_select(dataset, scores, retention_ratio):
    """Keep the top ``ceil(RR * n_class)`` samples of each class by ``scores``.

    ``dataset`` must provide ``labels`` and ``subset(indices)``; a new dataset
    is returned and the input is left untouched.
    """
    if not 0.0 < retention_ratio <= 1.0:
        raise ValueError("retention ratio must lie in (0, 1]")
    scores = _as_scores(scores)
    labels = np.asarray(dataset.labels)
    if len(scores) != len(labels):
        raise ValueError("one score per sample is required")
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            keep.append(members)
            continue
        n_keep = retained_count(len(members), retention_ratio)
        best = members[np.argsort(-scores[members], kind="stable")[:n_keep]]
        keep.append(best)
    return dataset.subset(np.sort(np.concatenate(keep)))
