"""
Sample-quality metrics: IS, FID, precision/recall and density/coverage.

Feature space is whatever the caller passes in; the lab uses raw 2-D samples
for the distance-based metrics and desk-classifier probabilities for IS.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import xlogy

from .nn import NumericError

EIG_CLAMP = 1e-10


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self):
        return len(self.mean)


def gaussian_fit(features) -> GaussianSummary:
    """Sample mean and unbiased (N-1) covariance, symmetrised."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise ValueError("need at least two samples for a covariance")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    return GaussianSummary(mean, 0.5 * (cov + cov.T))


def _psd_sqrt(c):
    w, U = np.linalg.eigh(0.5 * (c + c.T))
    w = np.where(w < EIG_CLAMP, np.maximum(w, 0.0), w)
    return (U * np.sqrt(w)) @ U.T


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    """Frechet distance between two Gaussians.

    ``tr sqrt(C_a C_b)`` is taken from the eigenvalues of the symmetric matrix
    ``sqrt(C_a) C_b sqrt(C_a)``, which share the spectrum of ``C_a C_b``.
    """
    if a.dim != b.dim or a.cov.shape != b.cov.shape:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    try:
        root_a = _psd_sqrt(a.cov)
        inner = root_a @ b.cov @ root_a
        eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    eig = np.maximum(eig, 0.0)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(eig).sum())


@dataclass
class ManifoldIndex:
    points: np.ndarray
    k: int
    radii: np.ndarray


def _as_points(points):
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    return p


def build_manifold(points, k) -> ManifoldIndex:
    """Exact distance from each point to its k-th nearest neighbour (self excluded)."""
    p = _as_points(points)
    if k < 1 or k >= len(p):
        raise ValueError(f"k={k} requires 1 <= k < number of points ({len(p)})")
    d = cdist(p, p)
    # column 0 of each sorted row is the point itself
    radii = np.partition(d, k, axis=1)[:, k]
    return ManifoldIndex(p, k, radii)


def precision_recall(real, fake, k=3):
    X = build_manifold(real, k)
    Y = build_manifold(fake, k)
    d = cdist(X.points, Y.points)
    precision = float((d <= X.radii[:, None]).any(axis=0).mean())
    recall = float((d <= Y.radii[None, :]).any(axis=1).mean())
    return precision, recall


def density_coverage(real, fake, k=3):
    X = build_manifold(real, k)
    Y = _as_points(fake)
    inside = cdist(X.points, Y) <= X.radii[:, None]
    density = float(inside.sum() / (k * len(Y)))
    coverage = float(inside.any(axis=1).mean())
    return density, coverage


def prdc(real, fake, k=3):
    """Precision, recall, density and coverage from one distance matrix."""
    X = build_manifold(real, k)
    Y = build_manifold(fake, k)
    d = cdist(X.points, Y.points)
    inside_real = d <= X.radii[:, None]
    return {
        "precision": float(inside_real.any(axis=0).mean()),
        "recall": float((d <= Y.radii[None, :]).any(axis=1).mean()),
        "density": float(inside_real.sum() / (k * len(Y.points))),
        "coverage": float(inside_real.any(axis=1).mean()),
    }


def inception_score(probs) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("expected a non-empty (M, C) probability matrix")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-8:
        raise ValueError("every row must be a probability distribution")
    marginal = p.mean(axis=0)
    kl = (xlogy(p, p) - xlogy(p, marginal)).sum(axis=1)
    return float(np.exp(kl.mean()))


@dataclass
class MetricsReport:
    inception_score: float | None
    fid: float
    precision: float
    recall: float
    density: float
    coverage: float
    n_real: int
    n_fake: int
    k: int
    gt_prob_mean: float | None = None

    def to_dict(self):
        return asdict(self)


def evaluate(real, fake, k=3, fake_probs=None, fake_labels=None) -> MetricsReport:
    """Full metric report for one checkpoint.

    ``fake_probs`` (classifier outputs for the fake samples) enables IS and,
    together with ``fake_labels``, the mean ground-truth-class probability.
    """
    real = _as_points(real)
    fake = _as_points(fake)
    scores = prdc(real, fake, k)
    is_score = gt = None
    if fake_probs is not None:
        is_score = inception_score(fake_probs)
        if fake_labels is not None:
            gt = float(np.asarray(fake_probs)[np.arange(len(fake_labels)), fake_labels].mean())
    return MetricsReport(
        inception_score=is_score,
        fid=fid(gaussian_fit(real), gaussian_fit(fake)),
        n_real=len(real),
        n_fake=len(fake),
        k=k,
        gt_prob_mean=gt,
        **scores,
    )
