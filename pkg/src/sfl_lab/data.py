"""
Synthetic 2-D conditional mixtures and the small "desk" classifier used to
rank real samples and to score generated ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .nn import AdamState, DenseNet, NumericError, adam_step, backward, forward, load_arrays, save_arrays, _net_arrays, _net_from_arrays

HELDOUT_FRACTION = 0.1


@dataclass
class Mode:
    mean: np.ndarray
    cov: np.ndarray
    weight: float


@dataclass
class MixtureSpec:
    classes: list[list[Mode]]
    samples_per_class: int

    @property
    def n_classes(self):
        return len(self.classes)

    def validate(self):
        if not self.classes:
            raise ValueError("mixture needs at least one class")
        for c, modes in enumerate(self.classes):
            if not modes:
                raise ValueError(f"class {c} has no modes")
            total = sum(m.weight for m in modes)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"mode weights of class {c} sum to {total}, not 1")
            for m in modes:
                cov = np.asarray(m.cov, dtype=np.float64)
                if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=1e-12):
                    raise ValueError(f"class {c}: covariance must be a symmetric 2x2 matrix")
                if np.linalg.eigvalsh(cov).min() < -1e-12:
                    raise ValueError(f"class {c}: covariance is not positive semi-definite")


def default_benchmark() -> MixtureSpec:
    """8 classes on a radius-4 ring.

    Each class has a tight dominant mode (weight 0.8, sigma 0.15) and a wider
    satellite (weight 0.2, sigma 0.4) pulled 1.2 towards the origin.
    """
    classes = []
    for c in range(8):
        direction = np.array([np.cos(2 * np.pi * c / 8), np.sin(2 * np.pi * c / 8)])
        classes.append([
            Mode(4.0 * direction, 0.15**2 * np.eye(2), 0.8),
            Mode(2.8 * direction, 0.4**2 * np.eye(2), 0.2),
        ])
    return MixtureSpec(classes, 2500)


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    modes: np.ndarray
    split: np.ndarray  # "train" / "heldout"
    n_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.x[idx].copy(), self.labels[idx].copy(), self.modes[idx].copy(),
                       self.split[idx].copy(), self.n_classes)

    def train(self):
        return self.subset(np.flatnonzero(self.split == "train"))

    def heldout(self):
        return self.subset(np.flatnonzero(self.split == "heldout"))

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "label", "mode_id", "split"])
            for (a, b), y, m, s in zip(self.x, self.labels, self.modes, self.split):
                w.writerow([repr(float(a)), repr(float(b)), int(y), int(m), s])

    @classmethod
    def from_csv(cls, path, n_classes=None):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty dataset")
        x = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
        labels = np.array([int(r["label"]) for r in rows])
        modes = np.array([int(r["mode_id"]) for r in rows])
        split = np.array([r["split"] for r in rows])
        if n_classes is None:
            n_classes = int(labels.max()) + 1
        return cls(x, labels, modes, split, n_classes)


def _sample_gaussian(rng, mean, cov, n):
    # eigen factor works for singular (PSD) covariances where Cholesky does not
    w, U = np.linalg.eigh(cov)
    factor = U * np.sqrt(np.maximum(w, 0.0))
    return mean + rng.standard_normal((n, 2)) @ factor.T


def make_dataset(spec: MixtureSpec, seed) -> Dataset:
    """Draw ``samples_per_class`` points per class and hold out 10% of each class."""
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.samples_per_class
    n_held = int(round(HELDOUT_FRACTION * n))
    xs, ys, ms, ss = [], [], [], []
    for c, modes in enumerate(spec.classes):
        weights = np.array([m.weight for m in modes])
        mode_ids = rng.choice(len(modes), size=n, p=weights / weights.sum())
        pts = np.empty((n, 2))
        for j, mode in enumerate(modes):
            sel = mode_ids == j
            pts[sel] = _sample_gaussian(rng, np.asarray(mode.mean, dtype=np.float64),
                                        np.asarray(mode.cov, dtype=np.float64), int(sel.sum()))
        split = np.full(n, "train", dtype=object)
        split[rng.permutation(n)[:n_held]] = "heldout"
        xs.append(pts)
        ys.append(np.full(n, c))
        ms.append(mode_ids)
        ss.append(split)
    return Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(ms),
                   np.concatenate(ss).astype(str), spec.n_classes)


@dataclass
class DeskClassifier:
    net: DenseNet
    epochs: int = 0
    heldout_accuracy: float | None = None

    @property
    def n_classes(self):
        return self.net.out_dim

    def probabilities(self, x):
        return softmax(self.net(x), axis=1)

    def predict(self, x):
        return self.net(x).argmax(axis=1)

    def save(self, path):
        arrays = _net_arrays(self.net)
        arrays["epochs"] = np.array(self.epochs)
        arrays["heldout_accuracy"] = np.array(np.nan if self.heldout_accuracy is None else self.heldout_accuracy)
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path):
        arrays = load_arrays(path)
        acc = float(arrays["heldout_accuracy"])
        return cls(_net_from_arrays(arrays), int(arrays["epochs"]), None if np.isnan(acc) else acc)


def train_desk_classifier(dataset: Dataset, epochs=20, seed=0, batch_size=128, lr=1e-3, hidden=(32, 32)):
    """Cross-entropy training of a small MLP on the train split."""
    if dataset.n_classes < 2:
        raise ValueError("classifier needs at least two classes")
    rng = np.random.default_rng(seed)
    train = dataset.train() if (dataset.split == "train").any() else dataset
    net = DenseNet.init([2, *hidden, dataset.n_classes], ["relu"] * len(hidden) + ["identity"], rng)
    state = AdamState.for_model(net, lr, beta1=0.9, beta2=0.999)
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            trace = forward(net, train.x[idx])
            logp = log_softmax(trace.output, axis=1)
            loss = -logp[np.arange(len(idx)), train.labels[idx]].mean()
            if not np.isfinite(loss):
                raise NumericError("classifier loss diverged")
            g = np.exp(logp)
            g[np.arange(len(idx)), train.labels[idx]] -= 1.0
            adam_step(net, backward(net, trace, g / len(idx)), state)
    clf = DeskClassifier(net, epochs)
    held = dataset.heldout()
    if len(held):
        clf.heldout_accuracy = float((clf.predict(held.x) == held.labels).mean())
    return clf


def gt_class_probabilities(classifier: DeskClassifier, x, labels):
    """Probability the classifier assigns to each sample's own label."""
    labels = np.asarray(labels)
    return classifier.probabilities(x)[np.arange(len(labels)), labels]
