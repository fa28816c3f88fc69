"""
Conditional generator, projection discriminator and adversarial losses.

The discriminator score splits into a marginal part ``psi(phi(x))`` and a
conditional part that depends on the label. Two conditional heads exist:

* ``approx``: ``v_y . phi(x)`` with a single embedding matrix.
* ``exact``:  ``(vp_y - vg_y) . phi(x) - (logZp(phi) - logZg(phi))`` where
  ``logZ(f) = logsumexp_j(v_j . f)``, i.e. a difference of two log-softmaxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .nn import DenseNet, GradientSet, NumericError, backward, forward

LOSS_KINDS = ("hinge", "bce")
HEADS = ("approx", "exact")


def check_labels(y, n_classes):
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Generator:
    """``G(z, y) = body([z, embed[y]])``."""

    embed: np.ndarray
    body: DenseNet

    def __post_init__(self):
        if self.body.in_dim <= self.embed.shape[1]:
            raise ValueError("generator body must take latent + embedding inputs")

    @classmethod
    def init(cls, n_classes, rng, latent_dim=2, embed_dim=8, hidden=(64, 64), out_dim=2):
        embed = rng.normal(0.0, 1.0, size=(n_classes, embed_dim))
        sizes = [latent_dim + embed_dim, *hidden, out_dim]
        acts = ["relu"] * len(hidden) + ["identity"]
        return cls(embed, DenseNet.init(sizes, acts, rng))

    @property
    def n_classes(self):
        return self.embed.shape[0]

    @property
    def latent_dim(self):
        return self.body.in_dim - self.embed.shape[1]

    def parameters(self):
        return [*self.body.parameters(), self.embed]

    def copy(self):
        return Generator(self.embed.copy(), self.body.copy())


def generate(gen: Generator, z, y, return_trace=False):
    y = check_labels(y, gen.n_classes)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != len(y) or z.shape[1] != gen.latent_dim:
        raise ValueError(f"latent batch {z.shape} does not match {len(y)} labels / dim {gen.latent_dim}")
    trace = forward(gen.body, np.concatenate([z, gen.embed[y]], axis=1))
    batch = LabeledBatch(trace.output, y)
    if return_trace:
        return batch, trace
    return batch


def generator_backward(gen: Generator, y, trace, dx) -> GradientSet:
    """Gradients of the generator parameters given dL/d(samples)."""
    grads = backward(gen.body, trace, dx)
    d_embed = np.zeros_like(gen.embed)
    np.add.at(d_embed, y, grads.dx[:, gen.latent_dim:])
    return GradientSet([*grads.params, d_embed], grads.dx[:, : gen.latent_dim])


@dataclass
class Discriminator:
    phi: DenseNet
    psi: DenseNet
    head: str
    embeds: list[np.ndarray]

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        need = 1 if self.head == "approx" else 2
        if len(self.embeds) != need:
            raise ValueError(f"{self.head} head needs {need} embedding matrices")
        if self.psi.in_dim != self.phi.out_dim or self.psi.out_dim != 1:
            raise ValueError("psi must map phi features to a scalar")
        for V in self.embeds:
            if V.shape[1] != self.phi.out_dim:
                raise ValueError("embedding width must equal phi output dim")
        if need == 2 and self.embeds[0].shape != self.embeds[1].shape:
            raise ValueError("exact head embeddings must have equal shapes")

    @classmethod
    def init(cls, n_classes, rng, head="approx", in_dim=2, hidden=(64, 64), feat_dim=16):
        phi = DenseNet.init([in_dim, *hidden, feat_dim], "leaky_relu", rng)
        psi = DenseNet.init([feat_dim, 1], "identity", rng)
        n = 1 if head == "approx" else 2
        embeds = [rng.normal(0.0, 1.0 / np.sqrt(feat_dim), size=(n_classes, feat_dim)) for _ in range(n)]
        return cls(phi, psi, head, embeds)

    @property
    def n_classes(self):
        return self.embeds[0].shape[0]

    def parameters(self):
        return [*self.phi.parameters(), *self.psi.parameters(), *self.embeds]

    def copy(self):
        return Discriminator(self.phi.copy(), self.psi.copy(), self.head, [V.copy() for V in self.embeds])


@dataclass
class DiscOutput:
    d_total: np.ndarray
    d_marginal: np.ndarray
    d_conditional: np.ndarray
    cache: dict = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.d_total)

    def subset(self, idx):
        return DiscOutput(self.d_total[idx], self.d_marginal[idx], self.d_conditional[idx])


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def discriminate(disc: Discriminator, batch: LabeledBatch) -> DiscOutput:
    y = check_labels(batch.y, disc.n_classes)
    phi_trace = forward(disc.phi, batch.x)
    feat = phi_trace.output
    if not np.all(np.isfinite(feat)):
        raise NumericError("discriminator features are non-finite")
    psi_trace = forward(disc.psi, feat)
    d_m = psi_trace.output[:, 0]
    cache = {"y": y, "phi": phi_trace, "psi": psi_trace}
    if disc.head == "approx":
        d_c = np.einsum("ij,ij->i", disc.embeds[0][y], feat)
    else:
        Vp, Vg = disc.embeds
        logits_p = feat @ Vp.T
        logits_g = feat @ Vg.T
        rows = np.arange(len(y))
        d_c = (logits_p[rows, y] - logits_g[rows, y]) - (_logsumexp_rows(logits_p) - _logsumexp_rows(logits_g))
        cache["logits"] = (logits_p, logits_g)
    return DiscOutput(d_m + d_c, d_m, d_c, cache)


def disc_backward(disc: Discriminator, out: DiscOutput, g_marginal, g_conditional, input_only=False) -> GradientSet:
    """Gradients given per-sample dL/d(d_marginal) and dL/d(d_conditional).

    A gradient on ``d_total`` is passed as the same value in both slots.
    ``input_only`` skips parameter gradients (generator updates only need ``dx``).
    """
    y = out.cache["y"]
    feat = out.cache["phi"].output
    g_m = np.asarray(g_marginal, dtype=np.float64)
    g_c = np.asarray(g_conditional, dtype=np.float64)
    psi_grads = backward(disc.psi, out.cache["psi"], g_m[:, None], input_only)
    d_feat = psi_grads.dx
    if disc.head == "approx":
        V = disc.embeds[0]
        d_feat = d_feat + g_c[:, None] * V[y]
        if input_only:
            return GradientSet([], backward(disc.phi, out.cache["phi"], d_feat, True).dx)
        dV = np.zeros_like(V)
        np.add.at(dV, y, g_c[:, None] * feat)
        d_embeds = [dV]
    else:
        Vp, Vg = disc.embeds
        logits_p, logits_g = out.cache["logits"]
        sp = softmax(logits_p, axis=1)
        sg = softmax(logits_g, axis=1)
        d_feat = d_feat + g_c[:, None] * (Vp[y] - Vg[y] - sp @ Vp + sg @ Vg)
        if input_only:
            return GradientSet([], backward(disc.phi, out.cache["phi"], d_feat, True).dx)
        dVp = -(g_c[:, None] * sp).T @ feat
        dVg = (g_c[:, None] * sg).T @ feat
        gf = g_c[:, None] * feat
        np.add.at(dVp, y, gf)
        np.add.at(dVg, y, -gf)
        d_embeds = [dVp, dVg]
    phi_grads = backward(disc.phi, out.cache["phi"], d_feat)
    return GradientSet([*phi_grads.params, *psi_grads.params, *d_embeds], phi_grads.dx)


def conditional_log_ratio(disc: Discriminator, x, y):
    """Reference value of the exact conditional term via two log-softmaxes."""
    feat = disc.phi(x)
    rows = np.arange(len(y))
    Vp, Vg = disc.embeds
    return log_softmax(feat @ Vp.T, axis=1)[rows, y] - log_softmax(feat @ Vg.T, axis=1)[rows, y]


def _softplus(s):
    return np.logaddexp(0.0, s)


def loss_discriminator(s_real, s_fake, kind="hinge"):
    """Discriminator loss (to be minimised) and dL/ds for each real and fake score.

    Returns:
        ``(loss, grad_real, grad_fake)``.
    """
    s_real = np.asarray(s_real, dtype=np.float64)
    s_fake = np.asarray(s_fake, dtype=np.float64)
    if s_real.size == 0 or s_fake.size == 0:
        raise ValueError("score lists must be non-empty")
    nr, nf = s_real.size, s_fake.size
    if kind == "hinge":
        loss = np.maximum(0.0, 1.0 - s_real).mean() + np.maximum(0.0, 1.0 + s_fake).mean()
        g_real = -(s_real < 1.0).astype(np.float64) / nr
        g_fake = (s_fake > -1.0).astype(np.float64) / nf
    elif kind == "bce":
        loss = _softplus(-s_real).mean() + _softplus(s_fake).mean()
        g_real = (expit(s_real) - 1.0) / nr
        g_fake = expit(s_fake) / nf
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return float(loss), g_real.astype(np.float64), g_fake.astype(np.float64)


def loss_generator(s_fake, kind="hinge"):
    """Generator loss (non-saturating for bce) and dL/ds per fake score."""
    s_fake = np.asarray(s_fake, dtype=np.float64)
    if s_fake.size == 0:
        raise ValueError("score list must be non-empty")
    n = s_fake.size
    if kind == "hinge":
        return float(-s_fake.mean()), np.full(n, -1.0 / n)
    if kind == "bce":
        return float(_softplus(-s_fake).mean()), (expit(s_fake) - 1.0) / n
    raise ValueError(f"unknown loss kind {kind!r}")
