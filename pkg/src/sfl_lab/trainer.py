"""
Selective focusing training loop for the conditional GAN.

Within each minibatch the samples with the highest conditional score are
trained on the conditional term alone while the remaining samples are trained
on the full discriminator output. The selected fraction ``F`` grows each epoch
as ``min(1 - gamma**e, nu)`` with ``gamma = (1 - nu)**(1 / E_max)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cgan import (
    Discriminator, Generator, LabeledBatch, LOSS_KINDS, HEADS, disc_backward, discriminate,
    generate, generator_backward, loss_discriminator, loss_generator,
)
from .data import Dataset, DeskClassifier
from .metrics import MetricsReport, evaluate
from .nn import AdamState, NumericError, adam_step, _net_arrays, save_arrays
from .selection import RankTable, SelectionSplit, mask_gradient, sfl_plus_real_mask, top_k_split, topk_generated_filter

log = logging.getLogger(__name__)

METHODS = ("marginal", "conditional", "joint", "sfl", "sfl_plus")
SELECTIVE = ("sfl", "sfl_plus")
DIAGNOSTIC_COLUMNS = [
    "epoch", "F", "loss_D", "loss_G",
    "dc_var_selected_real", "dc_var_selected_fake",
    "dp_cond_selected", "dp_marg_selected", "dp_cond_unselected", "dp_marg_unselected",
]


class TrainingAborted(RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class FocusSchedule:
    nu: float
    epochs: int

    def __post_init__(self):
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError("nu must lie in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epoch budget must be non-negative")

    @property
    def gamma(self):
        if self.epochs == 0:
            return 1.0
        return (1.0 - self.nu) ** (1.0 / self.epochs)

    def rate(self, epoch):
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        return min(1.0 - self.gamma**epoch, self.nu)


def focusing_rate(schedule: FocusSchedule, epoch):
    return schedule.rate(epoch)


def focus_count(batch_size, focus):
    """``floor(B * F)``, robust to F landing one ulp under a representable value."""
    return min(batch_size, math.floor(batch_size * focus + 1e-9))


@dataclass
class TrainerConfig:
    batch_size: int = 128
    epochs: int = 200
    iters_per_epoch: int | None = None  # None: one pass over the train split
    latent_dim: int = 2
    lr_d: float = 2e-4
    lr_g: float = 2e-4
    d_steps: int = 1
    loss: str = "hinge"
    method: str = "sfl"
    nu: float = 0.5
    head: str = "approx"
    topk_fraction: float | None = None
    retention_ratio: float | None = None
    seed: int = 0
    eval_every: int = 10
    n_eval: int = 2000
    k: int = 3

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be >= 1")
        if self.lr_d <= 0 or self.lr_g <= 0:
            raise ValueError("learning rates must be positive")
        if self.d_steps < 1:
            raise ValueError("d_steps must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError("nu must lie in [0, 1]")
        if self.topk_fraction is not None and not 0.0 < self.topk_fraction <= 1.0:
            raise ValueError("topk_fraction must lie in (0, 1]")
        if self.retention_ratio is not None and not 0.0 < self.retention_ratio <= 1.0:
            raise ValueError("retention_ratio must lie in (0, 1]")
        if self.eval_every < 1 or self.n_eval < 2 or self.k < 1:
            raise ValueError("eval_every, n_eval and k must be positive (n_eval >= 2)")
        return self

    @property
    def schedule(self):
        return FocusSchedule(self.nu, self.epochs)


# ---------------------------------------------------------------------------
# score routing


def routed_scores(out, method, mask=None):
    """Score each sample is trained on, as dictated by ``method`` and selection ``mask``."""
    if method == "joint":
        return out.d_total
    if method == "conditional":
        return out.d_conditional
    if method == "marginal":
        return out.d_marginal
    return np.where(mask, out.d_conditional, out.d_total)


def routed_gradients(g, method, mask=None):
    """Split dL/d(score) into (dL/d d_marginal, dL/d d_conditional)."""
    if method == "joint":
        return g, g
    if method == "conditional":
        return np.zeros_like(g), g
    if method == "marginal":
        return g, np.zeros_like(g)
    return np.where(mask, 0.0, g), g


def _add_grads(a, b):
    return [x + y for x, y in zip(a, b)]


def _concat(a: LabeledBatch, b: LabeledBatch):
    return LabeledBatch(np.concatenate([a.x, b.x]), np.concatenate([a.y, b.y]))


@dataclass
class StepReport:
    loss: float
    real_split: SelectionSplit | None = None
    fake_split: SelectionSplit | None = None


def discriminator_step(disc, opt, real: LabeledBatch, fake: LabeledBatch, focus, method,
                       kind="hinge", real_split=None, apply=True):
    """One selective discriminator update (gradient ascent on ``-loss``).

    ``real_split`` overrides the real-pool selection (SFL+ rank mask); otherwise
    both pools keep their top ``floor(n * F)`` samples by conditional score.

    Returns the ascent gradients and a StepReport; parameters are updated in
    place unless ``apply`` is False.
    """
    n_real = len(real)
    out = discriminate(disc, _concat(real, fake))
    out_r, out_f = out.subset(slice(0, n_real)), out.subset(slice(n_real, None))
    mask_r = mask_f = None
    if method in SELECTIVE:
        if real_split is None:
            real_split = top_k_split(out_r.d_conditional, focus_count(n_real, focus))
        fake_split = top_k_split(out_f.d_conditional, focus_count(len(fake), focus))
        mask_r, mask_f = real_split.mask, fake_split.mask
    else:
        real_split = fake_split = None
    loss, g_r, g_f = loss_discriminator(
        routed_scores(out_r, method, mask_r), routed_scores(out_f, method, mask_f), kind)
    if not np.isfinite(loss):
        raise NumericError(f"discriminator loss is {loss}")
    gm_r, gc_r = routed_gradients(g_r, method, mask_r)
    gm_f, gc_f = routed_gradients(g_f, method, mask_f)
    grads = disc_backward(disc, out, np.concatenate([gm_r, gm_f]), np.concatenate([gc_r, gc_f]))
    # the discriminator climbs its objective, which is the negated loss
    ascent = [-g for g in grads.params]
    if apply:
        adam_step(disc, ascent, opt, ascent=True)
    return ascent, StepReport(loss, real_split, fake_split)


def generator_step(gen, disc, opt, z, y, focus, method, kind="hinge", topk_fraction=None, apply=True):
    """One selective generator update (gradient descent on the generator loss)."""
    fake, trace = generate(gen, z, y, return_trace=True)
    out = discriminate(disc, fake)
    mask = split = None
    if method in SELECTIVE:
        split = top_k_split(out.d_conditional, focus_count(len(y), focus))
        mask = split.mask
    loss, g = loss_generator(routed_scores(out, method, mask), kind)
    if not np.isfinite(loss):
        raise NumericError(f"generator loss is {loss}")
    if topk_fraction is not None and topk_fraction < 1.0:
        keep = max(1, math.floor(topk_fraction * len(y) + 1e-9))
        g = mask_gradient(g, topk_generated_filter(out.d_total, keep))
    gm, gc = routed_gradients(g, method, mask)
    dx = disc_backward(disc, out, gm, gc, input_only=True).dx
    grads = generator_backward(gen, y, trace, dx)
    if apply:
        adam_step(gen, grads.params, opt, ascent=False)
    return grads.params, StepReport(loss, None, split)


# ---------------------------------------------------------------------------
# diagnostics


def distinguishing_power(real_out, fake_out, real_split: SelectionSplit, fake_split: SelectionSplit | None = None):
    """Mean real-minus-fake score gaps, split into marginal and conditional parts.

    Returns ``{"selected": {...}, "unselected": {...}}``; a cell whose real or
    fake pool is empty is None.
    """
    fake_split = real_split if fake_split is None else fake_split
    result = {}
    for name, ri, fi in (("selected", real_split.selected, fake_split.selected),
                         ("unselected", real_split.complement, fake_split.complement)):
        if len(ri) == 0 or len(fi) == 0:
            result[name] = None
            continue
        cond = real_out.d_conditional[ri].mean() - fake_out.d_conditional[fi].mean()
        marg = real_out.d_marginal[ri].mean() - fake_out.d_marginal[fi].mean()
        total = real_out.d_total[ri].mean() - fake_out.d_total[fi].mean()
        result[name] = {"conditional": float(cond), "marginal": float(marg), "total": float(total)}
    return result


def _var(values):
    return float(np.var(values)) if len(values) else None


def focus_diagnostics(real_out, fake_out, real_split, fake_split):
    dp = distinguishing_power(real_out, fake_out, real_split, fake_split)
    sel, unsel = dp["selected"] or {}, dp["unselected"] or {}
    return {
        "dc_var_selected_real": _var(real_out.d_conditional[real_split.selected]),
        "dc_var_selected_fake": _var(fake_out.d_conditional[fake_split.selected]),
        "dp_cond_selected": sel.get("conditional"),
        "dp_marg_selected": sel.get("marginal"),
        "dp_cond_unselected": unsel.get("conditional"),
        "dp_marg_unselected": unsel.get("marginal"),
    }


def top_fraction_diagnostics(disc, real: LabeledBatch, fake: LabeledBatch, fraction=0.5):
    """Conditional-score spread and distinguishing-power share of the top fraction by d_c.

    Both pools are ranked by their own conditional scores, as a selective
    step at focusing rate ``fraction`` would do.
    """
    out_r, out_f = discriminate(disc, real), discriminate(disc, fake)
    split_r = top_k_split(out_r.d_conditional, focus_count(len(real), fraction))
    split_f = top_k_split(out_f.d_conditional, focus_count(len(fake), fraction))
    selected_dc = np.concatenate([out_r.d_conditional[split_r.selected], out_f.d_conditional[split_f.selected]])
    sel = distinguishing_power(out_r, out_f, split_r, split_f)["selected"]
    share = None
    if sel is not None:
        denom = abs(sel["conditional"]) + abs(sel["marginal"])
        share = sel["conditional"] / denom if denom > 0 else 0.0
    return {
        "dc_var_top": _var(selected_dc),
        "dp_cond_top": None if sel is None else sel["conditional"],
        "dp_marg_top": None if sel is None else sel["marginal"],
        "dp_cond_share_top": share,
    }


@dataclass
class EpochDiagnostics:
    epoch: int
    F: float
    loss_D: float
    loss_G: float
    dc_var_selected_real: float | None = None
    dc_var_selected_fake: float | None = None
    dp_cond_selected: float | None = None
    dp_marg_selected: float | None = None
    dp_cond_unselected: float | None = None
    dp_marg_unselected: float | None = None

    def row(self):
        return [self.epoch] + [getattr(self, c) for c in DIAGNOSTIC_COLUMNS[1:]]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_diagnostics_csv(path, diagnostics):
    write_csv(path, DIAGNOSTIC_COLUMNS, [d.row() for d in diagnostics])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Checkpoint:
    epoch: int
    metrics: MetricsReport
    focus: dict
    samples: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)


@dataclass
class TrainResult:
    config: TrainerConfig
    generator: Generator
    discriminator: Discriminator
    diagnostics: list[EpochDiagnostics]
    checkpoints: list[Checkpoint]
    epoch_seconds: list[float]

    def best(self):
        """Checkpoint with the lowest FID (earliest on ties)."""
        return min(self.checkpoints, key=lambda c: c.metrics.fid)

    @property
    def final(self):
        return self.checkpoints[-1]


class _BatchStream:
    """Endless shuffled minibatches; reshuffles after each full pass, drops the tail."""

    def __init__(self, n, batch_size, rng):
        if n < batch_size:
            raise ValueError(f"dataset of {n} samples is smaller than batch size {batch_size}")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.batch_size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def model_arrays(gen: Generator, disc: Discriminator):
    arrays = {"gen.embed": gen.embed, **_net_arrays(gen.body, "gen.body.")}
    arrays.update(_net_arrays(disc.phi, "disc.phi."))
    arrays.update(_net_arrays(disc.psi, "disc.psi."))
    arrays["disc.head"] = np.array(disc.head)
    for i, V in enumerate(disc.embeds):
        arrays[f"disc.embed{i}"] = V
    return arrays


def save_checkpoint(path, gen, disc):
    save_arrays(path, model_arrays(gen, disc))


def load_checkpoint(path):
    from .nn import _net_from_arrays, load_arrays

    a = load_arrays(path)
    gen = Generator(a["gen.embed"].copy(), _net_from_arrays(a, "gen.body."))
    embeds = []
    while f"disc.embed{len(embeds)}" in a:
        embeds.append(a[f"disc.embed{len(embeds)}"].copy())
    disc = Discriminator(_net_from_arrays(a, "disc.phi."), _net_from_arrays(a, "disc.psi."), str(a["disc.head"]), embeds)
    return gen, disc


def train(config: TrainerConfig, train_set: Dataset, heldout: Dataset | None = None,
          rank_table: RankTable | None = None, classifier: DeskClassifier | None = None,
          out_dir=None) -> TrainResult:
    """Run ``epochs`` epochs of ``iters_per_epoch`` iterations each.

    ``train_set`` supplies minibatches (SFL+ rank-table indices refer to its
    rows). ``heldout`` supplies the real samples for metrics; when absent the
    train split is used. Metrics are taken at epoch 0, every ``eval_every``
    epochs and at the last epoch.
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if config.method == "sfl_plus":
        if rank_table is None:
            raise ValueError("sfl_plus needs a rank table")
        if len(rank_table.percentile) != len(train_set):
            raise ValueError("rank table does not cover the training set")
    heldout = train_set if heldout is None else heldout
    init_ss, data_ss, latent_ss, eval_ss = np.random.SeedSequence(config.seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    data_rng = np.random.default_rng(data_ss)
    latent_rng = np.random.default_rng(latent_ss)
    eval_rng = np.random.default_rng(eval_ss)

    C = train_set.n_classes
    B = config.batch_size
    gen = Generator.init(C, init_rng, latent_dim=config.latent_dim)
    disc = Discriminator.init(C, init_rng, head=config.head)
    opt_d = AdamState.for_model(disc, config.lr_d, beta1=0.0, beta2=0.999)
    opt_g = AdamState.for_model(gen, config.lr_g, beta1=0.0, beta2=0.999)
    stream = _BatchStream(len(train_set), B, data_rng)
    iters = config.iters_per_epoch or max(1, len(train_set) // (B * config.d_steps))
    schedule = config.schedule

    # fixed evaluation inputs, drawn once so checkpoints are comparable
    n_eval = min(config.n_eval, len(heldout))
    eval_real_idx = np.sort(eval_rng.choice(len(heldout), n_eval, replace=False)) if n_eval < len(heldout) else np.arange(len(heldout))
    eval_real = LabeledBatch(heldout.x[eval_real_idx], heldout.labels[eval_real_idx])
    eval_z = eval_rng.standard_normal((n_eval, config.latent_dim))
    diag_rng = np.random.default_rng(eval_rng.integers(2**63))

    out_dir = Path(out_dir) if out_dir is not None else None
    checkpoints, diagnostics, epoch_seconds = [], [], []

    def checkpoint(epoch):
        fake = generate(gen, eval_z, eval_real.y)
        probs = classifier.probabilities(fake.x) if classifier is not None else None
        report = evaluate(eval_real.x, fake.x, k=config.k, fake_probs=probs, fake_labels=fake.y)
        focus = top_fraction_diagnostics(disc, eval_real, fake, 0.5)
        checkpoints.append(Checkpoint(epoch, report, focus, fake.x, fake.y))
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:04d}.npz", gen, disc)
        log.debug("epoch %d: fid=%.4f recall=%.3f", epoch, report.fid, report.recall)

    def abort(exc, epoch, it):
        dump = {"epoch": epoch, "iteration": it, "error": str(exc), "config": asdict(config)}
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "abort.json").write_text(json.dumps(dump, indent=2))
        raise TrainingAborted(f"run aborted at epoch {epoch}, iteration {it}: {exc}", dump) from exc

    checkpoint(0)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        focus = schedule.rate(epoch)
        loss_d = loss_g = 0.0
        for it in range(iters):
            try:
                for _ in range(config.d_steps):
                    idx = stream.next()
                    real = LabeledBatch(train_set.x[idx], train_set.labels[idx])
                    z = latent_rng.standard_normal((B, config.latent_dim))
                    y = latent_rng.integers(0, C, size=B)
                    fake = generate(gen, z, y)
                    real_split = None
                    if config.method == "sfl_plus":
                        real_split = sfl_plus_real_mask(rank_table, idx, focus)
                    _, rep = discriminator_step(disc, opt_d, real, fake, focus, config.method,
                                                config.loss, real_split)
                    loss_d += rep.loss / config.d_steps
                z = latent_rng.standard_normal((B, config.latent_dim))
                y = latent_rng.integers(0, C, size=B)
                _, rep = generator_step(gen, disc, opt_g, z, y, focus, config.method, config.loss,
                                        config.topk_fraction)
                loss_g += rep.loss
            except (NumericError, FloatingPointError) as exc:
                abort(exc, epoch, it)
        epoch_seconds.append(time.perf_counter() - started)
        diagnostics.append(_epoch_diagnostics(
            epoch, focus, loss_d / iters, loss_g / iters, gen, disc, train_set, rank_table, config, diag_rng))
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            checkpoint(epoch)
    if out_dir is not None:
        write_diagnostics_csv(out_dir / "diagnostics.csv", diagnostics)
    return TrainResult(config, gen, disc, diagnostics, checkpoints, epoch_seconds)


def _epoch_diagnostics(epoch, focus, loss_d, loss_g, gen, disc, train_set, rank_table, config, rng):
    B = config.batch_size
    idx = rng.choice(len(train_set), B, replace=False)
    real = LabeledBatch(train_set.x[idx], train_set.labels[idx])
    fake = generate(gen, rng.standard_normal((B, config.latent_dim)), rng.integers(0, train_set.n_classes, size=B))
    out_r, out_f = discriminate(disc, real), discriminate(disc, fake)
    if config.method == "sfl_plus":
        split_r = sfl_plus_real_mask(rank_table, idx, focus)
    else:
        split_r = top_k_split(out_r.d_conditional, focus_count(B, focus))
    split_f = top_k_split(out_f.d_conditional, focus_count(B, focus))
    return EpochDiagnostics(epoch, focus, loss_d, loss_g, **focus_diagnostics(out_r, out_f, split_r, split_f))
