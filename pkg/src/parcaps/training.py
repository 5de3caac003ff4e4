"""The optimization loop: class-balanced batches, flip/rotate augmentation,
Nadam updates, per-epoch evaluation, checkpoints and an append-only metric
log.

An epoch is a fixed number of iterations (not a data pass); every batch
holds exactly one example of each class in shuffled order. A non-finite
loss or gradient halts the run with a diagnostic record on disk; several
large-capsule configurations are expected to diverge this way.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics as met
from .autodiff import NonFiniteError
from .checkpoint import save_checkpoint
from .network import network_forward, network_loss
from .optim import Nadam, NonFiniteGradient

LOSSES = ("margin", "spread", "cross_entropy")


class TrainingDiverged(RuntimeError):
    def __init__(self, record):
        self.record = record
        super().__init__(f"training diverged at epoch {record['epoch']} "
                         f"iteration {record['iteration']}: {record['error']}")


@dataclass
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    max_degrees: float = 180.0


@dataclass
class TrainConfig:
    epochs: int = 700
    iterations_per_epoch: int = 500
    loss: str = "margin"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    spread_margin_start: float = 0.2
    spread_margin_end: float = 0.9
    spread_ramp_fraction: float = 0.2
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 10
    eval_batch: int = 64
    eval_agreement: bool = True
    stop_at_eval_acc: float = 0.0   # 0 disables the early gate

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.iterations_per_epoch < 1:
            raise ValueError("iterations_per_epoch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0.2 <= self.spread_margin_start <= self.spread_margin_end <= 0.9):
            raise ValueError("spread margin schedule must satisfy "
                             "0.2 <= start <= end <= 0.9")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def spread_margin(self, epoch):
        """Linear anneal from start to end over the first ramp fraction of
        the run; clamped and nondecreasing."""
        ramp = max(1, math.ceil(self.spread_ramp_fraction * max(self.epochs, 1)))
        frac = min(1.0, epoch / ramp)
        return self.spread_margin_start + frac * (self.spread_margin_end
                                                  - self.spread_margin_start)


class BalancedSampler:
    """One sample per class per batch, shuffled within the batch.

    Within a class, samples are consumed from a reshuffled queue, so each
    pass visits every sample once before repeating any.
    """

    def __init__(self, labels, rng, num_classes=None):
        self.rng = rng
        labels = np.asarray(labels)
        if num_classes is None:
            self.classes = [int(c) for c in np.unique(labels)]
        else:
            self.classes = list(range(num_classes))
        self.pools = {c: np.flatnonzero(labels == c) for c in self.classes}
        for c, pool in self.pools.items():
            if len(pool) == 0:
                raise ValueError(f"class {c} has no samples")
        if not self.classes:
            raise ValueError("no classes to sample from")
        self.queues = {c: [] for c in self.classes}

    def next_batch(self):
        picks = []
        for c in self.classes:
            if not self.queues[c]:
                order = self.rng.permutation(len(self.pools[c]))
                self.queues[c] = list(self.pools[c][order])
            picks.append(self.queues[c].pop())
        order = self.rng.permutation(len(picks))
        return [picks[i] for i in order]


# -- augmentation -----------------------------------------------------------------


def rotate_bilinear(image, degrees):
    """Rotate a square [C, H, W] image counter-clockwise about its center,
    bilinear interpolation, zero fill outside the source."""
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"rotation needs a square image, got {h}x{w}")
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy = cx = (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(image.dtype)
    y0, x0 = yy - cy, xx - cx
    src_y = sin_t * x0 + cos_t * y0 + cy
    src_x = cos_t * x0 - sin_t * y0 + cx

    fy = np.floor(src_y)
    fx = np.floor(src_x)
    wy = src_y - fy
    wx = src_x - fx
    out = np.zeros_like(image)
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        iy = fy.astype(np.int64) + dy
        ix = fx.astype(np.int64) + dx
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        iyc = np.clip(iy, 0, h - 1)
        ixc = np.clip(ix, 0, w - 1)
        out += image[:, iyc, ixc] * (wgt * valid)
    return out


def augment(image, rng, cfg: AugmentConfig):
    """Independent coin-flip up-down / left-right flips, then a uniform
    rotation in [0, max_degrees]. Identity when all toggles are off."""
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"augmentation needs square images, got {h}x{w}")
    out = image
    if cfg.flip:
        if rng.random() < 0.5:
            out = out[:, ::-1, :]
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
    if cfg.rotate:
        out = rotate_bilinear(np.ascontiguousarray(out), rng.uniform(0.0, cfg.max_degrees))
    return np.ascontiguousarray(out)


def one_hot(labels, k):
    out = np.zeros((len(labels), k), dtype=np.float32)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return out


# -- evaluation ---------------------------------------------------------------------


@dataclass
class EvalResult:
    cm: met.ConfusionMatrix
    wacc: float
    acc: float
    macro_sen: float
    pre: np.ndarray
    sen: np.ndarray
    agr: float = None
    orientation_table: np.ndarray = None


def predict_labels(net, images, deterministic=True):
    scores = network_forward(net, images.astype(np.float32), training=False,
                             concurrent=not deterministic)
    return np.argmax(scores.data, axis=1)


def evaluate(net, dataset, batch_size=64, compute_agreement=True, deterministic=True):
    n = len(dataset)
    preds = np.zeros(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        batch = np.stack([dataset.image(i) for i in idx])
        preds[start:start + len(batch)] = predict_labels(net, batch, deterministic)
    cm = met.ConfusionMatrix.from_predictions(dataset.manifest.class_names,
                                              dataset.labels, preds)
    wacc, acc, macro_sen = met.accuracies(cm)
    pre, sen, _, _ = met.precision_sensitivity(cm)
    agr = table = None
    if compute_agreement:
        agr, table = met.agreement(lambda x: predict_labels(net, x, deterministic),
                                   dataset, batch_size)
    return EvalResult(cm, wacc, acc, macro_sen, pre, sen, agr, table)


# -- the loop -----------------------------------------------------------------------


@dataclass
class TrainResult:
    epoch_rows: list
    iteration_losses: list
    diverged: bool = False
    divergence_record: dict = None
    best_acc: float = 0.0
    final_checkpoint: Path = None
    best_checkpoint: Path = None


def metric_columns(class_names):
    return (["epoch", "iteration", "loss", "WAcc", "Acc", "Agr"]
            + [f"SEN_{c}" for c in class_names] + [f"PRE_{c}" for c in class_names])


def train(net, train_ds, eval_ds, cfg: TrainConfig, out_dir, pool,
          config_echo=None, deterministic=True, quiet=False):
    """Run the training protocol; returns a TrainResult. Raises
    TrainingDiverged after persisting a diagnostic record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    k = net.config.class_count
    class_names = train_ds.manifest.class_names
    if len(class_names) != k:
        raise ValueError(f"network expects {k} classes, dataset has {len(class_names)}")

    opt = Nadam(net.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    sampler = BalancedSampler(train_ds.labels, pool.stream("batch"), num_classes=k)
    aug_rng = pool.stream("augment")

    echo = config_echo or {}
    save_checkpoint(ckpt_dir / "initial.ckpt", net.params, net.buffers, echo,
                    net.merge_order)
    log_path = out_dir / "metrics.csv"
    with open(log_path, "w", newline="") as fh:
        csv.writer(fh).writerow(metric_columns(class_names))

    result = TrainResult(epoch_rows=[], iteration_losses=[])
    global_it = 0
    margin = None
    for epoch in range(cfg.epochs):
        if cfg.loss == "spread":
            margin = cfg.spread_margin(epoch)
        epoch_losses = []
        tic = time.time()
        for _ in range(cfg.iterations_per_epoch):
            idxs = sampler.next_batch()
            images = np.stack([augment(train_ds.image(i), aug_rng, cfg.augment)
                               for i in idxs])
            targets = one_hot(train_ds.labels[idxs], k)
            try:
                loss, _ = network_loss(net, images, targets, cfg.loss, training=True,
                                       margin=margin, concurrent=not deterministic)
                opt.zero_grad()
                loss.backward()
                opt.step()
            except (NonFiniteError, NonFiniteGradient) as err:
                record = {"epoch": epoch, "iteration": global_it, "error": str(err)}
                with open(out_dir / "divergence.json", "w") as fh:
                    json.dump(record, fh, indent=1)
                save_checkpoint(ckpt_dir / "diverged.ckpt", net.params, net.buffers,
                                echo, net.merge_order)
                result.diverged = True
                result.divergence_record = record
                raise TrainingDiverged(record) from err
            epoch_losses.append(loss.item())
            result.iteration_losses.append(loss.item())
            global_it += 1

        ev = evaluate(net, eval_ds, cfg.eval_batch, cfg.eval_agreement, deterministic)
        row = {"epoch": epoch, "iteration": global_it,
               "loss": float(np.mean(epoch_losses)), "WAcc": ev.wacc, "Acc": ev.acc,
               "Agr": ev.agr}
        result.epoch_rows.append(row)
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [epoch, global_it, f"{row['loss']:.6f}", f"{ev.wacc:.3f}", f"{ev.acc:.3f}",
                 "" if ev.agr is None else f"{ev.agr:.3f}"]
                + [f"{v:.4f}" if not np.isnan(v) else "" for v in ev.sen]
                + [f"{v:.4f}" if not np.isnan(v) else "" for v in ev.pre])
        if not quiet:
            print(f"epoch {epoch:4d}  loss {row['loss']:.4f}  WAcc {ev.wacc:6.2f}  "
                  f"Acc {ev.acc:6.2f}  [{time.time() - tic:5.1f}s]")

        if ev.acc > result.best_acc:
            result.best_acc = ev.acc
            result.best_checkpoint = save_checkpoint(
                ckpt_dir / "best.ckpt", net.params, net.buffers, echo, net.merge_order)
        if (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}.ckpt", net.params,
                            net.buffers, echo, net.merge_order)
        if cfg.stop_at_eval_acc and ev.acc >= cfg.stop_at_eval_acc:
            break

    result.final_checkpoint = save_checkpoint(ckpt_dir / "final.ckpt", net.params,
                                              net.buffers, echo, net.merge_order)
    return result
