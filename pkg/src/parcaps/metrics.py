"""Evaluation metrics: weighted/overall accuracy, per-class precision and
sensitivity, and the eight-orientation agreement score.

Agreement measures rotational robustness: an image counts as agreeing when
the model predicts the same label under all eight symmetries of the square
(four right-angle rotations, each with and without a horizontal flip),
regardless of correctness.
"""

from __future__ import annotations

import csv

import numpy as np


class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predictions."""

    def __init__(self, class_names):
        self.class_names = list(class_names)
        k = len(self.class_names)
        self.counts = np.zeros((k, k), dtype=np.int64)

    @property
    def k(self):
        return len(self.class_names)

    @property
    def total(self):
        return int(self.counts.sum())

    def update(self, truth, predicted):
        truth = np.asarray(truth, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        np.add.at(self.counts, (truth, predicted), 1)

    @classmethod
    def from_predictions(cls, class_names, truth, predicted):
        cm = cls(class_names)
        cm.update(truth, predicted)
        return cm


def one_vs_rest(cm: ConfusionMatrix):
    """Per-class (TP, TN, FP, FN) arrays."""
    c = cm.counts
    tp = np.diag(c).astype(np.int64)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    tn = cm.total - tp - fn - fp
    return tp, tn, fp, fn


def accuracies(cm: ConfusionMatrix):
    """(WAcc, Acc, macro-sensitivity), all percentages.

    Acc is overall categorical accuracy, trace/total. WAcc averages the
    per-class one-vs-rest accuracies (TP+TN)/total over classes. Because
    one-vs-rest accuracy is inflated for rare classes, the macro-averaged
    sensitivity (mean per-class recall) is always reported alongside.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp, tn, fp, fn = one_vs_rest(cm)
    acc = 100.0 * np.trace(cm.counts) / cm.total
    per_class_acc = (tp + tn) / (tp + tn + fp + fn)
    wacc = 100.0 * float(per_class_acc.mean())
    support = tp + fn
    recall = np.divide(tp, support, out=np.full(cm.k, np.nan), where=support > 0)
    macro_sen = 100.0 * float(np.nanmean(recall))
    return wacc, acc, macro_sen


def precision_sensitivity(cm: ConfusionMatrix):
    """Per-class PRE = TP/(TP+FP) and SEN = TP/(TP+FN).

    A class never predicted has undefined precision (NaN), excluded from
    the unweighted means; likewise a class with no true samples for
    sensitivity. Returns (pre[K], sen[K], mean_pre, mean_sen).
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp, _, fp, fn = one_vs_rest(cm)
    pre = np.divide(tp, tp + fp, out=np.full(cm.k, np.nan), where=(tp + fp) > 0)
    sen = np.divide(tp, tp + fn, out=np.full(cm.k, np.nan), where=(tp + fn) > 0)
    mean_pre = float(np.nanmean(pre)) if not np.all(np.isnan(pre)) else float("nan")
    mean_sen = float(np.nanmean(sen)) if not np.all(np.isnan(sen)) else float("nan")
    return pre, sen, mean_pre, mean_sen


# -- orientation agreement ---------------------------------------------------

# (quarter-turns, horizontal flip) in fixed evaluation order
DIHEDRAL_ELEMENTS = tuple((rot, flip) for rot in range(4) for flip in (False, True))


def dihedral_transform(images, rot, flip):
    """Apply one square symmetry to a [..., H, W] batch."""
    out = np.rot90(images, k=rot, axes=(-2, -1))
    if flip:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def agreement(predict_fn, dataset, batch_size=64):
    """(Agr percent, orientation table [N, 8]).

    predict_fn maps an image batch [n, C, H, W] to predicted labels [n].
    Images must be square.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty evaluation set")
    probe = dataset.image(0)
    if probe.shape[-1] != probe.shape[-2]:
        raise ValueError(f"agreement needs square images, got {probe.shape}")
    table = np.zeros((n, len(DIHEDRAL_ELEMENTS)), dtype=np.int64)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        batch = np.stack([dataset.image(i) for i in idx])
        for oi, (rot, flip) in enumerate(DIHEDRAL_ELEMENTS):
            preds = predict_fn(dihedral_transform(batch, rot, flip))
            table[start:start + len(batch), oi] = preds
    agree = np.all(table == table[:, :1], axis=1)
    return 100.0 * float(agree.mean()), table


# -- delimited output ---------------------------------------------------------


def write_confusion_csv(path, cm: ConfusionMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + cm.class_names)
        for name, row in zip(cm.class_names, cm.counts):
            w.writerow([name] + [int(v) for v in row])


def write_per_class_csv(path, cm: ConfusionMatrix):
    pre, sen, mean_pre, mean_sen = precision_sensitivity(cm)
    support = cm.counts.sum(axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "images", "precision", "sensitivity"])
        for i, name in enumerate(cm.class_names):
            w.writerow([name, int(support[i]), _fmt(pre[i]), _fmt(sen[i])])
        w.writerow(["total", cm.total, _fmt(mean_pre), _fmt(mean_sen)])


def write_summary_csv(path, wacc, acc, agr, macro_sen):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["WAcc", "Acc", "Agr", "MacroSEN"])
        w.writerow([f"{wacc:.2f}", f"{acc:.2f}",
                    "" if agr is None else f"{agr:.2f}", f"{macro_sen:.2f}"])


def _fmt(v):
    return "" if np.isnan(v) else f"{v:.4f}"
