"""Datasets: class-per-folder image trees, a synthetic glyph generator for
desk-scale experiments, and fold / small-data splitting.

The synthetic set exercises part-whole reasoning: most classes share their
part inventory with another class and differ only in how the parts relate
(containment, adjacency), so single-part detectors cannot separate them.
Relations are invariant to flips and rotations, which keeps the labels
stable under the training augmentation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import RngPool

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetError(Exception):
    pass


@dataclass
class DatasetManifest:
    class_names: list
    counts: list
    image_size: tuple
    source: str

    @property
    def total(self):
        return int(sum(self.counts))

    def to_text(self):
        return json.dumps({
            "source": self.source,
            "image_size": list(self.image_size),
            "classes": [{"name": n, "count": int(c)}
                        for n, c in zip(self.class_names, self.counts)],
        }, indent=2) + "\n"

    @classmethod
    def from_text(cls, text):
        raw = json.loads(text)
        return cls(class_names=[c["name"] for c in raw["classes"]],
                   counts=[c["count"] for c in raw["classes"]],
                   image_size=tuple(raw["image_size"]),
                   source=raw["source"])


class ArrayDataset:
    """In-memory dataset: images [N, C, H, W] float32 in [0, 1]."""

    def __init__(self, images, labels, manifest):
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.manifest = manifest

    def __len__(self):
        return len(self.labels)

    def image(self, i):
        return self.images[i]


class FolderDataset:
    """Lazy-decoding dataset over a class-per-subdirectory image tree."""

    def __init__(self, paths, labels, manifest):
        self.paths = paths
        self.labels = np.asarray(labels, dtype=np.int64)
        self.manifest = manifest

    def __len__(self):
        return len(self.labels)

    def image(self, i):
        arr = decode_image(self.paths[i])
        return fit_image(arr, self.manifest.image_size)


class SubsetDataset:
    """A view over another dataset restricted to `indices`."""

    def __init__(self, base, indices):
        self.base = base
        self.indices = np.asarray(indices, dtype=np.int64)
        self.labels = base.labels[self.indices]
        self.manifest = base.manifest

    def __len__(self):
        return len(self.indices)

    def image(self, i):
        return self.base.image(int(self.indices[i]))


def decode_image(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def fit_image(arr, size):
    """Center-crop/pad [C, H, W] to `size` (h, w)."""
    th, tw = size
    c, h, w = arr.shape
    if (h, w) == (th, tw):
        return arr
    out = np.zeros((c, th, tw), dtype=arr.dtype)
    src_r = max(0, (h - th) // 2)
    src_c = max(0, (w - tw) // 2)
    dst_r = max(0, (th - h) // 2)
    dst_c = max(0, (tw - w) // 2)
    rows = min(h, th)
    cols = min(w, tw)
    out[:, dst_r:dst_r + rows, dst_c:dst_c + cols] = \
        arr[:, src_r:src_r + rows, src_c:src_c + cols]
    return out


def load_folder(root, image_size=None):
    """Ingest a class-per-subdirectory tree in deterministic lexicographic
    order.

    Images whose size differs from the target are center-cropped/padded on
    access; without an explicit `image_size` all files must agree.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class directories")

    paths, labels, counts = [], [], []
    sizes = set()
    for ci, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DatasetError(f"class directory {cdir} contains no images")
        for p in files:
            try:
                with Image.open(p) as img:
                    sizes.add((img.height, img.width))
            except Exception as e:
                raise DatasetError(f"unreadable image {p}: {e}") from e
        paths.extend(files)
        labels.extend([ci] * len(files))
        counts.append(len(files))

    if image_size is None:
        if len(sizes) > 1:
            raise DatasetError(f"inconsistent image sizes {sorted(sizes)}; "
                               "set an explicit image size to crop/pad")
        image_size = next(iter(sizes))
    elif len(sizes) > 1 or (len(sizes) == 1 and next(iter(sizes)) != tuple(image_size)):
        print(f"note: {root} holds sizes {sorted(sizes)}; center-crop/pad to {image_size}")
    manifest = DatasetManifest([d.name for d in class_dirs], counts,
                               tuple(image_size), "folder")
    return FolderDataset(paths, labels, manifest)


# -- synthetic glyphs -----------------------------------------------------------

SYNTH_CLASS_NAMES = [
    "disc_in_ring", "disc_by_ring", "discs_touching",
    "discs_apart", "cross_bar", "cross_ring",
]


def _disc(canvas, cy, cx, r, value):
    h, w = canvas.shape
    yy, xx = np.ogrid[:h, :w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    np.maximum(canvas, value * mask, out=canvas)


def _ring(canvas, cy, cx, half, thickness, value):
    h, w = canvas.shape
    yy, xx = np.ogrid[:h, :w]
    d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
    mask = (d <= half) & (d >= half - thickness)
    np.maximum(canvas, value * mask, out=canvas)


def _bar(canvas, cy, cx, length, thickness, vertical, value):
    h, w = canvas.shape
    yy, xx = np.ogrid[:h, :w]
    if vertical:
        mask = (np.abs(yy - cy) <= length) & (np.abs(xx - cx) <= thickness)
    else:
        mask = (np.abs(yy - cy) <= thickness) & (np.abs(xx - cx) <= length)
    np.maximum(canvas, value * mask, out=canvas)


def _cross(canvas, cy, cx, arm, thickness, value):
    _bar(canvas, cy, cx, arm, thickness, True, value)
    _bar(canvas, cy, cx, arm, thickness, False, value)


def _place(rng, size, radius):
    """A point inside the centered disc of the given radius (content there
    survives any rotation of the square)."""
    while True:
        p = rng.uniform(-radius, radius, 2)
        if p @ p <= radius * radius:
            return size / 2 + p[0], size / 2 + p[1]


def synth_generate(classes=6, per_class=250, size=48, seed=0, clutter=14):
    """Deterministic in-memory glyph dataset.

    Classes 0/1 share parts {ring, disc} and differ by containment; classes
    2/3 share parts {disc, disc} and differ by adjacency; classes 4/5 are
    presence combinations. Red-tinted clutter dots play the role of
    background noise.
    """
    if size < 32:
        raise DatasetError("synthetic images need size >= 32")
    if classes < 1 or classes > len(SYNTH_CLASS_NAMES):
        raise DatasetError(f"classes must be 1..{len(SYNTH_CLASS_NAMES)}")
    rng = RngPool(seed).stream("synth")
    u = size / 48.0
    n = classes * per_class
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)

    idx = 0
    for cls in range(classes):
        for _ in range(per_class):
            images[idx] = _synth_image(rng, cls, size, u, clutter)
            labels[idx] = cls
            idx += 1
    manifest = DatasetManifest(SYNTH_CLASS_NAMES[:classes], [per_class] * classes,
                               (size, size), "synthetic")
    return ArrayDataset(images, labels, manifest)


def _synth_image(rng, cls, size, u, clutter):
    img = np.zeros((3, size, size), dtype=np.float32)
    # background clutter: dim red-ish dots
    n_dots = rng.integers(clutter // 2, clutter + 1)
    for _ in range(n_dots):
        cy, cx = rng.uniform(2, size - 2, 2)
        r = rng.uniform(1.0, 2.2) * u
        val = rng.uniform(0.25, 0.45)
        _disc(img[0], cy, cx, r, val)
        _disc(img[1], cy, cx, r, val * 0.35)
        _disc(img[2], cy, cx, r, val * 0.35)

    place_r = size / 2 - 10 * u
    bright = lambda: rng.uniform(0.75, 1.0)
    mono = np.zeros((size, size), dtype=np.float32)

    if cls in (0, 1):
        half = rng.uniform(6.5, 8.0) * u
        ry, rx = _place(rng, size, place_r - half + 6 * u)
        _ring(mono, ry, rx, half, 1.6 * u, bright())
        r = rng.uniform(2.2, 3.2) * u
        if cls == 0:
            off = rng.uniform(-1.5, 1.5, 2) * u
            _disc(mono, ry + off[0], rx + off[1], r, bright())
        else:
            ang = rng.uniform(0, 2 * np.pi)
            dist = half + 2.5 * u + r
            dy, dx = ry + dist * np.sin(ang), rx + dist * np.cos(ang)
            dy = np.clip(dy, 3 * u, size - 3 * u)
            dx = np.clip(dx, 3 * u, size - 3 * u)
            _disc(mono, dy, dx, r, bright())
    elif cls in (2, 3):
        r1 = rng.uniform(3.2, 4.2) * u
        r2 = rng.uniform(3.2, 4.2) * u
        cy, cx = _place(rng, size, place_r - 6 * u)
        ang = rng.uniform(0, 2 * np.pi)
        dist = (r1 + r2) * 1.02 if cls == 2 else r1 + r2 + rng.uniform(7, 10) * u
        dy = cy + dist * np.sin(ang)
        dx = cx + dist * np.cos(ang)
        _disc(mono, cy, cx, r1, bright())
        _disc(mono, dy, dx, r2, bright())
    elif cls == 4:
        cy, cx = _place(rng, size, place_r)
        _cross(mono, cy, cx, rng.uniform(5, 6.5) * u, 1.4 * u, bright())
        by, bx = _place(rng, size, place_r)
        _bar(mono, by, bx, rng.uniform(5, 7) * u, 1.4 * u, rng.random() < 0.5, bright())
    else:
        cy, cx = _place(rng, size, place_r)
        _cross(mono, cy, cx, rng.uniform(5, 6.5) * u, 1.4 * u, bright())
        ry, rx = _place(rng, size, place_r)
        _ring(mono, ry, rx, rng.uniform(5.5, 7.0) * u, 1.6 * u, bright())

    # leukocyte-like tint: strong blue/green, weaker red
    tint = rng.uniform(0.85, 1.0, 3) * np.array([0.55, 0.8, 1.0])
    for ch in range(3):
        np.maximum(img[ch], mono * tint[ch], out=img[ch])
    return np.clip(img, 0.0, 1.0)


# -- splitting -------------------------------------------------------------------


@dataclass
class SplitSpec:
    mode: str = "kfold"        # kfold | small_data
    folds: int = 5
    val_fold: int = 0
    x_cap: int = 0             # small_data: per-class cap
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("kfold", "small_data"):
            raise DatasetError(f"unknown split mode {self.mode!r}")
        if self.folds < 2:
            raise DatasetError("folds must be >= 2")
        if not (0 <= self.val_fold < self.folds):
            raise DatasetError(f"val_fold {self.val_fold} outside 0..{self.folds - 1}")
        if self.mode == "small_data" and self.x_cap < 1:
            raise DatasetError("small_data mode needs a positive x_cap")


def split(labels, spec: SplitSpec):
    """Per-class stratified split -> (train indices, eval indices).

    kfold: each class is shuffled and dealt round-robin over the folds; the
    eval side is the val fold. A class with fewer samples than folds starts
    dealing at the val fold so at least one sample lands in eval.

    small_data: each class is capped at x samples which form the folds as
    above; everything beyond the cap joins the eval side.
    """
    labels = np.asarray(labels)
    pool = RngPool(spec.seed)
    train, evals = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        order = pool.stream(f"split/class{cls}").permutation(len(idx))
        shuffled = idx[order]
        if spec.mode == "small_data":
            capped = shuffled[:spec.x_cap]
            evals.append(shuffled[spec.x_cap:])
        else:
            capped = shuffled
        start = spec.val_fold if len(capped) < spec.folds else 0
        fold_of = (start + np.arange(len(capped))) % spec.folds
        evals.append(capped[fold_of == spec.val_fold])
        train.append(capped[fold_of != spec.val_fold])
    train_idx = np.sort(np.concatenate(train)) if train else np.empty(0, np.int64)
    eval_idx = np.sort(np.concatenate(evals)) if evals else np.empty(0, np.int64)
    return train_idx, eval_idx
