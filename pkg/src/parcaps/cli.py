"""Operator surface: train / eval / predict / paramcount / synth-data.

All run artifacts (resolved config echo, metric CSVs, checkpoints, figures)
land in the run's output directory; a lock file keeps concurrent runs from
sharing one directory. Exit codes: 0 success, 2 configuration problem,
3 diverged run, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfg_mod
from . import metrics as met
from . import report
from .checkpoint import ChecksumError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import (DatasetError, SubsetDataset, load_folder, split, synth_generate)
from .network import build_network, count_parameters, network_forward
from .rng import RngPool
from .training import TrainingDiverged, evaluate, train


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def build_parser():
    parser = argparse.ArgumentParser(
        prog="parcaps",
        description="Train and evaluate (parallel) capsule networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training protocol from a config")
    p_train.add_argument("--config", required=True,
                         help="config file path or preset:<name>")
    _common_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", default=None,
                        help="class-per-folder dataset root (defaults to the "
                             "checkpoint's configured data)")
    _common_flags(p_eval)

    p_pred = sub.add_parser("predict", help="classify images with a checkpoint")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--data", required=True, help="class-per-folder dataset root")
    _common_flags(p_pred)

    p_count = sub.add_parser("paramcount", help="print the parameter breakdown")
    p_count.add_argument("--config", required=True)

    p_synth = sub.add_parser("synth-data", help="write the synthetic glyph set as PNGs")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=6)
    p_synth.add_argument("--per-class", type=int, default=250)
    p_synth.add_argument("--size", type=int, default=48)
    p_synth.add_argument("--seed", type=int, default=0)

    p_list = sub.add_parser("presets", help="list shipped preset configs")
    return parser


def _common_flags(p):
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--seed", type=int, default=None, help="run seed override")
    p.add_argument("--deterministic", choices=("on", "off"), default=None)


def apply_overrides(run: RunConfig, args) -> RunConfig:
    if getattr(args, "out", None):
        run.out_dir = args.out
        run.flat["run.out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
        run.split.seed = args.seed
        run.flat["run.seed"] = str(args.seed)
    if getattr(args, "deterministic", None):
        run.deterministic = args.deterministic == "on"
        run.flat["run.deterministic"] = "true" if run.deterministic else "false"
    return run


def load_datasets(run: RunConfig):
    size = run.architecture.input_size
    if run.data_source == "synthetic":
        full = synth_generate(classes=run.synthetic_classes,
                              per_class=run.synthetic_per_class,
                              size=size, seed=run.seed,
                              clutter=run.synthetic_clutter)
    else:
        root = Path(run.data_folder)
        if not root.is_dir():
            raise CliError(f"data.folder {root} does not exist", code=2)
        full = load_folder(root, image_size=(size, size))
    if len(full.manifest.class_names) != run.architecture.class_count:
        raise CliError(
            f"dataset has {len(full.manifest.class_names)} classes but the "
            f"architecture expects {run.architecture.class_count}", code=2)
    train_idx, eval_idx = split(full.labels, run.split)
    return full, SubsetDataset(full, train_idx), SubsetDataset(full, eval_idx)


class RunLock:
    """Exclusive lock file so concurrent runs cannot share an out dir."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / "run.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"output directory is locked by {self.path}; "
                           "another run may be active (delete the file if stale)")
        with os.fdopen(fd, "w") as fh:
            fh.write(f"pid {os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def cmd_train(args):
    run = apply_overrides(cfg_mod.load_config(args.config), args)
    out_dir = Path(run.out_dir)
    full, train_ds, eval_ds = load_datasets(run)
    net = build_network(run.architecture, run.seed)
    total, _ = count_parameters(net)
    print(f"built {run.architecture.family} net: {total:,} parameters, "
          f"{len(train_ds)} train / {len(eval_ds)} eval samples")
    with RunLock(out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved.cfg").write_text(cfg_mod.render(run.flat))
        (out_dir / "dataset.manifest.json").write_text(full.manifest.to_text())
        try:
            train(net, train_ds, eval_ds, run.training, out_dir, RngPool(run.seed),
                  config_echo=run.flat, deterministic=run.deterministic)
        except TrainingDiverged as err:
            print(f"diverged: {err}", file=sys.stderr)
            report_path = out_dir / "training_curves.png"
            if (out_dir / "metrics.csv").exists():
                report.plot_training_curves(out_dir / "metrics.csv", report_path)
            return 3
        report.plot_training_curves(out_dir / "metrics.csv",
                                    out_dir / "training_curves.png")
        ev = evaluate(net, eval_ds, run.training.eval_batch,
                      compute_agreement=run.training.eval_agreement,
                      deterministic=run.deterministic)
        _write_eval_outputs(out_dir, ev)
    print(f"done; artifacts in {out_dir}")
    return 0


def _write_eval_outputs(out_dir, ev):
    out_dir = Path(out_dir)
    met.write_summary_csv(out_dir / "summary.csv", ev.wacc, ev.acc, ev.agr, ev.macro_sen)
    met.write_per_class_csv(out_dir / "per_class.csv", ev.cm)
    met.write_confusion_csv(out_dir / "confusion.csv", ev.cm)
    report.plot_confusion_matrix(ev.cm, out_dir / "confusion.png")
    report.plot_per_class_metrics(ev.cm, out_dir / "per_class.png")
    agr = "n/a" if ev.agr is None else f"{ev.agr:.2f}"
    print(f"WAcc {ev.wacc:.2f}  Acc {ev.acc:.2f}  Agr {agr}  MacroSEN {ev.macro_sen:.2f}")


def _network_from_checkpoint(path):
    try:
        params, buffers, echo, merge_order = load_checkpoint(path)
    except ChecksumError as e:
        raise CliError(str(e))
    if not echo:
        raise CliError(f"checkpoint {path} carries no config echo")
    run = cfg_mod.resolve({k: (v, 0) for k, v in echo.items()}, origin=str(path))
    net = build_network(run.architecture, run.seed)
    if set(params) != set(net.params):
        raise CliError("checkpoint does not match the architecture it declares "
                       f"(parameter names differ, e.g. "
                       f"{sorted(set(params) ^ set(net.params))[:3]})", code=2)
    for name, arr in params.items():
        if tuple(arr.shape) != tuple(net.params[name].shape):
            raise CliError(f"checkpoint tensor {name} has shape {arr.shape}, "
                           f"architecture expects {net.params[name].shape}", code=2)
        net.params[name].data[...] = arr
    net.buffers.update(buffers)
    net.merge_order = merge_order or net.merge_order
    return net, run


def cmd_eval(args):
    net, run = _network_from_checkpoint(args.checkpoint)
    run = apply_overrides(run, args)
    if args.data:
        run.data_source = "folder"
        run.data_folder = args.data
    _, _, eval_ds = load_datasets(run)
    out_dir = Path(args.out or (Path(run.out_dir) / "eval"))
    out_dir.mkdir(parents=True, exist_ok=True)
    ev = evaluate(net, eval_ds, run.training.eval_batch,
                  compute_agreement=run.training.eval_agreement,
                  deterministic=run.deterministic)
    _write_eval_outputs(out_dir, ev)
    print(f"evaluation artifacts in {out_dir}")
    return 0


def cmd_predict(args):
    net, run = _network_from_checkpoint(args.checkpoint)
    run = apply_overrides(run, args)
    size = run.architecture.input_size
    ds = load_folder(args.data, image_size=(size, size))
    class_names = ds.manifest.class_names
    out_dir = Path(args.out or (Path(run.out_dir) / "predict"))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "predictions.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "true_class", "predicted_class"]
                   + [f"score_{c}" for c in class_names])
        batch = 64
        for start in range(0, len(ds), batch):
            idx = list(range(start, min(start + batch, len(ds))))
            images = np.stack([ds.image(i) for i in idx])
            scores = network_forward(net, images).data
            preds = np.argmax(scores, axis=1)
            for j, i in enumerate(idx):
                w.writerow([str(ds.paths[i]), class_names[ds.labels[i]],
                            class_names[preds[j]]]
                           + [f"{v:.5f}" for v in scores[j]])
    print(f"wrote {out_path}")
    return 0


def cmd_paramcount(args):
    run = cfg_mod.load_config(args.config)
    net = build_network(run.architecture, run.seed)
    total, breakdown = count_parameters(net)
    width = max(len(k) for k in breakdown)
    print(f"{'section':<{width}}  parameters")
    for key in sorted(breakdown):
        print(f"{key:<{width}}  {breakdown[key]:>12,}")
    print(f"{'total':<{width}}  {total:>12,}")
    return 0


def cmd_synth_data(args):
    ds = synth_generate(classes=args.classes, per_class=args.per_class,
                        size=args.size, seed=args.seed)
    out = Path(args.out)
    for ci, cname in enumerate(ds.manifest.class_names):
        (out / cname).mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(max(args.per_class, 1))))
    counters = [0] * len(ds.manifest.class_names)
    for i in range(len(ds)):
        ci = int(ds.labels[i])
        img = (ds.images[i].transpose(1, 2, 0) * 255).round().astype(np.uint8)
        name = ds.manifest.class_names[ci]
        Image.fromarray(img).save(out / name / f"{name}_{counters[ci]:0{digits}d}.png")
        counters[ci] += 1
    print(f"wrote {len(ds)} images under {out}")
    return 0


def cmd_presets(args):
    for name in cfg_mod.list_presets():
        print(name)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
        "paramcount": cmd_paramcount,
        "synth-data": cmd_synth_data,
        "presets": cmd_presets,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CliError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return getattr(e, "code", 1)


if __name__ == "__main__":
    sys.exit(main())
