"""Run configuration: flat, human-readable `key = value` lines with dotted
keys.

Unknown keys are hard errors (citing key and line) so a typo cannot
silently diverge from an intended setup. `render` emits every key with all
defaults materialized; re-parsing that echo reproduces the identical run.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .data import SplitSpec
from .layers import CnnBlockConfig, CnnStackConfig
from .network import ArchitectureConfig
from .training import AugmentConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "on", "yes", "1"):
        return True
    if low in ("false", "off", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_blocks(s):
    """Comma list of "in:bottleneck:cardinality:out:stride" block specs."""
    blocks = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        fields = part.split(":")
        if len(fields) != 5:
            raise ValueError(f"block spec {part!r} needs in:bottleneck:cardinality:out:stride")
        cin, btl, card, cout, stride = (int(v) for v in fields)
        blocks.append((cin, btl, card, cout, stride))
    return tuple(blocks)


def _render_blocks(blocks):
    return ", ".join(":".join(str(v) for v in b) for b in blocks)


def _render_floats(values):
    return ", ".join(f"{v:g}" for v in values)


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str.strip,
    "floats": _parse_floats,
    "blocks": _parse_blocks,
}

_RENDERERS = {
    "int": str,
    "float": lambda v: f"{v:g}",
    "bool": lambda v: "true" if v else "false",
    "str": str,
    "floats": _render_floats,
    "blocks": _render_blocks,
}

# (type, default); order here is the echo order
SCHEMA = {
    "run.seed": ("int", 0),
    "run.deterministic": ("bool", True),
    "run.out_dir": ("str", "runs/run"),
    "architecture.family": ("str", "dr"),
    "architecture.caps_layers": ("int", 3),
    "architecture.branches": ("int", 1),
    "architecture.input_size": ("int", 48),
    "architecture.input_channels": ("int", 3),
    "architecture.class_count": ("int", 6),
    "architecture.primary_caps": ("int", 2),
    "architecture.primary_dim": ("int", 16),
    "architecture.capsule_dim": ("int", 16),
    "architecture.mid_caps_per_branch": ("int", 1),
    "architecture.second_caps_per_branch": ("int", 4),
    "architecture.share_grid_weights": ("bool", False),
    "architecture.routing_iters": ("int", 3),
    "architecture.coordinate_addition": ("bool", False),
    "architecture.em.lambda_schedule": ("floats", (1.0, 2.0, 3.0)),
    "architecture.em.variance_floor": ("float", 1e-6),
    "architecture.em.mid_window": ("int", 3),
    "architecture.em.mid_stride": ("int", 2),
    "architecture.em.second_window": ("int", 3),
    "architecture.em.second_stride": ("int", 1),
    "architecture.cnn.shared_blocks": ("blocks", ((3, 16, 4, 32, 2),)),
    "architecture.cnn.branch_blocks": ("blocks", ((32, 32, 8, 64, 2),)),
    "architecture.cnn.normalization": ("bool", True),
    "training.loss": ("str", "margin"),
    "training.epochs": ("int", 700),
    "training.iterations_per_epoch": ("int", 500),
    "training.learning_rate": ("float", 0.001),
    "training.beta1": ("float", 0.9),
    "training.beta2": ("float", 0.999),
    "training.epsilon": ("float", 1e-8),
    "training.spread_margin_start": ("float", 0.2),
    "training.spread_margin_end": ("float", 0.9),
    "training.spread_ramp_fraction": ("float", 0.2),
    "training.augment_flip": ("bool", True),
    "training.augment_rotate": ("bool", True),
    "training.augment_max_degrees": ("float", 180.0),
    "training.checkpoint_every": ("int", 10),
    "training.eval_batch": ("int", 64),
    "training.eval_agreement": ("bool", True),
    "training.stop_at_eval_acc": ("float", 0.0),
    "data.source": ("str", "synthetic"),
    "data.folder": ("str", ""),
    "data.synthetic_classes": ("int", 6),
    "data.synthetic_per_class": ("int", 250),
    "data.synthetic_clutter": ("int", 14),
    "data.split_mode": ("str", "kfold"),
    "data.split_folds": ("int", 5),
    "data.split_val_fold": ("int", 0),
    "data.split_x_cap": ("int", 0),
}

LOSS_FAMILY = {"margin": "dr", "spread": "em", "cross_entropy": "cnn"}


@dataclass
class RunConfig:
    seed: int
    deterministic: bool
    out_dir: str
    architecture: ArchitectureConfig
    training: TrainConfig
    data_source: str
    data_folder: str
    synthetic_classes: int
    synthetic_per_class: int
    synthetic_clutter: int
    split: SplitSpec
    flat: dict  # the fully resolved echo, key -> rendered string


def parse_flat_text(text, origin="<config>"):
    """-> {key: (raw value, line number)}; comments start with '#'."""
    values = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{ln}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{origin}:{ln}: duplicate key {key!r}")
        values[key] = (raw.strip(), ln)
    return values


def resolve(values, origin="<config>"):
    """Typed resolution of raw key/value pairs into a RunConfig."""
    for key, (_, ln) in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{ln}: unknown key {key!r}")
    typed = {}
    for key, (kind, default) in SCHEMA.items():
        if key in values:
            raw, ln = values[key]
            try:
                typed[key] = _PARSERS[kind](raw)
            except ValueError as e:
                raise ConfigError(f"{origin}:{ln}: bad value for {key}: {e}") from e
        else:
            typed[key] = default

    arch = ArchitectureConfig(
        family=typed["architecture.family"],
        caps_layers=typed["architecture.caps_layers"],
        branches=typed["architecture.branches"],
        input_size=typed["architecture.input_size"],
        input_channels=typed["architecture.input_channels"],
        class_count=typed["architecture.class_count"],
        cnn=_stack_from(typed),
        primary_caps=typed["architecture.primary_caps"],
        primary_dim=typed["architecture.primary_dim"],
        capsule_dim=typed["architecture.capsule_dim"],
        mid_caps_per_branch=typed["architecture.mid_caps_per_branch"],
        second_caps_per_branch=typed["architecture.second_caps_per_branch"],
        share_grid_weights=typed["architecture.share_grid_weights"],
        routing_iters=typed["architecture.routing_iters"],
        em_lambda_schedule=typed["architecture.em.lambda_schedule"],
        em_variance_floor=typed["architecture.em.variance_floor"],
        em_mid_window=typed["architecture.em.mid_window"],
        em_mid_stride=typed["architecture.em.mid_stride"],
        em_second_window=typed["architecture.em.second_window"],
        em_second_stride=typed["architecture.em.second_stride"],
        coordinate_addition=typed["architecture.coordinate_addition"],
    )
    try:
        arch.validate()
    except ValueError as e:
        raise ConfigError(f"{origin}: {e}") from e

    loss = typed["training.loss"]
    if LOSS_FAMILY.get(loss) != arch.family:
        raise ConfigError(f"{origin}: loss {loss!r} is incompatible with family "
                          f"{arch.family!r} (margin<->dr, spread<->em, cross_entropy<->cnn)")
    try:
        train_cfg = TrainConfig(
            epochs=typed["training.epochs"],
            iterations_per_epoch=typed["training.iterations_per_epoch"],
            loss=loss,
            learning_rate=typed["training.learning_rate"],
            beta1=typed["training.beta1"],
            beta2=typed["training.beta2"],
            eps=typed["training.epsilon"],
            spread_margin_start=typed["training.spread_margin_start"],
            spread_margin_end=typed["training.spread_margin_end"],
            spread_ramp_fraction=typed["training.spread_ramp_fraction"],
            augment=AugmentConfig(
                flip=typed["training.augment_flip"],
                rotate=typed["training.augment_rotate"],
                max_degrees=typed["training.augment_max_degrees"]),
            checkpoint_every=typed["training.checkpoint_every"],
            eval_batch=typed["training.eval_batch"],
            eval_agreement=typed["training.eval_agreement"],
            stop_at_eval_acc=typed["training.stop_at_eval_acc"],
        )
    except ValueError as e:
        raise ConfigError(f"{origin}: {e}") from e

    if typed["data.source"] not in ("synthetic", "folder"):
        raise ConfigError(f"{origin}: data.source must be synthetic or folder")
    if typed["data.source"] == "folder" and not typed["data.folder"]:
        raise ConfigError(f"{origin}: data.source=folder requires data.folder")
    try:
        split_spec = SplitSpec(
            mode=typed["data.split_mode"],
            folds=typed["data.split_folds"],
            val_fold=typed["data.split_val_fold"],
            x_cap=typed["data.split_x_cap"],
            seed=typed["run.seed"],
        )
    except Exception as e:
        raise ConfigError(f"{origin}: {e}") from e

    flat = {key: _RENDERERS[SCHEMA[key][0]](typed[key]) for key in SCHEMA}
    return RunConfig(
        seed=typed["run.seed"],
        deterministic=typed["run.deterministic"],
        out_dir=typed["run.out_dir"],
        architecture=arch,
        training=train_cfg,
        data_source=typed["data.source"],
        data_folder=typed["data.folder"],
        synthetic_classes=typed["data.synthetic_classes"],
        synthetic_per_class=typed["data.synthetic_per_class"],
        synthetic_clutter=typed["data.synthetic_clutter"],
        split=split_spec,
        flat=flat,
    )


def _stack_from(typed):
    def mk(blocks):
        return [CnnBlockConfig(cin, btl, card, cout, stride,
                               use_normalization=typed["architecture.cnn.normalization"])
                for cin, btl, card, cout, stride in blocks]
    try:
        return CnnStackConfig(mk(typed["architecture.cnn.shared_blocks"]),
                              mk(typed["architecture.cnn.branch_blocks"]))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path_or_preset):
    """Load from a file path or 'preset:<name>'."""
    name = str(path_or_preset)
    if name.startswith("preset:"):
        text = read_preset(name[len("preset:"):])
        origin = name
    else:
        path = Path(name)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        origin = str(path)
    return resolve(parse_flat_text(text, origin), origin)


def render(flat):
    """Emit a resolved flat dict back as config text (echo)."""
    lines = ["# resolved run configuration"]
    section = None
    for key in SCHEMA:
        top = key.split(".", 1)[0]
        if top != section:
            lines.append("")
            section = top
        lines.append(f"{key} = {flat[key]}")
    return "\n".join(lines) + "\n"


def list_presets():
    pkg = resources.files("parcaps") / "presets"
    return sorted(p.name[:-4] for p in pkg.iterdir() if p.name.endswith(".cfg"))


def read_preset(name):
    pkg = resources.files("parcaps") / "presets"
    candidate = pkg / f"{name}.cfg"
    if not candidate.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return candidate.read_text()
