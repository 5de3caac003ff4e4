"""Assemble whole networks from a declarative config.

Topology: shared CNN trunk -> per-branch CNN blocks -> per-branch primary
capsules, then, by capsule depth:

  2 layers: primary capsules of all branches concatenate and route straight
            to the class capsules;
  3 layers: each branch owns exactly one mid capsule (a routing junction
            with a single parent, so no routing competition); the branch
            mid capsules concatenate and route to the class capsules;
  4 layers: each branch adds a second capsule layer after its mid capsules
            and merging happens just before the class capsules.

Branches are isolated until the merge: their parameter names are disjoint
and their subgraphs never read another branch's tensors. Merging always
concatenates in ascending branch index.

Three families are supported: "dr" (vector capsules, margin loss), "em"
(matrix capsules, spread loss) and "cnn" (the residual-block stack with a
linear head, for baselines and pilots).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import caps_dr, caps_em, layers
from .autodiff import Tensor
from .caps_dr import DrLayerConfig, VectorCapsuleGrid
from .caps_em import ConvCapsConfig, EmRoutingConfig, MatrixCapsuleGrid
from .layers import CnnStackConfig
from .rng import RngPool

FAMILIES = ("dr", "em", "cnn")
CAPSULE_DIMS = (9, 16, 25)


class ConfigError(ValueError):
    """Architecture description violates a structural rule."""


@dataclass
class ArchitectureConfig:
    family: str = "dr"
    caps_layers: int = 3
    branches: int = 1
    input_size: int = 48
    input_channels: int = 3
    class_count: int = 6
    cnn: CnnStackConfig = field(default_factory=CnnStackConfig)
    primary_caps: int = 2
    primary_dim: int = 16
    capsule_dim: int = 16
    mid_caps_per_branch: int = 1
    second_caps_per_branch: int = 4
    share_grid_weights: bool = False
    routing_iters: int = 3
    em_lambda_schedule: tuple = (1.0, 2.0, 3.0)
    em_variance_floor: float = 1e-6
    em_mid_window: int = 3
    em_mid_stride: int = 2
    em_second_window: int = 3
    em_second_stride: int = 1
    coordinate_addition: bool = False

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.family != "cnn":
            if self.caps_layers not in (2, 3, 4):
                raise ConfigError(f"caps_layers must be 2, 3 or 4, got {self.caps_layers}")
            if self.capsule_dim not in CAPSULE_DIMS:
                raise ConfigError(f"capsule_dim must be one of {CAPSULE_DIMS}")
        if self.branches < 1:
            raise ConfigError("branches must be >= 1")
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.family == "em":
            if self.primary_dim != self.capsule_dim:
                raise ConfigError("em family uses one pose size everywhere: "
                                  f"primary_dim {self.primary_dim} != capsule_dim {self.capsule_dim}")
            if int(math.isqrt(self.capsule_dim)) ** 2 != self.capsule_dim:
                raise ConfigError(f"em capsule_dim {self.capsule_dim} is not a square")
            if self.caps_layers == 4 and self.coordinate_addition:
                raise ConfigError("coordinate addition is not defined for the 4-layer "
                                  "variant (the merge precedes the class capsules)")
            if self.caps_layers == 2 and self.branches > 1 \
                    and self.primary_caps % self.branches:
                raise ConfigError(f"2-layer parallel em requires primary_caps "
                                  f"({self.primary_caps}) divisible by branches ({self.branches})")
        if self.family == "dr":
            if self.caps_layers == 2 and self.branches > 1 \
                    and self.primary_dim % self.branches:
                raise ConfigError(f"2-layer parallel dr requires primary_dim "
                                  f"({self.primary_dim}) divisible by branches ({self.branches})")
            if self.caps_layers == 3 and self.branches > 1 and self.mid_caps_per_branch != 1:
                raise ConfigError("parallel 3-layer nets use exactly one mid capsule per branch")
        self._validate_cnn_chain()

    def _validate_cnn_chain(self):
        prev = self.input_channels
        for i, blk in enumerate(self.cnn.shared_blocks + self.cnn.branch_blocks):
            if blk.in_channels != prev:
                raise ConfigError(f"cnn block {i}: in_channels {blk.in_channels} "
                                  f"!= previous out_channels {prev}")
            prev = blk.out_channels

    # -- derived quantities -------------------------------------------------

    def effective_stack(self) -> CnnStackConfig:
        """The stack actually built. A 2-layer parallel EM net duplicates the
        last branch block with stride 2 so the grid shrinks once more."""
        if self.family == "em" and self.caps_layers == 2 and self.branches > 1:
            base = self.cnn.branch_blocks or self.cnn.shared_blocks
            if not base:
                raise ConfigError("2-layer parallel em needs at least one cnn block to duplicate")
            last = base[-1]
            dup = replace(last, in_channels=last.out_channels, stride=2)
            return CnnStackConfig(list(self.cnn.shared_blocks),
                                  list(self.cnn.branch_blocks) + [dup])
        return self.cnn

    def branch_primary_caps(self):
        """Primary capsules per cell within one branch."""
        if self.family == "em" and self.caps_layers == 2 and self.branches > 1:
            return self.primary_caps // self.branches
        return self.primary_caps

    def branch_primary_dim(self):
        """Primary capsule length within one branch (dr family)."""
        if self.family == "dr" and self.caps_layers == 2 and self.branches > 1:
            return self.primary_dim // self.branches
        return self.primary_dim

    def grid_shape(self):
        return self.effective_stack().out_spatial(self.input_size, self.input_size)

    def pose_side(self):
        return int(math.isqrt(self.capsule_dim))

    def em_routing_config(self):
        return EmRoutingConfig(routing_iters=len(self.em_lambda_schedule),
                               lambda_schedule=self.em_lambda_schedule,
                               variance_floor=self.em_variance_floor)


@dataclass
class Network:
    config: ArchitectureConfig
    params: dict
    buffers: dict
    merge_order: list
    seed: int


def build_network(cfg: ArchitectureConfig, seed: int) -> Network:
    """Initialize every parameter of the described network, deterministically
    from (seed, parameter name)."""
    cfg.validate()
    pool = RngPool(seed)
    params, buffers = {}, {}
    stack = cfg.effective_stack()
    layers.init_cnn_stack(params, buffers, stack, cfg.branches, pool)
    gh, gw = cfg.grid_shape()
    if gh < 1 or gw < 1:
        raise ConfigError(f"cnn stack collapses {cfg.input_size}x{cfg.input_size} "
                          f"input to {gh}x{gw}")
    feat = stack.out_channels()

    if cfg.family == "cnn":
        _init_linear(params, "head.fc", feat * cfg.branches, cfg.class_count, pool)
        return Network(cfg, params, buffers, list(range(cfg.branches)), seed)

    pcaps, pdim = cfg.branch_primary_caps(), cfg.branch_primary_dim()
    cells = gh * gw
    if cfg.family == "dr":
        for b in range(cfg.branches):
            layers.conv_init(params, f"branch{b}.primary.proj",
                             (pcaps * pdim, feat, 1, 1), pool)
            if cfg.caps_layers >= 3:
                caps_dr.init_vote_weights(
                    params, f"branch{b}.mid.w", cells, pcaps, pdim,
                    DrLayerConfig(cfg.mid_caps_per_branch, cfg.capsule_dim,
                                  cfg.share_grid_weights, cfg.routing_iters), pool)
            if cfg.caps_layers == 4:
                caps_dr.init_vote_weights(
                    params, f"branch{b}.second.w", 1, cfg.mid_caps_per_branch,
                    cfg.capsule_dim,
                    DrLayerConfig(cfg.second_caps_per_branch, cfg.capsule_dim,
                                  cfg.share_grid_weights, cfg.routing_iters), pool)
        head_cells, head_caps, head_dim = _dr_head_input(cfg, cells)
        caps_dr.init_vote_weights(
            params, "head.class.w", head_cells, head_caps, head_dim,
            DrLayerConfig(cfg.class_count, cfg.capsule_dim, cfg.share_grid_weights,
                          cfg.routing_iters), pool)
    else:
        p = cfg.pose_side()
        for b in range(cfg.branches):
            caps_em.init_primary_matrix_caps(params, f"branch{b}.primary", feat, pcaps, p, pool)
            if cfg.caps_layers >= 3:
                caps_em.init_em_junction(params, f"branch{b}.mid", pcaps,
                                         cfg.mid_caps_per_branch, p, pool)
            if cfg.caps_layers == 4:
                caps_em.init_em_junction(params, f"branch{b}.second",
                                         cfg.mid_caps_per_branch,
                                         cfg.second_caps_per_branch, p, pool)
        caps_em.init_em_junction(params, "head.class", _em_head_types(cfg),
                                 cfg.class_count, p, pool)
    return Network(cfg, params, buffers, list(range(cfg.branches)), seed)


def _dr_head_input(cfg, cells):
    """(cells, caps_per_cell, dim) of the concatenated grid entering the
    class junction."""
    if cfg.caps_layers == 2:
        return cells, cfg.branches * cfg.branch_primary_caps(), cfg.branch_primary_dim()
    if cfg.caps_layers == 3:
        return 1, cfg.branches * cfg.mid_caps_per_branch, cfg.capsule_dim
    return 1, cfg.branches * cfg.second_caps_per_branch, cfg.capsule_dim


def _em_head_types(cfg):
    if cfg.caps_layers == 2:
        return cfg.branches * cfg.branch_primary_caps()
    if cfg.caps_layers == 3:
        return cfg.branches * cfg.mid_caps_per_branch
    return cfg.branches * cfg.second_caps_per_branch


def _init_linear(params, name, n_in, n_out, pool, dtype=np.float32):
    limit = math.sqrt(6.0 / n_in)
    w = pool.stream(f"init/{name}.w").uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
    params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True,
                                 name=f"{name}.b")


# -- forward -----------------------------------------------------------------


def network_forward(net: Network, images, training=False, internals=None,
                    concurrent=False) -> Tensor:
    """Class scores [B, K]: capsule lengths in [0, 1) for dr, activations in
    (0, 1) for em, softmax probabilities for cnn."""
    kind, payload = _forward_core(net, images, training, internals, concurrent)
    if kind == "dr":
        return ad.l2_norm(payload, axis=-1)
    if kind == "em":
        return payload
    return ad.softmax(payload, axis=1)


def network_loss(net: Network, images, targets, loss_kind, training=True,
                 margin=None, margin_cfg=None, internals=None, concurrent=False):
    """(loss, scores) sharing one graph. loss_kind: margin | spread |
    cross_entropy; `margin` is the spread-loss margin."""
    kind, payload = _forward_core(net, images, training, internals, concurrent)
    if loss_kind == "margin":
        if kind != "dr":
            raise ConfigError("margin loss applies to the dr family")
        cfg = margin_cfg or caps_dr.MarginLossConfig()
        return caps_dr.margin_loss(payload, targets, cfg), ad.l2_norm(payload, axis=-1)
    if loss_kind == "spread":
        if kind != "em":
            raise ConfigError("spread loss applies to the em family")
        return caps_em.spread_loss(payload, targets, margin), payload
    if loss_kind == "cross_entropy":
        if kind != "cnn":
            raise ConfigError("cross_entropy applies to the cnn family")
        return _cross_entropy(payload, targets), ad.softmax(payload, axis=1)
    raise ConfigError(f"unknown loss {loss_kind!r}")


def _cross_entropy(logits, targets):
    targets = np.asarray(targets)
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = ad.subtract(logits, shift)
    log_norm = ad.log(ad.reduce_sum(ad.exp(z), axis=1))
    target_score = ad.reduce_sum(ad.multiply(z, Tensor(targets.astype(logits.dtype))), axis=1)
    return ad.reduce_mean(ad.subtract(log_norm, target_score))


def _forward_core(net, images, training, internals, concurrent):
    cfg = net.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    b, c, h, w = x.shape
    if (c, h, w) != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise ad.ShapeError(
            f"input {c}x{h}x{w} does not match configured "
            f"{cfg.input_channels}x{cfg.input_size}x{cfg.input_size}")
    stack = cfg.effective_stack()
    trunk = layers.cnn_trunk_forward(x, stack, net.params, net.buffers, training)
    if internals is not None:
        internals["trunk"] = trunk

    def branch(bi):
        feats = layers.cnn_branch_forward(trunk, stack, net.params, net.buffers,
                                          bi, cfg.branches, training)
        if cfg.family == "cnn":
            return feats
        if cfg.family == "dr":
            return _dr_branch(net, cfg, feats, bi)
        return _em_branch(net, cfg, feats, bi)

    if concurrent and cfg.branches > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.branches, 8)) as ex:
            outs = list(ex.map(branch, net.merge_order))
    else:
        outs = [branch(bi) for bi in net.merge_order]
    if internals is not None:
        for bi, out in zip(net.merge_order, outs):
            internals[f"branch{bi}.premerge"] = out

    if cfg.family == "cnn":
        pooled = ad.reduce_mean(ad.concatenate(outs, axis=1) if len(outs) > 1 else outs[0],
                                axis=(2, 3))
        logits = ad.add(ad.matmul(pooled, net.params["head.fc.w"]),
                        ad.reshape(net.params["head.fc.b"], (1, -1)))
        return "cnn", logits
    if cfg.family == "dr":
        return "dr", _dr_head(net, cfg, outs)
    return "em", _em_head(net, cfg, outs)


# -- dr family ---------------------------------------------------------------


def _dr_primary_grid(cfg, feats, params, bi):
    pcaps, pdim = cfg.branch_primary_caps(), cfg.branch_primary_dim()
    bsz, _, gh, gw = feats.shape
    pose = layers.conv_forward(feats, params, f"branch{bi}.primary.proj")
    pose = ad.transpose(pose, (0, 2, 3, 1))
    pose = ad.reshape(pose, (bsz, gh * gw * pcaps, pdim))
    pose = caps_dr.squash(pose, axis=-1)
    return VectorCapsuleGrid(gh, gw, pcaps, pdim, pose)


def _dr_branch(net, cfg, feats, bi):
    grid = _dr_primary_grid(cfg, feats, net.params, bi)
    if cfg.caps_layers == 2:
        # [B, cells, caps, dim] so the merge can interleave per cell
        return ad.reshape(grid.poses, (grid.poses.shape[0], grid.cells,
                                       grid.caps_per_cell, grid.dim))
    mid_cfg = DrLayerConfig(cfg.mid_caps_per_branch, cfg.capsule_dim,
                            cfg.share_grid_weights, cfg.routing_iters)
    votes = caps_dr.predict_votes(grid, mid_cfg, net.params[f"branch{bi}.mid.w"])
    mids, _ = caps_dr.dynamic_routing(votes, cfg.routing_iters)
    if cfg.caps_layers == 3:
        return mids
    second_cfg = DrLayerConfig(cfg.second_caps_per_branch, cfg.capsule_dim,
                               cfg.share_grid_weights, cfg.routing_iters)
    grid2 = VectorCapsuleGrid(0, 0, cfg.mid_caps_per_branch, cfg.capsule_dim, mids)
    votes2 = caps_dr.predict_votes(grid2, second_cfg, net.params[f"branch{bi}.second.w"])
    second, _ = caps_dr.dynamic_routing(votes2, cfg.routing_iters)
    return second


def _dr_head(net, cfg, outs):
    gh, gw = cfg.grid_shape()
    if cfg.caps_layers == 2:
        merged = ad.concatenate(outs, axis=2) if len(outs) > 1 else outs[0]
        bsz, cells, caps, dim = merged.shape
        grid = VectorCapsuleGrid(gh, gw, caps, dim,
                                 ad.reshape(merged, (bsz, cells * caps, dim)))
    else:
        merged = ad.concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
        grid = VectorCapsuleGrid(0, 0, merged.shape[1], cfg.capsule_dim, merged)
    head_cfg = DrLayerConfig(cfg.class_count, cfg.capsule_dim, cfg.share_grid_weights,
                             cfg.routing_iters)
    votes = caps_dr.predict_votes(grid, head_cfg, net.params["head.class.w"])
    classes, _ = caps_dr.dynamic_routing(votes, cfg.routing_iters)
    return classes


# -- em family ---------------------------------------------------------------


def _em_branch(net, cfg, feats, bi):
    pcaps, p = cfg.branch_primary_caps(), cfg.pose_side()
    grid = caps_em.primary_matrix_caps_forward(feats, net.params, f"branch{bi}.primary",
                                               pcaps, p)
    if cfg.caps_layers == 2:
        return grid
    grid = _em_junction(net, grid, f"branch{bi}.mid",
                        ConvCapsConfig(cfg.em_mid_window, cfg.em_mid_stride,
                                       cfg.mid_caps_per_branch), cfg)
    if cfg.caps_layers == 3:
        return grid
    return _em_junction(net, grid, f"branch{bi}.second",
                        ConvCapsConfig(cfg.em_second_window, cfg.em_second_stride,
                                       cfg.second_caps_per_branch), cfg)


def _em_junction(net, grid, name, conv_cfg, cfg, coords=False, flatten=False):
    votes, child_act = caps_em.conv_caps_votes(grid, conv_cfg, net.params[f"{name}.w"])
    bsz, oh, ow, n_in, n_out, d = votes.shape
    if coords:
        votes = caps_em.coordinate_addition(votes, oh, ow)
    if flatten:
        # spatial positions become children of one global routing problem
        votes = ad.reshape(votes, (bsz, 1, oh * ow * n_in, n_out, d))
        child_act = ad.reshape(child_act, (bsz, 1, oh * ow * n_in))
        oh = ow = 1
    else:
        votes = ad.reshape(votes, (bsz, oh * ow, n_in, n_out, d))
        child_act = ad.reshape(child_act, (bsz, oh * ow, n_in))
    mu, act, _, _ = caps_em.em_routing(votes, child_act, cfg.em_routing_config(),
                                       net.params[f"{name}.beta_a"],
                                       net.params[f"{name}.beta_u"])
    p = cfg.pose_side()
    poses = ad.reshape(mu, (bsz, oh, ow, n_out, p, p))
    acts = ad.reshape(act, (bsz, oh, ow, n_out))
    return MatrixCapsuleGrid(oh, ow, n_out, p, poses, acts)


def _em_head(net, cfg, grids):
    if len(grids) > 1:
        poses = ad.concatenate([g.poses for g in grids], axis=3)
        acts = ad.concatenate([g.activations for g in grids], axis=3)
        grid = MatrixCapsuleGrid(grids[0].height, grids[0].width,
                                 sum(g.caps_per_cell for g in grids),
                                 cfg.pose_side(), poses, acts)
    else:
        grid = grids[0]
    out = _em_junction(net, grid, "head.class", ConvCapsConfig(1, 1, cfg.class_count),
                       cfg, coords=cfg.coordinate_addition, flatten=True)
    bsz = out.activations.shape[0]
    return ad.reshape(out.activations, (bsz, cfg.class_count))


# -- parameter accounting -------------------------------------------------------


def count_parameters(net: Network):
    """(total, per-section breakdown). Sections: trunk, branch{i}.cnn,
    branch{i}.caps, head."""
    breakdown = {}
    for name, tensor in net.params.items():
        head, rest = name.split(".", 1)
        if head == "trunk":
            section = "trunk"
        elif head.startswith("branch"):
            section = f"{head}.cnn" if rest.startswith("cnn.") else f"{head}.caps"
        else:
            section = "head"
        breakdown[section] = breakdown.get(section, 0) + tensor.size
    return sum(breakdown.values()), breakdown
