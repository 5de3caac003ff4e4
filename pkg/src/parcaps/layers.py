"""Convolutional front-end: grouped-convolution residual blocks.

Each block is a bottleneck with cardinality (1x1 reduce -> 3x3 grouped conv
-> 1x1 expand), a residual connection (1x1 projection when the shape
changes) and relu after the add. Blocks downsample with stride 2 so a few
of them reduce the image to a grid small enough for the capsule section.

Parameters live in a flat name->Tensor table; batch-norm running statistics
live in a separate name->ndarray buffer table updated only while training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass
class CnnBlockConfig:
    in_channels: int
    bottleneck_channels: int
    cardinality: int
    out_channels: int
    stride: int = 1
    use_normalization: bool = True

    def __post_init__(self):
        if self.bottleneck_channels % self.cardinality:
            raise ValueError(
                f"bottleneck channels {self.bottleneck_channels} not divisible "
                f"by cardinality {self.cardinality}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def has_projection(self):
        return self.stride != 1 or self.in_channels != self.out_channels

    def param_count(self):
        """Closed-form trainable parameter count (convs + biases + bn scale/shift)."""
        btl, cin, cout = self.bottleneck_channels, self.in_channels, self.out_channels
        b = 0 if self.use_normalization else 1
        c = cin * btl + b * btl                              # 1x1 reduce
        c += btl * (btl // self.cardinality) * 9 + b * btl   # 3x3 grouped
        c += btl * cout + b * cout                           # 1x1 expand
        if self.has_projection:
            c += cin * cout + b * cout
        if self.use_normalization:
            c += 2 * btl + 2 * btl + 2 * cout                # bn1, bn2, bn3
            if self.has_projection:
                c += 2 * cout                                # bnp
        return c

    def out_spatial(self, h, w):
        if self.stride == 1:
            return h, w
        return (h + 1) // 2, (w + 1) // 2


@dataclass
class CnnStackConfig:
    shared_blocks: list = field(default_factory=list)
    branch_blocks: list = field(default_factory=list)

    def out_spatial(self, h, w):
        for blk in self.shared_blocks + self.branch_blocks:
            h, w = blk.out_spatial(h, w)
        return h, w

    def out_channels(self):
        blocks = self.branch_blocks or self.shared_blocks
        if not blocks:
            raise ValueError("empty CNN stack")
        return blocks[-1].out_channels


def conv_init(params, name, shape, pool, dtype=np.float32, bias=True):
    """Register a fan-in-scaled uniform conv kernel plus (optionally) a zero
    bias. Convs followed by batch norm skip the bias: the normalization
    cancels any per-channel shift exactly.

    The stream is keyed by the parameter name, so init is independent of
    registration order.
    """
    fan_in = shape[1] * shape[2] * shape[3]
    limit = math.sqrt(6.0 / fan_in)
    w = pool.stream(f"init/{name}.w").uniform(-limit, limit, size=shape).astype(dtype)
    params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True,
                                     name=f"{name}.b")


def bn_init(params, buffers, name, channels, dtype=np.float32):
    params[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                                     name=f"{name}.gamma")
    params[f"{name}.beta"] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                                    name=f"{name}.beta")
    buffers[f"{name}.mean"] = np.zeros(channels, dtype=dtype)
    buffers[f"{name}.var"] = np.ones(channels, dtype=dtype)


def conv_forward(x, params, name, stride=1, padding=0, groups=1):
    out = ad.conv2d(x, params[f"{name}.w"], stride=stride, padding=padding, groups=groups)
    if f"{name}.b" in params:
        out = ad.add(out, ad.reshape(params[f"{name}.b"], (1, -1, 1, 1)))
    return out


def batchnorm_forward(x, params, buffers, name, training):
    """Per-channel normalization over (batch, H, W).

    Training mode uses batch statistics and folds them into the running
    averages; eval mode normalizes with the frozen running values.
    """
    gamma = ad.reshape(params[f"{name}.gamma"], (1, -1, 1, 1))
    beta = ad.reshape(params[f"{name}.beta"], (1, -1, 1, 1))
    if training:
        mu = ad.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
        var = ad.reduce_mean(ad.square(ad.subtract(x, mu)), axis=(0, 2, 3), keepdims=True)
        m = BN_MOMENTUM
        buffers[f"{name}.mean"] = (m * buffers[f"{name}.mean"]
                                   + (1 - m) * mu.data.reshape(-1)).astype(buffers[f"{name}.mean"].dtype)
        buffers[f"{name}.var"] = (m * buffers[f"{name}.var"]
                                  + (1 - m) * var.data.reshape(-1)).astype(buffers[f"{name}.var"].dtype)
    else:
        mu = Tensor(buffers[f"{name}.mean"].reshape(1, -1, 1, 1))
        var = Tensor(buffers[f"{name}.var"].reshape(1, -1, 1, 1))
    xhat = ad.divide(ad.subtract(x, mu), ad.sqrt(ad.add(var, BN_EPS)))
    return ad.add(ad.multiply(xhat, gamma), beta)


def init_cnn_block(params, buffers, prefix, cfg: CnnBlockConfig, pool, dtype=np.float32):
    bias = not cfg.use_normalization
    conv_init(params, f"{prefix}.reduce", (cfg.bottleneck_channels, cfg.in_channels, 1, 1),
              pool, dtype, bias)
    conv_init(params, f"{prefix}.grouped",
              (cfg.bottleneck_channels, cfg.bottleneck_channels // cfg.cardinality, 3, 3),
              pool, dtype, bias)
    conv_init(params, f"{prefix}.expand", (cfg.out_channels, cfg.bottleneck_channels, 1, 1),
              pool, dtype, bias)
    if cfg.has_projection:
        conv_init(params, f"{prefix}.proj", (cfg.out_channels, cfg.in_channels, 1, 1),
                  pool, dtype, bias)
    if cfg.use_normalization:
        bn_init(params, buffers, f"{prefix}.bn1", cfg.bottleneck_channels, dtype)
        bn_init(params, buffers, f"{prefix}.bn2", cfg.bottleneck_channels, dtype)
        bn_init(params, buffers, f"{prefix}.bn3", cfg.out_channels, dtype)
        if cfg.has_projection:
            bn_init(params, buffers, f"{prefix}.bnp", cfg.out_channels, dtype)


def cnn_block_forward(x, cfg: CnnBlockConfig, params, buffers, prefix, training=False):
    b, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ad.ShapeError(f"block {prefix}: expected {cfg.in_channels} channels, got {c}")
    if h < 3 or w < 3:
        raise ad.ShapeError(f"block {prefix}: spatial dims {h}x{w} too small for 3x3 conv")

    out = conv_forward(x, params, f"{prefix}.reduce")
    if cfg.use_normalization:
        out = batchnorm_forward(out, params, buffers, f"{prefix}.bn1", training)
    out = ad.relu(out)

    out = conv_forward(out, params, f"{prefix}.grouped", stride=cfg.stride, padding=1,
                       groups=cfg.cardinality)
    if cfg.use_normalization:
        out = batchnorm_forward(out, params, buffers, f"{prefix}.bn2", training)
    out = ad.relu(out)

    out = conv_forward(out, params, f"{prefix}.expand")
    if cfg.use_normalization:
        out = batchnorm_forward(out, params, buffers, f"{prefix}.bn3", training)

    if cfg.has_projection:
        skip = conv_forward(x, params, f"{prefix}.proj", stride=cfg.stride)
        if cfg.use_normalization:
            skip = batchnorm_forward(skip, params, buffers, f"{prefix}.bnp", training)
    else:
        skip = x
    return ad.relu(ad.add(out, skip))


def init_cnn_stack(params, buffers, cfg: CnnStackConfig, branches, pool, dtype=np.float32):
    for i, blk in enumerate(cfg.shared_blocks):
        init_cnn_block(params, buffers, f"trunk.block{i}", blk, pool, dtype)
    for b in range(branches):
        for i, blk in enumerate(cfg.branch_blocks):
            init_cnn_block(params, buffers, f"branch{b}.cnn.block{i}", blk, pool, dtype)


def cnn_trunk_forward(x, cfg: CnnStackConfig, params, buffers, training=False):
    out = x
    for i, blk in enumerate(cfg.shared_blocks):
        out = cnn_block_forward(out, blk, params, buffers, f"trunk.block{i}", training)
    return out


def cnn_branch_forward(trunk_out, cfg: CnnStackConfig, params, buffers, branch_id,
                       branches, training=False):
    if not (0 <= branch_id < branches):
        raise ValueError(f"unknown branch id {branch_id} (have {branches} branches)")
    out = trunk_out
    for i, blk in enumerate(cfg.branch_blocks):
        out = cnn_block_forward(out, blk, params, buffers, f"branch{branch_id}.cnn.block{i}",
                                training)
    return out
