"""Vector capsules: squash nonlinearity, vote prediction, dynamic routing,
margin loss.

A capsule is a vector whose direction encodes an entity's instantiation
parameters and whose length (after squash) encodes the probability that the
entity exists. A lower capsule i predicts each higher capsule j through a
learned matrix: vote = W_ij . u_i. Dynamic routing then assigns each
capsule's votes to the higher capsules whose emerging consensus they agree
with (scalar-product agreement), via softmaxed logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SQUASH_EPS = 1e-12


@dataclass
class VectorCapsuleGrid:
    """Spatial grid of vector capsules.

    `poses` is [B, H*W*caps_per_cell, dim], cell-major (capsule type varies
    fastest within a cell). H = W = 0 marks a spatially collapsed layer
    (a single implicit cell holding `caps_per_cell` capsules).
    """
    height: int
    width: int
    caps_per_cell: int
    dim: int
    poses: Tensor

    @property
    def cells(self):
        return self.height * self.width if self.height else 1

    @property
    def num_capsules(self):
        return self.cells * self.caps_per_cell


@dataclass
class DrLayerConfig:
    num_out_caps: int
    out_dim: int
    share_grid_weights: bool = False
    routing_iters: int = 3

    def __post_init__(self):
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be >= 1")


@dataclass
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    down_weight: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.m_minus < self.m_plus < 1.0):
            raise ValueError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if self.down_weight <= 0:
            raise ValueError("down_weight must be positive")


def squash(s, axis=-1, eps=SQUASH_EPS):
    """||s||^2/(1+||s||^2) * s/||s||, with an eps-guarded norm so the zero
    vector maps to the zero vector."""
    norm = ad.l2_norm(s, axis=axis, keepdims=True, eps=eps)
    sq = ad.square(norm)
    scale = ad.divide(sq, ad.add(sq, 1.0))
    return ad.multiply(ad.divide(s, norm), scale)


def init_vote_weights(params, name, grid_cells, caps_per_cell, in_dim, cfg: DrLayerConfig,
                      pool, dtype=np.float32):
    """Register the transform tensor for a capsule junction.

    Shared grid weights: [caps_per_cell, J, in_dim, out_dim] (one transform
    per capsule type, reused across cells). Non-shared: [I, J, in_dim,
    out_dim] with I = cells*caps_per_cell, so every grid position learns its
    own transform and can be zeroed out independently.
    """
    if cfg.share_grid_weights:
        shape = (caps_per_cell, cfg.num_out_caps, in_dim, cfg.out_dim)
    else:
        shape = (grid_cells * caps_per_cell, cfg.num_out_caps, in_dim, cfg.out_dim)
    limit = math.sqrt(6.0 / in_dim)
    w = pool.stream(f"init/{name}").uniform(-limit, limit, size=shape).astype(dtype)
    params[name] = Tensor(w, requires_grad=True, name=name)


def predict_votes(grid: VectorCapsuleGrid, cfg: DrLayerConfig, weights: Tensor):
    """Votes u_hat[b, i, j] = W_ij . u_i, shape [B, I, J, out_dim]."""
    caps = grid.num_capsules
    bsz = grid.poses.shape[0]
    if cfg.share_grid_weights:
        expect = (grid.caps_per_cell, cfg.num_out_caps, grid.dim, cfg.out_dim)
    else:
        expect = (caps, cfg.num_out_caps, grid.dim, cfg.out_dim)
    if tuple(weights.shape) != expect:
        raise ad.ShapeError(f"vote weights shape {weights.shape}, expected {expect}")

    if cfg.share_grid_weights and grid.cells > 1:
        w = ad.broadcast_to(weights, (grid.cells,) + expect)
        w = ad.reshape(w, (caps, cfg.num_out_caps, grid.dim, cfg.out_dim))
    else:
        w = weights
    # [B, I, 1, 1, dim] @ [I, J, dim, out] -> [B, I, J, 1, out]
    u = ad.reshape(grid.poses, (bsz, caps, 1, 1, grid.dim))
    votes = ad.batched_matmul(u, w)
    return ad.reshape(votes, (bsz, caps, cfg.num_out_caps, cfg.out_dim))


def dynamic_routing(votes: Tensor, iters: int):
    """Routing by agreement over votes [B, I, J, D].

    Logits start at zero each call; per iteration: coefficients c_i =
    softmax_j(b_i), s_j = sum_i c_ij * u_hat_ij, v_j = squash(s_j), then
    b_ij += u_hat_ij . v_j. The logits of the last iteration are never
    consumed, so their update is skipped. Gradients flow through the whole
    unrolled computation; the logits are computed values, not parameters.

    Returns (v [B, J, D], c [B, I, J]).
    """
    if iters < 1:
        raise ValueError("routing iters must be >= 1")
    bsz, n_in, n_out, _ = votes.shape
    logits = Tensor(np.zeros((bsz, n_in, n_out), dtype=votes.dtype))
    coeffs = v = None
    for it in range(iters):
        coeffs = ad.softmax(logits, axis=2)
        s = ad.reduce_sum(ad.multiply(ad.reshape(coeffs, coeffs.shape + (1,)), votes), axis=1)
        v = squash(s, axis=-1)
        if it < iters - 1:
            agreement = ad.reduce_sum(ad.multiply(votes, ad.reshape(v, (bsz, 1, n_out, -1))),
                                      axis=3)
            logits = ad.add(logits, agreement)
    return v, coeffs


def margin_loss(class_poses: Tensor, targets, cfg: MarginLossConfig = MarginLossConfig()):
    """Two-sided hinge on class-capsule lengths, averaged over the batch.

    loss_k = T_k * max(0, m+ - ||v_k||)^2
             + down_weight * (1 - T_k) * max(0, ||v_k|| - m-)^2
    """
    targets = np.asarray(targets)
    _check_one_hot(targets)
    bsz, n_classes = targets.shape
    if class_poses.shape[0] != bsz or class_poses.shape[1] != n_classes:
        raise ad.ShapeError(f"class poses {class_poses.shape} vs targets {targets.shape}")
    norms = ad.l2_norm(class_poses, axis=-1)
    t = Tensor(targets.astype(class_poses.dtype))
    present = ad.square(ad.relu(ad.subtract(cfg.m_plus, norms)))
    absent = ad.square(ad.relu(ad.subtract(norms, cfg.m_minus)))
    per_class = ad.add(ad.multiply(t, present),
                       ad.multiply(ad.multiply(ad.subtract(1.0, t), absent), cfg.down_weight))
    return ad.reduce_mean(ad.reduce_sum(per_class, axis=1))


def _check_one_hot(targets):
    if targets.ndim != 2:
        raise ValueError(f"targets must be [batch, classes], got shape {targets.shape}")
    if not np.all(np.isin(targets, (0, 1))) or not np.all(targets.sum(axis=1) == 1):
        raise ValueError("targets must be one-hot rows")
