"""Matrix capsules: pose-matrix votes over spatial windows, EM routing,
coordinate addition, spread loss.

A matrix capsule is a square pose matrix plus a scalar activation in (0,1).
Parents are fit as Gaussians over the votes of the children in their
receptive window: the M-step re-estimates each parent's mean/variance and
activation from the current responsibilities, the E-step redistributes
responsibilities from the Gaussian densities (computed in log domain).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_2PI = math.log(2.0 * math.pi)


@dataclass
class MatrixCapsuleGrid:
    """Grid of matrix capsules: poses [B, H, W, caps, p, p], activations
    [B, H, W, caps] with values in (0,1)."""
    height: int
    width: int
    caps_per_cell: int
    pose_side: int
    poses: Tensor
    activations: Tensor


@dataclass
class EmRoutingConfig:
    routing_iters: int = 3
    lambda_schedule: tuple = (1.0, 2.0, 3.0)
    variance_floor: float = 1e-6

    def __post_init__(self):
        self.lambda_schedule = tuple(float(v) for v in self.lambda_schedule)
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be >= 1")
        if len(self.lambda_schedule) != self.routing_iters:
            raise ValueError(
                f"lambda schedule length {len(self.lambda_schedule)} != iters {self.routing_iters}")
        if any(v <= 0 for v in self.lambda_schedule):
            raise ValueError("lambda values must be positive")
        if any(b < a for a, b in zip(self.lambda_schedule, self.lambda_schedule[1:])):
            raise ValueError("lambda schedule must be nondecreasing")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")


@dataclass
class ConvCapsConfig:
    window: int
    stride: int
    out_caps: int
    use_coordinate_addition: bool = False

    def __post_init__(self):
        if self.window < 1 or self.stride < 1 or self.out_caps < 1:
            raise ValueError("window, stride and out_caps must be positive")

    def out_spatial(self, h, w):
        return (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1


def conv_caps_votes(grid: MatrixCapsuleGrid, cfg: ConvCapsConfig, weights: Tensor):
    """Votes of every child in each KxK window for each parent type.

    weights is [caps_in, caps_out, p, p]: one transform per (child type,
    parent type), shared across window slots and grid positions. Children
    are ordered slot-major (the caps_in types of window slot (0,0) first).

    Returns (votes [B, H', W', K*K*caps_in, caps_out, p*p],
             child_act [B, H', W', K*K*caps_in]).
    """
    k, stride = cfg.window, cfg.stride
    h, w = grid.height, grid.width
    p = grid.pose_side
    cin = grid.caps_per_cell
    if k > h or k > w:
        raise ad.ShapeError(f"window {k}x{k} exceeds grid {h}x{w}")
    expect = (cin, cfg.out_caps, p, p)
    if tuple(weights.shape) != expect:
        raise ad.ShapeError(f"conv caps weights shape {weights.shape}, expected {expect}")
    oh, ow = cfg.out_spatial(h, w)

    pose_slices, act_slices = [], []
    for kh in range(k):
        for kw in range(k):
            rows = slice(kh, kh + stride * (oh - 1) + 1, stride)
            cols = slice(kw, kw + stride * (ow - 1) + 1, stride)
            pose_slices.append(grid.poses[:, rows, cols])
            act_slices.append(grid.activations[:, rows, cols])
    if k == 1:
        children, child_act = pose_slices[0], act_slices[0]
    else:
        children = ad.concatenate(pose_slices, axis=3)
        child_act = ad.concatenate(act_slices, axis=3)

    bsz = grid.poses.shape[0]
    n_children = k * k * cin
    # [B, H', W', I, 1, p, p] @ [I, J, p, p] -> [B, H', W', I, J, p, p]
    kid = ad.reshape(children, (bsz, oh, ow, n_children, 1, p, p))
    wall = ad.broadcast_to(ad.reshape(weights, (1,) + expect), (k * k,) + expect)
    wall = ad.reshape(wall, (n_children, cfg.out_caps, p, p))
    votes = ad.batched_matmul(kid, wall)
    votes = ad.reshape(votes, (bsz, oh, ow, n_children, cfg.out_caps, p * p))
    return votes, child_act


def coordinate_addition(votes: Tensor, grid_h: int, grid_w: int):
    """Add each child cell's normalized grid position to its votes:
    element 0 += (row + 0.5)/H, element 1 += (col + 0.5)/W.

    votes must be organized [B, H, W, caps, J, d] with the child grid in
    axes 1 and 2.
    """
    b, h, w, caps, j, d = votes.shape
    if (h, w) != (grid_h, grid_w):
        raise ad.ShapeError(f"votes grid {h}x{w} does not match declared {grid_h}x{grid_w}")
    offsets = np.zeros((1, h, w, 1, 1, d), dtype=votes.dtype)
    offsets[0, :, :, 0, 0, 0] = ((np.arange(h) + 0.5) / h)[:, None]
    offsets[0, :, :, 0, 0, 1] = ((np.arange(w) + 0.5) / w)[None, :]
    return ad.add(votes, Tensor(offsets))


def init_em_junction(params, name, caps_in, caps_out, pose_side, pool, dtype=np.float32):
    """Transform matrices plus the learned per-parent-type cost offsets."""
    limit = math.sqrt(6.0 / pose_side)
    w = pool.stream(f"init/{name}.w").uniform(
        -limit, limit, size=(caps_in, caps_out, pose_side, pose_side)).astype(dtype)
    params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    params[f"{name}.beta_a"] = Tensor(np.zeros(caps_out, dtype=dtype), requires_grad=True,
                                      name=f"{name}.beta_a")
    params[f"{name}.beta_u"] = Tensor(np.zeros(caps_out, dtype=dtype), requires_grad=True,
                                      name=f"{name}.beta_u")


def em_routing(votes: Tensor, child_act: Tensor, cfg: EmRoutingConfig,
               beta_a: Tensor, beta_u: Tensor):
    """EM routing over votes [B, P, I, J, D] with child activations
    [B, P, I] (P = output grid positions, I = children per position).

    Responsibilities start uniform over parents. Each iteration t runs the
    M-step (activation-weighted Gaussian refit per parent, variance floored,
    parent activation = logistic(lambda_t * (beta_a - cost))) followed by
    the E-step (responsibilities = softmax over parents of log a_j +
    log N(vote; mu_j, sigma_j^2)). Gradients flow through every unrolled
    iteration.

    Returns (mu [B, P, J, D], act [B, P, J], r [B, P, I, J],
    var [B, P, J, D] from the last M-step).
    """
    bsz, npos, n_in, n_out, dim = votes.shape
    if tuple(child_act.shape) != (bsz, npos, n_in):
        raise ad.ShapeError(f"child activations {child_act.shape} vs votes {votes.shape}")
    r = Tensor(np.full((bsz, npos, n_in, n_out), 1.0 / n_out, dtype=votes.dtype))
    b_a = ad.reshape(beta_a, (1, 1, n_out))
    b_u = ad.reshape(beta_u, (1, 1, n_out, 1))
    act_col = ad.reshape(child_act, (bsz, npos, n_in, 1))

    mu = act = None
    for lam in cfg.lambda_schedule:
        # M-step
        r_w = ad.multiply(r, act_col)                                   # [B,P,I,J]
        r_sum = ad.reduce_sum(r_w, axis=2)                              # [B,P,J]
        r_w_e = ad.reshape(r_w, (bsz, npos, n_in, n_out, 1))
        denom = ad.reshape(r_sum, (bsz, npos, n_out, 1))
        mu = ad.divide(ad.reduce_sum(ad.multiply(r_w_e, votes), axis=2), denom)
        diff = ad.subtract(votes, ad.reshape(mu, (bsz, npos, 1, n_out, dim)))
        var = ad.divide(ad.reduce_sum(ad.multiply(r_w_e, ad.square(diff)), axis=2), denom)
        var = ad.maximum(var, cfg.variance_floor)                       # [B,P,J,D]
        log_sigma = ad.multiply(ad.log(var), 0.5)
        cost = ad.multiply(ad.reduce_sum(ad.add(b_u, log_sigma), axis=3), r_sum)
        z = ad.multiply(ad.subtract(b_a, cost), lam)
        act = ad.logistic(z)                                            # [B,P,J]
        # E-step; log a computed as -softplus(-z) so it stays finite when
        # the activation saturates
        log_act = ad.negate(ad.softplus(ad.negate(z)))
        var_e = ad.reshape(var, (bsz, npos, 1, n_out, dim))
        log_p = ad.negate(ad.divide(ad.square(diff), ad.multiply(var_e, 2.0)))
        log_p = ad.subtract(log_p, ad.reshape(log_sigma, (bsz, npos, 1, n_out, dim)))
        log_p = ad.subtract(log_p, 0.5 * LN_2PI)
        logits = ad.add(ad.reduce_sum(log_p, axis=4),
                        ad.reshape(log_act, (bsz, npos, 1, n_out)))
        r = ad.softmax(logits, axis=3)
    return mu, act, r, var


def spread_loss(activations: Tensor, targets, margin: float):
    """Mean over the batch of sum_{i != target} max(0, m - (a_t - a_i))^2."""
    if not (0.2 <= margin <= 0.9):
        raise ValueError(f"spread margin must lie in [0.2, 0.9], got {margin}")
    targets = np.asarray(targets)
    _check_one_hot(targets)
    if tuple(activations.shape) != targets.shape:
        raise ad.ShapeError(f"activations {activations.shape} vs targets {targets.shape}")
    t = Tensor(targets.astype(activations.dtype))
    a_t = ad.reduce_sum(ad.multiply(activations, t), axis=1, keepdims=True)
    gap = ad.subtract(margin, ad.subtract(a_t, activations))
    hinge = ad.square(ad.relu(gap))
    off_target = ad.multiply(hinge, ad.subtract(1.0, t))
    return ad.reduce_mean(ad.reduce_sum(off_target, axis=1))


def init_primary_matrix_caps(params, name, in_channels, caps, pose_side, pool,
                             dtype=np.float32):
    limit = math.sqrt(6.0 / in_channels)
    pose_shape = (caps * pose_side * pose_side, in_channels, 1, 1)
    w = pool.stream(f"init/{name}.pose.w").uniform(-limit, limit, size=pose_shape).astype(dtype)
    params[f"{name}.pose.w"] = Tensor(w, requires_grad=True, name=f"{name}.pose.w")
    params[f"{name}.pose.b"] = Tensor(np.zeros(pose_shape[0], dtype=dtype),
                                      requires_grad=True, name=f"{name}.pose.b")
    act_shape = (caps, in_channels, 1, 1)
    w = pool.stream(f"init/{name}.act.w").uniform(-limit, limit, size=act_shape).astype(dtype)
    params[f"{name}.act.w"] = Tensor(w, requires_grad=True, name=f"{name}.act.w")
    params[f"{name}.act.b"] = Tensor(np.zeros(caps, dtype=dtype), requires_grad=True,
                                     name=f"{name}.act.b")


def primary_matrix_caps_forward(features: Tensor, params, name, caps, pose_side):
    """Primary capsules from CNN features: poses are a linear 1x1 conv of
    the features (no squash), activations a logistic 1x1 conv."""
    bsz, _, h, w = features.shape
    p = pose_side
    pose = ad.conv2d(features, params[f"{name}.pose.w"])
    pose = ad.add(pose, ad.reshape(params[f"{name}.pose.b"], (1, -1, 1, 1)))
    pose = ad.transpose(pose, (0, 2, 3, 1))
    pose = ad.reshape(pose, (bsz, h, w, caps, p, p))
    act = ad.conv2d(features, params[f"{name}.act.w"])
    act = ad.add(act, ad.reshape(params[f"{name}.act.b"], (1, -1, 1, 1)))
    act = ad.logistic(ad.transpose(act, (0, 2, 3, 1)))
    return MatrixCapsuleGrid(h, w, caps, p, pose, act)


def _check_one_hot(targets):
    if targets.ndim != 2:
        raise ValueError(f"targets must be [batch, classes], got shape {targets.shape}")
    if not np.all(np.isin(targets, (0, 1))) or not np.all(targets.sum(axis=1) == 1):
        raise ValueError("targets must be one-hot rows")
