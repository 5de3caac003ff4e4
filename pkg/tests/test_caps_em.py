import math

import numpy as np
import pytest

from parcaps import autodiff as ad
from parcaps import caps_em
from parcaps.autodiff import Tensor
from parcaps.caps_em import (ConvCapsConfig, EmRoutingConfig, MatrixCapsuleGrid,
                             conv_caps_votes, coordinate_addition, em_routing,
                             spread_loss)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def naive_em_routing(votes, child_act, lambdas, beta_a, beta_u, floor):
    """Scalar-loop transcription of the E/M updates, one position at a time."""
    bsz, npos, n_in, n_out, dim = votes.shape
    mu_all = np.zeros((bsz, npos, n_out, dim))
    a_all = np.zeros((bsz, npos, n_out))
    r_all = np.zeros((bsz, npos, n_in, n_out))
    for b in range(bsz):
        for p in range(npos):
            r = np.full((n_in, n_out), 1.0 / n_out)
            mu = np.zeros((n_out, dim))
            var = np.zeros((n_out, dim))
            a = np.zeros(n_out)
            for lam in lambdas:
                rw = r * child_act[b, p][:, None]
                for j in range(n_out):
                    rs = rw[:, j].sum()
                    mu[j] = sum(rw[i, j] * votes[b, p, i, j] for i in range(n_in)) / rs
                    var[j] = sum(rw[i, j] * (votes[b, p, i, j] - mu[j]) ** 2
                                 for i in range(n_in)) / rs
                    var[j] = np.maximum(var[j], floor)
                    cost = sum(beta_u[j] + 0.5 * math.log(var[j, h]) for h in range(dim)) * rs
                    a[j] = sigmoid(lam * (beta_a[j] - cost))
                for i in range(n_in):
                    logits = np.zeros(n_out)
                    for j in range(n_out):
                        lp = sum(-(votes[b, p, i, j, h] - mu[j, h]) ** 2 / (2 * var[j, h])
                                 - 0.5 * math.log(var[j, h]) - 0.5 * math.log(2 * math.pi)
                                 for h in range(dim))
                        logits[j] = lp + math.log(a[j])
                    e = np.exp(logits - logits.max())
                    r[i] = e / e.sum()
            mu_all[b, p], a_all[b, p], r_all[b, p] = mu, a, r
    return mu_all, a_all, r_all


def make_grid(rng, h, w, caps, p=2, batch=1):
    poses = rng.standard_normal((batch, h, w, caps, p, p))
    acts = rng.uniform(0.1, 0.9, (batch, h, w, caps))
    return MatrixCapsuleGrid(h, w, caps, p, Tensor(poses), Tensor(acts))


# -- conv caps votes ------------------------------------------------------------


def test_identity_weights_pass_child_poses_through():
    rng = np.random.default_rng(0)
    grid = make_grid(rng, 3, 4, 2, p=3)
    cfg = ConvCapsConfig(window=1, stride=1, out_caps=2)
    w = np.broadcast_to(np.eye(3), (2, 2, 3, 3)).copy()
    votes, child_act = conv_caps_votes(grid, cfg, Tensor(w))
    assert votes.shape == (1, 3, 4, 2, 2, 9)
    flat = grid.poses.data.reshape(1, 3, 4, 2, 9)
    for j in range(2):
        np.testing.assert_allclose(votes.data[:, :, :, :, j], flat, rtol=1e-12)
    np.testing.assert_array_equal(child_act.data, grid.activations.data)


def test_conv_arithmetic_13_to_6():
    rng = np.random.default_rng(1)
    grid = make_grid(rng, 13, 13, 2, p=2)
    cfg = ConvCapsConfig(window=3, stride=2, out_caps=4)
    votes, child_act = conv_caps_votes(grid, cfg, Tensor(rng.standard_normal((2, 4, 2, 2))))
    assert votes.shape == (1, 6, 6, 3 * 3 * 2, 4, 4)
    assert child_act.shape == (1, 6, 6, 18)


def test_window_votes_match_naive_loop():
    rng = np.random.default_rng(2)
    grid = make_grid(rng, 5, 5, 3, p=2, batch=2)
    cfg = ConvCapsConfig(window=3, stride=2, out_caps=2)
    w = rng.standard_normal((3, 2, 2, 2))
    votes, child_act = conv_caps_votes(grid, cfg, Tensor(w))
    # naive gather for output position (1, 0): window rows 2..4, cols 0..2
    for slot_h in range(3):
        for slot_w in range(3):
            for c in range(3):
                child = (slot_h * 3 + slot_w) * 3 + c
                pose = grid.poses.data[0, 2 + slot_h, 0 + slot_w, c]
                act = grid.activations.data[0, 2 + slot_h, 0 + slot_w, c]
                assert child_act.data[0, 1, 0, child] == act
                for j in range(2):
                    np.testing.assert_allclose(votes.data[0, 1, 0, child, j],
                                               (pose @ w[c, j]).reshape(-1), rtol=1e-12)


def test_window_exceeding_grid_rejected():
    rng = np.random.default_rng(3)
    grid = make_grid(rng, 2, 2, 1)
    with pytest.raises(ad.ShapeError):
        conv_caps_votes(grid, ConvCapsConfig(window=3, stride=1, out_caps=1),
                        Tensor(np.zeros((1, 1, 2, 2))))


# -- coordinate addition ----------------------------------------------------------


def test_coordinate_addition_single_cell():
    votes = Tensor(np.zeros((1, 1, 1, 2, 3, 4)))
    out = coordinate_addition(votes, 1, 1).data
    assert np.all(out[..., 0] == 0.5)
    assert np.all(out[..., 1] == 0.5)
    assert np.all(out[..., 2:] == 0.0)


def test_coordinate_addition_cell_offsets():
    votes = np.zeros((1, 4, 4, 1, 1, 6))
    out = coordinate_addition(Tensor(votes), 4, 4).data
    assert out[0, 2, 1, 0, 0, 0] == pytest.approx(0.625)
    assert out[0, 2, 1, 0, 0, 1] == pytest.approx(0.375)
    assert np.all(out[0, 2, 1, 0, 0, 2:] == 0.0)
    rng_votes = np.random.default_rng(4).standard_normal((1, 4, 4, 2, 3, 6))
    shifted = coordinate_addition(Tensor(rng_votes), 4, 4).data
    np.testing.assert_array_equal(shifted[..., 2:], rng_votes[..., 2:])


# -- EM routing ---------------------------------------------------------------------


def test_single_parent_uses_activation_weighted_mean():
    rng = np.random.default_rng(5)
    votes = rng.standard_normal((2, 1, 4, 1, 6))
    acts = rng.uniform(0.2, 0.9, (2, 1, 4))
    cfg = EmRoutingConfig(routing_iters=3, lambda_schedule=(1, 2, 3))
    mu, a, r, var = em_routing(Tensor(votes), Tensor(acts), cfg,
                               Tensor(np.zeros(1)), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(r.data, np.ones((2, 1, 4, 1)))
    expect = (acts[..., None, None] * votes).sum(axis=2) / acts.sum(axis=2)[..., None, None]
    np.testing.assert_allclose(mu.data, expect, rtol=1e-10)
    assert np.all((a.data > 0) & (a.data < 1))


def test_identical_votes_hit_variance_floor():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 1, 1, 2, 4))
    votes = np.repeat(x, 5, axis=2)
    acts = rng.uniform(0.3, 0.8, (1, 1, 5))
    cfg = EmRoutingConfig(routing_iters=2, lambda_schedule=(1, 1), variance_floor=1e-6)
    mu, a, r, var = em_routing(Tensor(votes), Tensor(acts), cfg,
                               Tensor(np.zeros(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(mu.data, x[:, :, 0], atol=1e-9)
    np.testing.assert_array_equal(var.data, np.full((1, 1, 2, 4), 1e-6))


def test_em_routing_matches_naive_oracle():
    rng = np.random.default_rng(7)
    votes = rng.standard_normal((1, 1, 3, 2, 4))
    acts = rng.uniform(0.2, 0.9, (1, 1, 3))
    beta_a = rng.standard_normal(2) * 0.1
    beta_u = rng.standard_normal(2) * 0.1
    cfg = EmRoutingConfig(routing_iters=2, lambda_schedule=(1.0, 1.0))
    mu, a, r, _ = em_routing(Tensor(votes), Tensor(acts), cfg, Tensor(beta_a), Tensor(beta_u))
    mu_ref, a_ref, r_ref = naive_em_routing(votes, acts, (1.0, 1.0), beta_a, beta_u, 1e-6)
    np.testing.assert_allclose(mu.data, mu_ref, atol=1e-6)
    np.testing.assert_allclose(a.data, a_ref, atol=1e-6)
    np.testing.assert_allclose(r.data, r_ref, atol=1e-6)


def test_em_routing_matches_oracle_more_shapes():
    rng = np.random.default_rng(8)
    for _ in range(3):
        votes = rng.standard_normal((2, 3, 4, 3, 4)) * rng.uniform(0.5, 1.5)
        acts = rng.uniform(0.1, 0.9, (2, 3, 4))
        beta_a = rng.standard_normal(3) * 0.2
        beta_u = rng.standard_normal(3) * 0.2
        cfg = EmRoutingConfig(routing_iters=3, lambda_schedule=(1.0, 2.0, 3.0))
        mu, a, r, _ = em_routing(Tensor(votes), Tensor(acts), cfg,
                                 Tensor(beta_a), Tensor(beta_u))
        mu_ref, a_ref, r_ref = naive_em_routing(votes, acts, (1.0, 2.0, 3.0),
                                                beta_a, beta_u, 1e-6)
        np.testing.assert_allclose(mu.data, mu_ref, atol=1e-6)
        np.testing.assert_allclose(a.data, a_ref, atol=1e-6)
        np.testing.assert_allclose(r.data, r_ref, atol=1e-6)


def test_responsibilities_distribution_and_activation_range():
    rng = np.random.default_rng(9)
    votes = rng.standard_normal((2, 2, 6, 4, 5))
    acts = rng.uniform(0.05, 0.95, (2, 2, 6))
    for iters in (1, 2, 3):
        cfg = EmRoutingConfig(routing_iters=iters, lambda_schedule=tuple(range(1, iters + 1)))
        mu, a, r, var = em_routing(Tensor(votes), Tensor(acts), cfg,
                                   Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        assert np.all(r.data >= 0)
        np.testing.assert_allclose(r.data.sum(axis=3), np.ones((2, 2, 6)), atol=1e-6)
        assert np.all((a.data > 0) & (a.data < 1))
        assert np.all(var.data >= cfg.variance_floor)


def test_parent_permutation_equivariance_exact():
    rng = np.random.default_rng(10)
    votes = rng.standard_normal((1, 2, 5, 2, 4))
    acts = rng.uniform(0.2, 0.8, (1, 2, 5))
    beta_a = rng.standard_normal(2)
    beta_u = rng.standard_normal(2)
    cfg = EmRoutingConfig(routing_iters=2, lambda_schedule=(1.0, 2.0))
    mu, a, r, _ = em_routing(Tensor(votes), Tensor(acts), cfg, Tensor(beta_a), Tensor(beta_u))
    perm = [1, 0]
    mu2, a2, r2, _ = em_routing(Tensor(votes[:, :, :, perm]), Tensor(acts), cfg,
                                Tensor(beta_a[perm]), Tensor(beta_u[perm]))
    assert mu2.data.tobytes() == mu.data[:, :, perm].tobytes()
    assert a2.data.tobytes() == a.data[:, :, perm].tobytes()
    assert r2.data.tobytes() == r.data[:, :, :, perm].tobytes()


def test_em_config_validation():
    with pytest.raises(ValueError):
        EmRoutingConfig(routing_iters=2, lambda_schedule=(1.0,))
    with pytest.raises(ValueError):
        EmRoutingConfig(routing_iters=2, lambda_schedule=(2.0, 1.0))
    with pytest.raises(ValueError):
        EmRoutingConfig(variance_floor=0.0)


# -- spread loss ----------------------------------------------------------------


def one_hot(labels, k):
    out = np.zeros((len(labels), k), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def test_spread_loss_satisfied_margin():
    a = Tensor(np.array([[1.0, 0.0, 0.0]]))
    assert spread_loss(a, one_hot([0], 3), margin=0.9).item() == 0.0


def test_spread_loss_zero_gap_symmetry():
    for k, m in [(3, 0.5), (5, 0.2), (4, 0.9)]:
        a = Tensor(np.full((2, k), 0.4))
        loss = spread_loss(a, one_hot([0, 1], k), margin=m)
        assert abs(loss.item() - (k - 1) * m * m) < 1e-9


def test_spread_loss_hand_value():
    a = Tensor(np.array([[0.7, 0.5, 0.1]]))
    loss = spread_loss(a, one_hot([0], 3), margin=0.5)
    assert abs(loss.item() - 0.09) < 1e-9


def test_spread_loss_margin_bounds_and_one_hot():
    a = Tensor(np.array([[0.7, 0.5]]))
    with pytest.raises(ValueError):
        spread_loss(a, one_hot([0], 2), margin=0.1)
    with pytest.raises(ValueError):
        spread_loss(a, np.array([[1.0, 1.0]]), margin=0.5)


# -- full layer gradient check -----------------------------------------------------


def test_full_em_layer_gradcheck():
    rng = np.random.default_rng(11)
    cfg_conv = ConvCapsConfig(window=3, stride=1, out_caps=2)
    cfg_route = EmRoutingConfig(routing_iters=2, lambda_schedule=(1.0, 2.0))
    targets = one_hot([1], 2)

    def fn(poses, acts_raw, w, beta_a, beta_u):
        grid = MatrixCapsuleGrid(3, 3, 2, 2, poses, ad.logistic(acts_raw))
        votes, child_act = conv_caps_votes(grid, cfg_conv, w)
        b, oh, ow, n_in, n_out, d = votes.shape
        votes = ad.reshape(votes, (b, oh * ow, n_in, n_out, d))
        child_act = ad.reshape(child_act, (b, oh * ow, n_in))
        mu, a, r, var = em_routing(votes, child_act, cfg_route, beta_a, beta_u)
        return spread_loss(ad.reshape(a, (b, n_out)), targets, margin=0.5)

    def sample():
        return [rng.standard_normal((1, 3, 3, 2, 2, 2)),
                rng.standard_normal((1, 3, 3, 2)) - 1.5,
                rng.standard_normal((2, 2, 2, 2)) * 0.5,
                rng.standard_normal(2) * 0.1,
                rng.standard_normal(2) * 0.1]

    # keep the parent activations off the logistic tails, where float
    # saturation swamps the finite differences
    for _ in range(50):
        inputs = sample()
        grid = MatrixCapsuleGrid(3, 3, 2, 2, Tensor(inputs[0]),
                                 ad.logistic(Tensor(inputs[1])))
        votes, child_act = conv_caps_votes(grid, cfg_conv, Tensor(inputs[2]))
        votes = ad.reshape(votes, (1, 1, 18, 2, 4))
        child_act = ad.reshape(child_act, (1, 1, 18))
        _, a, _, _ = em_routing(votes, child_act, cfg_route,
                                Tensor(inputs[3]), Tensor(inputs[4]))
        if np.all((a.data > 0.02) & (a.data < 0.98)):
            break
    err = ad.grad_check(fn, inputs, epsilon=1e-6)
    assert err < 1e-3
