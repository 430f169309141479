import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tavrseg.losses import *
from tavrseg.skeleton import SkeletonMask
from tavrseg.volume_common import *

import logging

logger = logging.getLogger(__name__)


def _probs(values):
    values = np.asarray(values, dtype=np.float64)
    return ProbabilityField(VoxelGrid3(values.shape[1:]), values)


def _target(grid, labels):
    return LabelVolume(grid, np.asarray(labels, dtype=np.uint8).reshape(grid.dims))


def _skel(grid, **masks):
    "Skeletons given as keyword arguments ``c<class id>=<flat bits>``."
    out = {}
    for key, bits in masks.items():
        out[int(key[1:])] = BinaryMask(grid, np.asarray(bits, dtype=bool).reshape(grid.dims))
    return SkeletonMask(grid, out)


def _two_voxel_case(p1=(0.5, 0.25)):
    """Two voxels, two channels, both voxels on the class 1 skeleton."""
    p1 = np.asarray(p1)
    values = np.stack([1 - p1, p1]).reshape(2, 2, 1, 1)
    p = _probs(values)
    return p, _skel(p.grid, c1=[True, True])


def _random_case(seed=0, n_channels=4, dims=(4, 4, 4)):
    rng = np.random.default_rng(seed)
    grid = VoxelGrid3(dims)
    logits = LogitField(grid, rng.normal(size=(n_channels,) + dims))
    target = LabelVolume(grid, rng.integers(0, n_channels, size=dims).astype(np.uint8))
    skel = SkeletonMask(
        grid,
        {c: BinaryMask(grid, rng.random(dims) < 0.3) for c in range(n_channels)},
    )
    return logits, target, skel


def _central_difference(f, x, indices, h=1e-5):
    out = []
    for i in indices:
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


############################################################
# Softmax
############################################################


def test_softmax_uniform():
    grid = VoxelGrid3((2, 2, 2))
    p = softmax(LogitField(grid, np.zeros((4, 2, 2, 2))))
    np.testing.assert_allclose(p.values, 0.25)
    assert p.normalized


def test_softmax_large_logits():
    grid = VoxelGrid3((1, 1, 1))
    p = softmax(LogitField(grid, np.array([1000.0, 0.0]).reshape(2, 1, 1, 1)))
    assert np.all(np.isfinite(p.values))
    np.testing.assert_allclose(p.values.ravel(), [1.0, 0.0], atol=1e-300)


def test_softmax_matches_direct_formula():
    rng = np.random.default_rng(1)
    values = rng.normal(size=(3, 2, 2, 2))
    p = softmax(LogitField(VoxelGrid3((2, 2, 2)), values))
    direct = np.exp(values) / np.exp(values).sum(axis=0)
    np.testing.assert_allclose(p.values, direct, rtol=0, atol=1e-12)


def test_softmax_rejects_non_finite():
    values = np.zeros((2, 1, 1, 1))
    values[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        softmax(LogitField(VoxelGrid3((1, 1, 1)), values))


def test_probability_field_checks():
    with pytest.raises(ValueError):
        _probs(np.full((2, 1, 1, 1), 1.5))
    with pytest.raises(GridMismatchError):
        ProbabilityField(VoxelGrid3((2, 1, 1)), np.zeros((2, 1, 1, 1)))
    with pytest.raises(UnnormalizedProbabilityError):
        _probs(np.full((2, 1, 1, 1), 0.2)).check_normalized()


############################################################
# Skeleton recall
############################################################


def test_skeleton_recall_worked_value():
    p, skel = _two_voxel_case()
    value, _ = skeleton_recall_loss(p, skel)
    assert value == pytest.approx(-0.375, abs=1e-15)


def test_skeleton_recall_perfect_and_zero():
    p, skel = _two_voxel_case((1.0, 1.0))
    assert skeleton_recall_loss(p, skel)[0] == pytest.approx(-1.0)
    p, skel = _two_voxel_case((0.0, 0.0))
    assert skeleton_recall_loss(p, skel)[0] == 0.0


def test_skeleton_recall_no_supervision():
    p, _ = _two_voxel_case()
    empty = _skel(p.grid, c1=[False, False])
    with pytest.raises(NoSupervisionError, match="no supervision"):
        skeleton_recall_loss(p, empty)
    with pytest.raises(NoSupervisionError, match="no supervision"):
        focal_skeleton_recall_loss(p, empty)


def test_skeleton_recall_skips_empty_classes():
    grid = VoxelGrid3((2, 1, 1))
    values = np.array([[0.5, 0.75], [0.5, 0.25], [0.0, 0.0]]).reshape(3, 2, 1, 1)
    p = ProbabilityField(grid, values)
    with_empty = _skel(grid, c1=[True, True], c2=[False, False])
    without = _skel(grid, c1=[True, True])
    assert skeleton_recall_loss(p, with_empty)[0] == skeleton_recall_loss(p, without)[0]


def test_focal_skeleton_recall_worked_value():
    p, skel = _two_voxel_case()
    value, _ = focal_skeleton_recall_loss(p, skel, gamma=2)
    assert value == pytest.approx(-0.1328125, abs=1e-15)


def test_focal_skeleton_recall_confident_hits_vanish():
    p, skel = _two_voxel_case((1.0, 1.0))
    value, grad = focal_skeleton_recall_loss(p, skel, gamma=2)
    assert value == 0.0


def test_focal_skeleton_recall_infimum():
    gamma = 2.0
    p, skel = _two_voxel_case((1 / 3, 1 / 3))
    value, grad = focal_skeleton_recall_loss(p, skel, gamma)
    assert value == pytest.approx(-(gamma**gamma) / (1 + gamma) ** (1 + gamma))
    assert value == pytest.approx(-4 / 27)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


@pytest.mark.parametrize("q,sign", [(0.1, -1), (0.3, -1), (0.34, 1), (0.6, 1), (0.9, 1)])
def test_focal_skeleton_recall_sign_flip(q, sign):
    p, skel = _two_voxel_case((q, q))
    _, grad = focal_skeleton_recall_loss(p, skel, gamma=2, mode=FocalSRMode.COUPLED)
    assert np.sign(grad[1, 0, 0, 0]) == sign


@pytest.mark.parametrize("gamma", [1.0, 2.0, 5.0])
def test_focal_skeleton_recall_flips_at_stationary_point(gamma):
    q_star = 1 / (1 + gamma)
    for q, sign in ((q_star - 1e-9, -1), (q_star + 1e-9, 1)):
        p, skel = _two_voxel_case((q, q))
        _, grad = focal_skeleton_recall_loss(p, skel, gamma, mode=FocalSRMode.COUPLED)
        assert np.sign(grad[1, 0, 0, 0]) == sign, q

    p, skel = _two_voxel_case((q_star, q_star))
    value, _ = focal_skeleton_recall_loss(p, skel, gamma)
    infimum = -(gamma**gamma) / (1 + gamma) ** (1 + gamma)
    assert abs(value - infimum) <= 1e-9
    for q in np.linspace(0, 1, 101):
        p, skel = _two_voxel_case((q, q))
        assert focal_skeleton_recall_loss(p, skel, gamma)[0] >= infimum - 1e-12


@pytest.mark.parametrize("gamma", [0.25, 0.5, 0.9])
def test_focal_skeleton_recall_saturated_gradient_is_finite(gamma):
    p, skel = _two_voxel_case((1.0, 0.5))
    value, grad = focal_skeleton_recall_loss(p, skel, gamma, mode=FocalSRMode.COUPLED)
    assert np.isfinite(value)
    assert np.all(np.isfinite(grad))
    # a saturated voxel is still pushed below the stationary point
    assert grad[1, 0, 0, 0] > 0
    cfg = LossConfig(objective="FocalSR", gamma=gamma)
    report = combined_loss(p, _target(p.grid, [1, 1]), skel, cfg)
    assert np.all(np.isfinite(report.grad_logits))


def test_focal_skeleton_recall_detached_gradient():
    p, skel = _two_voxel_case()
    _, grad = focal_skeleton_recall_loss(p, skel, gamma=2, mode="detached")
    np.testing.assert_allclose(grad[1].ravel(), [-0.25 / 2, -0.5625 / 2])
    assert np.all(grad[0] == 0)


def test_focal_skeleton_recall_gamma_zero_is_recall():
    logits, target, skel = _random_case(3)
    p = softmax(logits)
    v0, g0 = focal_skeleton_recall_loss(p, skel, gamma=0)
    v1, g1 = skeleton_recall_loss(p, skel)
    assert v0 == v1
    np.testing.assert_array_equal(g0, g1)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (2, 3, 3, 2), elements=st.floats(0, 1)),
    arrays(bool, (3, 3, 2)),
)
def test_recall_bounds(values, bits):
    if not bits.any():
        bits[0, 0, 0] = True
    p = _probs(values)
    skel = SkeletonMask(p.grid, {1: BinaryMask(p.grid, bits)})
    sr, _ = skeleton_recall_loss(p, skel)
    fsr, _ = focal_skeleton_recall_loss(p, skel, gamma=2)
    assert -1 - 1e-12 <= sr <= 0
    assert -4 / 27 - 1e-12 <= fsr <= 0


def test_recall_is_non_increasing_in_skeleton_probability():
    logits, target, skel = _random_case(4)
    p = softmax(logits)
    _, grad = skeleton_recall_loss(p, skel)
    assert np.all(grad <= 0)


def test_recall_permutation_equivariance():
    logits, target, skel = _random_case(5)
    p = softmax(logits)
    perm = [2, 0, 3, 1]
    permuted_p = ProbabilityField(p.grid, p.values[perm])
    permuted_skel = SkeletonMask(p.grid, {i: skel[c] for i, c in enumerate(perm)})
    for fn in (skeleton_recall_loss, focal_skeleton_recall_loss):
        v, g = fn(p, skel)
        pv, pg = fn(permuted_p, permuted_skel)
        assert pv == pytest.approx(v, abs=1e-14)
        np.testing.assert_allclose(pg, g[perm], atol=1e-14)


############################################################
# Focal, cross-entropy and Dice
############################################################


def test_focal_worked_value():
    p = _probs(np.array([0.1, 0.9]).reshape(2, 1, 1, 1))
    value, _ = focal_loss(p, _target(p.grid, [1]), gamma=2)
    assert value == pytest.approx(-(0.1**2) * math.log(0.9), rel=1e-12)
    assert value == pytest.approx(1.0536e-3, rel=1e-4)


def test_focal_perfect_prediction():
    values = np.zeros((3, 2, 1, 1))
    values[1, 0] = values[2, 1] = 1.0
    p = _probs(values)
    value, grad = focal_loss(p, _target(p.grid, [1, 2]), gamma=2)
    assert value == pytest.approx(0.0, abs=1e-20)
    assert np.all(grad == 0)


def test_focal_gamma_zero_is_cross_entropy():
    logits, target, _ = _random_case(6)
    p = softmax(logits)
    v0, g0 = focal_loss(p, target, gamma=0)
    v1, g1 = cross_entropy_loss(p, target)
    assert abs(v0 - v1) < 1e-12
    np.testing.assert_allclose(g0, g1, atol=1e-12)


def test_focal_rejects_unnormalized():
    p = _probs(np.full((2, 1, 1, 1), 0.3))
    with pytest.raises(UnnormalizedProbabilityError):
        focal_loss(p, _target(p.grid, [0]))


def test_cross_entropy_uniform():
    p = _probs(np.full((4, 2, 2, 1), 0.25))
    value, _ = cross_entropy_loss(p, _target(p.grid, [0, 1, 2, 3]))
    assert value == pytest.approx(math.log(4))


def test_dice_ce_single_voxel():
    p = _probs(np.array([0.5, 0.5]).reshape(2, 1, 1, 1))
    target = _target(p.grid, [0])
    s = 1e-5
    value, _ = dice_ce_loss(p, target)
    dice = 1 - ((1 + s) / (1.5 + s) + s / (0.5 + s)) / 2
    assert value == pytest.approx(0.25 * dice + 0.75 * math.log(2), rel=1e-12)
    assert soft_dice_loss(p, target, s)[0] == pytest.approx(dice, rel=1e-12)
    assert cross_entropy_loss(p, target)[0] == pytest.approx(math.log(2), rel=1e-12)


def test_dice_ce_perfect_prediction():
    grid = VoxelGrid3((3, 1, 1))
    labels = np.array([0, 1, 2], dtype=np.uint8)
    target = _target(grid, labels)
    p = ProbabilityField(grid, one_hot(labels.reshape(grid.dims), 4))
    dice, _ = soft_dice_loss(p, target)
    ce, _ = cross_entropy_loss(p, target)
    assert dice == pytest.approx(0.0, abs=1e-12)
    assert ce == pytest.approx(0.0, abs=1e-6)


def test_target_channel_check():
    p = _probs(np.full((2, 1, 1, 1), 0.5))
    with pytest.raises(ValueError):
        cross_entropy_loss(p, _target(p.grid, [3]))


############################################################
# Objectives
############################################################


def test_table_objectives_constructible():
    assert TABLE_OBJECTIVES == ("DiceCE", "Focal", "DiceCE+SR", "Focal+SR", "FocalSK*")
    for name in TABLE_OBJECTIVES:
        cfg = LossConfig(objective=name)
        assert Objective.get(name).NAME == name
        assert cfg.objective == name
    assert set(TABLE_OBJECTIVES) <= set(Objective.names())


def test_unknown_objective():
    with pytest.raises(UnknownObjectiveError):
        Objective.get("Tversky")
    with pytest.raises(UnknownObjectiveError):
        LossConfig(objective="Tversky")


def test_objective_weights():
    cfg = LossConfig()
    assert Objective.get("DiceCE").weights(cfg) == {"dice": 0.25, "ce": 0.75}
    assert Objective.get("FocalSK*").weights(cfg) == {"focal_sr": 1.0, "focal": 1.0}
    assert Objective.get("FocalSK*").needs_skeleton()
    assert not Objective.get("Focal").needs_skeleton()


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(gamma=-1)
    with pytest.raises(ValueError):
        LossConfig(dice_smooth=0)
    assert LossConfig(focal_sr_mode="detached").focal_sr_mode == FocalSRMode.DETACHED


def test_focal_sk_star_perfect_prediction():
    grid = VoxelGrid3((3, 1, 1))
    labels = np.array([0, 1, 1], dtype=np.uint8).reshape(grid.dims)
    p = ProbabilityField(grid, one_hot(labels, 2))
    skel = _skel(grid, c1=[False, True, True])
    report = combined_loss(p, LabelVolume(grid, labels), skel, LossConfig(objective="FocalSK*"))
    assert report.total == pytest.approx(0.0, abs=1e-12)
    assert report.skeleton_recall == {1: 1.0}


@pytest.mark.parametrize("name", ["DiceCE", "Focal", "DiceCE+SR", "Focal+SR", "FocalSK*"])
def test_total_is_weighted_sum_of_terms(name):
    logits, target, skel = _random_case(7)
    p = softmax(logits)
    cfg = LossConfig(objective=name)
    report = combined_loss(p, target, skel, cfg)
    independent = {
        "dice": lambda: soft_dice_loss(p, target, cfg.dice_smooth)[0],
        "ce": lambda: cross_entropy_loss(p, target)[0],
        "focal": lambda: focal_loss(p, target, cfg.gamma)[0],
        "sr": lambda: skeleton_recall_loss(p, skel)[0],
        "focal_sr": lambda: focal_skeleton_recall_loss(p, skel, cfg.gamma)[0],
    }
    expected = sum(report.weights[t] * independent[t]() for t in report.terms)
    assert abs(report.total - expected) < 1e-12
    assert set(report.terms) == set(Objective.get(name).TERMS)


def test_dice_ce_matches_combined_loss():
    logits, target, _ = _random_case(8)
    p = softmax(logits)
    value, grad = dice_ce_loss(p, target)
    report = combined_loss(p, target, None, LossConfig())
    assert value == report.total
    np.testing.assert_array_equal(grad, report.grad_p)


def test_skeleton_objective_without_skeleton():
    logits, target, _ = _random_case(9)
    with pytest.raises(NoSupervisionError):
        combined_loss(softmax(logits), target, None, LossConfig(objective="FocalSK*"))


ALL_OBJECTIVES = ["DiceCE", "Focal", "DiceCE+SR", "Focal+SR", "FocalSK*", "SR", "FocalSR"]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", ALL_OBJECTIVES)
def test_gradient_matches_finite_differences(name, seed):
    logits, target, skel = _random_case(10 + seed)
    p = softmax(logits).values
    y_skel = skel.to_array(4)
    cfg = LossConfig(objective=name)

    def f(x):
        return evaluate_objective(x, target.voxels, y_skel, cfg)[0]

    _, _, _, grad = evaluate_objective(p, target.voxels, y_skel, cfg)
    indices = np.random.default_rng(seed).choice(p.size, 40, replace=False)
    numeric = _central_difference(f, p, indices)
    np.testing.assert_allclose(grad.flat[indices], numeric, rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", ALL_OBJECTIVES)
def test_logit_gradient_matches_finite_differences(name, seed):
    logits, target, skel = _random_case(100 + seed)
    cfg = LossConfig(objective=name)

    def f(x):
        p = softmax(LogitField(logits.grid, x))
        return combined_loss(p, target, skel, cfg).total

    report = combined_loss(softmax(logits), target, skel, cfg)
    indices = np.random.default_rng(seed).choice(logits.values.size, 30, replace=False)
    numeric = _central_difference(f, logits.values, indices)
    np.testing.assert_allclose(report.grad_logits.flat[indices], numeric, rtol=1e-5, atol=1e-9)


def test_loss_report_serialization():
    logits, target, skel = _random_case(12)
    report = combined_loss(softmax(logits), target, skel, LossConfig(objective="Focal+SR"))
    data = report.to_dict()
    assert data["objective"] == "Focal+SR"
    assert set(data["terms"]) == {"focal", "sr"}
    assert set(data["skeleton_recall"]) == {"0", "1", "2", "3"}
    light = report.without_gradients()
    assert light.grad_p is None and light.total == report.total
