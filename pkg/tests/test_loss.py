import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from athresh.loss import LossWeights, ath_loss, dice, instance_ath_loss, scel
from athresh.tensor import DegenerateInputError, ShapeError, Tensor, gradcheck
from athresh.threshold import step


def test_scel_uniform_map_is_ln2():
    gt = (np.random.default_rng(0).uniform(size=(8, 8)) > 0.5).astype(float)
    assert abs(scel(np.full((8, 8), 0.5), gt).item() - math.log(2)) <= 1e-9


def test_scel_perfect_prediction():
    gt = np.eye(5)
    assert scel(gt, gt).item() <= 1e-6


def test_scel_two_pixels():
    assert scel(np.array([0.9, 0.1]), np.array([1.0, 0.0])).item() == pytest.approx(0.105361, abs=1e-5)


def test_scel_shape_mismatch():
    with pytest.raises(ShapeError):
        scel(np.zeros(3), np.zeros(4))


def test_dice_identical_binary_is_zero():
    x = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert dice(x, x).item() == 0.0


def test_dice_half_overlap_exact():
    assert dice(np.array([1.0, 1.0, 0.0, 0.0]), np.array([0.0, 1.0, 1.0, 0.0])).item() == 0.5


def test_dice_disjoint_soft_near_one():
    assert dice(np.full(10, 1e-9), np.ones(10)).item() > 1 - 1e-8


def test_dice_all_zero_rejected():
    with pytest.raises(DegenerateInputError):
        dice(np.zeros(4), np.zeros(4))


def test_dice_per_image_axes():
    x = np.stack([np.ones((2, 2)), np.array([[1.0, 1.0], [0.0, 0.0]])])
    y = np.ones((2, 2, 2))
    out = dice(x, y, axes=(1, 2)).data
    assert out[0] == 0.0 and out[1] == pytest.approx(1 - 4 / 6)


@given(arrays(np.float64, 12, elements=st.floats(0, 1)), arrays(np.float64, 12, elements=st.sampled_from([0.0, 1.0])))
def test_dice_in_unit_interval(x, y):
    if x.sum() + y.sum() == 0:
        return
    assert -1e-12 <= dice(x, y).item() <= 1 + 1e-12


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.5)


def _random_case(seed, n=8):
    rng = np.random.default_rng(seed)
    gt = (rng.uniform(size=(n, n)) > 0.6).astype(float)
    m = np.clip(gt * 0.7 + rng.uniform(0, 0.3, size=(n, n)), 0, 1)
    return m, gt


def test_zero_weights_equal_scel_bitwise():
    m, gt = _random_case(1)
    a = ath_loss(m, gt, Tensor(0.5), Tensor(0.5), LossWeights(0.0, 0.0)).item()
    assert a == scel(m, gt).item()


def test_perfect_sharp_prediction_small():
    gt = np.zeros((8, 8))
    gt[2:5, 1:7] = 1
    m = np.clip(gt, 1e-7, 1 - 1e-7)
    assert ath_loss(m, gt, Tensor(0.5), Tensor(0.5)).item() <= 0.01


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_ath_loss_nonnegative(seed):
    m, gt = _random_case(seed)
    if gt.sum() == 0:
        return
    assert ath_loss(m, gt, Tensor(0.4), Tensor(0.6)).item() >= 0


def test_zero_offset_merges_weights():
    m, gt = _random_case(2)
    t = Tensor(0.45)
    a = ath_loss(m, gt, t, t, LossWeights(0.5, 0.5)).item()
    b = ath_loss(m, gt, t, t, LossWeights(1.0, 0.0)).item()
    assert abs(a - b) <= 1e-12


def test_gradient_wrt_threshold_logit_matches_fd():
    m, gt = _random_case(3)
    t_d = Tensor(0.1, requires_grad=True)
    off = Tensor(-0.2)

    def f():
        t_D = (t_d * -1.0).exp().__radd__(1.0).__rtruediv__(1.0)
        t_I = ((t_d + off) * -1.0).exp().__radd__(1.0).__rtruediv__(1.0)
        return ath_loss(m, gt, t_D, t_I)

    assert gradcheck(f, [t_d], step=1e-5) < 1e-3


def _t_d_gradient(m, gt):
    t_d = Tensor(0.0, requires_grad=True)
    t = t_d.sigmoid()
    ath_loss(m, gt, t, t).backward()
    return t_d.grad.item()


def test_threshold_gradient_sign_flips_between_fixtures():
    gt = np.zeros((8, 8))
    gt[2:6, 2:6] = 1
    # excess soft foreground: background pixels sit just above 0.5
    fp = np.where(gt == 1, 0.95, 0.0)
    fp[0:2, :] = 0.52
    # excess soft background: text pixels sit just below 0.5
    fn = np.where(gt == 1, 0.48, 0.02)
    fn[2, 2] = 0.95
    g_fp, g_fn = _t_d_gradient(fp, gt), _t_d_gradient(fn, gt)
    # raising the threshold helps the first fixture and hurts the second
    assert g_fp < 0 < g_fn


def test_batch_per_image_thresholds():
    m1, gt1 = _random_case(4)
    m2, gt2 = _random_case(5)
    tI = Tensor(np.array([0.4, 0.6]))
    batch = ath_loss(np.stack([m1, m2]), np.stack([gt1, gt2]), Tensor(0.5), tI).item()
    s = scel(np.stack([m1, m2]), np.stack([gt1, gt2])).item()
    d = [0.5 * dice(step(Tensor(m), 0.5), g).item() + 0.5 * dice(step(Tensor(m), t), g).item()
         for m, g, t in ((m1, gt1, 0.4), (m2, gt2, 0.6))]
    assert batch == pytest.approx(s + np.mean(d), abs=1e-12)


def test_instance_loss_averages_crops():
    gt_a = np.zeros((16, 16), bool)
    gt_a[2:4, 2:10] = True
    gt_b = np.zeros((16, 16), bool)
    gt_b[10:13, 4:8] = True
    m = np.where(gt_a | gt_b, 0.9, 0.1)
    total = instance_ath_loss(m, [gt_a, gt_b], Tensor(0.5), Tensor(0.5)).item()
    a = ath_loss(m[0:6, 0:12], gt_a[0:6, 0:12].astype(float), Tensor(0.5), Tensor(0.5)).item()
    b = ath_loss(m[8:15, 2:10], gt_b[8:15, 2:10].astype(float), Tensor(0.5), Tensor(0.5)).item()
    assert total == pytest.approx((a + b) / 2, abs=1e-12)


def test_instance_loss_gradient_reaches_map_only_in_crops():
    gt = np.zeros((12, 12), bool)
    gt[3:5, 3:8] = True
    m = Tensor(np.where(gt, 0.8, 0.2), requires_grad=True)
    instance_ath_loss(m, [gt], Tensor(0.5), Tensor(0.5), pad=1).backward()
    assert np.all(m.grad[:2] == 0) and np.any(m.grad[3:5, 3:8] != 0)


def test_instance_loss_needs_an_instance():
    with pytest.raises(DegenerateInputError):
        instance_ath_loss(np.full((4, 4), 0.5), [np.zeros((4, 4), bool)], Tensor(0.5), Tensor(0.5))
