import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import logsumexp

from toothmatch.fhm import Assignment, fhm_match
from toothmatch.layers import bce_with_logits
from toothmatch.losses import (binary_iou, compute_losses, focal_loss, mask_loss, objectness_loss,
                               objectness_targets, soft_dice, total_loss)
from toothmatch.synth import PerturbSpec, perfect_prediction, perturb


def test_bce_at_zero_is_ln2():
    assert bce_with_logits(0.0, 1.0) == pytest.approx(np.log(2), abs=1e-15)
    assert bce_with_logits(0.0, 0.0) == pytest.approx(np.log(2), abs=1e-15)
    assert np.isfinite(bce_with_logits(1e4, 0.0)) and bce_with_logits(1e4, 0.0) == pytest.approx(1e4)


@given(st.integers(0, 100_000))
def test_focal_reduces_to_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(8, 17)) * 4
    y = rng.integers(0, 17, 8)
    ce = np.mean(logsumexp(logits, axis=1) - logits[np.arange(8), y])
    assert focal_loss(logits, y, gamma=0.0, alpha=1.0) == pytest.approx(ce, abs=1e-12)


def test_focal_by_hand():
    # two classes with logits (0, ln 3): p_y = 3/4 for label 1
    v = focal_loss(np.array([[0.0, np.log(3.0)]]), [1])
    assert v == pytest.approx(-0.25 * (0.25 ** 2) * np.log(0.75), abs=1e-15)
    assert focal_loss(np.zeros((0, 17)), []) == 0.0


def test_soft_dice_and_mask_loss():
    assert soft_dice([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    logits = np.array([[0.0, 0.0]])
    gt = np.array([[1, 0]])
    eps = 1e-6
    dice = (2 * 0.5 + eps) / (1.0 + 1.0 + eps)
    assert mask_loss(logits, gt) == pytest.approx((1 - dice) + np.log(2), abs=1e-12)


def test_objectness_targets():
    ml = np.array([[5.0, 5.0, -5.0], [5.0, -5.0, -5.0], [-5.0, -5.0, 5.0]])
    gt = np.array([[1, 0, 0], [0, 0, 1]])
    t = objectness_targets(ml, gt, [(0, 0), (2, 1)])
    np.testing.assert_allclose(t, [0.5, 0.0, 1.0])
    assert binary_iou([0, 0], [0, 0]) == 0.0
    assert objectness_loss([0.0, 0.0], [1.0, 0.0]) == pytest.approx(np.log(2))


@given(*[st.floats(0, 100) for _ in range(5)])
def test_total_is_affine_combination(c, m, o, ce, pm):
    b = total_loss(c, m, o, ce, pm)
    assert b.l_main == pytest.approx(c + 2 * m + o + 0.5 * ce, abs=1e-9)
    assert b.l_total == pytest.approx(b.l_main + 0.2 * pm, abs=1e-9)


@pytest.mark.parametrize("bad", [-1.0, np.nan, np.inf])
def test_total_rejects_bad_terms(bad):
    with pytest.raises(ValueError):
        total_loss(0.0, bad, 0.0, 0.0, 0.0)


def test_perfect_prediction_losses_vanish(small_arch):
    s = small_arch
    pred = perfect_prediction(s.gt, s.geom, s.cmap)
    a, _ = fhm_match(pred, s.gt, s.scene)
    b = compute_losses(pred, s.gt, a, s.cmap, s.mesh.face_labels)
    assert b.l_total < 1e-4
    assert b.l_cent == 0.0


def test_perturbation_raises_losses(small_arch):
    s = small_arch
    pred = perfect_prediction(s.gt, s.geom, s.cmap)
    bad = perturb(pred, PerturbSpec(mask_flip_rate=0.2, center_drift=0.05, seed=1), s.scene)
    a, _ = fhm_match(bad, s.gt, s.scene)
    base = compute_losses(pred, s.gt, Assignment(tuple((i, i) for i in range(s.gt.n_teeth))), s.cmap,
                          s.mesh.face_labels)
    worse = compute_losses(bad, s.gt, a, s.cmap, s.mesh.face_labels)
    assert worse.l_mask > base.l_mask and worse.l_cent > 0
