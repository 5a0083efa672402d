import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynspot import tensor as tn
from dynspot.loss import class_loss, focal_from_logits, soft_focal_term, time_loss, total_loss
from dynspot.matcher import GroundTruthLabel, Predictions, assign_labels, hungarian_solve, pad_labels
from dynspot.model import LayerOutput
from dynspot.tensor import Tensor

QUARTER_LN2 = 0.25 * math.log(2.0)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def layer(scores, times):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    return LayerOutput(Tensor(logit(s)[None]), Tensor(logit(t)[None]))


def matcher(lam):
    return lambda labels, preds: assign_labels(labels, preds, lam)


# ---------------------------------------------------------------- focal term

def test_focal_positive_target_half_score():
    assert soft_focal_term([1.0], [0.5])[0] == pytest.approx(QUARTER_LN2, abs=1e-12)


def test_focal_zero_target_half_score():
    assert soft_focal_term([0.0], [0.5])[0] == pytest.approx(QUARTER_LN2, abs=1e-12)


def test_focal_exact_soft_target_is_zero():
    assert np.all(soft_focal_term([0.3, 0.7], [0.3, 0.7]) == 0.0)


def test_focal_rejects_saturated_scores():
    with pytest.raises(ValueError, match="sigmoid"):
        soft_focal_term([1.0], [1.0])
    with pytest.raises(ValueError, match="sigmoid"):
        soft_focal_term([0.0], [0.0])


def test_focal_from_logits_matches_probability_form():
    rng = np.random.default_rng(0)
    target = rng.uniform(0, 1, (5, 3))
    logits = rng.normal(0, 3, (5, 3))
    expect = soft_focal_term(target, 1 / (1 + np.exp(-logits)))
    np.testing.assert_allclose(focal_from_logits(Tensor(logits), target).data, expect, rtol=1e-12)


def test_focal_from_logits_finite_when_saturated():
    out = focal_from_logits(Tensor([[60.0, -60.0]]), np.array([[0.0, 1.0]]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] == pytest.approx(60.0, rel=1e-9)


# ---------------------------------------------------------------- class / time loss

def test_single_query_class_loss():
    g = GroundTruthLabel(np.array([1.0]), 3, 10)
    preds = Predictions([[0.5]], [0.3])
    padded = pad_labels([g], 1)
    asg = hungarian_solve(np.zeros((1, 1)))
    assert class_loss(asg, padded, preds) == pytest.approx(QUARTER_LN2, abs=1e-12)


def test_appended_classes_add_quarter_ln2_each():
    g = GroundTruthLabel(np.array([1.0, 0.0]), 3, 10)
    scores = np.array([[0.7, 0.2], [0.1, 0.4], [0.3, 0.6]])
    preds = Predictions(scores, [0.3, 0.5, 0.9])
    asg = assign_labels([g], preds)
    base = class_loss(asg, pad_labels([g], 3), preds)
    extra = 2
    g2 = GroundTruthLabel(np.concatenate([g.classes, np.zeros(extra)]), 3, 10)
    preds2 = Predictions(np.hstack([scores, np.full((3, extra), 0.5)]), preds.times)
    grown = class_loss(asg, pad_labels([g2], 3), preds2)
    assert grown - base == pytest.approx(3 * extra * QUARTER_LN2, abs=1e-12)


def test_time_loss_values():
    labels = [GroundTruthLabel(np.array([1.0]), 20, 100), GroundTruthLabel(np.array([1.0]), 60, 100)]
    preds = Predictions([[0.9], [0.9], [0.1]], [0.22, 0.56, 0.9])
    asg = assign_labels(labels, preds)
    assert time_loss(asg, pad_labels(labels, 3), preds) == pytest.approx(0.03, abs=1e-12)
    one = Predictions([[0.9]], [0.23])
    assert time_loss(assign_labels(labels[:1], one), pad_labels(labels[:1], 1), one) == pytest.approx(0.03, abs=1e-12)


def test_losses_reject_empty_ground_truth():
    preds = Predictions([[0.5]], [0.5])
    asg = assign_labels([], preds)
    with pytest.raises(ValueError):
        class_loss(asg, pad_labels([], 1), preds)
    with pytest.raises(ValueError):
        time_loss(asg, pad_labels([], 1), preds)


# ---------------------------------------------------------------- total loss

def test_total_is_class_plus_weighted_time():
    labels = [GroundTruthLabel(np.array([1.0, 0.0]), 16, 64)]
    out = layer([[0.8, 0.3], [0.2, 0.1]], [0.2, 0.7])
    for lam in (0.0, 1.0, 10.0):
        _, br, _ = total_loss([out], [labels], lam, matcher(lam))
        assert br.total == pytest.approx(br.class_loss + lam * br.time_loss, abs=1e-12)


def test_near_perfect_predictions_near_zero():
    labels = [GroundTruthLabel(np.array([1.0, 0.0]), 16, 64)]
    out = LayerOutput(Tensor([[[40.0, -40.0], [-40.0, -40.0]]]), Tensor([[logit(0.25), 0.0]]))
    loss, br, _ = total_loss([out], [labels], 10.0, matcher(10.0))
    assert 0 < loss.item() < 1e-12
    assert br.time_loss == pytest.approx(0.0, abs=1e-15)


def test_two_identical_layers_double_the_loss():
    labels = [GroundTruthLabel(np.array([1.0, 0.0]), 10, 64), GroundTruthLabel(np.array([0.0, 1.0]), 40, 64)]
    out = layer([[0.6, 0.3], [0.2, 0.7], [0.4, 0.4]], [0.1, 0.6, 0.9])
    one, _, _ = total_loss([out], [labels], 4.0, matcher(4.0))
    two, br, asgs = total_loss([out, out], [labels], 4.0, matcher(4.0))
    assert two.item() == 2 * one.item()
    assert len(br.per_layer) == 2 and len(asgs) == 2


def test_matches_value_level_definitions():
    rng = np.random.default_rng(3)
    labels = [GroundTruthLabel.one_hot(int(k), 3, int(f), 64) for k, f in ((0, 5), (2, 30), (1, 50))]
    scores, times = rng.uniform(0.05, 0.95, (6, 3)), rng.uniform(0.05, 0.95, 6)
    _, br, asgs = total_loss([layer(scores, times)], [labels], 2.0, matcher(2.0))
    preds = Predictions(scores, times)
    padded = pad_labels(labels, 6)
    assert br.class_loss == pytest.approx(class_loss(asgs[0][0], padded, preds), rel=1e-12)
    assert br.time_loss == pytest.approx(time_loss(asgs[0][0], padded, preds), rel=1e-12)


def test_batch_mean_and_sum():
    labels = [[GroundTruthLabel(np.array([1.0]), 5, 10)], [GroundTruthLabel(np.array([1.0]), 8, 10)]]
    out = LayerOutput(Tensor(np.array([[[0.3], [-1.0]], [[1.2], [0.1]]])), Tensor(np.array([[0.2, -0.4], [0.9, 1.5]])))
    mean, _, _ = total_loss([out], labels, 1.0, matcher(1.0))
    total, _, _ = total_loss([out], labels, 1.0, matcher(1.0), reduce="sum")
    assert total.item() == pytest.approx(2 * mean.item(), rel=1e-14)


def test_gradient_matches_finite_differences_with_fixed_assignment():
    rng = np.random.default_rng(4)
    labels = [GroundTruthLabel.one_hot(0, 2, 12, 64), GroundTruthLabel.one_hot(1, 2, 40, 64)]
    cls0, tim0 = rng.normal(size=(1, 5, 2)), rng.normal(size=(1, 5))
    _, _, asgs = total_loss([LayerOutput(Tensor(cls0), Tensor(tim0))], [labels], 10.0, matcher(10.0))
    frozen = asgs[0][0]

    def fn(c, t):
        loss, _, _ = total_loss([LayerOutput(c, t)], [labels], 10.0, lambda *_: frozen)
        return loss

    assert tn.grad_check(fn, [Tensor(cls0), Tensor(tim0)]) < 1e-4


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_labels=st.integers(1, 4), lam=st.floats(0, 20))
def test_loss_nonnegative(seed, n_labels, lam):
    rng = np.random.default_rng(seed)
    labels = [GroundTruthLabel(np.clip(rng.uniform(0, 1, 3), 0.01, 1), int(f), 32)
              for f in rng.integers(1, 33, n_labels)]
    out = LayerOutput(Tensor(rng.normal(0, 5, (1, 5, 3))), Tensor(rng.normal(0, 3, (1, 5))))
    loss, br, _ = total_loss([out], [labels], lam, matcher(lam))
    assert br.class_loss >= 0 and br.time_loss >= 0 and loss.item() > 0


def test_scaling_lambda_changes_only_time_term():
    labels = [GroundTruthLabel(np.array([1.0]), 5, 10)]
    out = layer([[0.6], [0.4]], [0.3, 0.8])
    fixed = assign_labels(labels, Predictions([[0.6], [0.4]], [0.3, 0.8]), 1.0)
    _, a, _ = total_loss([out], [labels], 1.0, lambda *_: fixed)
    _, b, _ = total_loss([out], [labels], 5.0, lambda *_: fixed)
    assert a.class_loss == b.class_loss and a.time_loss == b.time_loss
    assert b.total - a.total == pytest.approx(4.0 * a.time_loss, abs=1e-12)


def test_clip_without_labels_rejected():
    out = layer([[0.5]], [0.5])
    with pytest.raises(ValueError, match="no labels"):
        total_loss([out], [[]], 1.0, matcher(1.0))
