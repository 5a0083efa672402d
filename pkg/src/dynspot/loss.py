"""Set-prediction training objective.

Classification uses a soft-target focal term ``(c - ĉ)^2 * BCE(c, ĉ)`` per
class, summed over classes and over all query slots (no-event slots use an
all-zero target). Time uses L1 on matched real labels. Both are normalised by
the number of real labels, combined as ``class + lambda_time * time`` and
summed over decoder layers, each layer with its own assignment.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .matcher import Assignment, GroundTruthLabel, PaddedGroundTruthSet, Predictions
from .model import LayerOutput
from .tensor import Tensor


@dataclass
class LossBreakdown:
    class_loss: float
    time_loss: float
    total: float
    per_layer: list[LossBreakdown] = field(default_factory=list)


# ---------------------------------------------------------------------------
# value-level definitions (probabilities in, floats out)

def soft_focal_term(target, predicted) -> np.ndarray:
    """Per-class ``(c - ĉ)^2 * (-c ln ĉ - (1-c) ln(1-ĉ))``."""
    c = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if c.shape != p.shape:
        raise ValueError(f"target {c.shape} and prediction {p.shape} differ in length")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("predicted scores must lie strictly inside (0, 1); missing sigmoid?")
    return (c - p) ** 2 * (-c * np.log(p) - (1.0 - c) * np.log1p(-p))


def _targets_for(slot: GroundTruthLabel | None, n_classes: int) -> np.ndarray:
    return np.zeros(n_classes) if slot is None else slot.classes


def class_loss(assignment: Assignment, padded: PaddedGroundTruthSet, preds: Predictions) -> float:
    n_g = padded.n_real
    if n_g == 0:
        raise ValueError("class loss is undefined without ground-truth labels")
    nc = preds.scores.shape[1]
    total = 0.0
    for i, slot in enumerate(padded.slots):
        j = assignment.prediction_for(i)
        total += soft_focal_term(_targets_for(slot, nc), preds.scores[j]).sum()
    return total / n_g


def time_loss(assignment: Assignment, padded: PaddedGroundTruthSet, preds: Predictions) -> float:
    n_g = padded.n_real
    if n_g == 0:
        raise ValueError("time loss is undefined without ground-truth labels")
    total = 0.0
    for i, slot in enumerate(padded.slots):
        if slot is not None:
            total += abs(slot.time - preds.times[assignment.prediction_for(i)])
    return total / n_g


# ---------------------------------------------------------------------------
# differentiable batch objective

@dataclass
class MatchTargets:
    """Targets aligned with predictions rather than with label slots.

    ``classes[b, j]`` is the class target of prediction ``j`` of clip ``b``
    (zeros when it is matched to a no-event slot); ``times``/``mask`` carry the
    time target of predictions matched to real labels. ``weights[b]`` is
    ``1 / N_g`` of clip ``b``.
    """

    classes: np.ndarray
    times: np.ndarray
    mask: np.ndarray
    weights: np.ndarray


def build_targets(assignments: Sequence[Assignment], label_sets: Sequence[Sequence[GroundTruthLabel]],
                  n_queries: int, n_classes: int) -> MatchTargets:
    B = len(label_sets)
    classes = np.zeros((B, n_queries, n_classes))
    times = np.zeros((B, n_queries))
    mask = np.zeros((B, n_queries))
    weights = np.zeros(B)
    for b, (asg, labels) in enumerate(zip(assignments, label_sets)):
        if not labels:
            raise ValueError(f"clip {b} has no labels; such clips must be skipped")
        weights[b] = 1.0 / len(labels)
        for i, label in enumerate(labels):
            j = asg.prediction_for(i)
            classes[b, j] = label.classes
            times[b, j] = label.time
            mask[b, j] = 1.0
    return MatchTargets(classes, times, mask, weights)


def focal_from_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise soft-target focal term computed from logits.

    BCE is written with softplus so saturated logits stay finite.
    """
    c = Tensor(target)
    p = tn.sigmoid(logits)
    diff = tn.sub(c, p)
    bce = tn.add(tn.mul(c, tn.softplus(tn.scale(logits, -1.0))),
                 tn.mul(Tensor(1.0 - target), tn.softplus(logits)))
    return tn.mul(tn.mul(diff, diff), bce)


def layer_loss(out: LayerOutput, targets: MatchTargets, lambda_time: float):
    """Per-clip class/time losses for one layer; returns tensors summed over
    the batch (each clip normalised by its own label count)."""
    w = Tensor(targets.weights)
    per_clip_cls = tn.sum(tn.sum(focal_from_logits(out.class_logits, targets.classes), axis=2), axis=1)
    cls = tn.sum(tn.mul(per_clip_cls, w))
    err = tn.absolute(tn.sub(tn.sigmoid(out.time_logits), Tensor(targets.times)))
    per_clip_time = tn.sum(tn.mul(err, Tensor(targets.mask)), axis=1)
    tim = tn.sum(tn.mul(per_clip_time, w))
    return cls, tim, tn.add(cls, tn.scale(tim, lambda_time))


Matcher = Callable[[Sequence[GroundTruthLabel], Predictions], Assignment]


def total_loss(
    outputs: Sequence[LayerOutput],
    label_sets: Sequence[Sequence[GroundTruthLabel]],
    lambda_time: float,
    matcher: Matcher,
    reduce: str = "mean",
) -> tuple[Tensor, LossBreakdown, list[list[Assignment]]]:
    """Sum over decoder layers of ``class + lambda_time * time``.

    ``matcher(labels, predictions)`` is called per layer and clip on detached
    predictions; gradients do not flow through the assignment. With
    ``reduce="mean"`` the batch is averaged, with ``"sum"`` summed.
    """
    if not outputs:
        raise ValueError("need at least one decoder layer")
    B = len(label_sets)
    factor = 1.0 / B if reduce == "mean" else 1.0
    total = None
    per_layer = []
    all_assignments = []
    for out in outputs:
        scores, times = out.scores, out.times
        nq, nc = scores.shape[1], scores.shape[2]
        asgs = [matcher(labels, Predictions(scores[b], times[b])) for b, labels in enumerate(label_sets)]
        targets = build_targets(asgs, label_sets, nq, nc)
        cls, tim, layer_total = layer_loss(out, targets, lambda_time)
        layer_total = tn.scale(layer_total, factor)
        total = layer_total if total is None else tn.add(total, layer_total)
        per_layer.append(LossBreakdown(cls.item() * factor, tim.item() * factor, layer_total.item()))
        all_assignments.append(asgs)
    breakdown = LossBreakdown(
        sum(p.class_loss for p in per_layer),
        sum(p.time_loss for p in per_layer),
        total.item(),
        per_layer,
    )
    return total, breakdown, all_assignments

