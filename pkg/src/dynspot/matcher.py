"""Dynamic label assignment between ground-truth events and query predictions.

The ground-truth set is padded with no-event slots up to the number of
queries. Each (label, prediction) pair gets a cost mixing class agreement and
temporal distance, no-event rows cost nothing, and the Hungarian algorithm
picks the cheapest one-to-one assignment.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DEFAULT_LAMBDA_TIME = 10.0


@dataclass(frozen=True, eq=False)
class GroundTruthLabel:
    """An event: class vector (soft values allowed) at a 1-based frame of a
    sequence of ``length`` frames. Normalised time is ``frame / length``."""

    classes: np.ndarray
    frame: int
    length: int

    def __post_init__(self):
        c = np.asarray(self.classes, dtype=np.float64).reshape(-1)
        if c.size == 0 or np.any(c < 0) or np.any(c > 1) or not np.any(c > 0):
            raise ValueError(f"class vector must lie in [0,1] with a positive entry, got {c}")
        if not 1 <= self.frame <= self.length:
            raise ValueError(f"frame {self.frame} outside [1, {self.length}]")
        c.flags.writeable = False
        object.__setattr__(self, "classes", c)

    @property
    def time(self) -> float:
        return self.frame / self.length

    def moved(self, frame: int) -> GroundTruthLabel:
        return GroundTruthLabel(self.classes, frame, self.length)

    @classmethod
    def one_hot(cls, class_index: int, n_classes: int, frame: int, length: int):
        c = np.zeros(n_classes)
        c[class_index] = 1.0
        return cls(c, frame, length)


@dataclass(frozen=True)
class Predictions:
    """Per-query class scores ``(N_q, N_c)`` and normalised times ``(N_q,)``."""

    scores: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if s.shape[0] != t.shape[0]:
            raise ValueError(f"{s.shape[0]} score rows vs {t.shape[0]} times")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return self.times.shape[0]


@dataclass
class PaddedGroundTruthSet:
    """``slots[i]`` is a label, or ``None`` for a no-event slot."""

    slots: list[GroundTruthLabel | None]
    phi_indices: tuple[int, ...]

    @property
    def n_real(self) -> int:
        return len(self.slots) - len(self.phi_indices)


@dataclass
class CostMatrix:
    values: np.ndarray
    lambda_time: float
    class_costs: np.ndarray | None = None
    time_costs: np.ndarray | None = None


@dataclass
class MatchedPair:
    gt_index: int
    pred_index: int
    class_cost: float
    time_cost: float
    frame_offset: int


@dataclass
class Assignment:
    """``permutation[i]`` is the prediction assigned to padded slot ``i``."""

    permutation: np.ndarray
    total_cost: float
    pairs: list[MatchedPair] = field(default_factory=list)

    def prediction_for(self, slot: int) -> int:
        return int(self.permutation[slot])


def pad_labels(labels: Sequence[GroundTruthLabel], n_queries: int) -> PaddedGroundTruthSet:
    if len(labels) > n_queries:
        raise ValueError(f"cannot pad {len(labels)} labels into {n_queries} query slots")
    slots: list[GroundTruthLabel | None] = list(labels) + [None] * (n_queries - len(labels))
    return PaddedGroundTruthSet(slots, tuple(range(len(labels), n_queries)))


def class_cost(c, c_hat) -> float:
    """-(c.ĉ + (1-c).(1-ĉ)) / N_c; lies in [-1, 0]."""
    c = np.asarray(c, dtype=np.float64)
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if c.shape != c_hat.shape:
        raise ValueError(f"class vector length {c.shape} != score length {c_hat.shape}")
    return -float(c @ c_hat + (1.0 - c) @ (1.0 - c_hat)) / c.size


def time_cost(t: float, t_hat: float) -> float:
    if not (0.0 <= t <= 1.0 and 0.0 <= t_hat <= 1.0):
        raise ValueError(f"normalised times must lie in [0,1], got {t} and {t_hat}")
    return abs(t - t_hat)


def build_cost_matrix(
    padded: PaddedGroundTruthSet,
    preds: Predictions,
    lambda_time: float = DEFAULT_LAMBDA_TIME,
    use_class: bool = True,
) -> CostMatrix:
    """Square cost matrix, rows = padded ground truth, columns = predictions.

    With ``use_class=False`` the class term is dropped (time-only matching).
    """
    nq = len(padded.slots)
    if len(preds) != nq:
        raise ValueError(f"{len(preds)} predictions for {nq} padded slots")
    if lambda_time < 0:
        raise ValueError("lambda_time must be non-negative")
    nc = preds.scores.shape[1]
    values = np.zeros((nq, nq))
    cls = np.zeros((nq, nq))
    tim = np.zeros((nq, nq))
    real = [i for i, s in enumerate(padded.slots) if s is not None]
    if real:
        C = np.stack([padded.slots[i].classes for i in real])
        if C.shape[1] != nc:
            raise ValueError(f"labels have {C.shape[1]} classes, predictions {nc}")
        t = np.array([padded.slots[i].time for i in real])
        S = preds.scores
        cls_real = -(C @ S.T + (1.0 - C) @ (1.0 - S).T) / nc
        tim_real = np.abs(t[:, None] - preds.times[None, :])
        cls[real] = cls_real
        tim[real] = tim_real
        values[real] = (cls_real if use_class else 0.0) + lambda_time * tim_real
    return CostMatrix(values, float(lambda_time), cls, tim)


def hungarian_solve(matrix: CostMatrix | np.ndarray) -> Assignment:
    """Globally optimal one-to-one assignment; ties resolve to the
    lexicographically smallest permutation."""
    values = matrix.values if isinstance(matrix, CostMatrix) else np.asarray(matrix, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"cost matrix must be square, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("cost matrix contains non-finite entries")
    perm = _kernels.hungarian(values)
    total = math.fsum(values[i, perm[i]] for i in range(len(perm)))
    return Assignment(perm, total)


def _with_pairs(assignment: Assignment, padded: PaddedGroundTruthSet, preds: Predictions,
                cost: CostMatrix) -> Assignment:
    pairs = []
    for i, label in enumerate(padded.slots):
        if label is None:
            continue
        j = int(assignment.permutation[i])
        frame = frame_of(preds.times[j], label.length)
        pairs.append(MatchedPair(i, j, float(cost.class_costs[i, j]),
                                 float(cost.time_costs[i, j]), frame - label.frame))
    assignment.pairs = pairs
    return assignment


def frame_of(t_hat: float, length: int) -> int:
    """Nearest frame (half-up), at least 1 and at most ``length``."""
    return min(max(int(math.floor(t_hat * length + 0.5)), 1), length)


def assign_labels(
    labels: Sequence[GroundTruthLabel],
    preds: Predictions,
    lambda_time: float = DEFAULT_LAMBDA_TIME,
    use_class: bool = True,
) -> Assignment:
    """Pad, build costs, solve. Matched real pairs carry their frame offset
    ``round(t̂ T) - frame``."""
    padded = pad_labels(labels, len(preds))
    cost = build_cost_matrix(padded, preds, lambda_time, use_class=use_class)
    return _with_pairs(hungarian_solve(cost), padded, preds, cost)


def nearest_time_assignment(labels: Sequence[GroundTruthLabel], preds: Predictions) -> Assignment:
    """Static binding: labels (in frame order) each take the unused query whose
    predicted time is closest to the tagged time; class scores are ignored."""
    padded = pad_labels(labels, len(preds))
    cost = build_cost_matrix(padded, preds, 1.0, use_class=False)
    nq = len(preds)
    perm = np.full(nq, -1, dtype=np.int64)
    free = np.ones(nq, dtype=bool)
    order = sorted(range(len(labels)), key=lambda i: (labels[i].frame, i))
    for i in order:
        d = np.where(free, np.abs(preds.times - labels[i].time), np.inf)
        j = int(np.argmin(d))
        perm[i] = j
        free[j] = False
    perm[len(labels):] = np.flatnonzero(free)
    total = math.fsum(cost.values[i, perm[i]] for i in range(nq))
    return _with_pairs(Assignment(perm, total), padded, preds, cost)
