"""Turning query predictions into frame scores, and scoring detections.

Inference path: normalised times -> frames (half-up rounding, minimum 1),
per-frame elementwise max over the predictions landing on it, averaging of
overlapping windows, windowed soft NMS, thresholded detection extraction.
Evaluation: average precision with a frame tolerance ``delta``.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .matcher import GroundTruthLabel, Predictions, frame_of

REPORT_VERSION = 1
DETECTIONS_HEADER = ["video_id", "frame", "class", "score"]
DEFAULT_THRESHOLD = 0.01
DEFAULT_NMS_WINDOW = 3
DEFAULT_NMS_DECAY = 0.5


@dataclass(frozen=True, order=True)
class Detection:
    video_id: str
    frame: int
    label: int
    score: float


@dataclass
class ToleranceResult:
    delta: int
    mAP: float
    per_class_ap: dict[int, float]
    true_positives: int
    false_positives: int
    num_ground_truth: int
    mean_abs_offset: float | None


@dataclass
class EvalReport:
    results: dict[int, ToleranceResult] = field(default_factory=dict)
    nms: bool = True

    def mAP(self, delta: int) -> float:
        return self.results[delta].mAP

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "nms": self.nms,
            "deltas": sorted(self.results),
            "results": {
                str(d): {**asdict(r), "per_class_ap": {str(k): v for k, v in r.per_class_ap.items()}}
                for d, r in sorted(self.results.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> EvalReport:
        results = {}
        for key, r in data["results"].items():
            r = dict(r)
            r["per_class_ap"] = {int(k): v for k, v in r["per_class_ap"].items()}
            results[int(key)] = ToleranceResult(**r)
        return cls(results, data.get("nms", True))


# ---------------------------------------------------------------------------
# inference-time aggregation

def frame_time(t_hat: float, length: int) -> int:
    """Frame index of a normalised time: nearest integer (half-up), >= 1."""
    if length < 1:
        raise ValueError("length must be at least one frame")
    return frame_of(t_hat, length)


def aggregate_scores(preds: Predictions, length: int) -> np.ndarray:
    """``(length, N_c)`` frame scores: elementwise max of the score vectors
    whose predicted frame is that row; rows with no prediction are zero."""
    scores = np.zeros((length, preds.scores.shape[1]))
    frames = np.floor(preds.times * length + 0.5).astype(np.int64)
    frames = np.clip(frames, 1, length)
    np.maximum.at(scores, frames - 1, preds.scores)
    return scores


def window_starts(length: int, window: int, stride: int | None = None) -> list[int]:
    """0-based starts of windows covering ``length`` frames with the given
    stride (default: half a window); the last window is flush with the end."""
    stride = stride or max(window // 2, 1)
    if length <= window:
        return [0]
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def overlap_fuse(windows: Sequence[tuple[int, np.ndarray]], length: int | None = None) -> np.ndarray:
    """Average window frame scores into a full-length score matrix.

    ``windows`` holds ``(start, scores)`` with 0-based start frames.
    """
    if not windows:
        raise ValueError("no windows to fuse")
    if length is None:
        length = max(s + w.shape[0] for s, w in windows)
    nc = windows[0][1].shape[1]
    acc = np.zeros((length, nc))
    count = np.zeros(length)
    for start, w in windows:
        end = min(start + w.shape[0], length)
        acc[start:end] += w[: end - start]
        count[start:end] += 1
    if np.any(count == 0):
        missing = int(np.flatnonzero(count == 0)[0]) + 1
        raise ValueError(f"frame {missing} is not covered by any window")
    return acc / count[:, None]


def soft_nms(scores: np.ndarray, window: int = DEFAULT_NMS_WINDOW,
             decay: float = DEFAULT_NMS_DECAY) -> np.ndarray:
    """Per class, multiply by ``decay`` every frame that is not the maximum of
    its centred window. Window maxima (ties included) are kept."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"soft NMS window must be odd and positive, got {window}")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    s = np.asarray(scores, dtype=np.float64)
    if window == 1:
        return s.copy()
    half = window // 2
    padded = np.pad(s, ((half, half), (0, 0)), constant_values=-np.inf)
    local_max = np.max(
        np.stack([padded[k:k + s.shape[0]] for k in range(window)]), axis=0)
    return np.where(s >= local_max, s, s * decay)


def extract_detections(scores: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                       video_id: str = "") -> list[Detection]:
    """One detection per (frame, class) scoring above ``threshold``, ordered
    by descending score then (frame, class)."""
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    frames, classes = np.nonzero(scores > threshold)
    dets = [Detection(video_id, int(f) + 1, int(c), float(scores[f, c]))
            for f, c in zip(frames, classes)]
    dets.sort(key=lambda d: (-d.score, d.frame, d.label))
    return dets


# ---------------------------------------------------------------------------
# average precision

GroundTruth = Sequence[GroundTruthLabel] | Mapping[str, Sequence[GroundTruthLabel]]


def _by_video(gts: GroundTruth) -> dict[str, list[GroundTruthLabel]]:
    if isinstance(gts, Mapping):
        return {str(k): list(v) for k, v in gts.items()}
    return {"": list(gts)}


def _class_frames(labels: Sequence[GroundTruthLabel], k: int) -> list[int]:
    return [g.frame for g in labels if k < g.classes.size and g.classes[k] >= 0.5]


def _rank(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.video_id, d.frame, d.label))


def _match_class(dets: Sequence[Detection], gts: dict[str, list[GroundTruthLabel]], k: int, delta: int):
    """Rank-ordered class-k detections, their TP flags and signed offsets."""
    ranked = _rank([d for d in dets if d.label == k])
    tp = np.zeros(len(ranked), dtype=bool)
    offsets = np.zeros(len(ranked), dtype=np.int64)
    positions = defaultdict(list)
    for n, d in enumerate(ranked):
        positions[d.video_id].append(n)
    for vid, idx in positions.items():
        gt_frames = _class_frames(gts.get(vid, []), k)
        if not gt_frames:
            continue
        frames = np.array([ranked[n].frame for n in idx], dtype=np.int64)
        flags, which = _kernels.match_detections(frames, np.array(gt_frames, dtype=np.int64), int(delta))
        for n, f, w, fr in zip(idx, flags, which, frames):
            tp[n] = f
            if f:
                offsets[n] = fr - gt_frames[w]
    return ranked, tp, offsets


def _ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, tp.size + 1)
    return float(np.sum(precision[tp]) / n_gt)


def average_precision(dets: Sequence[Detection], gts: GroundTruth, k: int, delta: int) -> float:
    """All-point AP for class ``k``: sum of precision at each true positive,
    divided by the number of class-``k`` ground-truth events."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    by_video = _by_video(gts)
    n_gt = sum(len(_class_frames(v, k)) for v in by_video.values())
    if n_gt == 0:
        raise ValueError(f"class {k} has no ground truth; AP undefined")
    _, tp, _ = _match_class(dets, by_video, k, delta)
    return _ap_from_flags(tp, n_gt)


def _n_classes(dets: Sequence[Detection], by_video: dict[str, list[GroundTruthLabel]]) -> int:
    n = max((d.label + 1 for d in dets), default=0)
    for labels in by_video.values():
        for g in labels:
            n = max(n, g.classes.size)
    return n


def map_at(dets: Sequence[Detection], gts: GroundTruth, delta: int,
           n_classes: int | None = None) -> ToleranceResult:
    """mAP over classes having at least one ground-truth event."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    by_video = _by_video(gts)
    n_classes = n_classes or _n_classes(dets, by_video)
    aps: dict[int, float] = {}
    tps = fps = total_gt = 0
    abs_offsets = []
    for k in range(n_classes):
        n_gt = sum(len(_class_frames(v, k)) for v in by_video.values())
        ranked, tp, offsets = _match_class(dets, by_video, k, delta)
        tps += int(tp.sum())
        fps += int((~tp).sum())
        abs_offsets.extend(np.abs(offsets[tp]).tolist())
        if n_gt:
            total_gt += n_gt
            aps[k] = _ap_from_flags(tp, n_gt)
    if not aps:
        raise ValueError("no class has ground truth; mAP undefined")
    return ToleranceResult(
        delta=int(delta),
        mAP=float(np.mean(list(aps.values()))),
        per_class_ap=aps,
        true_positives=tps,
        false_positives=fps,
        num_ground_truth=total_gt,
        mean_abs_offset=float(np.mean(abs_offsets)) if abs_offsets else None,
    )


def evaluate(dets: Sequence[Detection], gts: GroundTruth, deltas: Sequence[int] = (1, 2),
             n_classes: int | None = None, nms: bool = True) -> EvalReport:
    return EvalReport({int(d): map_at(dets, gts, d, n_classes) for d in deltas}, nms=nms)


# ---------------------------------------------------------------------------
# diagnostics

def score_gap(scores: np.ndarray | Mapping[str, np.ndarray], gts: GroundTruth,
              delta: int) -> dict[int, tuple[float, int]]:
    """Mean (top-1 minus top-2) class score within ``+-delta`` frames of each
    isolated ground-truth event.

    An event is isolated when no other ground-truth event of any class lies
    within ``delta`` frames. Returns ``{class: (mean_gap, samples)}``.
    """
    if delta < 1:
        raise ValueError("delta must be at least 1")
    by_video = _by_video(gts)
    score_map = scores if isinstance(scores, Mapping) else {"": scores}
    gaps: dict[int, list[float]] = defaultdict(list)
    for vid, labels in by_video.items():
        s = np.asarray(score_map[vid])
        length = s.shape[0]
        for n, g in enumerate(labels):
            if any(abs(o.frame - g.frame) <= delta for m, o in enumerate(labels) if m != n):
                continue
            lo, hi = max(g.frame - delta, 1), min(g.frame + delta, length)
            if hi - lo + 1 < 2:
                continue
            for k in np.flatnonzero(g.classes >= 0.5):
                col = np.sort(s[lo - 1:hi, k])[::-1]
                gaps[int(k)].append(float(col[0] - col[1]))
    return {k: (float(np.mean(v)), len(v)) for k, v in sorted(gaps.items())}


# ---------------------------------------------------------------------------
# file formats

def write_detections(path, dets: Sequence[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTIONS_HEADER)
        for d in dets:
            w.writerow([d.video_id, d.frame, d.label, repr(d.score)])


def read_detections(path) -> list[Detection]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTIONS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DETECTIONS_HEADER)}")
        return [Detection(r["video_id"], int(r["frame"]), int(r["class"]), float(r["score"]))
                for r in reader]


def write_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
