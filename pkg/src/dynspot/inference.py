"""Run a trained model over whole sequences and produce detections."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .matcher import Predictions
from .model import ModelParams, forward
from .spotting_eval import (
    DEFAULT_NMS_DECAY,
    DEFAULT_NMS_WINDOW,
    DEFAULT_THRESHOLD,
    Detection,
    aggregate_scores,
    extract_detections,
    overlap_fuse,
    soft_nms,
    window_starts,
)
from .synth import Clip


def frame_scores(params: ModelParams, features: np.ndarray, stride: int | None = None,
                 batch_size: int = 32) -> np.ndarray:
    """Frame-by-class scores for a whole sequence: windows of the model's
    length with 50% overlap (by default), aggregated per window, then averaged."""
    cfg = params.config
    T = cfg.window
    length = features.shape[0]
    starts = window_starts(length, T, stride)
    windows = []
    for s in starts:
        w = features[s:s + T]
        if w.shape[0] < T:
            w = np.vstack([w, np.zeros((T - w.shape[0], w.shape[1]))])
        windows.append(w)
    per_window = []
    for b in range(0, len(windows), batch_size):
        out = forward(np.stack(windows[b:b + batch_size]), params)[-1]
        scores, times = out.scores, out.times
        for k in range(scores.shape[0]):
            per_window.append(aggregate_scores(Predictions(scores[k], times[k]), T))
    return overlap_fuse(list(zip(starts, per_window)), length)


def detect(params: ModelParams, clips: Sequence[Clip], nms: bool = True,
           threshold: float = DEFAULT_THRESHOLD, nms_window: int = DEFAULT_NMS_WINDOW,
           nms_decay: float = DEFAULT_NMS_DECAY) -> tuple[list[Detection], dict[str, np.ndarray]]:
    """Detections for every clip plus the (pre-NMS) frame scores per clip."""
    dets: list[Detection] = []
    scores_by_clip = {}
    for clip in clips:
        scores = frame_scores(params, clip.features)
        scores_by_clip[clip.clip_id] = scores
        final = soft_nms(scores, nms_window, nms_decay) if nms else scores
        dets.extend(extract_detections(final, threshold, clip.clip_id))
    return dets, scores_by_clip


def ground_truth(clips: Sequence[Clip]) -> dict:
    """Precise labels keyed by clip id."""
    return {c.clip_id: (c.precise if c.precise is not None else c.labels) for c in clips}
