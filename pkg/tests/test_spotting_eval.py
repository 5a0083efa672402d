import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynspot.matcher import GroundTruthLabel, Predictions
from dynspot.spotting_eval import (
    Detection,
    EvalReport,
    aggregate_scores,
    average_precision,
    evaluate,
    extract_detections,
    frame_time,
    map_at,
    overlap_fuse,
    read_detections,
    read_report,
    score_gap,
    soft_nms,
    window_starts,
    write_detections,
    write_report,
)

from _support import brute_aggregate, greedy_flags, pr_curve_ap, random_instance


def gt(frame, k=0, n_classes=1, length=100):
    return GroundTruthLabel.one_hot(k, n_classes, frame, length)


# ---------------------------------------------------------------- rounding / aggregation

@pytest.mark.parametrize("t_hat,frame", [(1e-12, 1), (0.456, 46), (1 - 1e-12, 100), (0.005, 1), (0.995, 100)])
def test_frame_time(t_hat, frame):
    assert frame_time(t_hat, 100) == frame


def test_aggregate_elementwise_max():
    preds = Predictions([[0.9, 0.1], [0.3, 0.4], [0.2, 0.2]], [0.05, 0.05, 0.5])
    out = aggregate_scores(preds, 100)
    np.testing.assert_array_equal(out[4], [0.9, 0.4])
    np.testing.assert_array_equal(out[49], [0.2, 0.2])
    assert np.count_nonzero(out.sum(axis=1)) == 2


def test_aggregate_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        nq, nc, T = int(rng.integers(1, 20)), int(rng.integers(1, 4)), int(rng.integers(2, 40))
        s, t = rng.uniform(0, 1, (nq, nc)), rng.uniform(0, 1, nq)
        assert np.array_equal(aggregate_scores(Predictions(s, t), T), brute_aggregate(s, t, T))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_aggregate_permutation_and_duplication(seed):
    rng = np.random.default_rng(seed)
    s, t = rng.uniform(0, 1, (8, 3)), rng.uniform(0, 1, 8)
    base = aggregate_scores(Predictions(s, t), 30)
    p = rng.permutation(8)
    assert np.array_equal(aggregate_scores(Predictions(s[p], t[p]), 30), base)
    d = np.concatenate([np.arange(8), rng.integers(0, 8, 4)])
    assert np.array_equal(aggregate_scores(Predictions(s[d], t[d]), 30), base)


# ---------------------------------------------------------------- windows

def test_window_starts_cover_with_half_overlap():
    assert window_starts(128, 64) == [0, 32, 64]
    assert window_starts(64, 64) == [0]
    assert window_starts(100, 64) == [0, 32, 36]


def test_fuse_single_window_is_identity():
    w = np.random.default_rng(1).uniform(size=(10, 2))
    np.testing.assert_array_equal(overlap_fuse([(0, w)]), w)


def test_fuse_averages_overlap():
    a = np.zeros((4, 2))
    b = np.zeros((4, 2))
    a[2] = [0.4, 0.0]
    b[0] = [0.8, 0.2]
    out = overlap_fuse([(0, a), (2, b)])
    np.testing.assert_allclose(out[2], [0.6, 0.1], rtol=1e-15)
    assert out.shape == (6, 2)


def test_fuse_constant_and_uncovered():
    c = np.full((4, 1), 0.3)
    np.testing.assert_allclose(overlap_fuse([(0, c), (2, c), (4, c)]), 0.3, rtol=1e-15)
    with pytest.raises(ValueError, match="not covered"):
        overlap_fuse([(0, c), (6, c)])


def test_fuse_commutes_with_column_selection():
    rng = np.random.default_rng(2)
    wins = [(s, rng.uniform(size=(8, 3))) for s in (0, 4, 8)]
    full = overlap_fuse(wins)
    np.testing.assert_array_equal(overlap_fuse([(s, w[:, [1]]) for s, w in wins]), full[:, [1]])


# ---------------------------------------------------------------- soft NMS

def test_soft_nms_hand_column():
    out = soft_nms(np.array([[0.2], [0.9], [0.5]]), 3, 0.5)
    np.testing.assert_allclose(out[:, 0], [0.1, 0.9, 0.25], rtol=1e-15)


def test_soft_nms_window_one_identity():
    s = np.random.default_rng(3).uniform(size=(6, 2))
    np.testing.assert_array_equal(soft_nms(s, 1), s)


def test_soft_nms_monotone_column():
    col = np.arange(1, 8, dtype=float)[:, None] / 10
    out = soft_nms(col, 3, 0.5)[:, 0]
    np.testing.assert_allclose(out, np.r_[col[:-1, 0] * 0.5, col[-1, 0]], rtol=1e-15)


def test_soft_nms_rejects_even_window():
    with pytest.raises(ValueError, match="odd"):
        soft_nms(np.zeros((3, 1)), 2)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 4)), elements=st.floats(0, 1)),
       st.sampled_from([1, 3, 5]), st.floats(0.01, 1.0))
def test_soft_nms_never_increases_and_keeps_maxima(s, window, decay):
    out = soft_nms(s, window, decay)
    assert np.all(out <= s)
    half = window // 2
    for f in range(s.shape[0]):
        lo, hi = max(f - half, 0), min(f + half + 1, s.shape[0])
        is_max = s[f] >= s[lo:hi].max(axis=0)
        assert np.array_equal(out[f][is_max], s[f][is_max])


# ---------------------------------------------------------------- extraction

def test_extract_detections():
    assert extract_detections(np.zeros((5, 2))) == []
    s = np.zeros((5, 2))
    s[2, 1] = 0.5
    assert extract_detections(s, video_id="a") == [Detection("a", 3, 1, 0.5)]
    s[0, 0], s[1, 0] = 0.011, 0.009
    assert len(extract_detections(s, 0.01)) == 2


def test_extract_ordering():
    s = np.array([[0.3, 0.5], [0.5, 0.1]])
    assert [(d.frame, d.label) for d in extract_detections(s)] == [(1, 1), (2, 0), (1, 0), (2, 1)]


# ---------------------------------------------------------------- AP / mAP

def test_ap_tolerance_example():
    dets = [Detection("", 11, 0, 0.9), Detection("", 20, 0, 0.8)]
    assert average_precision(dets, [gt(10)], 0, 1) == 1.0
    assert average_precision(dets, [gt(10)], 0, 0) == 0.0


def test_perfect_detections():
    labels = [gt(5), gt(30), gt(70)]
    dets = [Detection("", g.frame, 0, 0.9) for g in labels]
    for delta in (0, 1, 3):
        assert average_precision(dets, labels, 0, delta) == 1.0


def test_map_is_mean_over_classes_with_ground_truth():
    labels = [gt(5, 0, 3), gt(30, 1, 3), gt(60, 1, 3)]
    dets = [Detection("", 5, 0, 0.9), Detection("", 40, 1, 0.8), Detection("", 30, 1, 0.7),
            Detection("", 10, 2, 0.95)]
    res = map_at(dets, labels, 1)
    assert res.per_class_ap == {0: 1.0, 1: 0.25}
    assert res.mAP == pytest.approx(0.625, abs=1e-15)
    assert res.true_positives == 2 and res.false_positives == 2


def test_map_without_ground_truth_rejected():
    with pytest.raises(ValueError, match="no class"):
        map_at([Detection("", 1, 0, 0.5)], {"v": []}, 1, n_classes=1)


def test_matches_exhaustive_pr_oracle():
    rng = np.random.default_rng(5)
    for _ in range(400):
        gt_frames, dets = random_instance(rng)
        labels = {"v": [gt(f) for f in gt_frames]}
        delta = int(rng.integers(0, 3))
        ranked = sorted(dets, key=lambda d: (-d.score, d.frame))
        flags = greedy_flags([d.frame for d in ranked], gt_frames, delta)
        expect = pr_curve_ap([d.score for d in ranked], flags, len(gt_frames))
        assert average_precision(dets, labels, 0, delta) == pytest.approx(expect, abs=1e-9)


def test_tolerance_monotonicity_on_random_instances():
    rng = np.random.default_rng(6)
    for _ in range(400):
        gt_frames, dets = random_instance(rng)
        labels = [gt(f) for f in gt_frames]
        rep = evaluate(dets, labels, (0, 1, 2, 3))
        m = [rep.mAP(d) for d in (0, 1, 2, 3)]
        assert m == sorted(m)


def test_multi_video_detections_match_within_video_only():
    labels = {"a": [gt(10)], "b": [gt(50)]}
    dets = [Detection("a", 50, 0, 0.9), Detection("b", 50, 0, 0.8)]
    res = map_at(dets, labels, 0)
    assert res.true_positives == 1
    assert res.mAP == pytest.approx(0.25)


def test_mean_offset_of_matches():
    res = map_at([Detection("", 12, 0, 0.9), Detection("", 29, 0, 0.8)], [gt(10), gt(30)], 2)
    assert res.mean_abs_offset == 1.5


# ---------------------------------------------------------------- score gap

def test_score_gap_values():
    s = np.zeros((10, 1))
    s[3:6, 0] = [0.1, 0.9, 0.05]
    assert score_gap(s, [gt(5, length=10)], 1) == {0: (pytest.approx(0.8), 1)}
    flat = np.full((10, 1), 0.5)
    assert score_gap(flat, [gt(5, length=10)], 1)[0][0] == 0.0


def test_score_gap_skips_crowded_events():
    s = np.random.default_rng(7).uniform(size=(20, 1))
    assert score_gap(s, [gt(5, length=20), gt(6, length=20)], 1) == {}


# ---------------------------------------------------------------- files

def test_detection_csv_round_trip(tmp_path):
    dets = [Detection("clip-1", 3, 0, 0.25), Detection("clip-2", 40, 2, 0.9)]
    write_detections(tmp_path / "d.csv", dets)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "video_id,frame,class,score"
    assert read_detections(tmp_path / "d.csv") == dets


def test_report_round_trip(tmp_path):
    rep = evaluate([Detection("", 5, 0, 0.9)], [gt(5), gt(20)], (1, 2), nms=False)
    write_report(tmp_path / "r.json", rep)
    back = read_report(tmp_path / "r.json")
    assert isinstance(back, EvalReport)
    assert back.to_dict() == rep.to_dict()


def test_nms_toggle_changes_report_only_through_detections():
    rng = np.random.default_rng(8)
    scores = rng.uniform(0, 1, (40, 2)) ** 4
    labels = [gt(10, 0, 2, 40), gt(25, 1, 2, 40)]
    for nms in (True, False):
        s = soft_nms(scores) if nms else scores
        dets = extract_detections(s)
        rep = evaluate(dets, labels, (1,), nms=nms)
        assert rep.to_dict()["results"] == evaluate(dets, labels, (1,), nms=not nms).to_dict()["results"]
