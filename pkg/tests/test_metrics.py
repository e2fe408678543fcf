import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iai import metrics
from iai.tracker import MaskTube


def tube(iid, label, conf, frames):
    return MaskTube(iid, label, conf, np.array(frames, dtype=bool))


def span(hw, lo, hi):
    m = np.zeros(hw, dtype=bool)
    m[lo:hi] = True
    return m


def test_tube_iou_examples():
    a = tube(0, 0, 1.0, [span(8, 0, 4), span(8, 2, 6)])
    assert metrics.tube_iou(a, a) == 1.0
    b = tube(1, 0, 1.0, [span(8, 0, 0), span(8, 0, 4)])
    c = tube(2, 0, 1.0, [span(8, 0, 4), span(8, 0, 0)])
    assert metrics.tube_iou(b, c) == 0.0
    gt = tube(0, 0, 1.0, [span(8, 0, 3)] * 4)
    pred = tube(0, 0, 1.0, [span(8, 0, 3)] * 2 + [span(8, 0, 0)] * 2)
    assert metrics.tube_iou(pred, gt) == 0.5
    empty = tube(0, 0, 1.0, [span(8, 0, 0)] * 2)
    assert metrics.tube_iou(empty, empty) == 0.0
    with pytest.raises(ValueError):
        metrics.tube_iou(a, gt)


def test_single_perfect_prediction():
    g = tube(0, 1, 1.0, [span(10, 2, 6)])
    r = metrics.video_map([[g]], [[g]])
    assert r.mAP == 1.0 and r.AP50 == 1.0 and r.AR1 == 1.0 and r.id_switches == 0


def test_wrong_class_scores_zero():
    g = tube(0, 1, 1.0, [span(10, 2, 6)])
    p = tube(0, 2, 1.0, [span(10, 2, 6)])
    r = metrics.video_map([[p]], [[g]])
    assert r.mAP == 0.0 and r.AR10 == 0.0


def test_hand_traced_pr_curve():
    hw = 10
    gt_a = tube(0, 0, 1.0, [span(hw, 0, 4)] * 2)
    gt_b = tube(1, 0, 1.0, [span(hw, 6, 10)] * 2)
    p1 = tube(0, 0, 0.9, [span(hw, 0, 4)] * 2)                 # IoU 1 with A
    p2 = tube(1, 0, 0.8, [span(hw, 4, 6)] * 2)                 # IoU 0 with both
    p3 = tube(2, 0, 0.7, [span(hw, 6, 10), span(hw, 0, 0)])    # IoU 4/8 with B
    r = metrics.video_map([[p3, p1, p2]], [[gt_a, gt_b]])
    # threshold 0.50: TP FP TP -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1;
    # interpolated precision is 1 for the 51 recall points <= 0.5, 2/3 for the other 50
    ap50 = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101
    # stricter thresholds: TP FP FP -> recall stops at 1/2
    ap_strict = 51 / 101
    assert abs(r.AP50 - ap50) < 1e-12
    assert abs(r.AP75 - ap_strict) < 1e-12
    assert abs(r.mAP - (ap50 + 9 * ap_strict) / 10) < 1e-12
    assert abs(r.AR1 - 0.5) < 1e-12
    assert abs(r.AR10 - (1.0 + 9 * 0.5) / 10) < 1e-12


def test_interpolated_ap_basics():
    assert metrics.interpolated_ap([], 3) == 0.0
    assert metrics.interpolated_ap([True], 1) == 1.0
    with pytest.raises(ValueError):
        metrics.interpolated_ap([True], 0)


def test_empty_predictions():
    g = tube(0, 0, 1.0, [span(6, 0, 3)])
    r = metrics.video_map([[]], [[g]])
    assert (r.mAP, r.AR1, r.AR10) == (0.0, 0.0, 0.0)


def test_id_switch_examples():
    hw, t = 10, 5
    g = tube(0, 0, 1.0, [span(hw, 0, 4)] * t)
    assert metrics.id_switches([tube(3, 0, 1.0, [span(hw, 0, 4)] * t)], [g]) == 0
    a = tube(0, 0, 1.0, [span(hw, 0, 4)] * 3 + [span(hw, 0, 0)] * 2)
    b = tube(4, 0, 1.0, [span(hw, 0, 0)] * 3 + [span(hw, 0, 4)] * 2)
    assert metrics.id_switches([a, b], [g]) == 1
    gap = tube(0, 0, 1.0, [span(hw, 0, 4)] * 2 + [span(hw, 0, 0)] + [span(hw, 0, 4)] * 2)
    assert metrics.id_switches([gap], [g]) == 0


def _random_video(rng, hw=12, frames=3, n=3, categories=2):
    tubes = []
    for k in range(n):
        masks = rng.random((frames, hw)) < 0.4
        tubes.append(MaskTube(k, int(rng.integers(categories)), 1.0, masks))
    return tubes


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_self_evaluation_is_perfect(seed):
    rng = np.random.default_rng(seed)
    videos = []
    for _ in range(int(rng.integers(1, 4))):
        # one tube per category so AR@1 can reach 1
        tubes = _random_video(rng, n=2)
        tubes[1] = MaskTube(1, 1 - tubes[0].label, 1.0, tubes[1].masks)
        tubes = [t for t in tubes if t.masks.any()]
        videos.append(tubes)
    if not any(videos):
        return
    r = metrics.video_map(videos, videos)
    assert (r.mAP, r.AP50, r.AP75, r.AR1, r.AR10, r.id_switches) == (1.0, 1.0, 1.0, 1.0, 1.0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_removing_correct_prediction_never_helps(seed):
    rng = np.random.default_rng(seed)
    gts = _random_video(rng, n=4)
    preds = [MaskTube(k, g.label, float(rng.uniform(0.1, 1.0)), g.masks)
             for k, g in enumerate(gts)]
    preds += [MaskTube(10 + k, t.label, float(rng.uniform(0.1, 1.0)), t.masks)
              for k, t in enumerate(_random_video(rng, n=2))]
    full = metrics.video_map([preds], [gts]).mAP
    drop = int(rng.integers(len(gts)))
    assert metrics.video_map([preds[:drop] + preds[drop + 1:]], [gts]).mAP <= full


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_low_confidence_miss_never_hurts_ap50(seed):
    rng = np.random.default_rng(seed)
    gts = _random_video(rng, n=3)
    preds = [MaskTube(k, t.label, float(rng.uniform(0.2, 1.0)), t.masks)
             for k, t in enumerate(_random_video(rng, n=3))]
    base = metrics.video_map([preds], [gts]).AP50
    union = np.any([g.masks for g in gts], axis=0)
    extra = MaskTube(99, gts[0].label, 0.01, ~union)
    assert metrics.video_map([preds + [extra]], [gts]).AP50 >= base


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_tube_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_video(rng, n=2)
    v = metrics.tube_iou(a, b)
    assert v == metrics.tube_iou(b, a) and 0.0 <= v <= 1.0


def test_report_validation():
    with pytest.raises(ValueError):
        metrics.EvalReport(1.5, 0, 0, 0, 0, 0, ())
    with pytest.raises(ValueError):
        metrics.EvalReport(0, 0, 0, 0, 0, -1, ())
