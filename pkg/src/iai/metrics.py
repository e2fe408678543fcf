"""Video-level evaluation: tube IoU, COCO-style mAP/AR, and ID switches.

Matching is greedy by descending confidence.  Each prediction takes the
unmatched same-category ground-truth tube of highest IoU, provided the IoU
reaches the threshold.  AP is the 101-point interpolated area under the
precision-recall curve.
"""

from dataclasses import dataclass

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class EvalReport:
    mAP: float
    AP50: float
    AP75: float
    AR1: float
    AR10: float
    id_switches: int
    per_threshold: tuple  # ((threshold, AP), ...)

    def __post_init__(self):
        for name in ("mAP", "AP50", "AP75", "AR1", "AR10"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")
        if self.id_switches < 0:
            raise ValueError("id_switches must be >= 0")


def _masks(tube):
    return np.asarray(tube.masks, dtype=bool)


def tube_iou(pred, gt):
    a, b = _masks(pred), _masks(gt)
    if a.shape != b.shape:
        raise ValueError(f"tube geometry differs: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _by_confidence(tubes):
    return sorted(range(len(tubes)), key=lambda i: (-tubes[i].confidence, i))


def _greedy_match(preds, gts, ious, thresh):
    """Per prediction (in the given order): matched GT index or -1."""
    taken = set()
    out = []
    for i in range(len(preds)):
        best, best_iou = -1, thresh
        for j in range(len(gts)):
            if j in taken or ious[i][j] < best_iou:
                continue
            if best < 0 or ious[i][j] > best_iou:
                best, best_iou = j, ious[i][j]
        if best >= 0:
            taken.add(best)
        out.append(best)
    return out


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP from a confidence-ordered TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < tp.size, env[np.minimum(idx, tp.size - 1)], 0.0)
    return float(vals.mean())


def _category_pairs(preds, gts, category):
    """Per video: (same-category preds sorted by confidence, gts, IoU table)."""
    out = []
    for vp, vg in zip(preds, gts):
        p = [vp[i] for i in _by_confidence(vp) if vp[i].label == category]
        g = [t for t in vg if t.label == category]
        ious = [[tube_iou(a, b) for b in g] for a in p]
        out.append((p, g, ious))
    return out


def _category_scores(pairs, thresh, ks):
    """AP and recall@k for one category at one threshold."""
    n_gt = sum(len(g) for _, g, _ in pairs)
    ranked = []   # (confidence, video, rank, is_tp)
    hits = {k: 0 for k in ks}
    for v, (p, g, ious) in enumerate(pairs):
        match = _greedy_match(p, g, ious, thresh)
        for r, (tube, m) in enumerate(zip(p, match)):
            ranked.append((-tube.confidence, v, r, m >= 0))
        for k in ks:
            hits[k] += len(set(_greedy_match(p[:k], g, ious[:k], thresh)) - {-1})
    ranked.sort()
    ap = interpolated_ap([x[3] for x in ranked], n_gt)
    return ap, {k: hits[k] / n_gt for k in ks}


def id_switches(preds, gts, iou_thresh=0.5):
    """ID switches of one video.

    Per GT tube and frame, the match is the predicted tube whose mask has the
    highest IoU with the GT mask (ties to the lower ID), if that IoU reaches
    ``iou_thresh``.  A switch is a matched frame whose ID differs from the
    previous matched frame's; unmatched frames are skipped.
    """
    count = 0
    for g in gts:
        gm = _masks(g)
        prev = None
        for t in range(gm.shape[0]):
            if not gm[t].any():
                continue
            best, best_iou = None, iou_thresh
            for p in sorted(preds, key=lambda tb: tb.instance_id):
                pm = _masks(p)
                if pm.shape != gm.shape:
                    raise ValueError(f"tube geometry differs: {pm.shape} vs {gm.shape}")
                union = np.count_nonzero(pm[t] | gm[t])
                iou = np.count_nonzero(pm[t] & gm[t]) / union
                if iou >= best_iou and (best is None or iou > best_iou):
                    best, best_iou = p.instance_id, iou
            if best is None:
                continue
            if prev is not None and best != prev:
                count += 1
            prev = best
    return count


def video_map(preds, gts, thresholds=IOU_THRESHOLDS):
    """Evaluate per-video lists of predicted tubes against GT tubes.

    ``preds[v]`` and ``gts[v]`` belong to the same video.  Categories are
    those present in the ground truth; with no ground truth at all every
    score is 0.
    """
    preds, gts = [list(v) for v in preds], [list(v) for v in gts]
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction videos vs {len(gts)} GT videos")
    switches = sum(id_switches(p, g) for p, g in zip(preds, gts))
    categories = sorted({t.label for v in gts for t in v})
    if not categories:
        return EvalReport(0.0, 0.0, 0.0, 0.0, 0.0, switches,
                          tuple((th, 0.0) for th in thresholds))
    ap = np.zeros((len(categories), len(thresholds)))
    rec = {1: np.zeros_like(ap), 10: np.zeros_like(ap)}
    for c, cat in enumerate(categories):
        pairs = _category_pairs(preds, gts, cat)
        for j, th in enumerate(thresholds):
            ap[c, j], r = _category_scores(pairs, th, (1, 10))
            for k in rec:
                rec[k][c, j] = r[k]
    per = ap.mean(axis=0)
    table = tuple((th, float(a)) for th, a in zip(thresholds, per))
    lookup = dict(table)
    return EvalReport(
        mAP=float(ap.mean()),
        AP50=lookup.get(0.5, float("nan")),
        AP75=lookup.get(0.75, float("nan")),
        AR1=float(rec[1].mean()),
        AR10=float(rec[10].mean()),
        id_switches=switches,
        per_threshold=table,
    )
