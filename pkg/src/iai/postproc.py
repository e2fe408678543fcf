"""Detection scoring and class-agnostic mask NMS."""

from dataclasses import dataclass

import numpy as np


@dataclass
class Detection:
    mask: np.ndarray          # flattened binary HW mask
    box: tuple                # (x0, y0, x1, y1), inclusive pixel coordinates
    class_probs: np.ndarray
    id_probs: np.ndarray      # over N + 1 ID slots, background last
    score: float = 1.0

    def validate(self):
        for name in ("class_probs", "id_probs"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
                raise ValueError(f"{name} is not a probability vector")
        x0, y0, x1, y1 = self.box
        if x0 > x1 or y0 > y1:
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        m = np.asarray(self.mask)
        if m.ndim != 1 or not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be a flat binary vector")


def mask_box(mask, width):
    """Tight inclusive box of a flattened mask (zeros box for empty masks)."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return (0, 0, 0, 0)
    ys, xs = np.divmod(idx, width)
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def combined_score(d):
    """Mean of the best class probability and the best non-background ID
    probability (the new-instance slot counts as non-background)."""
    return (float(np.max(d.class_probs)) + float(np.max(d.id_probs[:-1]))) / 2.0


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def class_agnostic_nms(dets, iou_thresh=0.5, scores=None):
    """Greedy mask NMS that ignores class labels.

    Returns indices into ``dets`` in the order they were kept.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if scores is None:
        scores = [combined_score(d) for d in dets]
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(mask_iou(dets[i].mask, dets[j].mask) <= iou_thresh for j in kept):
            kept.append(i)
    return kept
