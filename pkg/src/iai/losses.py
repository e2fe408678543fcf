"""ID losses (focal and cross-entropy), their logit gradients, and
per-sequence ground-truth ID labels."""

from dataclasses import dataclass

import numpy as np

P_MIN = 1e-12


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    lam: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if not (self.lam >= 0.0 and np.isfinite(self.lam)):
            raise ValueError("lambda must be finite and >= 0")


CE_PARAMS = FocalParams(alpha=1.0, lam=0.0)


def _target_prob(probs, target):
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < len(probs):
        raise ValueError(f"target {target} outside [0, {len(probs) - 1}]")
    return max(float(probs[target]), P_MIN)


def focal_id_loss(probs, target, fp=FocalParams()):
    p = _target_prob(probs, target)
    return fp.alpha * (1.0 - p) ** fp.lam * -np.log(p)


def ce_id_loss(probs, target):
    p = _target_prob(probs, target)
    return -np.log(p)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def focal_id_grad(logits, target, fp=FocalParams()):
    """Gradient of ``focal_id_loss(softmax(logits), target)`` w.r.t. logits.

    With ``p = p_target``, ``dL/dz_j = g * (1[j == t] - p_j)`` where
    ``g = alpha * (lam * (1-p)^(lam-1) * p * ln p - (1-p)^lam)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < len(logits):
        raise ValueError(f"target {target} outside [0, {len(logits) - 1}]")
    probs = softmax(logits)
    z = logits - logits.max()
    log_p = z[target] - np.log(np.exp(z).sum())
    p = probs[target]
    q = 1.0 - p
    if fp.lam == 0.0:
        g = -fp.alpha
    elif q <= 0.0:
        g = 0.0
    else:
        g = fp.alpha * (fp.lam * q ** (fp.lam - 1.0) * p * log_p - q ** fp.lam)
    onehot = np.zeros_like(probs)
    onehot[target] = 1.0
    return g * (onehot - probs)


def total_loss(cls_loss, id_loss):
    """Classification + ID loss.  Box and mask terms are not modelled here:
    masks come from the reference detector, so they contribute nothing."""
    return cls_loss + id_loss


@dataclass(frozen=True)
class SequenceLabels:
    n_ids: int
    ids: dict       # annotation identity -> instance ID
    frames: list    # per frame: {annotation identity: label}

    def label_sequence(self, identity):
        """Per-frame labels for one instance, ``None`` where it is absent."""
        return [f.get(identity) for f in self.frames]


def assign_gt_ids(annotations, n_ids):
    """Assign IDs 0, 1, ... in order of first appearance.

    ``annotations`` is a list over frames of the instance identities present
    in that frame, in annotation order.  An instance is labelled with the
    new-instance class ``n_ids - 1`` in the frame where it first appears and
    with its own ID afterwards.
    """
    ids = {}
    frames = []
    for present in annotations:
        labels = {}
        for ident in present:
            if ident not in ids:
                if len(ids) >= n_ids - 1:
                    raise ValueError(
                        f"sequence has more than {n_ids - 1} instances; capacity N-1 = {n_ids - 1}")
                ids[ident] = len(ids)
                labels[ident] = n_ids - 1
            else:
                labels[ident] = ids[ident]
        frames.append(labels)
    return SequenceLabels(n_ids, ids, frames)
