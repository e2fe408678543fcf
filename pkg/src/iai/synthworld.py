"""Seeded synthetic videos and two reference detectors.

Videos contain axis-aligned rectangles and discs moving on straight lines,
painted back to front so nearer instances hide farther ones.  Every pixel
carries a feature vector: its owner's unit-norm signature plus Gaussian
noise (background has its own signature).  Signatures are orthonormal
whenever the channel count allows it.

The reference detectors both emit ground-truth masks and classes.  They
differ in how ID probabilities are produced: :func:`oracle_detector` scores
the pooled tracking feature against memory prototypes with a fixed rule,
:class:`ToyIdHead` learns the mapping from per-pixel prototype similarities.
"""

from dataclasses import dataclass, field

import numpy as np

from . import association, identity, losses, postproc
from .tracker import FrameContext

MIN_VISIBLE = 4


@dataclass(frozen=True)
class WorldConfig:
    height: int = 64
    width: int = 64
    frames: int = 20
    max_instances: int = 3
    categories: int = 4
    occlusion_rate: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0
    channels: int = 16
    min_instances: int = None   # defaults to max_instances
    turnover: float = 0.2       # chance an instance enters late / leaves early
    n_ids: int = 20

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("frame dimensions must be at least 8")
        if self.frames < 1:
            raise ValueError("a video needs at least one frame")
        lo = self.max_instances if self.min_instances is None else self.min_instances
        if not 0 <= lo <= self.max_instances:
            raise ValueError("need 0 <= min_instances <= max_instances")
        if self.max_instances > self.n_ids - 1:
            raise ValueError(
                f"{self.max_instances} instances exceed the ID capacity N-1 = {self.n_ids - 1}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.categories < 1:
            raise ValueError("need at least one category")


@dataclass(frozen=True)
class Track:
    """Trajectory of one instance; ``center(t) = (cy, cx) + t * (vy, vx)``."""

    shape: str          # "rect" or "disc"
    half_h: float
    half_w: float
    cy: float
    cx: float
    vy: float
    vx: float
    depth: int          # smaller is nearer
    start: int          # first frame it may appear
    stop: int           # first frame after it has left
    category: int

    def center(self, t):
        return self.cy + t * self.vy, self.cx + t * self.vx


def rasterize(track, t, height, width):
    """Full (unoccluded) in-bounds shape of ``track`` at frame ``t``."""
    if not track.start <= t < track.stop:
        return np.zeros((height, width), dtype=bool)
    cy, cx = track.center(t)
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    if track.shape == "rect":
        return (np.abs(ys - cy) <= track.half_h) & (np.abs(xs - cx) <= track.half_w)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= track.half_w ** 2


def compose(tracks, n_frames, height, width):
    """Per-frame label maps (``-1`` background) painted far to near."""
    labels = np.full((n_frames, height * width), -1, dtype=np.int64)
    order = sorted(range(len(tracks)), key=lambda k: -tracks[k].depth)
    for t in range(n_frames):
        lab = labels[t]
        for k in order:
            lab[rasterize(tracks[k], t, height, width).ravel()] = k
    return labels


@dataclass
class GtFrame:
    identities: list
    masks: np.ndarray       # (k, HW) bool, visible masks
    classes: list


@dataclass
class GroundTruth:
    height: int
    width: int
    categories: int
    labels: np.ndarray              # (T, HW): instance identity or -1
    classes: list                   # category per identity
    features: list = None           # T arrays of HW x C
    tracks: list = field(default_factory=list)
    signatures: np.ndarray = None

    @property
    def n_frames(self):
        return self.labels.shape[0]

    @property
    def n_instances(self):
        return len(self.classes)

    def frame(self, t):
        lab = self.labels[t]
        ids = [k for k in range(self.n_instances) if np.any(lab == k)]
        masks = np.zeros((len(ids), lab.size), dtype=bool)
        for row, k in enumerate(ids):
            masks[row] = lab == k
        return GtFrame(ids, masks, [self.classes[k] for k in ids])

    def window(self, frames):
        """Sub-video made of the given frame indices."""
        frames = list(frames)
        feats = None if self.features is None else [self.features[t] for t in frames]
        return GroundTruth(self.height, self.width, self.categories, self.labels[frames],
                           self.classes, feats, self.tracks, self.signatures)


def make_signatures(count, channels, rng):
    """``count`` unit vectors, orthonormal when ``count <= channels``."""
    g = rng.standard_normal((channels, max(count, channels)))
    if count <= channels:
        q, _ = np.linalg.qr(g)
        return q.T[:count].copy()
    g = rng.standard_normal((count, channels))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def render_features(labels, n_instances, channels, sigma, seed):
    """Feature maps for label maps: signature of the owner plus noise.

    Row ``n_instances`` of the returned signatures is the background one.
    """
    sig_seq, noise_seq = np.random.SeedSequence([seed, 0x5EED]).spawn(2)
    sigs = make_signatures(n_instances + 1, channels, np.random.default_rng(sig_seq))
    noise_rng = np.random.default_rng(noise_seq)
    feats = []
    for lab in labels:
        owner = np.where(lab < 0, n_instances, lab)
        f = sigs[owner] + sigma * noise_rng.standard_normal((len(lab), channels))
        feats.append(f)
    return feats, sigs


def _sample_track(rng, cfg, depth):
    h, w, t_len = cfg.height, cfg.width, cfg.frames
    lo, hi = max(2.0, min(h, w) / 16), max(3.0, min(h, w) / 8)
    shape = "rect" if rng.random() < 0.5 else "disc"
    half_h = rng.uniform(lo, hi)
    half_w = half_h if shape == "disc" else rng.uniform(lo, hi)
    start, stop = 0, t_len
    if t_len > 2 and rng.random() < cfg.turnover:
        start = int(rng.integers(1, max(2, t_len // 2)))
    if t_len > 2 and rng.random() < cfg.turnover:
        stop = int(rng.integers(max(start + 1, t_len // 2), t_len))
    return Track(shape, half_h, half_w,
                 cy=rng.uniform(half_h, h - 1 - half_h), cx=rng.uniform(half_w, w - 1 - half_w),
                 vy=rng.uniform(-1.5, 1.5), vx=rng.uniform(-1.5, 1.5),
                 depth=depth, start=start, stop=stop,
                 category=int(rng.integers(cfg.categories)))


def _aim_at(rng, track, other, cfg):
    """Re-place ``track`` so it crosses ``other`` at some shared frame."""
    lo, hi = max(track.start, other.start), min(track.stop, other.stop)
    if lo >= hi:
        return track
    tm = int(rng.integers(lo, hi))
    oy, ox = other.center(tm)
    dy = rng.uniform(-1, 1) * (track.half_h + other.half_h) * 0.8
    dx = rng.uniform(-1, 1) * (track.half_w + other.half_w) * 0.8
    return Track(track.shape, track.half_h, track.half_w,
                 cy=oy + dy - tm * track.vy, cx=ox + dx - tm * track.vx,
                 vy=track.vy, vx=track.vx, depth=track.depth,
                 start=track.start, stop=track.stop, category=track.category)


def _valid(tracks, labels, cfg):
    h, w = cfg.height, cfg.width
    for k, tr in enumerate(tracks):
        alive = False
        for t in range(cfg.frames):
            full = np.count_nonzero(rasterize(tr, t, h, w))
            if full == 0:
                continue
            alive = True
            visible = np.count_nonzero(labels[t] == k)
            if visible < min(MIN_VISIBLE, full):
                return False
        if not alive:
            return False
    if cfg.occlusion_rate == 0.0:
        for t in range(cfg.frames):
            shapes = [rasterize(tr, t, h, w) for tr in tracks]
            cover = np.sum(shapes, axis=0) if shapes else 0
            if np.any(cover > 1):
                return False
    return True


def _relabel_by_appearance(tracks, labels):
    """Order identities by first visible frame (ties by generation order)."""
    first = []
    for k in range(len(tracks)):
        frames = np.flatnonzero(np.any(labels == k, axis=1))
        first.append((int(frames[0]), k))
    order = [k for _, k in sorted(first)]
    remap = np.full(len(tracks) + 1, -1, dtype=np.int64)
    for new, old in enumerate(order):
        remap[old] = new
    return [tracks[k] for k in order], remap[labels]


def gen_video(cfg, attempts=500):
    """Generate a video; deterministic in ``cfg``.

    Every instance is visible (at least a few pixels, or its whole in-bounds
    area if smaller) in each frame it is present, so full occlusions only
    come from :func:`occlusion_scenario`.
    """
    rng = np.random.default_rng(cfg.seed)
    lo = cfg.max_instances if cfg.min_instances is None else cfg.min_instances
    n = int(rng.integers(lo, cfg.max_instances + 1))
    for _ in range(attempts):
        depths = rng.permutation(n)
        tracks = []
        for k in range(n):
            tr = _sample_track(rng, cfg, int(depths[k]))
            if tracks and rng.random() < cfg.occlusion_rate:
                tr = _aim_at(rng, tr, tracks[int(rng.integers(len(tracks)))], cfg)
            tracks.append(tr)
        labels = compose(tracks, cfg.frames, cfg.height, cfg.width)
        if _valid(tracks, labels, cfg):
            break
    else:
        raise ValueError(
            f"could not place {n} instances in {cfg.height}x{cfg.width} after {attempts} attempts")
    tracks, labels = _relabel_by_appearance(tracks, labels)
    feats, sigs = render_features(labels, n, cfg.channels, cfg.noise_sigma, cfg.seed)
    return GroundTruth(cfg.height, cfg.width, cfg.categories, labels,
                       [tr.category for tr in tracks], feats, tracks, sigs)


def occlusion_scenario(seed=0, frames=16, hidden=(5, 10), height=64, width=64,
                       channels=16, noise_sigma=0.05, categories=2):
    """Two static instances.  The large near one (identity 1) parks on top of
    the small far one (identity 0) for the frames in ``range(*hidden)``,
    hiding it completely, and sits elsewhere the rest of the time."""
    a, b = hidden
    far = Track("rect", 4.0, 4.0, cy=20.0, cx=12.0, vy=0.0, vx=0.0, depth=1,
                start=0, stop=frames, category=0)
    parked = Track("rect", 9.0, 9.0, cy=20.0, cx=12.0, vy=0.0, vx=0.0, depth=0,
                   start=0, stop=frames, category=1)
    away = Track("rect", 9.0, 9.0, cy=46.0, cx=44.0, vy=0.0, vx=0.0, depth=0,
                 start=0, stop=frames, category=1)
    labels = np.full((frames, height * width), -1, dtype=np.int64)
    for t in range(frames):
        near = parked if a <= t < b else away
        labels[t][rasterize(far, t, height, width).ravel()] = 0
        labels[t][rasterize(near, t, height, width).ravel()] = 1
    feats, sigs = render_features(labels, 2, channels, noise_sigma, seed)
    return GroundTruth(height, width, categories, labels, [0, 1], feats, [far, away], sigs)


# ---------------------------------------------------------------------------
# reference detectors
# ---------------------------------------------------------------------------

def class_distribution(category, categories, confidence=0.9):
    if categories == 1:
        return np.ones(1)
    p = np.full(categories, (1.0 - confidence) / (categories - 1))
    p[category] = confidence
    return p


def prototype_similarity(feats, prototypes):
    """``1 - |f - p| / |p - offset|`` for every feature row and prototype,
    clipped to ``[-1, 1]``.  Identical responses score 1."""
    feats = np.atleast_2d(feats)
    if len(prototypes) == 0:
        return np.zeros((feats.shape[0], 0))
    diff = feats[:, None, :] - prototypes.vectors[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    scale = np.linalg.norm(prototypes.vectors - prototypes.offset, axis=1)
    sim = 1.0 - dist / np.maximum(scale, 1e-12)[None, :]
    return np.clip(sim, -1.0, 1.0)


def id_similarities(feats, prototypes, n_ids):
    """Per-row similarity to every instance ID slot (``-1`` where the ID has
    no prototype); the best memory wins when an ID has several."""
    feats = np.atleast_2d(feats)
    out = np.full((feats.shape[0], n_ids - 1), -1.0)
    sims = prototype_similarity(feats, prototypes)
    for j, d in enumerate(prototypes.ids):
        out[:, d] = np.maximum(out[:, d], sims[:, j])
    return out


def oracle_id_probs(track_feat, prototypes, n_ids, margin=0.5, sharpness=10.0):
    sims = id_similarities(track_feat, prototypes, n_ids)[0]
    logits = sharpness * np.concatenate([sims, [margin, -1.0]])
    return losses.softmax(logits)


def _pool(track, mask):
    rows = track[mask]
    return rows.sum(axis=0) / len(rows)


def oracle_detector(fused, gt_frame, prototypes, n_ids, categories, width,
                    margin=0.5, sharpness=10.0):
    """One detection per visible ground-truth instance.

    ID probabilities come from the mask-pooled tracking-branch feature: an
    ID whose prototype scores above ``margin`` beats the new-instance slot.
    """
    c = fused.shape[1] // 2
    track = fused[:, :c]
    dets = []
    for mask, cat in zip(gt_frame.masks, gt_frame.classes):
        feat = _pool(track, mask)
        dets.append(postproc.Detection(
            mask=mask.astype(np.uint8),
            box=postproc.mask_box(mask, width),
            class_probs=class_distribution(cat, categories),
            id_probs=oracle_id_probs(feat, prototypes, n_ids, margin, sharpness),
            score=1.0,
        ))
    return dets


class OracleDetector:
    """Adapts :func:`oracle_detector` to the tracker's detector contract."""

    def __init__(self, gt, margin=0.5, sharpness=10.0):
        self.gt = gt
        self.margin = margin
        self.sharpness = sharpness

    def __call__(self, fused, ctx: FrameContext):
        frame = self.gt.frame(ctx.frame_index - 1)
        return oracle_detector(fused, frame, ctx.prototypes, ctx.n_ids, self.gt.categories,
                               ctx.width, self.margin, self.sharpness)


# ---------------------------------------------------------------------------
# trainable toy ID head
# ---------------------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ToyIdHead:
    """Two per-location linear layers with a ReLU between, then a mean over
    the detection mask.  Input channels are the per-pixel similarities to
    each instance ID's prototype."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, n_ids, seed=0):
        n_in = n_ids - 1
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((n_in, n_in)) / np.sqrt(n_in), np.zeros(n_in),
                   rng.standard_normal((n_in, n_ids + 1)) / np.sqrt(n_in), np.zeros(n_ids + 1))

    @property
    def n_ids(self):
        return self.w2.shape[1] - 1

    def copy(self):
        return ToyIdHead(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, x):
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        return h.mean(axis=0) @ self.w2 + self.b2

    def id_probs(self, x):
        return losses.softmax(self.logits(x))

    def loss_and_grad(self, x, target, fp):
        """Focal ID loss of one detection and its parameter gradients."""
        pre = x @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        h_bar = h.mean(axis=0)
        z = h_bar @ self.w2 + self.b2
        loss = losses.focal_id_loss(losses.softmax(z), target, fp)
        dz = losses.focal_id_grad(z, target, fp)
        dh = (self.w2 @ dz) / x.shape[0]
        dpre = np.where(pre > 0.0, dh[None, :], 0.0)
        return loss, [x.T @ dpre, dpre.sum(axis=0), np.outer(h_bar, dz), dz]


class HeadDetector:
    """Ground-truth masks and classes, ID probabilities from a trained head."""

    def __init__(self, gt, head):
        self.gt = gt
        self.head = head

    def __call__(self, fused, ctx: FrameContext):
        frame = self.gt.frame(ctx.frame_index - 1)
        c = fused.shape[1] // 2
        dets = []
        for mask, cat in zip(frame.masks, frame.classes):
            x = id_similarities(fused[mask, :c], ctx.prototypes, ctx.n_ids)
            dets.append(postproc.Detection(
                mask=mask.astype(np.uint8),
                box=postproc.mask_box(mask, ctx.width),
                class_probs=class_distribution(cat, self.gt.categories),
                id_probs=self.head.id_probs(x),
                score=1.0,
            ))
        return dets


@dataclass
class HeadSample:
    frame: int          # position inside the window
    identity: int
    label: int
    x: np.ndarray       # per-pixel similarity features
    pooled_sims: np.ndarray


def window_samples(gt, frames, state_factory):
    """Teacher-forced samples for a window of frames.

    Memories are built from ground-truth IDs, so the inputs seen at frame
    ``k`` do not depend on any prediction.  ``state_factory`` returns a fresh
    :class:`~iai.tracker.TrackerState` for the video geometry.
    """
    state = state_factory()
    n_ids = state.n_ids
    sub = gt.window(frames)
    annotations = [sub.frame(k).identities for k in range(len(frames))]
    labels = losses.assign_gt_ids(annotations, n_ids)
    c = state.params.channels
    out = []
    for k in range(len(frames)):
        feats = sub.features[k]
        fused = association.hab_forward(feats, state.memory, state.params, state.config, state.grid)
        protos = association.memory_prototypes(
            state.memory, state.params, state.config, state.bank, state.grid)
        frame = sub.frame(k)
        track = fused[:, :c]
        for ident, mask in zip(frame.identities, frame.masks):
            x = id_similarities(track[mask], protos, n_ids)
            pooled = id_similarities(_pool(track, mask), protos, n_ids)[0]
            out.append(HeadSample(k, ident, labels.frames[k][ident], x, pooled))
        ids = [labels.ids[i] for i in frame.identities]
        y = identity.build_id_mask(ids, frame.masks.astype(np.uint8), [1.0] * len(ids), n_ids)
        e = identity.embed(y, state.bank)
        state.memory.update(association.build_memory(feats, e, state.params, k + 1, y.labels()))
    return out


def sample_window(rng, n_frames, length=5):
    if n_frames <= length:
        return tuple(range(n_frames))
    return tuple(sorted(rng.choice(n_frames, size=length, replace=False).tolist()))


def train_toy_head(head, sequences, state_factory, fp=losses.FocalParams(), steps=500,
                   lr=0.1, seed=0, window=5):
    """Plain SGD on the mean focal ID loss.

    Each step draws one ``window``-frame subset per sequence (sorted, seeded)
    and averages the loss over every visible instance in those frames.
    Returns the trained copy and the per-step loss curve.
    """
    for gt in sequences:
        if gt.n_frames < window:
            raise ValueError(f"training sequences need at least {window} frames")
    head = head.copy()
    rng = np.random.default_rng(seed)
    cache = {}
    curve = []
    for step in range(steps):
        batch = []
        for s, gt in enumerate(sequences):
            frames = sample_window(rng, gt.n_frames, window)
            key = (s, frames)
            if key not in cache:
                cache[key] = window_samples(gt, frames, state_factory)
            batch.extend(cache[key])
        if not batch:
            raise ValueError("training batch is empty")
        total = 0.0
        grads = [np.zeros_like(p) for p in head.params()]
        for sample in batch:
            loss, g = head.loss_and_grad(sample.x, sample.label, fp)
            total += loss
            for acc, gi in zip(grads, g):
                acc += gi
        mean_loss = total / len(batch)
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(f"loss became {mean_loss} at step {step}")
        curve.append(mean_loss)
        for p, g in zip(head.params(), grads):
            p -= lr * g / len(batch)
    return head, curve


def frame2_accuracy(sequences, state_factory, predict):
    """ID-resolution accuracy at the second frame of each sequence.

    ``predict(samples, assigned)`` maps the frame-2 samples to assigned IDs
    (or :data:`~iai.identity.NEW`).  The truth is the instance's ID, or NEW
    for instances first seen at frame 2.
    """
    correct = total = 0
    for gt in sequences:
        samples = window_samples(gt, range(min(5, gt.n_frames)), state_factory)
        first = [s for s in samples if s.frame == 0]
        second = [s for s in samples if s.frame == 1]
        if not second:
            continue
        n_ids = state_factory().n_ids
        got = predict(second, len(first))
        for s, g in zip(second, got):
            want = identity.NEW if s.label == n_ids - 1 else s.label
            correct += int(g == want)
            total += 1
    return correct / total if total else 1.0


def head_predictor(head, n_ids):
    def predict(samples, assigned):
        probs = np.array([head.id_probs(s.x) for s in samples])
        return identity.resolve_ids(probs, identity.IdState(n_ids, assigned))
    return predict


def prototype_predictor(margin=0.5):
    """Brute-force rule: the best-scoring ID if it clears the margin, else NEW."""
    def predict(samples, assigned):
        out = []
        for s in samples:
            best, best_sim = identity.NEW, margin
            for d in range(assigned):
                if s.pooled_sims[d] >= best_sim:
                    best, best_sim = d, s.pooled_sims[d]
            out.append(best)
        return out
    return predict
