"""Online per-frame pipeline.

Each frame goes through: association block, detector, scoring, class-agnostic
NMS, unique-ID resolution, new-instance admission, ID mask and embedding, and
finally a memory update.  Nothing in a frame's processing looks at later
frames.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import association, identity, postproc
from .association import HabConfig, HabParams, MemoryStore
from .identity import IdBank, IdState


class DetectorContractError(RuntimeError):
    """A detector returned something that breaks the detection contract."""


@dataclass(frozen=True)
class FrameContext:
    """What a detector gets besides the fused features."""

    height: int
    width: int
    frame_index: int          # 1-based
    n_ids: int
    prototypes: association.Prototypes


@dataclass
class TrackerState:
    id_state: IdState
    memory: MemoryStore
    bank: IdBank
    params: HabParams
    config: HabConfig
    grid: tuple
    iou_thresh: float = 0.5

    @classmethod
    def create(cls, height, width, n_ids=20, channels=16, seed=0,
               config=HabConfig(), iou_thresh=0.5):
        bank_seed, hab_seed = np.random.SeedSequence(seed).spawn(2)
        return cls(
            id_state=IdState(capacity=n_ids),
            memory=MemoryStore(),
            bank=IdBank.create(n_ids, channels, bank_seed),
            params=HabParams.create(channels, hab_seed),
            config=config,
            grid=(height, width),
            iou_thresh=iou_thresh,
        )

    @property
    def n_ids(self):
        return self.id_state.capacity


@dataclass
class TrackedInstance:
    instance_id: int
    label: int
    mask: np.ndarray
    score: float
    class_probs: np.ndarray


@dataclass
class FrameResult:
    frame_index: int
    instances: list = field(default_factory=list)

    def ids(self):
        return [inst.instance_id for inst in self.instances]


@dataclass
class MaskTube:
    instance_id: int
    label: int
    confidence: float
    masks: np.ndarray  # (T, HW) bool; frames where the instance is absent are empty

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"tube confidence {self.confidence} outside [0, 1]")

    @property
    def n_frames(self):
        return self.masks.shape[0]


def _check_detections(dets, hw, n_ids):
    for i, d in enumerate(dets):
        if not isinstance(d, postproc.Detection):
            raise DetectorContractError(f"detection {i} is {type(d).__name__}, not Detection")
        if np.asarray(d.mask).shape != (hw,):
            raise DetectorContractError(
                f"detection {i}: mask shape {np.asarray(d.mask).shape}, expected ({hw},)")
        if len(d.id_probs) != n_ids + 1:
            raise DetectorContractError(
                f"detection {i}: {len(d.id_probs)} ID probabilities, expected {n_ids + 1}")
        try:
            d.validate()
        except ValueError as exc:
            raise DetectorContractError(f"detection {i}: {exc}") from None


def process_frame(features, state, detector):
    """Run one frame through the pipeline, updating ``state`` in place."""
    h, w = state.grid
    hw = h * w
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (hw, state.params.channels):
        raise ValueError(f"features must be {(hw, state.params.channels)}, got {features.shape}")
    frame_index = state.id_state.frame_index + 1
    n_ids = state.n_ids

    fused = association.hab_forward(features, state.memory, state.params, state.config, state.grid)
    protos = association.memory_prototypes(
        state.memory, state.params, state.config, state.bank, state.grid)
    ctx = FrameContext(h, w, frame_index, n_ids, protos)
    dets = list(detector(fused, ctx))
    _check_detections(dets, hw, n_ids)
    dets = [d for d in dets if np.any(d.mask)]

    scores = [postproc.combined_score(d) for d in dets]
    keep = postproc.class_agnostic_nms(dets, state.iou_thresh, scores)
    dets = [dets[i] for i in keep]
    scores = [scores[i] for i in keep]

    if dets:
        id_probs = np.array([d.id_probs for d in dets], dtype=np.float64)
        assignment = identity.resolve_ids(id_probs, state.id_state)
    else:
        assignment = ()
    assignment, id_state = identity.admit_new(assignment, state.id_state, scores)

    masks = np.array([d.mask for d in dets], dtype=np.uint8).reshape(len(dets), hw)
    y = identity.build_id_mask(assignment, masks, scores, n_ids)
    e = identity.embed(y, state.bank)
    entry = association.build_memory(features, e, state.params, frame_index, y.labels())
    state.memory.update(entry)
    state.id_state = replace(id_state, frame_index=frame_index)

    result = FrameResult(frame_index)
    for d, a, s in zip(dets, assignment, scores):
        if a < 0:
            continue
        result.instances.append(TrackedInstance(
            instance_id=a,
            label=int(np.argmax(d.class_probs)),
            mask=np.asarray(d.mask, dtype=bool),
            score=s,
            class_probs=np.asarray(d.class_probs, dtype=np.float64),
        ))
    result.instances.sort(key=lambda inst: inst.instance_id)
    return result


def run_frames(frames, state, detector):
    """Yield one :class:`FrameResult` per frame, strictly in order."""
    for features in frames:
        yield process_frame(features, state, detector)


def tubes_from_results(results, n_frames, hw):
    """Aggregate per-frame results into one tube per instance ID.

    A tube's class is the argmax of the score-weighted mean class
    distribution; its confidence is the mean per-frame score.
    """
    acc = {}
    for t, res in enumerate(results):
        for inst in res.instances:
            slot = acc.setdefault(inst.instance_id, {
                "masks": np.zeros((n_frames, hw), dtype=bool),
                "probs": 0.0, "weight": 0.0, "scores": [],
            })
            slot["masks"][t] = inst.mask
            slot["probs"] = slot["probs"] + inst.score * inst.class_probs
            slot["weight"] += inst.score
            slot["scores"].append(inst.score)
    tubes = []
    for iid in sorted(acc):
        slot = acc[iid]
        if slot["weight"] > 0:
            label = int(np.argmax(slot["probs"] / slot["weight"]))
        else:
            label = 0
        conf = sum(slot["scores"]) / len(slot["scores"])
        tubes.append(MaskTube(iid, label, min(max(conf, 0.0), 1.0), slot["masks"]))
    return tubes


def run_video(frames, state, detector):
    frames = list(frames)
    if not frames:
        raise ValueError("a video needs at least one frame")
    h, w = state.grid
    results = list(run_frames(frames, state, detector))
    return tubes_from_results(results, len(frames), h * w)
