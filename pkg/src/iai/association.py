"""Hybrid association block: memory attention plus a classification projector.

The tracking branch attends from the current frame's features to two
memories, the first frame of the video (global) and the previous frame
(local).  Memory values carry the ID embedding, so attention moves
"which instance was where" into the current frame.  The classification
branch is a per-location linear map of the raw features.  The two branches
are concatenated along channels.

``HabConfig.stride`` pools queries, keys and values over ``stride x stride``
blocks before attention and copies the result back to every pixel of the
block.  ``stride=1`` is plain per-pixel attention.
"""

from dataclasses import dataclass

import numpy as np

from . import mathkit


@dataclass(frozen=True)
class HabParams:
    channels: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_cls: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_cls"):
            w = getattr(self, name)
            if w.shape != (self.channels, self.channels):
                raise ValueError(f"{name} must be {self.channels}x{self.channels}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name} contains non-finite entries")

    @classmethod
    def create(cls, channels, seed=0):
        rng = np.random.default_rng(seed)
        ws = []
        for _ in range(4):
            w = rng.standard_normal((channels, channels)) / np.sqrt(channels)
            w.setflags(write=False)
            ws.append(w)
        return cls(channels, *ws)


@dataclass(frozen=True)
class HabConfig:
    enable_global: bool = True
    enable_local: bool = True
    enable_cls: bool = True
    stride: int = 1

    def __post_init__(self):
        if not (self.enable_global or self.enable_local or self.enable_cls):
            raise ValueError("at least one HAB component must be enabled")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class MemoryEntry:
    keys: np.ndarray
    values: np.ndarray
    frame_index: int
    labels: np.ndarray = None  # per-row ID the row was embedded with

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ValueError(f"keys {self.keys.shape} and values {self.values.shape} differ")
        if self.labels is not None and len(self.labels) != len(self.keys):
            raise ValueError("labels must have one entry per memory row")


@dataclass
class MemoryStore:
    """Global entry (first frame, never replaced) and local entry (latest)."""

    global_: MemoryEntry = None
    local: MemoryEntry = None

    def update(self, entry):
        if self.global_ is None:
            self.global_ = entry
        self.local = entry

    def active(self, cfg):
        """Memories that take part in attention under ``cfg``."""
        out = []
        if cfg.enable_global and self.global_ is not None:
            out.append(self.global_)
        if cfg.enable_local and self.local is not None:
            out.append(self.local)
        return out


def build_memory(features, id_embedding, params, frame_index=0, labels=None):
    """keys = F W_k, values = (F + E) W_v."""
    f = mathkit.as_matrix(features, "features")
    e = mathkit.as_matrix(id_embedding, "id_embedding")
    if f.shape != e.shape:
        raise ValueError(f"features {f.shape} and ID embedding {e.shape} differ")
    if f.shape[1] != params.channels:
        raise ValueError(f"features have {f.shape[1]} channels, params expect {params.channels}")
    keys = mathkit.matmul(f, params.w_k)
    values = mathkit.matmul(f + e, params.w_v)
    for a in (keys, values):
        a.setflags(write=False)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        labels.setflags(write=False)
    return MemoryEntry(keys, values, frame_index, labels)


def _pooled(entry, grid, stride):
    return (mathkit.block_mean(entry.keys, grid, stride),
            mathkit.block_mean(entry.values, grid, stride))


def _check_grid(n_rows, grid, stride):
    if stride == 1:
        return
    if grid is None:
        raise ValueError("a (height, width) grid is required when stride > 1")
    if grid[0] * grid[1] != n_rows:
        raise ValueError(f"grid {grid} does not match {n_rows} feature rows")


def tracking_branch(features, store, params, cfg, grid=None):
    f = mathkit.as_matrix(features, "features")
    if f.shape[1] != params.channels:
        raise ValueError(f"features have {f.shape[1]} channels, params expect {params.channels}")
    _check_grid(f.shape[0], grid, cfg.stride)
    q = mathkit.matmul(f, params.w_q)
    memories = store.active(cfg)
    if not memories:
        return q
    q_tok = mathkit.block_mean(q, grid, cfg.stride)
    out = q.copy()
    for mem in memories:
        if cfg.stride > 1 and mem.keys.shape[0] != f.shape[0]:
            raise ValueError(f"memory has {mem.keys.shape[0]} rows, frame has {f.shape[0]}")
        k, v = _pooled(mem, grid, cfg.stride)
        out += mathkit.block_repeat(mathkit.attention(q_tok, k, v), grid, cfg.stride)
    return out


def hab_forward(features, store, params, cfg, grid=None):
    """Fused ``HW x 2C`` output: ``[tracking | classification]``."""
    track = tracking_branch(features, store, params, cfg, grid)
    f = mathkit.as_matrix(features, "features")
    cls = mathkit.matmul(f, params.w_cls) if cfg.enable_cls else f
    return np.concatenate([track, cls], axis=1)


@dataclass(frozen=True)
class Prototypes:
    """Tracking-branch responses to remembered instance appearances.

    ``ids[i]`` owns row ``vectors[i]``; an ID may appear once per memory.
    ``offset`` is the response to an all-zero appearance, which is the
    part of every tracking feature contributed by the memories alone.
    """

    ids: tuple
    vectors: np.ndarray
    offset: np.ndarray

    def __len__(self):
        return len(self.ids)


def memory_prototypes(store, params, cfg, bank, grid=None):
    """One prototype per (active memory, instance ID) pair.

    The remembered appearance of ID ``d`` is recovered from the memory
    value rows where ``d`` was embedded: their mean, mapped back through
    ``W_v`` with the bank row for ``d`` removed.  That appearance is then
    pushed through the tracking branch against the current memories, so
    prototypes and live detections are compared in the same space.
    """
    c = params.channels
    memories = store.active(cfg)
    pooled = [_pooled(m, grid, cfg.stride) for m in memories]

    def respond(appearance):
        q = mathkit.matmul(appearance, params.w_q)
        out = q.copy()
        for k, v in pooled:
            out += mathkit.attention(q, k, v)
        return out

    offset = respond(np.zeros((1, c)))[0]
    ids, apps = [], []
    for mem in memories:
        if mem.labels is None:
            continue
        for d in np.unique(mem.labels):
            if d >= bank.n_ids - 1:
                continue
            rows = mem.values[mem.labels == d]
            mean_v = rows.sum(axis=0) / len(rows)
            app = np.linalg.solve(params.w_v.T, mean_v) - bank.table[d]
            ids.append(int(d))
            apps.append(app)
    if not ids:
        return Prototypes((), np.zeros((0, c)), offset)
    vectors = respond(np.array(apps))
    return Prototypes(tuple(ids), vectors, offset)
