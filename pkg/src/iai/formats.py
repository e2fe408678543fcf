"""On-disk formats: IAITRACK v1 tube files, PPM frames, loss curves, head
weights.

IAITRACK v1 is line-oriented ASCII::

    IAITRACK 1 <dataset|pred> <videos>
    VIDEO <id> <frames> <height> <width> <categories>
    TUBE <instance-id> <class> <confidence, 6 decimals>
    F <t> <run lengths>

Run lengths cover the row-major flattened mask and start with the count
of leading zeros.  Frames where a tube is empty have no ``F`` line.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .synthworld import ToyIdHead
from .tracker import MaskTube

MAGIC = "IAITRACK"
VERSION = 1
KINDS = ("dataset", "pred")


class FormatError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass
class VideoRecord:
    video_id: int
    n_frames: int
    height: int
    width: int
    categories: int
    tubes: list = field(default_factory=list)

    @property
    def hw(self):
        return self.height * self.width


# ---------------------------------------------------------------------------
# run-length encoding
# ---------------------------------------------------------------------------

def rle_encode(mask):
    m = np.asarray(mask, dtype=bool).ravel()
    if m.size == 0:
        return []
    change = np.flatnonzero(m[1:] != m[:-1]) + 1
    bounds = np.concatenate([[0], change, [m.size]])
    runs = np.diff(bounds).tolist()
    if m[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs, size):
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    if sum(runs) != size:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {size}")
    out = np.zeros(size, dtype=bool)
    pos = 0
    for k, r in enumerate(runs):
        if k % 2:
            out[pos:pos + r] = True
        pos += r
    return out


# ---------------------------------------------------------------------------
# IAITRACK
# ---------------------------------------------------------------------------

def dumps_tracks(kind, videos):
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    lines = [f"{MAGIC} {VERSION} {kind} {len(videos)}"]
    for v in videos:
        lines.append(f"VIDEO {v.video_id} {v.n_frames} {v.height} {v.width} {v.categories}")
        for tube in v.tubes:
            lines.append(f"TUBE {tube.instance_id} {tube.label} {tube.confidence:.6f}")
            for t, m in enumerate(np.asarray(tube.masks, dtype=bool)):
                if m.any():
                    lines.append(f"F {t} " + ",".join(map(str, rle_encode(m))))
    return "\n".join(lines) + "\n"


def write_tracks(path, kind, videos):
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_tracks(kind, videos))


def _ints(tokens, lineno, what):
    try:
        vals = [int(t) for t in tokens]
    except ValueError:
        raise FormatError(f"{what}: expected integers, got {' '.join(tokens)!r}", lineno) from None
    return vals


def loads_tracks(text, expect_kind=None):
    """Parse IAITRACK text into ``(kind, [VideoRecord])``.

    Raises :class:`FormatError` carrying the 1-based line number.
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty file", 1)
    head = lines[0].split(" ")
    if len(head) != 4 or head[0] != MAGIC:
        raise FormatError(f"bad header {lines[0]!r}", 1)
    if head[1] != str(VERSION):
        raise FormatError(f"unsupported version {head[1]}", 1)
    kind = head[2]
    if kind not in KINDS:
        raise FormatError(f"unknown kind {kind!r}", 1)
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind} file, got {kind}", 1)
    (n_videos,) = _ints(head[3:], 1, "video count")

    videos, seen_videos = [], set()
    video = tube = None
    last_t = -1
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split(" ")
        tag = tok[0]
        if tag == "VIDEO":
            if len(tok) != 6:
                raise FormatError("VIDEO needs 5 fields", lineno)
            vid, t, h, w, p = _ints(tok[1:], lineno, "VIDEO")
            if vid in seen_videos:
                raise FormatError(f"duplicate video id {vid}", lineno)
            if t < 1 or h < 1 or w < 1 or p < 1:
                raise FormatError("frames, height, width and categories must be positive", lineno)
            seen_videos.add(vid)
            video = VideoRecord(vid, t, h, w, p)
            videos.append(video)
            tube = None
        elif tag == "TUBE":
            if video is None:
                raise FormatError("TUBE before any VIDEO", lineno)
            if len(tok) != 4:
                raise FormatError("TUBE needs 3 fields", lineno)
            iid, label = _ints(tok[1:3], lineno, "TUBE")
            try:
                conf = float(tok[3])
            except ValueError:
                raise FormatError(f"bad confidence {tok[3]!r}", lineno) from None
            if not 0.0 <= conf <= 1.0:
                raise FormatError(f"confidence {conf} outside [0, 1]", lineno)
            if not 0 <= label < video.categories:
                raise FormatError(f"class {label} outside [0, {video.categories})", lineno)
            if iid < 0:
                raise FormatError(f"negative instance id {iid}", lineno)
            if any(tb.instance_id == iid for tb in video.tubes):
                raise FormatError(f"ID collision: instance {iid} appears twice in video "
                                  f"{video.video_id}", lineno)
            tube = MaskTube(iid, label, conf, np.zeros((video.n_frames, video.hw), dtype=bool))
            video.tubes.append(tube)
            last_t = -1
        elif tag == "F":
            if tube is None:
                raise FormatError("F before any TUBE", lineno)
            if len(tok) != 3:
                raise FormatError("F needs 2 fields", lineno)
            (t,) = _ints(tok[1:2], lineno, "F")
            if not last_t < t < video.n_frames:
                raise FormatError(f"frame {t} out of order or outside [0, {video.n_frames})",
                                  lineno)
            runs = _ints(tok[2].split(","), lineno, "run lengths")
            try:
                tube.masks[t] = rle_decode(runs, video.hw)
            except ValueError as exc:
                raise FormatError(str(exc), lineno) from None
            last_t = t
        else:
            raise FormatError(f"unknown record {tag!r}", lineno)
    if len(videos) != n_videos:
        raise FormatError(f"header declares {n_videos} videos, found {len(videos)}", 1)
    return kind, videos


def read_tracks(path, expect_kind=None):
    with open(path, newline="") as fh:
        return loads_tracks(fh.read(), expect_kind)


# ---------------------------------------------------------------------------
# PPM rendering
# ---------------------------------------------------------------------------

BACKGROUND_RGB = (0, 0, 0)


def palette(instance_id):
    """Fixed colour of an instance ID; never black."""
    # golden-angle hue walk, then a cheap HSV -> RGB at full value
    h = (instance_id * 0.61803398875) % 1.0
    s = 0.85 if instance_id % 2 == 0 else 0.6
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = 1.0 - s, 1.0 - s * f, 1.0 - s * (1.0 - f)
    r, g, b = [(1, t, p), (q, 1, p), (p, 1, t), (p, q, 1), (t, p, 1), (1, p, q)][i]
    return tuple(max(1, int(round(255 * c))) for c in (r, g, b))


def render_frame(video, t):
    """RGB image (H, W, 3) uint8 of frame ``t``; later tubes paint over earlier."""
    img = np.zeros((video.hw, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    for tube in video.tubes:
        img[np.asarray(tube.masks[t], dtype=bool)] = palette(tube.instance_id)
    return img.reshape(video.height, video.width, 3)


def ppm_bytes(img):
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(img))


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise FormatError("not a binary PPM", 1)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# loss curve and head weights
# ---------------------------------------------------------------------------

def dumps_curve(curve):
    return "".join(f"{step} {loss:.9f}\n" for step, loss in enumerate(curve))


def read_curve(path):
    steps, values = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if len(tok) != 2:
                raise FormatError("expected '<step> <loss>'", lineno)
            steps.append(int(tok[0]))
            values.append(float(tok[1]))
    return steps, values


def dumps_head(head, meta=None):
    """JSON with exact float round-tripping."""
    doc = {
        "format": "iai-toy-head",
        "version": 1,
        "n_ids": head.n_ids,
        "meta": meta or {},
        "w1": head.w1.tolist(),
        "b1": head.b1.tolist(),
        "w2": head.w2.tolist(),
        "b2": head.b2.tolist(),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def loads_head(text):
    try:
        doc = json.loads(text)
        if doc.get("format") != "iai-toy-head":
            raise FormatError("not a toy head weights file")
        head = ToyIdHead(*(np.array(doc[k], dtype=np.float64) for k in ("w1", "b1", "w2", "b2")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"bad weights file: {exc}") from None
    n_in = head.w1.shape[0]
    if (head.w1.shape != (n_in, n_in) or head.b1.shape != (n_in,)
            or head.w2.shape != (n_in, n_in + 2) or head.b2.shape != (n_in + 2,)):
        raise FormatError("inconsistent weight shapes")
    return head
