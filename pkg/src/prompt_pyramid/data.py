"""Synthetic partially-relevant video corpus.

Each video is background noise with a few planted events: a colored shape
moving in one direction during a frame interval. Every query names exactly
one planted event ("a red square moves_left"), so its visual evidence is
confined to that interval.

Per-video randomness comes from ``np.random.default_rng([seed, video_index])``
(a SeedSequence over the pair), so any video can be generated alone and in
any order.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptBlobError, UnknownTokenError, VocabTooSmallError
from .pyramid import SegmentInterval
from .text import Vocabulary

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring", "hbar", "vbar")
COLORS = {
    "red": (0.95, 0.1, 0.1), "green": (0.1, 0.9, 0.1), "blue": (0.15, 0.25, 1.0),
    "yellow": (0.95, 0.9, 0.1), "cyan": (0.1, 0.9, 0.9), "magenta": (0.9, 0.1, 0.9),
    "white": (1.0, 1.0, 1.0), "orange": (1.0, 0.55, 0.05),
}
MOTIONS = {"moves_left": (-1, 0), "moves_right": (1, 0), "moves_up": (0, -1),
           "moves_down": (0, 1)}
DEFAULT_TEMPLATE = "a {color} {shape} {motion}"


@dataclass
class SynthCorpusSpec:
    num_videos: int = 32
    frames: int = 32
    image_size: int = 32
    events_per_video: Tuple[int, int] = (2, 4)
    queries_per_video: Tuple[int, int] = (2, 4)
    event_length: Tuple[int, int] = (4, 12)
    shapes: Tuple[str, ...] = SHAPES
    colors: Tuple[str, ...] = tuple(COLORS)
    motions: Tuple[str, ...] = tuple(MOTIONS)
    template: str = DEFAULT_TEMPLATE
    noise: float = 0.2
    shape_size: int = 10
    allow_overlap: bool = False
    # drop queries whose description also matches an event in another video
    unique_queries: bool = True
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("events_per_video", "queries_per_video", "event_length",
                     "shapes", "colors", "motions"):
            setattr(self, name, tuple(getattr(self, name)))
        lo, hi = self.events_per_video
        if not 1 <= lo <= hi:
            raise ValueError(f"bad events_per_video {self.events_per_video}")
        if not 1 <= self.event_length[0] <= self.event_length[1] <= self.frames:
            raise ValueError(f"bad event_length {self.event_length}")
        if not self.allow_overlap and hi * self.event_length[0] > self.frames:
            raise ValueError("events cannot fit without overlap")
        if len(self.shapes) * len(self.colors) < hi:
            raise VocabTooSmallError(
                f"{len(self.shapes)} shapes x {len(self.colors)} colors cannot give "
                f"{hi} distinct events per video")
        unknown = [c for c in self.colors if c not in COLORS] + \
            [s for s in self.shapes if s not in SHAPES] + \
            [m for m in self.motions if m not in MOTIONS]
        if unknown:
            raise UnknownTokenError(f"no renderer for {unknown}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def vocabulary(self) -> Vocabulary:
        words = [w for w in self.template.split() if not w.startswith("{")]
        return Vocabulary(words + list(self.colors) + list(self.shapes) + list(self.motions))


@dataclass(frozen=True)
class PlantedEvent:
    shape: str
    color: str
    motion: str
    interval: SegmentInterval
    # top-left corner at the first frame of the interval
    origin: Tuple[int, int] = (0, 0)

    def to_dict(self):
        return {"shape": self.shape, "color": self.color, "motion": self.motion,
                "start": self.interval.start, "end": self.interval.end,
                "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], d["color"], d["motion"], SegmentInterval(d["start"], d["end"]),
                   tuple(d.get("origin", (0, 0))))


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    tokens: Tuple[int, ...]
    video_id: str
    interval: SegmentInterval
    text: str = ""

    def to_dict(self):
        return {"query_id": self.query_id, "tokens": list(self.tokens), "text": self.text,
                "video_id": self.video_id, "start": self.interval.start,
                "end": self.interval.end}

    @classmethod
    def from_dict(cls, d):
        return cls(d["query_id"], tuple(d["tokens"]), d["video_id"],
                   SegmentInterval(d["start"], d["end"]), d.get("text", ""))


@dataclass
class SynthCorpus:
    spec: SynthCorpusSpec
    video_ids: List[str]
    events: Dict[str, List[PlantedEvent]]
    videos: Dict[str, np.ndarray]
    queries: List[QueryRecord]
    split: Dict[str, List[str]]
    vocab: Vocabulary = field(repr=False, default=None)

    def video_array(self, ids: Optional[Sequence[str]] = None) -> np.ndarray:
        ids = self.video_ids if ids is None else ids
        return np.stack([self.videos[v] for v in ids])

    def queries_for(self, split: str) -> List[QueryRecord]:
        keep = set(self.split[split])
        return [q for q in self.queries if q.video_id in keep]

    def manifest(self) -> dict:
        return {
            "format_version": 1,
            "spec": self.spec.to_dict(),
            "vocab": self.vocab.tokens,
            "videos": [{"video_id": v, "file": f"videos/{v}.bin",
                        "events": [e.to_dict() for e in self.events[v]]}
                       for v in self.video_ids],
            "queries": [q.to_dict() for q in self.queries],
            "split": self.split,
        }


def video_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _place_intervals(rng, n, spec: SynthCorpusSpec) -> List[SegmentInterval]:
    lo, hi = spec.event_length
    if spec.allow_overlap:
        out = []
        for _ in range(n):
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, spec.frames - length + 1))
            out.append(SegmentInterval(start, start + length - 1))
        return sorted(out, key=lambda s: s.start)
    lengths = [int(rng.integers(lo, hi + 1)) for _ in range(n)]
    while sum(lengths) > spec.frames:
        i = int(np.argmax(lengths))
        lengths[i] -= 1
    slack = spec.frames - sum(lengths)
    gaps = rng.multinomial(slack, np.ones(n + 1) / (n + 1))
    out, cursor = [], 0
    for length, gap in zip(lengths, gaps):
        cursor += int(gap)
        out.append(SegmentInterval(cursor, cursor + length - 1))
        cursor += length
    return out


def sample_events(spec: SynthCorpusSpec, index: int) -> List[PlantedEvent]:
    rng = video_rng(spec.seed, index)
    n = int(rng.integers(spec.events_per_video[0], spec.events_per_video[1] + 1))
    pairs = [(s, c) for s in spec.shapes for c in spec.colors]
    chosen = rng.choice(len(pairs), size=n, replace=False)
    intervals = _place_intervals(rng, n, spec)
    travel = spec.image_size - spec.shape_size
    events = []
    for pair_idx, interval in zip(chosen, intervals):
        shape, color = pairs[int(pair_idx)]
        motion = spec.motions[int(rng.integers(len(spec.motions)))]
        dx, dy = MOTIONS[motion]
        # start on the side the shape moves away from; random on the other axis
        x0 = travel if dx < 0 else 0 if dx > 0 else int(rng.integers(0, travel + 1))
        y0 = travel if dy < 0 else 0 if dy > 0 else int(rng.integers(0, travel + 1))
        events.append(PlantedEvent(shape, color, motion, interval, (x0, y0)))
    return events


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    r = size / 2
    dx, dy = xx - c, yy - c
    if shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "circle":
        m = dx ** 2 + dy ** 2 <= r ** 2
    elif shape == "ring":
        d2 = dx ** 2 + dy ** 2
        m = (d2 <= r ** 2) & (d2 >= (r * 0.55) ** 2)
    elif shape == "triangle":
        m = np.abs(dx) <= (yy + 1) / 2
    elif shape == "cross":
        m = (np.abs(dx) <= size / 6) | (np.abs(dy) <= size / 6)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    elif shape == "hbar":
        m = np.abs(dy) <= size / 5
    elif shape == "vbar":
        m = np.abs(dx) <= size / 5
    else:
        raise UnknownTokenError(f"unknown shape {shape!r}")
    return m


def _position(event: PlantedEvent, frame: int, spec: SynthCorpusSpec) -> Tuple[int, int]:
    travel = spec.image_size - spec.shape_size
    span = max(1, len(event.interval) - 1)
    step = (frame - event.interval.start) / span * travel
    dx, dy = MOTIONS[event.motion]
    x = int(round(event.origin[0] + dx * step))
    y = int(round(event.origin[1] + dy * step))
    return min(max(x, 0), travel), min(max(y, 0), travel)


def render_video(events: Sequence[PlantedEvent], seed, spec: SynthCorpusSpec) -> np.ndarray:
    """(frames, H, W, 3) float32 in [0, 1]; background is uniform noise below ``spec.noise``."""
    rng = np.random.default_rng(seed)
    size = spec.image_size
    video = (rng.random((spec.frames, size, size, 3)) * spec.noise).astype(np.float32)
    for event in events:
        mask = shape_mask(event.shape, spec.shape_size)
        color = np.asarray(COLORS[event.color], dtype=np.float32)
        for f in range(event.interval.start, event.interval.end + 1):
            x, y = _position(event, f, spec)
            patch = video[f, y:y + spec.shape_size, x:x + spec.shape_size]
            patch[mask] = color
    return video


def compose_query(event: PlantedEvent, vocab: Vocabulary, template=DEFAULT_TEMPLATE):
    """Token ids for the templated description of ``event``."""
    text = template.format(color=event.color, shape=event.shape, motion=event.motion)
    return vocab.encode(text), text


def generate_video(spec: SynthCorpusSpec, index: int):
    events = sample_events(spec, index)
    # pixel noise gets its own stream so event sampling stays comparable across specs
    return events, render_video(events, [spec.seed, index, 1], spec)


def _video_id(index):
    return f"v{index:04d}"


def generate_corpus(spec: SynthCorpusSpec, order: Optional[Sequence[int]] = None) -> SynthCorpus:
    """Build the corpus; ``order`` only changes generation order, never content."""
    vocab = spec.vocabulary()
    indices = list(range(spec.num_videos))
    generated = {}
    for i in (indices if order is None else order):
        generated[i] = generate_video(spec, i)
    video_ids = [_video_id(i) for i in indices]
    events = {_video_id(i): generated[i][0] for i in indices}
    videos = {_video_id(i): generated[i][1] for i in indices}

    def key(e):
        return (e.color, e.shape, e.motion)

    owners: Dict[tuple, set] = {}
    for vid in video_ids:
        for e in events[vid]:
            owners.setdefault(key(e), set()).add(vid)

    queries = []
    for i in indices:
        vid = _video_id(i)
        rng = np.random.default_rng([spec.seed, i, 2])
        evs = events[vid]
        lo, hi = spec.queries_per_video
        n = min(len(evs), int(rng.integers(lo, hi + 1)))
        picks = sorted(int(p) for p in rng.choice(len(evs), size=n, replace=False))
        for p in picks:
            e = evs[p]
            if spec.unique_queries and len(owners[key(e)]) > 1:
                continue
            tokens, text = compose_query(e, vocab, spec.template)
            queries.append(QueryRecord(f"q{len(queries):05d}", tuple(tokens), vid, e.interval,
                                       text))

    perm = np.random.default_rng([spec.seed, 2 ** 31]).permutation(spec.num_videos)
    n_test = int(round(spec.test_fraction * spec.num_videos))
    test = sorted(_video_id(int(i)) for i in perm[:n_test])
    train = [v for v in video_ids if v not in set(test)]
    return SynthCorpus(spec, video_ids, events, videos, queries,
                       {"train": train, "test": test}, vocab)


def sample_frame_indices(total: int, count: int) -> np.ndarray:
    """``count`` evenly spaced frame indices (segment centers) out of ``total >= count``."""
    if count < 1 or total < count:
        raise ValueError(f"cannot sample {count} frames from {total}")
    return np.floor((np.arange(count) + 0.5) * total / count).astype(np.int64)


# raw tensor files: magic, version, ndim, dims, dtype tag, little-endian float32 data
TENSOR_MAGIC = b"PPVT"
TENSOR_VERSION = 1


def write_tensor(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", TENSOR_VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(b"<f4\x00")
        fh.write(array.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TENSOR_MAGIC:
        raise CorruptBlobError(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise CorruptBlobError(f"{path}: unsupported tensor version {version}")
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    offset = 12 + 4 * ndim
    if raw[offset:offset + 4] != b"<f4\x00":
        raise CorruptBlobError(f"{path}: unsupported element type")
    data = raw[offset + 4:]
    if len(data) != 4 * int(np.prod(shape)):
        raise CorruptBlobError(f"{path}: expected {shape} float32 values, got {len(data)} bytes")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def save_corpus(corpus: SynthCorpus, out_dir) -> str:
    os.makedirs(os.path.join(out_dir, "videos"), exist_ok=True)
    for vid in corpus.video_ids:
        write_tensor(os.path.join(out_dir, "videos", f"{vid}.bin"), corpus.videos[vid])
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(corpus.manifest(), fh, indent=1)
    return path


def load_corpus(path) -> SynthCorpus:
    """Load from a corpus directory or its ``manifest.json``."""
    root = path if os.path.isdir(path) else os.path.dirname(path)
    with open(os.path.join(root, "manifest.json")) as fh:
        m = json.load(fh)
    spec = SynthCorpusSpec.from_dict(m["spec"])
    ids = [v["video_id"] for v in m["videos"]]
    return SynthCorpus(
        spec, ids,
        {v["video_id"]: [PlantedEvent.from_dict(e) for e in v["events"]] for v in m["videos"]},
        {v["video_id"]: read_tensor(os.path.join(root, v["file"])) for v in m["videos"]},
        [QueryRecord.from_dict(q) for q in m["queries"]],
        m["split"], Vocabulary(m["vocab"]))
