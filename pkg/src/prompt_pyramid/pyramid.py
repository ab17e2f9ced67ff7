"""Event prompt pyramid: structure, relations and attention masks.

A pyramid is fully determined by the frame count and a per-layer
``(children_count, children_offset)`` list. Layer 0 is the frame axis; prompt
layers are ``1..K`` and layer ``K`` holds the single global prompt.

All indices are 0-based. Prompts are linearized top layer first: the global
prompt is row 0, the last row is the rightmost layer-1 prompt. Every tensor
and file in the package uses this order.
"""
from __future__ import annotations

import enum
import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateLayerError,
    DivisibilityError,
    NonPositiveLayerError,
    PyramidError,
    TopLayerError,
)

__all__ = [
    "DEFAULT_LAYER_PARAMS",
    "InteractionVariant",
    "MaskSet",
    "PyramidConfig",
    "PyramidStructure",
    "PyramidWarning",
    "SegmentInterval",
    "VisualPromptOp",
    "build_masks",
    "cross_layer_table",
    "export_masks",
    "oracle_masks",
    "read_mask",
    "relation_sets",
    "segment_of",
    "validate_config",
]

DEFAULT_LAYER_PARAMS = ((2, 2), (2, 1), (3, 2), (3, 2), (3, 1))


class PyramidWarning(UserWarning):
    pass


class InteractionVariant(str, enum.Enum):
    """Which event prompts an event prompt may attend to (besides itself)."""

    AD = "AD"  # ancestors and descendants
    A = "A"
    D = "D"
    P = "P"  # parents only
    C = "C"  # children only
    PC = "PC"
    W = "W"  # every prompt
    S = "S"  # self only


class VisualPromptOp(str, enum.Enum):
    NO_COPY = "NO_COPY"
    COPY_E = "COPY_E"
    COPY_L1 = "COPY_L1"


@dataclass(frozen=True)
class SegmentInterval:
    """Inclusive frame interval ``[start, end]``."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid interval [{self.start}, {self.end}]")

    def __len__(self):
        return self.end - self.start + 1

    def __contains__(self, frame):
        return self.start <= frame <= self.end

    def contains(self, other: "SegmentInterval") -> bool:
        return self.start <= other.start and other.end <= self.end

    def strictly_contains(self, other: "SegmentInterval") -> bool:
        return self.contains(other) and self != other

    def as_tuple(self) -> Tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class PyramidConfig:
    frame_count: int
    layer_params: Tuple[Tuple[int, int], ...] = DEFAULT_LAYER_PARAMS

    def __post_init__(self):
        object.__setattr__(
            self, "layer_params", tuple((int(c), int(o)) for c, o in self.layer_params)
        )
        if int(self.frame_count) < 2:
            raise PyramidError(f"frame_count must be >= 2, got {self.frame_count}")
        if len(self.layer_params) < 1:
            raise PyramidError("at least one prompt layer is required")
        for k, (c, o) in enumerate(self.layer_params, start=1):
            if c < 1 or o < 1:
                raise PyramidError(f"layer {k}: (c, o) must be positive, got ({c}, {o})")

    @property
    def num_layers(self) -> int:
        return len(self.layer_params)

    def to_dict(self) -> dict:
        return {"frame_count": self.frame_count,
                "layer_params": [list(p) for p in self.layer_params]}

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidConfig":
        return cls(int(d["frame_count"]),
                   tuple(tuple(p) for p in d.get("layer_params", DEFAULT_LAYER_PARAMS)))


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _layer_sizes(config: PyramidConfig) -> List[int]:
    sizes = [config.frame_count]
    for k, (c, o) in enumerate(config.layer_params, start=1):
        prev = sizes[-1]
        if k >= 2 and c < 2:
            raise DegenerateLayerError(
                f"layer {k}: c={c} gives every prompt the same segment as its only child"
            )
        if prev - c < 0:
            raise NonPositiveLayerError(
                f"layer {k}: c={c} exceeds the {prev} prompts of layer {k - 1}"
            )
        if (prev - c) % o:
            raise DivisibilityError(
                f"layer {k}: offset {o} does not divide {prev} - {c} = {prev - c}"
            )
        sizes.append((prev - c) // o + 1)
    if sizes[-1] != 1:
        raise TopLayerError(f"top layer has {sizes[-1]} prompts, expected 1")
    return sizes


def _cross_layer(sizes: Sequence[int], layer_params) -> Dict[Tuple[int, int], Tuple[int, int]]:
    K = len(layer_params)
    table = {(k, k): (1, 1) for k in range(K + 1)}
    for k, (c, o) in enumerate(layer_params, start=1):
        table[(k, k - 1)] = (c, o)
    for k1 in range(K, 0, -1):
        for k2 in range(k1 - 2, -1, -1):
            _, o_upper = table[(k1, k2 + 1)]
            _, o_step = table[(k2 + 1, k2)]
            o = o_upper * o_step
            table[(k1, k2)] = (sizes[k2] - o * (sizes[k1] - 1), o)
    return table


@dataclass(frozen=True, eq=False)
class PyramidStructure:
    """A validated pyramid. Build it with :func:`validate_config`."""

    config: PyramidConfig
    layer_sizes: Tuple[int, ...]
    cross_layer: Dict[Tuple[int, int], Tuple[int, int]] = field(repr=False)

    @property
    def frame_count(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def total_prompts(self) -> int:
        return sum(self.layer_sizes[1:])

    @property
    def bottom_size(self) -> int:
        return self.layer_sizes[1]

    def layer_offset(self, k: int) -> int:
        """Row of prompt ``(k, 0)`` in the canonical order."""
        self._check_layer(k)
        return sum(self.layer_sizes[k + 1:])

    def index_of(self, k: int, j: int) -> int:
        self._check_prompt(k, j)
        return self.layer_offset(k) + j

    def prompt_at(self, index: int) -> Tuple[int, int]:
        if not 0 <= index < self.total_prompts:
            raise IndexError(f"prompt index {index} out of range")
        for k in range(self.num_layers, 0, -1):
            if index < self.layer_sizes[k]:
                return (k, index)
            index -= self.layer_sizes[k]
        raise AssertionError("unreachable")

    @property
    def prompt_order(self) -> List[Tuple[int, int]]:
        return [(k, j) for k in range(self.num_layers, 0, -1)
                for j in range(self.layer_sizes[k])]

    def prompt_layers(self) -> np.ndarray:
        """Layer index of every prompt, canonical order."""
        return np.array([k for k, _ in self.prompt_order])

    def level_mask(self, levels: Iterable[int] | None) -> np.ndarray:
        """Boolean selector over prompts whose layer is in ``levels``."""
        layers = self.prompt_layers()
        if levels is None:
            return np.ones_like(layers, dtype=bool)
        levels = set(int(k) for k in levels)
        for k in levels:
            self._check_layer(k)
        return np.isin(layers, sorted(levels))

    def segment_length(self, k: int) -> int:
        return self.cross_layer[(k, 0)][0]

    def segments(self) -> List[SegmentInterval]:
        """Segments of every prompt, canonical order."""
        return [segment_of(self, k, j) for k, j in self.prompt_order]

    def _check_layer(self, k: int) -> None:
        if not 0 <= k <= self.num_layers:
            raise IndexError(f"layer {k} out of range 0..{self.num_layers}")

    def _check_prompt(self, k: int, j: int) -> None:
        if not 1 <= k <= self.num_layers:
            raise IndexError(f"prompt layer {k} out of range 1..{self.num_layers}")
        if not 0 <= j < self.layer_sizes[k]:
            raise IndexError(f"prompt index {j} out of range for layer {k}")

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "layer_sizes": list(self.layer_sizes),
            "total_prompts": self.total_prompts,
            "segments": [
                {"layer": k, "index": j, "start": s.start, "end": s.end}
                for (k, j), s in zip(self.prompt_order, self.segments())
            ],
        }


def validate_config(config: PyramidConfig) -> PyramidStructure:
    """Apply the kernel/stride recurrence and return the pyramid structure.

    Raises DivisibilityError, NonPositiveLayerError, TopLayerError or
    DegenerateLayerError when ``config`` does not describe a pyramid.
    """
    sizes = _layer_sizes(config)
    table = _cross_layer(sizes, config.layer_params)
    if not _is_power_of_two(config.frame_count):
        warnings.warn(f"frame_count {config.frame_count} is not a power of two",
                      PyramidWarning, stacklevel=2)
    odd = [k for k in range(1, len(sizes)) if not _is_power_of_two(table[(k, 0)][0])]
    if odd:
        warnings.warn(f"layers {odd} have segment lengths that are not powers of two",
                      PyramidWarning, stacklevel=2)
    return PyramidStructure(config, tuple(sizes), table)


def cross_layer_table(structure: PyramidStructure) -> Dict[Tuple[int, int], Tuple[int, int]]:
    """``{(k1, k2): (children_count, children_offset)}`` for ``k1 >= k2``."""
    return dict(structure.cross_layer)


def segment_of(structure: PyramidStructure, k: int, j: int) -> SegmentInterval:
    structure._check_prompt(k, j)
    c, o = structure.cross_layer[(k, 0)]
    return SegmentInterval(o * j, o * j + c - 1)


def relation_sets(structure: PyramidStructure, k: int, j: int) -> Dict[str, set]:
    """Ancestors, descendants, parents and children of prompt ``(k, j)``."""
    me = segment_of(structure, k, j)
    out = {"ancestors": set(), "descendants": set(), "parents": set(), "children": set()}
    for k2, j2 in structure.prompt_order:
        if (k2, j2) == (k, j):
            continue
        other = segment_of(structure, k2, j2)
        if other.strictly_contains(me):
            out["ancestors"].add((k2, j2))
            if k2 == k + 1:
                out["parents"].add((k2, j2))
        elif me.strictly_contains(other):
            out["descendants"].add((k2, j2))
            if k2 == k - 1:
                out["children"].add((k2, j2))
    return out


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Binary attention masks, rows in canonical prompt order.

    ``m_ef``/``m_ev`` are the compact masks with every column repeated
    ``tokens_per_frame``/``prompts_per_group`` times.
    """

    m_ee: np.ndarray
    m_ef_compact: np.ndarray
    m_ev_compact: np.ndarray
    tokens_per_frame: int
    prompts_per_group: int
    variant: InteractionVariant
    vp_op: VisualPromptOp

    def __post_init__(self):
        for name in ("m_ee", "m_ef_compact", "m_ev_compact"):
            getattr(self, name).setflags(write=False)

    @property
    def m_ef(self) -> np.ndarray:
        return np.repeat(self.m_ef_compact, self.tokens_per_frame, axis=1)

    @property
    def m_ev(self) -> np.ndarray:
        return np.repeat(self.m_ev_compact, self.prompts_per_group, axis=1)

    @property
    def num_groups(self) -> int:
        return self.m_ev_compact.shape[1]

    def equals(self, other: "MaskSet") -> bool:
        return (
            self.variant == other.variant
            and self.vp_op == other.vp_op
            and self.tokens_per_frame == other.tokens_per_frame
            and self.prompts_per_group == other.prompts_per_group
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("m_ee", "m_ef_compact", "m_ev_compact")
            )
        )


def _variant_mask(variant, down, adjacent):
    """Combine descendant relations into an event-event mask.

    ``down[a, b]`` is true when ``b`` is a descendant of ``a``; ``adjacent``
    restricts to parent/child pairs.
    """
    n = down.shape[0]
    eye = np.eye(n, dtype=bool)
    child = down & adjacent
    if variant is InteractionVariant.AD:
        m = down | down.T
    elif variant is InteractionVariant.A:
        m = down.T
    elif variant is InteractionVariant.D:
        m = down
    elif variant is InteractionVariant.P:
        m = child.T
    elif variant is InteractionVariant.C:
        m = child
    elif variant is InteractionVariant.PC:
        m = child | child.T
    elif variant is InteractionVariant.W:
        m = np.ones((n, n), dtype=bool)
    elif variant is InteractionVariant.S:
        m = np.zeros((n, n), dtype=bool)
    else:
        raise ValueError(f"unknown interaction variant {variant!r}")
    return m | eye


def _visual_groups(vp_op, ee_to_bottom, n_prompts):
    if vp_op is VisualPromptOp.COPY_L1:
        return ee_to_bottom
    if vp_op is VisualPromptOp.COPY_E:
        return np.eye(n_prompts, dtype=bool)
    if vp_op is VisualPromptOp.NO_COPY:
        return np.ones((n_prompts, 1), dtype=bool)
    raise ValueError(f"unknown visual prompt op {vp_op!r}")


def _check_counts(tokens_per_frame, prompts_per_group):
    if tokens_per_frame < 1 or prompts_per_group < 1:
        raise ValueError("tokens_per_frame and prompts_per_group must be >= 1")


def build_masks(structure: PyramidStructure, tokens_per_frame: int, prompts_per_group: int,
                variant=InteractionVariant.AD, vp_op=VisualPromptOp.COPY_L1) -> MaskSet:
    """Fill the joint prompt/frame mask block by block from the cross-layer table."""
    variant, vp_op = InteractionVariant(variant), VisualPromptOp(vp_op)
    _check_counts(tokens_per_frame, prompts_per_group)
    sizes = structure.layer_sizes
    K = structure.num_layers
    n_e = structure.total_prompts
    # columns: prompts (canonical order) then frames; frames are layer 0
    joint = np.zeros((n_e, n_e + sizes[0]), dtype=bool)
    adjacent = np.zeros((n_e, n_e), dtype=bool)
    for k1 in range(K, 0, -1):
        r0 = sum(sizes[k1 + 1:])
        for k2 in range(k1 - 1, -1, -1):
            c0 = sum(sizes[k2 + 1:])
            c, o = structure.cross_layer[(k1, k2)]
            for i in range(sizes[k1]):
                joint[r0 + i, c0 + i * o: c0 + i * o + c] = True
            if k2 == k1 - 1:
                adjacent[r0:r0 + sizes[k1], c0:c0 + sizes[k2]] = True
    down = joint[:, :n_e]
    m_ee = _variant_mask(variant, down, adjacent | adjacent.T)
    m_ef = joint[:, n_e:].copy()
    # layer-1 columns plus the identity block of layer 1 itself
    to_bottom = (down | np.eye(n_e, dtype=bool))[:, n_e - sizes[1]:]
    m_ev = _visual_groups(vp_op, to_bottom, n_e).copy()
    return MaskSet(m_ee, m_ef, m_ev, tokens_per_frame, prompts_per_group, variant, vp_op)


def _tiled_segments(config: PyramidConfig) -> Dict[Tuple[int, int], SegmentInterval]:
    """Segments by literal child tiling, one layer at a time.

    Shares nothing with the cross-layer recurrence; also re-derives layer sizes
    by counting how many windows fit.
    """
    prev = [SegmentInterval(f, f) for f in range(config.frame_count)]
    out = {}
    for k, (c, o) in enumerate(config.layer_params, start=1):
        layer = []
        start = 0
        while start + c <= len(prev):
            kids = prev[start:start + c]
            layer.append(SegmentInterval(kids[0].start, kids[-1].end))
            start += o
        for j, seg in enumerate(layer):
            out[(k, j)] = seg
        prev = layer
    return out


def oracle_masks(structure: PyramidStructure, tokens_per_frame: int, prompts_per_group: int,
                 variant=InteractionVariant.AD, vp_op=VisualPromptOp.COPY_L1) -> MaskSet:
    """Pairwise interval-inclusion construction, O(N_e^2). Reference only."""
    variant, vp_op = InteractionVariant(variant), VisualPromptOp(vp_op)
    _check_counts(tokens_per_frame, prompts_per_group)
    seg = _tiled_segments(structure.config)
    order = sorted(seg, key=lambda kj: (-kj[0], kj[1]))
    n_e = len(order)
    n_f = structure.config.frame_count
    bottom = [kj for kj in order if kj[0] == 1]

    m_ee = np.zeros((n_e, n_e), dtype=bool)
    m_ef = np.zeros((n_e, n_f), dtype=bool)
    for a, (ka, ja) in enumerate(order):
        sa = seg[(ka, ja)]
        for f in range(n_f):
            m_ef[a, f] = f in sa
        for b, (kb, jb) in enumerate(order):
            sb = seg[(kb, jb)]
            if a == b:
                allowed = True
            elif variant is InteractionVariant.W:
                allowed = True
            elif variant is InteractionVariant.S:
                allowed = False
            else:
                anc = sb.strictly_contains(sa)   # b is an ancestor of a
                desc = sa.strictly_contains(sb)  # b is a descendant of a
                allowed = {
                    InteractionVariant.AD: anc or desc,
                    InteractionVariant.A: anc,
                    InteractionVariant.D: desc,
                    InteractionVariant.P: anc and kb == ka + 1,
                    InteractionVariant.C: desc and kb == ka - 1,
                    InteractionVariant.PC: (anc and kb == ka + 1) or (desc and kb == ka - 1),
                }[variant]
            m_ee[a, b] = allowed

    if vp_op is VisualPromptOp.NO_COPY:
        m_ev = np.ones((n_e, 1), dtype=bool)
    elif vp_op is VisualPromptOp.COPY_E:
        m_ev = np.zeros((n_e, n_e), dtype=bool)
        for a in range(n_e):
            m_ev[a, a] = True
    else:
        m_ev = np.zeros((n_e, len(bottom)), dtype=bool)
        for a, kj in enumerate(order):
            for g, leaf in enumerate(bottom):
                m_ev[a, g] = seg[kj].contains(seg[leaf])
    return MaskSet(m_ee, m_ef, m_ev, tokens_per_frame, prompts_per_group, variant, vp_op)


def _write_mask(path, mask: np.ndarray) -> None:
    rows, cols = mask.shape
    with open(path, "w") as fh:
        fh.write(f"{rows} {cols}\n")
        for row in mask.astype(np.uint8):
            fh.write(" ".join(map(str, row.tolist())))
            fh.write("\n")


def read_mask(path) -> np.ndarray:
    with open(path) as fh:
        rows, cols = map(int, fh.readline().split())
        data = np.loadtxt(fh, dtype=np.uint8, ndmin=2)
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {data.shape}")
    return data.astype(bool)


MASK_FILES = {"m_ee": "m_ee.txt", "m_ef": "m_ef.txt", "m_ev": "m_ev.txt"}


def export_masks(structure: PyramidStructure, masks: MaskSet, out_dir) -> dict:
    """Write the three expanded masks as text plus ``masks.json``."""
    os.makedirs(out_dir, exist_ok=True)
    for attr, name in MASK_FILES.items():
        _write_mask(os.path.join(out_dir, name), getattr(masks, attr))
    manifest = {
        "config": structure.config.to_dict(),
        "layer_sizes": list(structure.layer_sizes),
        "prompt_order": [list(kj) for kj in structure.prompt_order],
        "tokens_per_frame": masks.tokens_per_frame,
        "prompts_per_group": masks.prompts_per_group,
        "variant": masks.variant.value,
        "vp_op": masks.vp_op.value,
        "files": dict(MASK_FILES),
    }
    with open(os.path.join(out_dir, "masks.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
