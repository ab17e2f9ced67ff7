"""Toy vision transformer carrying the event prompt pyramid.

Frames go through frozen blocks independently (optionally with a temporal
adapter); event prompts are updated each layer by the block's attention
sublayer, reading frame tokens, other event prompts and replicated visual
prompts under the pyramid masks.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import MaskShapeError, ShapeError, UnknownMechanismError
from .layers import ResidualBlock, init_block
from .pyramid import MaskSet, PyramidStructure


class FrameMechanism(str, enum.Enum):
    ORIG = "ORIG"
    ADAPTER = "ADAPTER"
    ATTN_WHOLE = "ATTN_WHOLE"
    ATTN_PYR = "ATTN_PYR"
    ATTN_ADAPTER = "ATTN_ADAPTER"

    @property
    def uses_adapter(self):
        return self in (FrameMechanism.ADAPTER, FrameMechanism.ATTN_ADAPTER)

    @property
    def attends_events(self):
        return self in (FrameMechanism.ATTN_WHOLE, FrameMechanism.ATTN_PYR,
                        FrameMechanism.ATTN_ADAPTER)


def _mechanism(value) -> FrameMechanism:
    try:
        return FrameMechanism(value)
    except ValueError:
        raise UnknownMechanismError(f"unknown frame update mechanism {value!r}") from None


@dataclass
class VisualEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    layers: int = 4
    heads: int = 4
    visual_prompts: int = 4
    output_dim: int = 32
    channels: int = 3
    frame_mechanism: str = "ADAPTER"
    adapter_kernel: Tuple[int, int, int] = (3, 1, 1)
    adapter_first: bool = True
    freeze_backbone: bool = True
    event_mlp: bool = False
    # replicated visual prompt groups get their own zero-initialized offsets
    independent_groups: bool = True
    # "random": i.i.d. rows; "layer": one draw per pyramid layer; "shared": one draw for all
    event_prompt_init: str = "random"

    def __post_init__(self):
        self.adapter_kernel = tuple(int(k) for k in self.adapter_kernel)
        if self.image_size % self.patch_size:
            raise ShapeError("image_size must be divisible by patch_size")
        if self.width % 2:
            raise ShapeError("width must be even (adapter bottleneck is width // 2)")
        if len(self.adapter_kernel) != 3 or any(k % 2 == 0 or k < 1 for k in self.adapter_kernel):
            raise ShapeError(f"adapter_kernel must be three odd sizes, got {self.adapter_kernel}")
        self.frame_mechanism = _mechanism(self.frame_mechanism).value
        if self.event_prompt_init not in ("random", "layer", "shared"):
            raise ValueError(f"unknown event_prompt_init {self.event_prompt_init!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens_per_frame(self) -> int:
        return self.grid ** 2 + 1

    def to_dict(self):
        d = asdict(self)
        d["adapter_kernel"] = list(self.adapter_kernel)
        return d


class TemporalAdapter(nn.Module):
    """Down-projection, depthwise 3-D conv over (frame, h, w), up-projection.

    Only patch tokens are touched; the up-projection starts at zero so a fresh
    adapter is an exact identity.
    """

    def __init__(self, width, kernel=(3, 1, 1)):
        super().__init__()
        hidden = width // 2
        self.down = nn.Linear(width, hidden)
        self.conv = nn.Conv3d(hidden, hidden, kernel, padding=tuple(k // 2 for k in kernel),
                              groups=hidden, bias=False)
        self.up = nn.Linear(hidden, width)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x, grid):
        """``x``: (batch, frames, tokens, width) with token 0 the [CLS]."""
        b, t, n, d = x.shape
        h = w = grid
        if n != h * w + 1:
            raise ShapeError(f"{n} tokens per frame do not match a {h}x{w} grid plus [CLS]")
        patches = x[:, :, 1:, :]
        y = self.down(patches).view(b, t, h, w, -1).permute(0, 4, 1, 2, 3)
        y = self.conv(y).permute(0, 2, 3, 4, 1).reshape(b, t, h * w, -1)
        y = self.up(y)
        return torch.cat([x[:, :, :1, :], patches + y], dim=2)


def temporal_adapter_apply(frames, adapter: TemporalAdapter, grid=None):
    """Apply ``adapter`` to frame features shaped (frames, tokens, width) or batched."""
    single = frames.dim() == 3
    x = frames.unsqueeze(0) if single else frames
    if grid is None:
        grid = int(round((x.shape[2] - 1) ** 0.5))
    out = adapter(x, grid)
    return out[0] if single else out


def _expanded_masks(masks_ee, masks_ef, masks_ev, tokens_per_frame, prompts_per_group):
    return torch.cat([
        masks_ef.repeat_interleave(tokens_per_frame, dim=1),
        masks_ee,
        masks_ev.repeat_interleave(prompts_per_group, dim=1),
    ], dim=1)


def event_update_layer(events, frames, visual_prompts, mask, block: ResidualBlock,
                       event_mlp=False, return_weights=False):
    """One event-prompt update through a frozen block's attention sublayer.

    events: (B, N_e, d); frames: (B, N_f, N_s, d); visual_prompts:
    (B or 1, G * N_v, d); mask: bool (N_e, N_f*N_s + N_e + G*N_v) with
    ``True`` where attention is allowed.
    """
    b, n_e, d = events.shape
    flat = frames.reshape(b, -1, d)
    vp = visual_prompts.expand(b, -1, -1)
    n_keys = flat.shape[1] + n_e + vp.shape[1]
    if tuple(mask.shape) != (n_e, n_keys):
        raise MaskShapeError(f"mask is {tuple(mask.shape)}, expected {(n_e, n_keys)}")
    kv = block.ln_1(torch.cat([flat, events, vp], dim=1))
    out, weights = block.attn(block.ln_1(events), kv, mask, return_weights=True)
    events = events + out
    if event_mlp:
        events = block.mlp_residual(events)
    if return_weights:
        return events, weights
    return events


def _frame_block(frames, events, mechanism, block, frame_event_mask):
    b, t, n, d = frames.shape
    x = frames.reshape(b * t, n, d)
    if not mechanism.attends_events:
        return block(x).view(b, t, n, d)
    n_e = events.shape[1]
    extra = events.unsqueeze(1).expand(b, t, n_e, d).reshape(b * t, n_e, d)
    if mechanism is FrameMechanism.ATTN_WHOLE:
        return block(x, extra_kv=extra).view(b, t, n, d)
    # frame f may only see the events whose segment covers it
    ev = frame_event_mask.T.unsqueeze(1).expand(t, n, n_e)
    own = torch.ones(t, n, n, dtype=torch.bool, device=frames.device)
    mask = torch.cat([own, ev], dim=2).repeat(b, 1, 1)
    return block(x, mask=mask, extra_kv=extra).view(b, t, n, d)


def frame_update_layer(frames, events, mechanism, block: ResidualBlock,
                       adapter: Optional[TemporalAdapter] = None, frame_event_mask=None,
                       grid=None):
    """Advance frame features one layer. ``frames``: (B, N_f, N_s, d)."""
    mechanism = _mechanism(mechanism)
    if mechanism.uses_adapter:
        if adapter is None:
            raise ValueError(f"mechanism {mechanism.value} needs an adapter")
        frames = temporal_adapter_apply(frames, adapter, grid)
    if mechanism in (FrameMechanism.ATTN_PYR, FrameMechanism.ATTN_ADAPTER) \
            and frame_event_mask is None:
        raise ValueError(f"mechanism {mechanism.value} needs the frame/event mask")
    return _frame_block(frames, events, mechanism, block, frame_event_mask)


class VisualEncoder(nn.Module):
    def __init__(self, config: VisualEncoderConfig, structure: PyramidStructure,
                 masks: MaskSet, seed=0):
        super().__init__()
        self.config = config
        self.structure = structure
        self.mechanism = _mechanism(config.frame_mechanism)
        d = config.width
        n_e = structure.total_prompts
        if masks.m_ee.shape != (n_e, n_e) or masks.m_ef_compact.shape[1] != structure.frame_count:
            raise MaskShapeError("mask set does not match the pyramid structure")
        if masks.tokens_per_frame != config.tokens_per_frame \
                or masks.prompts_per_group != config.visual_prompts:
            raise MaskShapeError("mask expansion does not match tokens per frame / visual prompts")
        self.num_groups = masks.num_groups

        # frozen backbone
        self.conv1 = nn.Conv2d(config.channels, d, config.patch_size, config.patch_size,
                               bias=False)
        self.class_embedding = nn.Parameter(torch.empty(d))
        self.positional_embedding = nn.Parameter(torch.empty(config.tokens_per_frame, d))
        self.ln_pre = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(ResidualBlock(d, config.heads) for _ in range(config.layers))
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Parameter(torch.empty(d, config.output_dim))

        # trainable
        self.event_prompts = nn.Parameter(torch.empty(n_e, d))
        self.visual_prompts = nn.Parameter(torch.empty(config.layers, config.visual_prompts, d))
        if config.independent_groups:
            self.group_offsets = nn.Parameter(
                torch.zeros(config.layers, self.num_groups, config.visual_prompts, d))
        else:
            self.register_parameter("group_offsets", None)
        if self.mechanism.uses_adapter:
            self.adapters = nn.ModuleList(
                TemporalAdapter(d, config.adapter_kernel) for _ in range(config.layers))
        else:
            self.adapters = None

        self.register_buffer("m_ee", torch.from_numpy(np.array(masks.m_ee)), persistent=False)
        self.register_buffer("m_ef", torch.from_numpy(np.array(masks.m_ef_compact)),
                             persistent=False)
        self.register_buffer("m_ev", torch.from_numpy(np.array(masks.m_ev_compact)),
                             persistent=False)
        self._init(seed)
        self.set_backbone_frozen(config.freeze_backbone)

    def _init(self, seed):
        g = torch.Generator().manual_seed(seed)
        d = self.config.width
        scale = d ** -0.5
        with torch.no_grad():
            fan_in = self.config.channels * self.config.patch_size ** 2
            self.conv1.weight.normal_(0, fan_in ** -0.5, generator=g)
            self.class_embedding.normal_(0, scale, generator=g)
            self.positional_embedding.normal_(0, 0.01, generator=g)
            for block in self.blocks:
                init_block(block, g, d, self.config.layers)
            self.proj.normal_(0, scale, generator=g)
            self._init_event_prompts(g, scale)
            self.visual_prompts.normal_(0, scale, generator=g)
            if self.adapters is not None:
                for adapter in self.adapters:
                    adapter.down.weight.normal_(0, scale, generator=g)
                    adapter.down.bias.zero_()
                    adapter.conv.weight.normal_(0, 1.0 / np.prod(self.config.adapter_kernel),
                                                generator=g)

    def _init_event_prompts(self, g, scale):
        kind = self.config.event_prompt_init
        if kind == "random":
            self.event_prompts.normal_(0, scale, generator=g)
            return
        layers = self.structure.prompt_layers()
        draws = torch.empty(self.structure.num_layers + 1, self.config.width).normal_(
            0, scale, generator=g)
        rows = torch.as_tensor(layers) if kind == "layer" else torch.zeros(len(layers),
                                                                            dtype=torch.long)
        self.event_prompts.copy_(draws[rows])

    BACKBONE = ("conv1", "class_embedding", "positional_embedding", "ln_pre", "blocks",
                "ln_post", "proj")

    def is_backbone(self, name: str) -> bool:
        return name.split(".")[0] in self.BACKBONE

    def set_backbone_frozen(self, frozen: bool):
        for name, p in self.named_parameters():
            p.requires_grad_(not (frozen and self.is_backbone(name)))

    @property
    def attention_mask(self):
        """Expanded (N_e, N_f*N_s + N_e + G*N_v) mask for the event update."""
        return _expanded_masks(self.m_ee, self.m_ef, self.m_ev, self.config.tokens_per_frame,
                               self.config.visual_prompts)

    def replicated_visual_prompts(self, layer):
        p = self.visual_prompts[layer].unsqueeze(0).expand(self.num_groups, -1, -1)
        if self.group_offsets is not None:
            p = p + self.group_offsets[layer]
        return p.reshape(1, -1, self.config.width)

    def patch_embed(self, video):
        """(B, N_f, H, W, C) or (N_f, H, W, C) pixels -> (B, N_f, N_s, d)."""
        if video.dim() == 4:
            video = video.unsqueeze(0)
        cfg = self.config
        expected = (self.structure.frame_count, cfg.image_size, cfg.image_size, cfg.channels)
        if video.dim() != 5 or tuple(video.shape[1:]) != expected:
            raise ShapeError(f"video shape {tuple(video.shape)} does not match (B, *{expected})")
        b, t = video.shape[:2]
        x = video.reshape(b * t, *expected[1:]).permute(0, 3, 1, 2).to(self.conv1.weight.dtype)
        x = self.conv1(x).flatten(2).transpose(1, 2)
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        x = self.ln_pre(x)
        return x.view(b, t, cfg.tokens_per_frame, cfg.width)

    def forward(self, video, record: Optional[List] = None):
        """Return (event features (B, N_e, output_dim), final frame features).

        When ``record`` is a list, per-layer event attention weights
        (B, heads, N_e, keys) are appended to it.
        """
        frames = self.patch_embed(video)
        b = frames.shape[0]
        events = self.event_prompts.unsqueeze(0).expand(b, -1, -1)
        mask = self.attention_mask
        for layer, block in enumerate(self.blocks):
            if self.adapters is not None and self.config.adapter_first:
                frames = self.adapters[layer](frames, self.config.grid)
            vp = self.replicated_visual_prompts(layer)
            new_events, weights = event_update_layer(
                events, frames, vp, mask, block, self.config.event_mlp, return_weights=True)
            if record is not None:
                record.append(weights.detach())
            frames = _frame_block(frames, events, self.mechanism, block, self.m_ef)
            if self.adapters is not None and not self.config.adapter_first:
                frames = self.adapters[layer](frames, self.config.grid)
            events = new_events
        return self.ln_post(events) @ self.proj, frames


def encode_video(encoder: VisualEncoder, video, record=None):
    return encoder(video, record=record)
