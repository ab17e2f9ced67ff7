"""Full retrieval model: pyramid masks, both encoders and the logit scale."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
from torch import nn

from .errors import ConfigError
from .pyramid import (InteractionVariant, PyramidConfig, PyramidStructure, VisualPromptOp,
                      build_masks, validate_config)
from .text import TextEncoder, TextEncoderConfig
from .visual import VisualEncoder, VisualEncoderConfig

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100)


@dataclass
class ModelConfig:
    pyramid: PyramidConfig = field(default_factory=lambda: PyramidConfig(32))
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    variant: str = "AD"
    vp_op: str = "COPY_L1"
    logit_scale_init: float = LOGIT_SCALE_INIT

    def __post_init__(self):
        self.variant = InteractionVariant(self.variant).value
        self.vp_op = VisualPromptOp(self.vp_op).value
        if self.visual.layers != self.text.layers:
            raise ConfigError(f"visual layers ({self.visual.layers}) must equal text layers "
                              f"({self.text.layers})")

    def to_dict(self):
        return {"pyramid": self.pyramid.to_dict(), "visual": self.visual.to_dict(),
                "text": self.text.to_dict(), "variant": self.variant, "vp_op": self.vp_op,
                "logit_scale_init": self.logit_scale_init}


class PromptPyramidModel(nn.Module):
    def __init__(self, config: ModelConfig, seed=0, structure: Optional[PyramidStructure] = None):
        super().__init__()
        self.config = config
        self.structure = structure or validate_config(config.pyramid)
        self.masks = build_masks(self.structure, config.visual.tokens_per_frame,
                                 config.visual.visual_prompts, config.variant, config.vp_op)
        self.visual = VisualEncoder(config.visual, self.structure, self.masks, seed=seed)
        self.text = TextEncoder(config.text, config.visual.visual_prompts, config.visual.width,
                                seed=seed + 1)
        self.logit_scale = nn.Parameter(torch.tensor(float(config.logit_scale_init)))
        self.set_backbone_frozen(config.visual.freeze_backbone)

    def set_backbone_frozen(self, frozen: bool):
        self.visual.set_backbone_frozen(frozen)
        self.text.set_backbone_frozen(frozen)

    def is_backbone(self, name: str) -> bool:
        branch, _, rest = name.partition(".")
        if branch == "visual":
            return self.visual.is_backbone(rest)
        if branch == "text":
            return self.text.is_backbone(rest)
        return False

    def backbone_names(self) -> List[str]:
        return [n for n, _ in self.named_parameters() if self.is_backbone(n)]

    def trainable_names(self) -> List[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def parameter_report(self) -> Dict[str, float]:
        total = sum(p.numel() for p in self.parameters())
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return {"total": total, "trainable": trainable, "fraction": trainable / total}

    def encode_video(self, video, record=None):
        """(B, N_f, H, W, C) -> event features (B, N_e, d)."""
        return self.visual(video, record=record)[0]

    def encode_text(self, ids, ends):
        return self.text(ids, ends, self.visual.visual_prompts)

    def clamp_logit_scale(self, max_value=LOGIT_SCALE_MAX):
        with torch.no_grad():
            self.logit_scale.clamp_(max=max_value)
