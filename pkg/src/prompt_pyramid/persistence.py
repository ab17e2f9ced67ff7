"""Run configuration and checkpoint I/O.

A checkpoint is a directory holding ``manifest.json`` (format version, config
echo, step and a table of named tensors with shape, dtype, byte offset and
trainable flag) and ``tensors.bin``, the concatenated little-endian float32
data.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .data import SynthCorpusSpec
from .errors import ConfigError, CorruptBlobError, VersionError
from .model import LOGIT_SCALE_INIT, ModelConfig, PromptPyramidModel
from .pyramid import PyramidConfig, validate_config
from .text import TextEncoderConfig
from .training import TrainConfig
from .visual import VisualEncoderConfig

CHECKPOINT_VERSION = 1


def default_config() -> dict:
    """The toy reference configuration (paper pyramid, toy widths)."""
    return {
        "seed": 0,
        "pyramid": {"frame_count": 32, "layer_params": [[2, 2], [2, 1], [3, 2], [3, 2], [3, 1]]},
        "visual": VisualEncoderConfig().to_dict(),
        "text": TextEncoderConfig().to_dict(),
        "train": {"batch_size": 8, "epochs": 10, "steps": 300, "peak_lr": 8e-4,
                  "warmup_fraction": 0.1, "weight_decay": 0.2, "mil_levels": None},
        "data": SynthCorpusSpec().to_dict(),
        "corpus_path": None,
        "variant": "AD",
        "vp_op": "COPY_L1",
        "frame_mechanism": "ADAPTER",
        "mil_levels": None,
        "eval_levels": None,
        "output_dir": "runs/default",
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: SynthCorpusSpec
    corpus_path: Optional[str] = None
    seed: int = 0
    eval_levels: Optional[list] = None
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = _merge(default_config(), d)
        try:
            visual = dict(d["visual"])
            visual["frame_mechanism"] = d.get("frame_mechanism", visual["frame_mechanism"])
            text = dict(d["text"])
            data = dict(d["data"])
            data.setdefault("seed", d["seed"])
            corpus = SynthCorpusSpec.from_dict(data)
            vocab_size = len(corpus.vocabulary())
            if text["vocab_size"] < vocab_size:
                raise ConfigError(f"text vocab_size {text['vocab_size']} is smaller than the "
                                  f"corpus vocabulary ({vocab_size})")
            model = ModelConfig(PyramidConfig.from_dict(d["pyramid"]),
                                VisualEncoderConfig(**visual), TextEncoderConfig(**text),
                                d["variant"], d["vp_op"])
            train = dict(d["train"])
            train["seed"] = d["seed"]
            if d.get("mil_levels") is not None:
                train["mil_levels"] = d["mil_levels"]
            train = TrainConfig(**train)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc
        validate_config(model.pyramid)
        if corpus.frames != model.pyramid.frame_count:
            raise ConfigError(f"corpus has {corpus.frames} frames but the pyramid expects "
                              f"{model.pyramid.frame_count}")
        if corpus.image_size != model.visual.image_size:
            raise ConfigError("corpus image_size does not match the visual encoder")
        eval_levels = d.get("eval_levels")
        if eval_levels is None:
            eval_levels = train.mil_levels
        return cls(model, train, corpus, d.get("corpus_path"), int(d["seed"]), eval_levels,
                   d.get("output_dir", "runs/default"), d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "pyramid": self.model.pyramid.to_dict(),
            "visual": self.model.visual.to_dict(),
            "text": self.model.text.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "data": self.data.to_dict(),
            "corpus_path": self.corpus_path,
            "variant": self.model.variant,
            "vp_op": self.model.vp_op,
            "frame_mechanism": self.model.visual.frame_mechanism,
            "mil_levels": self.train.mil_levels,
            "eval_levels": self.eval_levels,
            "output_dir": self.output_dir,
        }


def _model_config_from_echo(echo: dict) -> ModelConfig:
    return ModelConfig(PyramidConfig.from_dict(echo["pyramid"]),
                       VisualEncoderConfig(**echo["visual"]), TextEncoderConfig(**echo["text"]),
                       echo["variant"], echo["vp_op"],
                       echo.get("logit_scale_init", LOGIT_SCALE_INIT))


def save_checkpoint(model: PromptPyramidModel, path, step=0, extra: Optional[dict] = None):
    os.makedirs(path, exist_ok=True)
    table, offset = [], 0
    with open(os.path.join(path, "tensors.bin"), "wb") as fh:
        for name, p in model.named_parameters():
            data = p.detach().cpu().numpy().astype("<f4", copy=False)
            raw = np.ascontiguousarray(data).tobytes()
            table.append({"name": name, "shape": list(p.shape), "dtype": "<f4",
                          "offset": offset, "nbytes": len(raw),
                          "trainable": bool(p.requires_grad),
                          "frozen": model.is_backbone(name)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict(),
                "step": step, "tensors": table, "total_bytes": offset, "extra": extra or {}}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def read_manifest(path) -> dict:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint format {manifest.get('format_version')!r} is not "
                           f"{CHECKPOINT_VERSION}")
    return manifest


def load_checkpoint(path, model: Optional[PromptPyramidModel] = None) -> PromptPyramidModel:
    """Load into ``model`` (checked for compatibility) or into a fresh model
    built from the config echo."""
    manifest = read_manifest(path)
    echo = manifest["config"]
    if model is None:
        model = PromptPyramidModel(_model_config_from_echo(echo))
    elif echo != model.config.to_dict():
        mine = model.config.to_dict()
        diff = sorted(k for k in set(echo) | set(mine) if echo.get(k) != mine.get(k))
        raise ConfigError(f"checkpoint config differs from the model in {diff}")
    with open(os.path.join(path, "tensors.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["total_bytes"]:
        raise CorruptBlobError(f"tensor blob has {len(blob)} bytes, manifest says "
                               f"{manifest['total_bytes']}")
    params = dict(model.named_parameters())
    entries = {t["name"]: t for t in manifest["tensors"]}
    if set(entries) != set(params):
        raise ConfigError(f"tensor names differ: {sorted(set(entries) ^ set(params))}")
    with torch.no_grad():
        for name, p in params.items():
            t = entries[name]
            if list(p.shape) != t["shape"]:
                raise ConfigError(f"{name}: checkpoint shape {t['shape']} vs model "
                                  f"{list(p.shape)}")
            n = int(np.prod(t["shape"], dtype=np.int64)) * 4
            if t["nbytes"] != n or t["offset"] + n > len(blob):
                raise CorruptBlobError(f"{name}: offset/shape mismatch")
            arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=t["offset"])
            p.copy_(torch.from_numpy(arr.reshape(t["shape"]).copy()))
            p.requires_grad_(t["trainable"])
    return model
