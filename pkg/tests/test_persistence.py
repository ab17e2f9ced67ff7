import json
import os

import pytest
import torch

from prompt_pyramid.errors import ConfigError, CorruptBlobError, VersionError
from prompt_pyramid.model import PromptPyramidModel
from prompt_pyramid.persistence import (RunConfig, default_config, load_checkpoint,
                                        read_manifest, save_checkpoint)
from prompt_pyramid.pyramid import PyramidConfig

from test_encoders import small_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def saved(tmp_path):
    model = PromptPyramidModel(small_config(), seed=3)
    with torch.no_grad():
        model.visual.event_prompts.add_(1.0)
    path = save_checkpoint(model, tmp_path / "ckpt", step=7)
    return model, path


def test_roundtrip_is_bit_exact(saved):
    model, path = saved
    loaded = load_checkpoint(path)
    for (n, p), (m, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n == m and torch.equal(p, q)
        assert p.requires_grad == q.requires_grad
    assert read_manifest(path)["step"] == 7


def test_load_into_existing_model(saved):
    model, path = saved
    target = PromptPyramidModel(small_config(), seed=99)
    load_checkpoint(path, target)
    assert torch.equal(target.visual.event_prompts, model.visual.event_prompts)


def test_manifest_records_flags(saved):
    model, path = saved
    table = {t["name"]: t for t in read_manifest(path)["tensors"]}
    assert table["visual.event_prompts"]["trainable"]
    assert table["visual.conv1.weight"]["frozen"] and not table["visual.conv1.weight"]["trainable"]
    assert all(t["dtype"] == "<f4" for t in table.values())


def test_truncated_blob(saved):
    _, path = saved
    blob = os.path.join(path, "tensors.bin")
    with open(blob, "rb") as fh:
        raw = fh.read()
    with open(blob, "wb") as fh:
        fh.write(raw[:-8])
    with pytest.raises(CorruptBlobError):
        load_checkpoint(path)


def test_bad_offset(saved):
    _, path = saved
    mpath = os.path.join(path, "manifest.json")
    m = json.load(open(mpath))
    m["tensors"][-1]["offset"] += 4
    json.dump(m, open(mpath, "w"))
    with pytest.raises(CorruptBlobError):
        load_checkpoint(path)


def test_version_mismatch(saved):
    _, path = saved
    mpath = os.path.join(path, "manifest.json")
    m = json.load(open(mpath))
    m["format_version"] = 99
    json.dump(m, open(mpath, "w"))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_mismatched_prompt_count(saved):
    _, path = saved
    cfg = small_config()
    cfg.pyramid = PyramidConfig(8, ((2, 2), (4, 1)))
    with pytest.raises(ConfigError):
        load_checkpoint(path, PromptPyramidModel(cfg))


def test_mismatched_shapes_in_manifest(saved):
    _, path = saved
    mpath = os.path.join(path, "manifest.json")
    m = json.load(open(mpath))
    for t in m["tensors"]:
        if t["name"] == "visual.event_prompts":
            t["shape"][0] += 1
    json.dump(m, open(mpath, "w"))
    with pytest.raises((ConfigError, CorruptBlobError)):
        load_checkpoint(path)


def test_default_json_matches_builtin_config():
    with open(os.path.join(ROOT, "default.json")) as fh:
        assert json.load(fh) == default_config()


def test_run_config_roundtrip():
    cfg = RunConfig.from_dict({})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert cfg.model.pyramid.frame_count == 32 and cfg.model.visual.visual_prompts == 4
    assert cfg.model.text.text_prompts == 8


@pytest.mark.parametrize("override", [
    {"text": {"layers": 3}},
    {"data": {"frames": 16}},
    {"data": {"image_size": 48}},
    {"text": {"vocab_size": 10}},
    {"variant": "XYZ"},
    {"pyramid": {"frame_count": 32, "layer_params": [[3, 2], [3, 1]]}},
    {"train": {"bogus": 1}},
])
def test_run_config_rejects_inconsistent(override):
    with pytest.raises((ConfigError, ValueError)):
        RunConfig.from_dict(override)


def test_load_rejects_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)
