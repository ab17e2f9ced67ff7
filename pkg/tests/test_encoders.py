import copy

import numpy as np
import pytest
import torch

from prompt_pyramid.errors import (ConfigError, LengthError, MaskShapeError, ShapeError,
                                   UnknownMechanismError, UnknownTokenError)
from prompt_pyramid.layers import MaskedAttention, ResidualBlock
from prompt_pyramid.model import ModelConfig, PromptPyramidModel
from prompt_pyramid.pyramid import PyramidConfig, build_masks, segment_of, validate_config
from prompt_pyramid.text import PromptProjector, TextEncoderConfig, Vocabulary, pad_batch
from prompt_pyramid.visual import (FrameMechanism, TemporalAdapter, VisualEncoderConfig,
                                   event_update_layer, frame_update_layer)


def small_config(**visual):
    return ModelConfig(PyramidConfig(8, ((2, 2), (2, 1), (3, 1))),
                       VisualEncoderConfig(image_size=16, patch_size=8, width=16, layers=2,
                                           heads=2, visual_prompts=2, output_dim=8, **visual),
                       TextEncoderConfig(vocab_size=12, context_length=16, width=16, layers=2,
                                         heads=2, text_prompts=4, output_dim=8))


def video(seed, frames=8, size=16, batch=2):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, frames, size, size, 3, generator=g)


def test_masked_attention_matches_reference():
    torch.manual_seed(0)
    attn = MaskedAttention(8, 2)
    ref = torch.nn.MultiheadAttention(8, 2, batch_first=True)
    with torch.no_grad():
        ref.in_proj_weight.copy_(attn.in_proj_weight.normal_())
        ref.in_proj_bias.copy_(attn.in_proj_bias.normal_())
        ref.out_proj.weight.copy_(attn.out_proj.weight)
        ref.out_proj.bias.copy_(attn.out_proj.bias)
    q, kv = torch.randn(3, 4, 8), torch.randn(3, 6, 8)
    mask = torch.rand(4, 6) > 0.4
    mask[:, 0] = True
    out = attn(q, kv, mask)
    expected, _ = ref(q, kv, kv, attn_mask=~mask)
    assert torch.allclose(out, expected, atol=1e-5)


def test_masked_slots_get_exactly_zero_weight():
    torch.manual_seed(0)
    attn = MaskedAttention(8, 2)
    mask = torch.tensor([[True, False, True], [False, False, True]])
    _, w = attn(torch.randn(1, 2, 8), 1e3 * torch.randn(1, 3, 8), mask, return_weights=True)
    assert (w[..., ~mask] == 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(1, 2, 2))


@pytest.mark.parametrize("variant", ["AD", "S", "PC", "W"])
@pytest.mark.parametrize("mechanism", list(FrameMechanism))
def test_no_attention_leaks_through_masks(variant, mechanism):
    cfg = small_config(frame_mechanism=mechanism.value)
    cfg.variant = variant
    model = PromptPyramidModel(cfg)
    record = []
    model.visual(video(0), record=record)
    allowed = model.visual.attention_mask
    assert len(record) == cfg.visual.layers
    for w in record:
        assert w.shape[-2:] == allowed.shape
        assert (w[..., ~allowed] == 0).all()


def test_segment_only_update_ignores_other_frames():
    cfg = small_config()
    cfg.variant = "S"
    model = PromptPyramidModel(cfg).double()
    enc = model.visual
    frames = enc.patch_embed(video(1).double())
    events = enc.event_prompts.unsqueeze(0).expand(2, -1, -1)
    vp = enc.replicated_visual_prompts(0)
    base = event_update_layer(events, frames, vp, enc.attention_mask, enc.blocks[0])
    s = model.structure
    for idx, (k, j) in enumerate(s.prompt_order):
        seg = segment_of(s, k, j)
        outside = [f for f in range(s.frame_count) if f not in seg]
        if not outside:
            continue
        moved = frames.clone()
        moved[:, outside] += torch.randn_like(moved[:, outside])
        after = event_update_layer(events, moved, vp, enc.attention_mask, enc.blocks[0])
        assert torch.equal(after[:, idx], base[:, idx])


def test_event_update_rejects_bad_mask():
    model = PromptPyramidModel(small_config())
    enc = model.visual
    frames = enc.patch_embed(video(0))
    events = enc.event_prompts.unsqueeze(0).expand(2, -1, -1)
    with pytest.raises(MaskShapeError):
        event_update_layer(events, frames, enc.replicated_visual_prompts(0),
                           enc.attention_mask[:, :-1], enc.blocks[0])


def test_adapter_is_identity_at_init():
    adapter = TemporalAdapter(16)
    x = torch.randn(2, 8, 5, 16)
    assert torch.equal(adapter(x, 2), x)
    with torch.no_grad():
        adapter.up.weight.normal_()
    y = adapter(x, 2)
    assert torch.equal(y[:, :, 0], x[:, :, 0])  # [CLS] untouched
    assert not torch.equal(y, x)


def test_adapter_mixes_only_neighbouring_frames():
    adapter = TemporalAdapter(16)
    with torch.no_grad():
        adapter.up.weight.normal_()
    x = torch.randn(1, 8, 5, 16)
    base = adapter(x, 2)
    x2 = x.clone()
    x2[:, 0] += 1.0
    diff = (adapter(x2, 2) - base).abs().sum(dim=(0, 2, 3))
    assert diff[0] > 0 and diff[1] > 0 and (diff[2:] == 0).all()


def test_encode_video_independent_of_adapter_internals_at_init():
    model = PromptPyramidModel(small_config())
    v = video(2)
    out = model.encode_video(v)
    with torch.no_grad():
        for adapter in model.visual.adapters:
            adapter.down.weight.normal_()
            adapter.down.bias.normal_()
            adapter.conv.weight.normal_()
    assert torch.equal(model.encode_video(v), out)


def test_adapter_equals_orig_at_init():
    a = PromptPyramidModel(small_config(frame_mechanism="ADAPTER"))
    b = PromptPyramidModel(small_config(frame_mechanism="ORIG"))
    v = video(3)
    assert torch.equal(a.encode_video(v), b.encode_video(v))


def test_frame_update_errors():
    block = ResidualBlock(16, 2)
    frames = torch.randn(1, 8, 5, 16)
    with pytest.raises(ValueError):
        frame_update_layer(frames, None, "ADAPTER", block)
    with pytest.raises(UnknownMechanismError):
        frame_update_layer(frames, None, "BOGUS", block)
    with pytest.raises(UnknownMechanismError):
        VisualEncoderConfig(frame_mechanism="BOGUS")


def test_video_shape_checked():
    model = PromptPyramidModel(small_config())
    with pytest.raises(ShapeError):
        model.encode_video(torch.rand(1, 7, 16, 16, 3))


def test_output_shapes():
    model = PromptPyramidModel(small_config())
    assert model.encode_video(video(0)).shape == (2, model.structure.total_prompts, 8)
    ids, ends = pad_batch([[1, 4, 5, 2], [1, 6, 2]])
    assert model.encode_text(ids, ends).shape == (2, 8)


def test_default_masks_match_encoder_shapes():
    model = PromptPyramidModel(ModelConfig())
    assert tuple(model.visual.attention_mask.shape) == (42, 32 * 17 + 42 + 16 * 4)


def test_text_is_causal_and_ignores_padding():
    model = PromptPyramidModel(small_config())
    vp = model.visual.visual_prompts
    ids, ends = pad_batch([[1, 4, 5, 2]])
    base = model.text(ids, ends, vp)
    padded = torch.tensor([[1, 4, 5, 2, 0, 0]])
    assert torch.allclose(model.text(padded, ends, vp), base, atol=1e-6)
    changed = torch.tensor([[1, 4, 5, 2, 7, 8]])
    assert torch.allclose(model.text(changed, ends, vp), base, atol=1e-6)
    other = torch.tensor([[1, 4, 6, 2]])
    assert not torch.allclose(model.text(other, ends, vp), base)


def test_text_prompts_follow_visual_prompts():
    model = PromptPyramidModel(small_config())
    ids, ends = pad_batch([[1, 4, 5, 2]])
    vp = model.visual.visual_prompts.detach().clone()
    base = model.text(ids, ends, vp)
    assert not torch.allclose(model.text(ids, ends, vp + 0.5), base)


def test_postfix_visible_changes_output():
    cfg = small_config()
    model = PromptPyramidModel(cfg)
    ids, ends = pad_batch([[1, 4, 5, 2]])
    vp = model.visual.visual_prompts
    hidden = model.text(ids, ends, vp)
    model.text.config.postfix_visible = True
    assert not torch.allclose(model.text(ids, ends, vp), hidden)


def test_context_length_enforced():
    model = PromptPyramidModel(small_config())
    ids, ends = pad_batch([[1] + [4] * 11 + [2]])
    with pytest.raises(LengthError):
        model.encode_text(ids, ends)


def test_vocabulary(tmp_path):
    v = Vocabulary(["a", "red", "square", "moves_left"])
    assert v.encode("a red square moves_left") == [1, 3, 4, 5, 6, 2]
    with pytest.raises(UnknownTokenError):
        v.encode("a blue square")
    v.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json") == v
    with pytest.raises(ShapeError):
        pad_batch([[1, 3, 4]])


def test_layer_counts_must_agree():
    with pytest.raises(ConfigError):
        ModelConfig(visual=VisualEncoderConfig(layers=3), text=TextEncoderConfig(layers=4))


def test_trainable_fraction_and_backbone_split():
    model = PromptPyramidModel(ModelConfig())
    report = model.parameter_report()
    assert report["fraction"] < 0.25
    trainable = set(model.trainable_names())
    assert "logit_scale" in trainable
    assert "visual.event_prompts" in trainable and "visual.visual_prompts" in trainable
    assert any(n.startswith("visual.adapters") for n in trainable)
    assert any(n.startswith("text.pre") for n in trainable)
    assert not trainable & set(model.backbone_names())
    model.set_backbone_frozen(False)
    assert set(model.backbone_names()) <= set(model.trainable_names())


@pytest.mark.parametrize("init", ["random", "layer", "shared"])
def test_event_prompt_init(init):
    model = PromptPyramidModel(small_config(event_prompt_init=init))
    rows = model.visual.event_prompts.detach()
    layers = model.structure.prompt_layers()
    distinct = len({tuple(r.tolist()) for r in rows})
    expected = {"random": len(rows), "layer": len(set(layers)), "shared": 1}[init]
    assert distinct == expected


def test_seeded_init_is_reproducible():
    a = PromptPyramidModel(small_config(), seed=5)
    b = PromptPyramidModel(small_config(), seed=5)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


@pytest.mark.parametrize("layer_params,variant", [(((2, 2), (2, 1), (3, 1)), "S"),
                                                   (((2, 2), (2, 1)), "AD")])
def test_identical_frames_give_identical_leaves(layer_params, variant):
    # under AD this needs every leaf to have the same number of ancestors,
    # otherwise duplicated identical keys shift the softmax weights
    frames = 8 if len(layer_params) == 3 else 4
    cfg = small_config(event_prompt_init="shared")
    cfg.pyramid = PyramidConfig(frames, layer_params)
    cfg.variant = variant
    model = PromptPyramidModel(cfg)
    clip = video(3, batch=1)[:, :1].expand(1, frames, 16, 16, 3).contiguous()
    with torch.no_grad():
        events = model.visual(clip)[0][0]
    leaves = [i for i, k in enumerate(model.structure.prompt_layers()) if k == 1]
    assert len(leaves) > 1
    for i in leaves[1:]:
        assert torch.allclose(events[i], events[leaves[0]], atol=1e-6)


@pytest.mark.parametrize("kind", ["factored", "full"])
def test_projector_linear_and_non_degenerate(kind):
    proj = PromptProjector(4, 64, 4, 32, kind)
    proj.reset(torch.Generator().manual_seed(0))
    zero = proj(torch.zeros(4, 64))
    assert zero.shape == (4, 32) and torch.equal(zero, torch.zeros(4, 32))
    a, b = torch.randn(2, 4, 64, generator=torch.Generator().manual_seed(1))
    assert not torch.allclose(proj(a), proj(b))


def test_postfix_invisible_under_strict_causal():
    model = PromptPyramidModel(small_config())
    ids, ends = pad_batch([[1, 4, 5, 2]])
    vp = model.visual.visual_prompts.detach()
    base = model.text(ids, ends, vp)
    with torch.no_grad():
        for post in model.text.post:
            post.bias.add_(1.0)
            post.mix.mul_(-3.0)
    assert torch.equal(model.text(ids, ends, vp), base)
