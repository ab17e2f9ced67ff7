"""Toy causal text transformer with per-layer prefix/postfix prompts.

The prompts of layer ``l`` are projected from that layer's visual prompts,
wrapped around the word features for one block, then dropped again.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, List, Sequence

import torch
from torch import nn

from .errors import LengthError, ShapeError, UnknownTokenError
from .layers import ResidualBlock, init_block

PAD, BEGIN, END = "<pad>", "<bos>", "<eos>"
RESERVED = (PAD, BEGIN, END)


class Vocabulary:
    """Whitespace tokenizer over a closed vocabulary; ids 0/1/2 are pad/begin/end."""

    def __init__(self, tokens: Iterable[str]):
        words = [t for t in tokens if t not in RESERVED]
        self.tokens: List[str] = list(RESERVED) + list(dict.fromkeys(words))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    pad_id, begin_id, end_id = 0, 1, 2

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str] | str) -> List[int]:
        if isinstance(words, str):
            words = words.split()
        try:
            ids = [self.index[w] for w in words]
        except KeyError as exc:
            raise UnknownTokenError(f"token {exc.args[0]!r} is not in the vocabulary") from None
        return [self.begin_id] + ids + [self.end_id]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.tokens, fh)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            tokens = json.load(fh)
        if list(tokens[:3]) != list(RESERVED):
            raise ValueError(f"{path}: first three tokens must be {RESERVED}")
        return cls(tokens)


def pad_batch(sequences: Sequence[Sequence[int]], pad_id=0):
    """Right-pad token lists; returns (ids (B, L) long tensor, end positions)."""
    length = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), length), pad_id, dtype=torch.long)
    ends = []
    for i, s in enumerate(sequences):
        ids[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
        ends.append(end_position(s))
    return ids, torch.as_tensor(ends, dtype=torch.long)


def end_position(sequence: Sequence[int], end_id=Vocabulary.end_id) -> int:
    hits = [i for i, t in enumerate(sequence) if t == end_id]
    if len(hits) != 1:
        raise ShapeError(f"expected exactly one end token, found {len(hits)}")
    return hits[0]


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    context_length: int = 24
    width: int = 32
    layers: int = 4
    heads: int = 4
    text_prompts: int = 8
    output_dim: int = 32
    postfix_visible: bool = False
    # "factored": token-mixing matrix times channel map; "full": affine on the flattened bank
    projector: str = "factored"

    def __post_init__(self):
        if self.text_prompts % 2:
            raise ShapeError("text_prompts must be even (half prefix, half postfix)")
        if self.projector not in ("factored", "full"):
            raise ValueError(f"unknown projector {self.projector!r}")

    def to_dict(self):
        return asdict(self)


class PromptProjector(nn.Module):
    """Map a visual prompt bank (N_v, d_v) to text prompts (N_t/2, d_t)."""

    def __init__(self, n_visual, visual_width, n_out, text_width, kind="factored"):
        super().__init__()
        self.kind = kind
        self.n_visual, self.visual_width = n_visual, visual_width
        self.n_out, self.text_width = n_out, text_width
        if kind == "full":
            self.linear = nn.Linear(n_visual * visual_width, n_out * text_width)
        else:
            self.mix = nn.Parameter(torch.empty(n_out, n_visual))
            self.channel = nn.Linear(visual_width, text_width, bias=False)
            self.bias = nn.Parameter(torch.zeros(n_out, text_width))
        self.reset()

    def reset(self, generator=None):
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        with torch.no_grad():
            if self.kind == "full":
                self.linear.weight.normal_(0, self.linear.in_features ** -0.5, generator=generator)
                self.linear.bias.zero_()
            else:
                self.mix.normal_(0, self.n_visual ** -0.5, generator=generator)
                self.channel.weight.normal_(0, self.visual_width ** -0.5, generator=generator)
                self.bias.zero_()

    def forward(self, bank):
        if tuple(bank.shape[-2:]) != (self.n_visual, self.visual_width):
            raise ShapeError(f"visual prompt bank is {tuple(bank.shape)}, "
                             f"expected (..., {self.n_visual}, {self.visual_width})")
        if self.kind == "full":
            out = self.linear(bank.flatten(-2))
            return out.view(*bank.shape[:-2], self.n_out, self.text_width)
        return self.mix @ self.channel(bank) + self.bias


def project_text_prompts(visual_prompts, pre: PromptProjector, post: PromptProjector):
    """Return (prefix, postfix), each (N_t/2, d_t)."""
    return pre(visual_prompts), post(visual_prompts)


class TextEncoder(nn.Module):
    def __init__(self, config: TextEncoderConfig, visual_prompts: int, visual_width: int,
                 seed=0):
        super().__init__()
        self.config = config
        d = config.width
        half = config.text_prompts // 2
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.positional_embedding = nn.Parameter(torch.empty(config.context_length, d))
        self.blocks = nn.ModuleList(ResidualBlock(d, config.heads) for _ in range(config.layers))
        self.ln_final = nn.LayerNorm(d)
        self.text_projection = nn.Parameter(torch.empty(d, config.output_dim))
        self.pre = nn.ModuleList(
            PromptProjector(visual_prompts, visual_width, half, d, config.projector)
            for _ in range(config.layers))
        self.post = nn.ModuleList(
            PromptProjector(visual_prompts, visual_width, half, d, config.projector)
            for _ in range(config.layers))
        self._init(seed)

    def _init(self, seed):
        g = torch.Generator().manual_seed(seed)
        d = self.config.width
        with torch.no_grad():
            self.token_embedding.weight.normal_(0, 0.02, generator=g)
            self.positional_embedding.normal_(0, 0.01, generator=g)
            for block in self.blocks:
                init_block(block, g, d, self.config.layers)
            self.text_projection.normal_(0, d ** -0.5, generator=g)
        for proj in list(self.pre) + list(self.post):
            proj.reset(g)

    BACKBONE = ("token_embedding", "positional_embedding", "blocks", "ln_final",
                "text_projection")

    def is_backbone(self, name: str) -> bool:
        return name.split(".")[0] in self.BACKBONE

    def set_backbone_frozen(self, frozen: bool):
        for name, p in self.named_parameters():
            p.requires_grad_(not (frozen and self.is_backbone(name)))

    def _mask(self, n_words, device):
        half = self.config.text_prompts // 2
        n = n_words + 2 * half
        mask = torch.ones(n, n, dtype=torch.bool, device=device).tril()
        if self.config.postfix_visible:
            mask[:, half + n_words:] = True
        return mask

    def forward(self, ids, ends, visual_prompts):
        """``ids``: (B, L) token ids; ``ends``: (B,) end-token positions;
        ``visual_prompts``: (layers, N_v, d_v). Returns (B, output_dim)."""
        b, n_words = ids.shape
        half = self.config.text_prompts // 2
        if n_words + 2 * half > self.config.context_length:
            raise LengthError(f"{n_words} tokens + {2 * half} prompts exceed the context "
                              f"length {self.config.context_length}")
        if visual_prompts.shape[0] != len(self.blocks):
            raise ShapeError("need one visual prompt bank per text layer")
        x = self.token_embedding(ids) + self.positional_embedding[:n_words]
        mask = self._mask(n_words, ids.device)
        for layer, block in enumerate(self.blocks):
            prefix, postfix = project_text_prompts(visual_prompts[layer], self.pre[layer],
                                                   self.post[layer])
            seq = torch.cat([prefix.expand(b, -1, -1), x, postfix.expand(b, -1, -1)], dim=1)
            x = block(seq, mask=mask)[:, half:half + n_words]
        x = self.ln_final(x)
        picked = x[torch.arange(b, device=ids.device), ends]
        return picked @ self.text_projection


def encode_text(encoder: TextEncoder, tokens: Sequence[int], visual_prompts):
    ids, ends = pad_batch([tokens])
    return encoder(ids, ends, visual_prompts)[0]
