"""MIL scoring, symmetric InfoNCE, learning-rate schedule and the train loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyLevelError, NaNLossError, TieError
from .model import LOGIT_SCALE_INIT, LOGIT_SCALE_MAX, PromptPyramidModel
from .pyramid import PyramidStructure

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    steps: Optional[int] = None  # overrides epochs when set
    peak_lr: float = 8e-4
    warmup_fraction: float = 0.1
    warmup_steps: Optional[int] = None
    weight_decay: float = 0.2
    seed: int = 0
    mil_levels: Optional[List[int]] = None  # None selects every layer
    logit_scale_init: float = LOGIT_SCALE_INIT
    logit_scale_max: float = LOGIT_SCALE_MAX

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.mil_levels is not None:
            self.mil_levels = sorted(int(k) for k in self.mil_levels)
            if not self.mil_levels:
                raise EmptyLevelError("mil_levels must not be empty")

    def total_steps(self, num_pairs: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return self.epochs * math.ceil(num_pairs / self.batch_size)

    def warmup(self, total: int) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return int(round(self.warmup_fraction * total))

    def to_dict(self):
        return asdict(self)


def _level_selector(structure: PyramidStructure, levels) -> torch.Tensor:
    if levels is not None and len(list(levels)) == 0:
        raise EmptyLevelError("at least one pyramid level must be selected")
    return torch.from_numpy(structure.level_mask(levels))


def first_argmax(values: torch.Tensor, dim=-1) -> torch.Tensor:
    """Index of the first maximum along ``dim`` (ties go to the lowest index)."""
    top = values.max(dim=dim, keepdim=True).values
    n = values.shape[dim]
    idx = torch.arange(n, device=values.device)
    shape = [1] * values.dim()
    shape[dim] = n
    idx = idx.view(shape).expand_as(values)
    # all-NaN rows fall back to the last index so the NaN propagates to the loss
    return torch.where(values == top, idx, n).min(dim=dim).values.clamp_max(n - 1)


def cosine_table(queries: torch.Tensor, events: torch.Tensor) -> torch.Tensor:
    """Cosine of every query with every event: (Q, d) x (V, N_e, d) -> (Q, V, N_e)."""
    q = F.normalize(queries, dim=-1)
    e = F.normalize(events, dim=-1)
    return torch.einsum("qd,ved->qve", q, e)


def masked_max(cos: torch.Tensor, selector: torch.Tensor):
    """Max over selected events on the last axis; returns (scores, arg indices).

    Gradients reach only the selected argmax entry.
    """
    fill = torch.finfo(cos.dtype).min
    masked = cos.masked_fill(~selector, fill)
    arg = first_argmax(masked.detach())
    return masked.gather(-1, arg.unsqueeze(-1)).squeeze(-1), arg


def mil_similarity(query, events, structure: PyramidStructure, levels=None
                   ) -> Tuple[float, Tuple[int, int]]:
    """Best cosine between one query (d,) and one video's events (N_e, d)."""
    selector = _level_selector(structure, levels)
    score, arg = masked_max(cosine_table(query.unsqueeze(0), events.unsqueeze(0))[0, 0],
                            selector)
    return score, structure.prompt_at(int(arg))


def batch_similarity_matrix(queries, event_banks, structure: PyramidStructure, levels=None,
                            return_argmax=False):
    """S[i, j] = MIL similarity of query i and video j."""
    selector = _level_selector(structure, levels).to(queries.device)
    scores, arg = masked_max(cosine_table(queries, event_banks), selector)
    if return_argmax:
        return scores, arg
    return scores


def infonce_loss(similarity, logit_scale):
    """Symmetric cross-entropy over rows and columns of ``exp(s) * S``."""
    logits = logit_scale.exp() * similarity
    target = torch.arange(similarity.shape[0], device=similarity.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: PromptPyramidModel, config: TrainConfig):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if name == "logit_scale" else decay).append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=config.peak_lr, betas=(0.9, 0.98), eps=1e-6)


@dataclass
class Batch:
    videos: torch.Tensor  # (B, N_f, H, W, C)
    ids: torch.Tensor  # (B, L)
    ends: torch.Tensor  # (B,)


def batch_loss(model: PromptPyramidModel, batch: Batch, levels=None):
    events = model.encode_video(batch.videos)
    queries = model.encode_text(batch.ids, batch.ends)
    sim = batch_similarity_matrix(queries, events, model.structure, levels)
    return infonce_loss(sim, model.logit_scale)


def train_step(model: PromptPyramidModel, batch: Batch, optimizer, lr: float, levels=None,
               logit_scale_max=LOGIT_SCALE_MAX) -> float:
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, levels)
    if not torch.isfinite(loss):
        raise NaNLossError(f"non-finite loss {loss.item()} "
                           f"(logit_scale={model.logit_scale.item():.4f}, lr={lr:.3g})")
    loss.backward()
    optimizer.step()
    model.clamp_logit_scale(logit_scale_max)
    return loss.item()


class Trainer:
    """Fixed-length training over (video, query) pairs.

    ``pairs`` yields index pairs into ``videos`` and ``tokens``; batches never
    repeat a video so the diagonal of the similarity matrix is the only
    positive.
    """

    def __init__(self, model: PromptPyramidModel, config: TrainConfig, log_path=None):
        self.model = model
        self.config = config
        self.optimizer = make_optimizer(model, config)
        self.log_path = log_path
        self.history: List[dict] = []
        self.step = 0

    def batches(self, video_of_query: Sequence[int], rng: np.random.Generator):
        """Yield lists of query indices; each batch has distinct videos."""
        bs = self.config.batch_size
        while True:
            order = rng.permutation(len(video_of_query))
            pending = list(order)
            while pending:
                batch, seen, rest = [], set(), []
                for q in pending:
                    v = video_of_query[q]
                    if len(batch) < bs and v not in seen:
                        batch.append(q)
                        seen.add(v)
                    else:
                        rest.append(q)
                pending = rest
                if len(batch) >= 2:
                    yield batch

    def fit(self, videos: torch.Tensor, tokens: Sequence[Sequence[int]],
            video_of_query: Sequence[int], callback=None):
        from .text import pad_batch

        cfg = self.config
        if len(set(video_of_query)) < 2:
            raise ValueError("training needs queries for at least two different videos")
        total = cfg.total_steps(len(tokens))
        warmup = cfg.warmup(total)
        rng = np.random.default_rng(cfg.seed)
        log = open(self.log_path, "w") if self.log_path else None
        try:
            for step, qs in zip(range(total), self.batches(video_of_query, rng)):
                ids, ends = pad_batch([tokens[q] for q in qs])
                vids = videos[[video_of_query[q] for q in qs]]
                lr = lr_at(step, cfg.peak_lr, warmup, total)
                loss = train_step(self.model, Batch(vids, ids, ends), self.optimizer, lr,
                                  cfg.mil_levels, cfg.logit_scale_max)
                record = {"step": step, "lr": lr, "loss": loss,
                          "logit_scale": self.model.logit_scale.item()}
                self.history.append(record)
                if log:
                    log.write(json.dumps(record) + "\n")
                if step % 50 == 0:
                    logger.info("step %d loss %.4f lr %.2e", step, loss, lr)
                if callback is not None:
                    callback(step, self.model)
                self.step = step + 1
        finally:
            if log:
                log.close()
        return self.history


def _flat_index(shape, flat):
    return tuple(int(i) for i in np.unravel_index(flat, shape))


def grad_check(model: PromptPyramidModel, batch: Batch, coordinates, eps=1e-3, levels=None):
    """Central finite differences against autograd at the given coordinates.

    ``coordinates`` is a list of (parameter name, index tuple). The model is
    evaluated in float64. Returns a list of dicts with analytic/numeric
    gradients and the relative error. Raises TieError when the MIL argmax is
    not unique or moves under the perturbation.
    """
    import copy

    model = copy.deepcopy(model).double()
    model.eval()
    params = dict(model.named_parameters())
    batch = Batch(batch.videos.double(), batch.ids, batch.ends)

    def forward():
        events = model.encode_video(batch.videos)
        queries = model.encode_text(batch.ids, batch.ends)
        sim, arg = batch_similarity_matrix(queries, events, model.structure, levels,
                                           return_argmax=True)
        cos = cosine_table(queries, events)
        return infonce_loss(sim, model.logit_scale), arg, cos

    model.zero_grad(set_to_none=True)
    for p in model.parameters():
        p.requires_grad_(True)
    loss, arg0, cos = forward()
    selector = _level_selector(model.structure, levels)
    ranked = cos.detach().masked_fill(~selector, -math.inf).sort(dim=-1, descending=True).values
    gap = (ranked[..., 0] - ranked[..., 1]).min().item() if selector.sum() > 1 else math.inf
    if gap <= 0:
        raise TieError("MIL argmax is not unique at the evaluation point")
    loss.backward()

    results = []
    with torch.no_grad():
        for name, index in coordinates:
            p = params[name]
            analytic = p.grad[index].item() if p.grad is not None else 0.0
            orig = p[index].item()
            values = []
            for sign in (1, -1):
                p[index] = orig + sign * eps
                value, arg, _ = forward()
                if not torch.equal(arg, arg0):
                    p[index] = orig
                    raise TieError(f"MIL argmax moves when perturbing {name}{list(index)}")
                values.append(value.item())
            p[index] = orig
            numeric = (values[0] - values[1]) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            results.append({"name": name, "index": list(index), "analytic": analytic,
                            "numeric": numeric, "rel_error": abs(analytic - numeric) / denom})
    return results


def sample_coordinates(model: PromptPyramidModel, count: int, seed=0, names=None):
    """Pick ``count`` random coordinates among trainable parameters.

    Parameters are visited round-robin so every named tensor is sampled.
    """
    rng = np.random.default_rng(seed)
    pool = [(n, p) for n, p in model.named_parameters()
            if p.requires_grad and (names is None or n in names)]
    coords = []
    i = 0
    while len(coords) < count:
        name, p = pool[i % len(pool)]
        flat = int(rng.integers(p.numel())) if p.numel() > 1 else 0
        coords.append((name, _flat_index(tuple(p.shape), flat)))
        i += 1
    return coords
