"""End-to-end steps shared by the CLI and the acceptance suite."""
from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
import torch

from .data import SynthCorpus, generate_corpus, load_corpus
from .evaluation import (DEFAULT_KS, RetrievalReport, VcmrReport, grounding_hits, rank_by_score,
                         recall_at_k, vcmr_eval)
from .model import PromptPyramidModel
from .persistence import RunConfig
from .text import pad_batch
from .training import Trainer, batch_similarity_matrix


def corpus_for(cfg: RunConfig) -> SynthCorpus:
    if cfg.corpus_path:
        return load_corpus(cfg.corpus_path)
    return generate_corpus(cfg.data)


def build_model(cfg: RunConfig) -> PromptPyramidModel:
    torch.manual_seed(cfg.seed)
    return PromptPyramidModel(cfg.model, seed=cfg.seed)


def train_model(cfg: RunConfig, corpus: SynthCorpus, model: Optional[PromptPyramidModel] = None,
                log_path=None, callback=None) -> Tuple[PromptPyramidModel, Trainer]:
    """Train on the corpus train split."""
    model = model or build_model(cfg)
    train_ids = corpus.split["train"]
    index = {v: i for i, v in enumerate(train_ids)}
    queries = corpus.queries_for("train")
    videos = torch.from_numpy(corpus.video_array(train_ids))
    trainer = Trainer(model, cfg.train, log_path=log_path)
    trainer.fit(videos, [q.tokens for q in queries], [index[q.video_id] for q in queries],
                callback=callback)
    return model, trainer


@torch.no_grad()
def encode_split(model: PromptPyramidModel, corpus: SynthCorpus, split: str, batch_size=16):
    """(video ids, event banks (V, N_e, d), query records, query features (Q, d))."""
    model.eval()
    ids = corpus.split[split] if split != "all" else corpus.video_ids
    videos = torch.from_numpy(corpus.video_array(ids))
    banks = torch.cat([model.encode_video(videos[i:i + batch_size])
                       for i in range(0, len(videos), batch_size)])
    keep = set(ids)
    queries = [q for q in corpus.queries if q.video_id in keep]
    tok, ends = pad_batch([q.tokens for q in queries])
    return ids, banks, queries, model.encode_text(tok, ends)


def evaluate(model, corpus, split="test", levels=None, ks=DEFAULT_KS, config=None,
             seed=None) -> RetrievalReport:
    ids, banks, queries, qv = encode_split(model, corpus, split)
    scores = batch_similarity_matrix(qv, banks, model.structure, levels).double().numpy()
    rankings = {q.query_id: rank_by_score(row.tolist(), ids) for q, row in zip(queries, scores)}
    truth = {q.query_id: q.video_id for q in queries}
    return recall_at_k(rankings, truth, ks, config=config, seed=seed)


def evaluate_vcmr(model, corpus, split="test", levels=None, config=None, seed=None) -> VcmrReport:
    ids, banks, queries, qv = encode_split(model, corpus, split)
    return vcmr_eval(qv.double(), [(q.video_id, q.interval) for q in queries], banks.double(),
                     model.structure, levels=levels, video_ids=ids, config=config, seed=seed)


def grounding(model, corpus, split="train", levels=None, threshold=0.3) -> Tuple[float, List[int]]:
    """Fraction of queries whose MIL argmax prompt in the ground-truth video
    reaches ``threshold`` IoU with the planted interval, plus the argmaxes."""
    ids, banks, queries, qv = encode_split(model, corpus, split)
    _, arg = batch_similarity_matrix(qv, banks, model.structure, levels, return_argmax=True)
    col = {v: i for i, v in enumerate(ids)}
    picks = [int(arg[i, col[q.video_id]]) for i, q in enumerate(queries)]
    hits = grounding_hits(picks, [q.interval for q in queries], model.structure, threshold)
    return float(np.mean(hits)) if hits else 0.0, picks
