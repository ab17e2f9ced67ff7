"""Corpus retrieval metrics (R@K, SumR) and weakly supervised moment retrieval."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyCorpusError, MissingGroundTruthError
from .pyramid import PyramidStructure, SegmentInterval, segment_of

SCHEMA_VERSION = 1
DEFAULT_KS = (1, 5, 10, 100)
DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)
VCMR_KS = (10, 100)


def _scores(query_vec, banks, structure: PyramidStructure, levels=None) -> np.ndarray:
    """Per-video MIL score for one query; ``banks`` is (V, N_e, d)."""
    q = F.normalize(torch.as_tensor(query_vec, dtype=torch.float64), dim=-1)
    e = F.normalize(torch.as_tensor(banks, dtype=torch.float64), dim=-1)
    cos = (e @ q).numpy()
    return cos[:, structure.level_mask(levels)].max(axis=1)


def rank_by_score(scores: Sequence[float], ids: Sequence) -> List:
    """Ids sorted by score descending, ties by id ascending."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order]


def rank_corpus(query_vec, corpus_event_banks, structure: PyramidStructure, levels=None,
                video_ids: Optional[Sequence] = None) -> List:
    """Rank the corpus for one query. Returns video ids (indices by default)."""
    banks = np.asarray(corpus_event_banks)
    if len(banks) == 0:
        raise EmptyCorpusError("cannot rank an empty corpus")
    ids = list(range(len(banks))) if video_ids is None else list(video_ids)
    return rank_by_score(_scores(query_vec, banks, structure, levels).tolist(), ids)


@dataclass
class RetrievalReport:
    recall: Dict[str, float]
    sum_r: float
    ranks: Dict[str, int]
    num_queries: int
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def recall_at_k(rankings: Mapping[str, Sequence], ground_truth: Mapping[str, object],
                ks=DEFAULT_KS, config=None, seed=None) -> RetrievalReport:
    """R@K in percent for one relevant video per query."""
    ranks = {}
    for qid, ranking in rankings.items():
        if qid not in ground_truth:
            raise MissingGroundTruthError(f"no ground truth for query {qid!r}")
        ranking = list(ranking)
        gt = ground_truth[qid]
        ranks[qid] = ranking.index(gt) + 1 if gt in ranking else len(ranking) + 1
    n = len(ranks)
    recall = {}
    for k in ks:
        hits = sum(1 for r in ranks.values() if r <= k)
        recall[str(k)] = 100.0 * hits / n if n else 0.0
    return RetrievalReport(recall, sum(recall.values()), ranks, n, config or {}, seed)


def temporal_iou(a: SegmentInterval, b: SegmentInterval) -> float:
    """IoU of inclusive frame intervals."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = len(a) + len(b) - inter
    return inter / union


@dataclass
class VcmrReport:
    recall: Dict[str, Dict[str, float]]  # threshold -> K -> percent
    num_queries: int
    levels: Optional[List[int]] = None
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _threshold_key(theta):
    return f"{theta:g}"


def vcmr_eval(query_vecs, ground_truth: Sequence[Tuple[object, SegmentInterval]],
              corpus_event_banks, structure: PyramidStructure, thresholds=DEFAULT_THRESHOLDS,
              ks=VCMR_KS, levels=None, video_ids: Optional[Sequence] = None, config=None,
              seed=None) -> VcmrReport:
    """Rank every (video, event prompt) candidate by cosine; no suppression.

    A candidate at rank <= K is a hit when it belongs to the ground-truth video
    and its segment has temporal IoU >= threshold with the ground-truth interval.
    """
    banks = np.asarray(corpus_event_banks)
    if len(banks) == 0:
        raise EmptyCorpusError("cannot rank an empty corpus")
    ids = list(range(len(banks))) if video_ids is None else list(video_ids)
    selected = np.flatnonzero(structure.level_mask(levels))
    segments = [segment_of(structure, *structure.prompt_at(int(p))) for p in selected]
    e = F.normalize(torch.as_tensor(banks, dtype=torch.float64), dim=-1)[:, selected]
    e = e.reshape(-1, e.shape[-1])
    # candidate c <-> (video c // S, prompt c % S)
    s = len(selected)
    cand_key = [(ids[c // s], c % s) for c in range(len(e))]

    hits = {_threshold_key(t): {str(k): 0 for k in ks} for t in thresholds}
    n = 0
    for q, (gt_video, gt_interval) in zip(query_vecs, ground_truth):
        n += 1
        qv = F.normalize(torch.as_tensor(q, dtype=torch.float64), dim=-1)
        scores = (e @ qv).numpy()
        order = sorted(range(len(scores)), key=lambda c: (-scores[c], cand_key[c]))
        for t in thresholds:
            first_hit = None
            for rank, c in enumerate(order, start=1):
                vid, p = cand_key[c]
                if vid == gt_video and temporal_iou(segments[p], gt_interval) >= t:
                    first_hit = rank
                    break
            for k in ks:
                if first_hit is not None and first_hit <= k:
                    hits[_threshold_key(t)][str(k)] += 1
    recall = {t: {k: 100.0 * v / n if n else 0.0 for k, v in row.items()}
              for t, row in hits.items()}
    return VcmrReport(recall, n, None if levels is None else sorted(levels), config or {}, seed)


def grounding_hits(argmax_prompts: Sequence[int], ground_truth: Sequence[SegmentInterval],
                   structure: PyramidStructure, threshold=0.3) -> List[bool]:
    """Whether each query's MIL argmax segment reaches ``threshold`` IoU."""
    return [temporal_iou(segment_of(structure, *structure.prompt_at(int(p))), gt) >= threshold
            for p, gt in zip(argmax_prompts, ground_truth)]
