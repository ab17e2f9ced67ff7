"""scikit-learn style front end for the retrieval model.

``PyramidRetriever.fit(videos, queries, y)`` trains on (video, query) pairs
where ``y[i]`` indexes the video relevant to ``queries[i]``.
``transform(videos)`` returns event features and ``predict(queries)`` ranks
the videos seen by the last ``fit``/``index`` call.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import DEFAULT_KS, rank_by_score, recall_at_k
from .model import ModelConfig, PromptPyramidModel
from .pyramid import DEFAULT_LAYER_PARAMS, PyramidConfig
from .text import TextEncoderConfig, pad_batch
from .training import TrainConfig, Trainer, batch_similarity_matrix
from .validation import check_queries, check_targets, check_videos
from .visual import VisualEncoderConfig


class PyramidRetriever(BaseEstimator):
    def __init__(self, frame_count=32, layer_params=DEFAULT_LAYER_PARAMS, variant="AD",
                 vp_op="COPY_L1", frame_mechanism="ADAPTER", mil_levels=None,
                 image_size=32, patch_size=8, width=64, layers=4, heads=4,
                 visual_prompts=4, output_dim=32, event_prompt_init="random",
                 vocab_size=64, context_length=24, text_width=32, text_prompts=8,
                 postfix_visible=False, freeze_backbone=True, batch_size=8, steps=None,
                 epochs=10, peak_lr=8e-4, warmup_fraction=0.1, weight_decay=0.2,
                 eval_batch_size=16, log_path=None, seed=0):
        self.frame_count = frame_count
        self.layer_params = layer_params
        self.variant = variant
        self.vp_op = vp_op
        self.frame_mechanism = frame_mechanism
        self.mil_levels = mil_levels
        self.image_size = image_size
        self.patch_size = patch_size
        self.width = width
        self.layers = layers
        self.heads = heads
        self.visual_prompts = visual_prompts
        self.output_dim = output_dim
        self.event_prompt_init = event_prompt_init
        self.vocab_size = vocab_size
        self.context_length = context_length
        self.text_width = text_width
        self.text_prompts = text_prompts
        self.postfix_visible = postfix_visible
        self.freeze_backbone = freeze_backbone
        self.batch_size = batch_size
        self.steps = steps
        self.epochs = epochs
        self.peak_lr = peak_lr
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.eval_batch_size = eval_batch_size
        self.log_path = log_path
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        visual = VisualEncoderConfig(
            image_size=self.image_size, patch_size=self.patch_size, width=self.width,
            layers=self.layers, heads=self.heads, visual_prompts=self.visual_prompts,
            output_dim=self.output_dim, frame_mechanism=self.frame_mechanism,
            freeze_backbone=self.freeze_backbone, event_prompt_init=self.event_prompt_init)
        text = TextEncoderConfig(
            vocab_size=self.vocab_size, context_length=self.context_length,
            width=self.text_width, layers=self.layers, heads=self.heads,
            text_prompts=self.text_prompts, output_dim=self.output_dim,
            postfix_visible=self.postfix_visible)
        return ModelConfig(PyramidConfig(self.frame_count, tuple(self.layer_params)), visual,
                           text, self.variant, self.vp_op)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, steps=self.steps,
                           peak_lr=self.peak_lr, warmup_fraction=self.warmup_fraction,
                           weight_decay=self.weight_decay, seed=self.seed,
                           mil_levels=self.mil_levels)

    @classmethod
    def from_model(cls, model: PromptPyramidModel, **params) -> "PyramidRetriever":
        """Wrap an existing (e.g. loaded) model as a fitted estimator."""
        cfg = model.config
        est = cls(frame_count=cfg.pyramid.frame_count, layer_params=cfg.pyramid.layer_params,
                  variant=cfg.variant, vp_op=cfg.vp_op,
                  frame_mechanism=cfg.visual.frame_mechanism, image_size=cfg.visual.image_size,
                  patch_size=cfg.visual.patch_size, width=cfg.visual.width,
                  layers=cfg.visual.layers, heads=cfg.visual.heads,
                  visual_prompts=cfg.visual.visual_prompts, output_dim=cfg.visual.output_dim,
                  event_prompt_init=cfg.visual.event_prompt_init,
                  vocab_size=cfg.text.vocab_size, context_length=cfg.text.context_length,
                  text_width=cfg.text.width, text_prompts=cfg.text.text_prompts,
                  postfix_visible=cfg.text.postfix_visible,
                  freeze_backbone=cfg.visual.freeze_backbone, **params)
        est.model_ = model
        est.structure_ = model.structure
        est.history_ = []
        return est

    def fit(self, videos, queries, y, callback=None):
        videos = check_videos(videos, self.frame_count, self.image_size)
        queries = check_queries(queries, self.vocab_size)
        y = check_targets(y, len(queries), len(videos))
        if len(np.unique(y)) < 2:
            raise ValueError("training needs queries for at least two different videos")
        torch.manual_seed(self.seed)
        self.model_ = PromptPyramidModel(self._model_config(), seed=self.seed)
        self.structure_ = self.model_.structure
        trainer = Trainer(self.model_, self._train_config(), log_path=self.log_path)
        self.history_ = trainer.fit(videos, queries, y.tolist(), callback=callback)
        self.index(videos)
        return self

    @torch.no_grad()
    def transform(self, videos) -> np.ndarray:
        """Event features (n, N_e, output_dim), canonical prompt order."""
        check_is_fitted(self, "model_")
        videos = check_videos(videos, self.frame_count, self.image_size)
        self.model_.eval()
        out = [self.model_.encode_video(videos[i:i + self.eval_batch_size])
               for i in range(0, len(videos), self.eval_batch_size)]
        return torch.cat(out).numpy()

    @torch.no_grad()
    def encode_queries(self, queries) -> np.ndarray:
        check_is_fitted(self, "model_")
        queries = check_queries(queries, self.vocab_size)
        self.model_.eval()
        ids, ends = pad_batch(queries)
        return self.model_.encode_text(ids, ends).numpy()

    def index(self, videos):
        """Encode and keep a corpus to rank against."""
        self.corpus_features_ = self.transform(videos)
        return self

    def similarity(self, queries, levels="default"):
        """(scores (Q, V), argmax prompt index (Q, V)) against the indexed corpus."""
        check_is_fitted(self, "corpus_features_")
        if levels == "default":
            levels = self.mil_levels
        q = torch.from_numpy(self.encode_queries(queries))
        s, arg = batch_similarity_matrix(q, torch.from_numpy(self.corpus_features_),
                                         self.structure_, levels, return_argmax=True)
        return s.numpy(), arg.numpy()

    def predict_rankings(self, queries, levels="default"):
        scores, _ = self.similarity(queries, levels)
        ids = list(range(scores.shape[1]))
        return [rank_by_score(row.tolist(), ids) for row in scores]

    def predict(self, queries, levels="default") -> np.ndarray:
        """Index of the top-ranked indexed video for each query."""
        return np.array([r[0] for r in self.predict_rankings(queries, levels)])

    def score(self, queries, y, ks=DEFAULT_KS, levels="default") -> float:
        """R@1 as a fraction."""
        return self.report(queries, y, ks=(1,), levels=levels).recall["1"] / 100.0

    def report(self, queries, y, ks=DEFAULT_KS, levels="default", query_ids=None):
        rankings = self.predict_rankings(queries, levels)
        y = check_targets(y, len(rankings), self.corpus_features_.shape[0])
        qids = query_ids or [str(i) for i in range(len(rankings))]
        return recall_at_k(dict(zip(qids, rankings)), dict(zip(qids, y.tolist())), ks,
                           seed=self.seed)
