"""Prompt-pyramid retrieval for partially relevant videos."""
from .data import (PlantedEvent, QueryRecord, SynthCorpus, SynthCorpusSpec, compose_query,
                   generate_corpus, load_corpus, render_video, save_corpus)
from .errors import *  # noqa: F401,F403
from .estimator import PyramidRetriever
from .evaluation import (RetrievalReport, VcmrReport, rank_corpus, recall_at_k, temporal_iou,
                         vcmr_eval)
from .model import ModelConfig, PromptPyramidModel
from .persistence import RunConfig, default_config, load_checkpoint, save_checkpoint
from .pyramid import (InteractionVariant, MaskSet, PyramidConfig, PyramidStructure,
                      SegmentInterval, VisualPromptOp, build_masks, cross_layer_table,
                      export_masks, oracle_masks, relation_sets, segment_of, validate_config)
from .text import TextEncoder, TextEncoderConfig, Vocabulary, encode_text
from .training import TrainConfig, Trainer, grad_check, infonce_loss, mil_similarity
from .visual import FrameMechanism, VisualEncoder, VisualEncoderConfig, encode_video

__version__ = "0.1.0"
