"""Input checks for the estimator API."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .errors import ShapeError
from .text import end_position


def check_videos(X, frame_count: int, image_size: int, channels: int = 3) -> torch.Tensor:
    """Return ``X`` as a float32 tensor shaped (n, frames, H, W, C).

    A single video (4-D) is promoted to a batch of one.
    """
    if isinstance(X, torch.Tensor):
        arr = X.detach().cpu().to(torch.float32)
    else:
        arr = torch.from_numpy(np.asarray(X, dtype=np.float32))
    if arr.dim() == 4:
        arr = arr.unsqueeze(0)
    expected = (frame_count, image_size, image_size, channels)
    if arr.dim() != 5 or tuple(arr.shape[1:]) != expected:
        raise ShapeError(f"videos must be (n, {', '.join(map(str, expected))}), "
                         f"got {tuple(arr.shape)}")
    if not torch.isfinite(arr).all():
        raise ValueError("videos contain non-finite values")
    return arr


def check_queries(queries, vocab_size: int) -> list:
    """Token-id sequences with exactly one end token each, ids < ``vocab_size``."""
    if isinstance(queries, (str, bytes)) or not isinstance(queries, Sequence):
        raise TypeError("queries must be a sequence of token-id sequences")
    out = []
    for i, q in enumerate(queries):
        q = [int(t) for t in q]
        if not q:
            raise ShapeError(f"query {i} is empty")
        if min(q) < 0 or max(q) >= vocab_size:
            raise ValueError(f"query {i} has token ids outside [0, {vocab_size})")
        end_position(q)
        out.append(q)
    return out


def check_targets(y, n_queries: int, n_videos: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n_queries,):
        raise ShapeError(f"expected {n_queries} targets, got shape {y.shape}")
    if len(y) and (y.min() < 0 or y.max() >= n_videos):
        raise ValueError("targets must index into the videos")
    return y
