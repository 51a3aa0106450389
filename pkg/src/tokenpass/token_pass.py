"""Confidence scoring, keep/stop masks, gather, reconstruction and class-token merging.

Masks are boolean numpy vectors over the spatial tokens: True keeps a token
in self-attention, False stops it. The class token never appears in a mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import TokenSequence
from .errors import ConfigError, IntegrityError, ShapeError, ValidationError

PROB_SUM_TOL = 1e-6


@dataclass
class ConfidenceMap:
    scores: np.ndarray  # per-token max class probability, length N
    labels: np.ndarray  # per-token argmax class


def confidence_map(prob_map: np.ndarray) -> ConfidenceMap:
    """Max class probability per token.

    ``prob_map`` is ``C x N`` or ``C x h x w``; spatial axes are flattened in
    raster order.
    """
    p = np.asarray(prob_map)
    p = p.reshape(p.shape[0], -1)
    sums = p.sum(axis=0)
    bad = np.abs(sums - 1.0) > PROB_SUM_TOL
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(f"probability column {i} sums to {sums[i]!r}, not 1")
    return ConfidenceMap(scores=p.max(axis=0), labels=p.argmax(axis=0))


def decision_mask(q, xi: float) -> np.ndarray:
    """Raw keep mask: a token stops only when its confidence is strictly above ``xi``."""
    if not 0.0 <= xi <= 1.0:
        raise ConfigError(f"threshold xi={xi} outside [0, 1]")
    scores = q.scores if isinstance(q, ConfidenceMap) else q
    # compare in double precision so xi is not rounded to float32
    scores = np.asarray(scores, dtype=np.float64)
    return ~(scores > xi)


def update_mask(raw: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """Cumulative mask: a token stays kept only if it was kept before and is kept now."""
    raw = np.asarray(raw, dtype=bool)
    prev = np.asarray(prev, dtype=bool)
    if raw.shape != prev.shape:
        raise ShapeError(f"mask lengths differ: {raw.shape} vs {prev.shape}")
    return raw & prev


def gather(seq: TokenSequence, mask: np.ndarray, carry_class: bool = True) -> tuple[TokenSequence, np.ndarray]:
    """Select spatial rows where ``mask`` is set, preserving their order.

    Returns the compact sequence and the original spatial indices of its rows.
    The class token is carried along at row 0 unless ``carry_class`` is off
    (used when gathering the stopped complement).
    """
    mask = np.asarray(mask, dtype=bool)
    spatial = seq.spatial
    if mask.shape != (spatial.shape[0],):
        raise ShapeError(f"mask of length {mask.shape} for {spatial.shape[0]} spatial tokens")
    idx = np.flatnonzero(mask)
    rows = spatial[idx]
    if seq.has_class_token and carry_class:
        return TokenSequence(np.concatenate([seq.tokens[:1], rows], axis=0), True), idx
    return TokenSequence(rows, False), idx


def reconstruct(
    kept: TokenSequence,
    kept_idx: np.ndarray,
    stopped: TokenSequence,
    stopped_idx: np.ndarray,
) -> TokenSequence:
    """Scatter kept and stopped tokens back to their original raster positions."""
    kept_idx = np.asarray(kept_idx, dtype=np.int64)
    stopped_idx = np.asarray(stopped_idx, dtype=np.int64)
    kept_rows = kept.spatial
    stopped_rows = stopped.spatial
    if kept_rows.shape[0] != kept_idx.size or stopped_rows.shape[0] != stopped_idx.size:
        raise IntegrityError("index lists do not match the number of tokens supplied")
    n = kept_idx.size + stopped_idx.size
    seen = np.zeros(n, dtype=np.int64)
    for idx in (kept_idx, stopped_idx):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IntegrityError(f"token index outside [0, {n})")
        np.add.at(seen, idx, 1)
    if not (seen == 1).all():
        raise IntegrityError("kept and stopped indices must partition 0..N-1 exactly")
    width = kept.tokens.shape[1]
    dtype = np.result_type(kept.tokens.dtype, stopped.tokens.dtype)
    out = np.empty((n, width), dtype=dtype)
    out[kept_idx] = kept_rows
    out[stopped_idx] = stopped_rows
    if kept.has_class_token:
        return TokenSequence(np.concatenate([kept.tokens[:1], out], axis=0), True)
    return TokenSequence(out, False)


def merge_stopped_into_class(class_token: np.ndarray, stopped: np.ndarray) -> np.ndarray:
    """Average the class token with the mean stopped-token vector.

    ``stopped`` is a ``k x E`` matrix (or a TokenSequence without class
    token). With no stopped tokens the class token is returned unchanged.
    """
    rows = stopped.spatial if isinstance(stopped, TokenSequence) else np.asarray(stopped)
    if rows.shape[0] == 0:
        return class_token
    return 0.5 * (class_token + rows.mean(axis=0))
