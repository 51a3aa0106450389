"""Auxiliary probe heads and the segmentation decoder."""

from __future__ import annotations

import numpy as np

from .backbone import HeadParams, TokenSequence
from .errors import ShapeError
from .tensor import bilinear_upsample, matmul, softmax


def tokens_to_feature_map(seq: TokenSequence | np.ndarray, h: int, w: int) -> np.ndarray:
    """Reshape spatial tokens (raster order) to an ``E x h x w`` feature map.

    The class token, when present, is dropped.
    """
    rows = seq.spatial if isinstance(seq, TokenSequence) else np.asarray(seq)
    if rows.shape[0] != h * w:
        raise ShapeError(f"{rows.shape[0]} spatial tokens cannot fill a {h}x{w} map")
    return rows.T.reshape(rows.shape[1], h, w)


def feature_map_to_tokens(f: np.ndarray) -> np.ndarray:
    e, h, w = f.shape
    return f.reshape(e, h * w).T


def _pixel_logits(f: np.ndarray, head: HeadParams) -> np.ndarray:
    e, h, w = f.shape
    if head.weight.shape[0] != e or head.bias.shape != (head.weight.shape[1],):
        raise ShapeError(
            f"head weight {head.weight.shape} / bias {head.bias.shape} incompatible with {e} channels"
        )
    logits = matmul(feature_map_to_tokens(f), head.weight) + head.bias
    return logits.T.reshape(-1, h, w)


def aux_head(f: np.ndarray, head: HeadParams) -> np.ndarray:
    """1x1 convolution then per-pixel softmax; returns ``C x h x w`` probabilities."""
    return softmax(_pixel_logits(f, head), axis=0)


def decoder_logits(f: np.ndarray, head: HeadParams, out_h: int, out_w: int) -> np.ndarray:
    return bilinear_upsample(_pixel_logits(f, head), out_h, out_w)


def decoder_head(f: np.ndarray, head: HeadParams, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel classifier, bilinear upsample of the logits, then softmax over classes."""
    return softmax(decoder_logits(f, head, out_h, out_w), axis=0)
