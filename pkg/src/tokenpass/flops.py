"""Analytic FLOPs model for dense and token-reduced forwards.

Two counting conventions are available:

``paper_compat``
    Only the linear projections of each layer are counted, one multiply-add
    counted as one FLOP: Q/K/V (3 n E^2), output projection (n E^2) and the
    two MLP matrices (2 r n E^2). With ``r = 4`` a layer costs ``12 n E^2``.
    This reproduces published dense totals for ViT-B/L segmentation models to
    within about 1%.

``full``
    Adds the two attention products (Q K^T and A V, ``2 n^2 E`` multiply-adds)
    and counts every multiply-add as two FLOPs.

Norms, softmax, GELU, residual adds and the bilinear resize are excluded from
both conventions. Patch embedding, probe heads and the decoder classifier are
counted as matrix products under the same rule as the layers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .backbone import ModelSpec, block_ranges
from .errors import ConfigError, IntegrityError


class FlopsConvention(str, enum.Enum):
    PAPER_COMPAT = "paper_compat"
    FULL = "full"

    @property
    def note(self) -> str:
        return _NOTES[self]

    @property
    def mac_cost(self) -> int:
        return 1 if self is FlopsConvention.PAPER_COMPAT else 2


_NOTES = {
    FlopsConvention.PAPER_COMPAT: "linear-projection MACs only, 1 MAC = 1 FLOP; attention matmuls, norms and activations excluded",
    FlopsConvention.FULL: "linear projections plus attention matmuls (QK^T, AV), 1 MAC = 2 FLOPs; norms and activations excluded",
}


def _convention(conv) -> FlopsConvention:
    try:
        return FlopsConvention(conv)
    except ValueError:
        raise ConfigError(f"unknown FLOPs convention {conv!r}") from None


def layer_flops(n_tokens: int, embed_dim: int, heads: int, mlp_ratio: int = 4, conv="paper_compat") -> int:
    """FLOPs of one transformer layer over ``n_tokens`` tokens.

    The head count does not change the total: splitting E into heads only
    reshapes the same products.
    """
    conv = _convention(conv)
    n, e = int(n_tokens), int(embed_dim)
    if n < 0:
        raise ConfigError("token count must be nonnegative")
    macs = (4 + 2 * mlp_ratio) * n * e * e
    if conv is FlopsConvention.FULL:
        macs += 2 * n * n * e
    return macs * conv.mac_cost


@dataclass
class BlockFlops:
    block_index: int
    token_count: int
    flops: int


@dataclass
class FlopsBreakdown:
    convention: FlopsConvention
    per_block: list[BlockFlops] = field(default_factory=list)
    patch_embed_flops: int = 0
    heads_flops: int = 0
    decoder_flops: int = 0

    @property
    def backbone_flops(self) -> int:
        return sum(b.flops for b in self.per_block)

    @property
    def total(self) -> int:
        return self.backbone_flops + self.patch_embed_flops + self.heads_flops + self.decoder_flops

    def to_dict(self) -> dict:
        return {
            "convention": self.convention.value,
            "note": self.convention.note,
            "per_block": [vars(b) for b in self.per_block],
            "patch_embed_flops": self.patch_embed_flops,
            "heads_flops": self.heads_flops,
            "decoder_flops": self.decoder_flops,
            "total": self.total,
        }


def model_flops(spec: ModelSpec, kept_counts, conv="paper_compat") -> FlopsBreakdown:
    """Whole-model FLOPs given the number of kept spatial tokens in each block.

    ``kept_counts`` has one entry per block (D+1 of them). The class token,
    when the model has one, is added to every block's token count.
    """
    conv = _convention(conv)
    blocks = block_ranges(spec.num_layers, spec.decision_layers)
    kept_counts = [int(k) for k in kept_counts]
    if len(kept_counts) != len(blocks):
        raise IntegrityError(f"expected {len(blocks)} block token counts, got {len(kept_counts)}")
    for a, b in zip(kept_counts, kept_counts[1:]):
        if b > a:
            raise IntegrityError(f"kept token counts must be non-increasing: {kept_counts}")
    if kept_counts and not 0 <= kept_counts[-1] <= kept_counts[0] <= spec.num_tokens:
        raise IntegrityError(f"kept token counts outside [0, {spec.num_tokens}]")

    extra = 1 if spec.use_class_token else 0
    e, c, n = spec.embed_dim, spec.num_classes, spec.num_tokens
    per_block = []
    for i, (layers, kept) in enumerate(zip(blocks, kept_counts)):
        tokens = kept + extra
        per_layer = layer_flops(tokens, e, spec.num_heads, spec.mlp_ratio, conv)
        per_block.append(BlockFlops(i, tokens, per_layer * len(layers)))
    return FlopsBreakdown(
        convention=conv,
        per_block=per_block,
        patch_embed_flops=n * spec.patch_dim * e * conv.mac_cost,
        heads_flops=len(spec.decision_layers) * n * e * c * conv.mac_cost,
        decoder_flops=n * e * c * conv.mac_cost,
    )


def dense_flops(spec: ModelSpec, conv="paper_compat") -> FlopsBreakdown:
    return model_flops(spec, [spec.num_tokens] * (len(spec.decision_layers) + 1), conv)


def reduction_ratio(dynamic, dense) -> float:
    """Percentage saved: ``100 * (1 - dynamic / dense)``.

    Accepts two FlopsBreakdowns (conventions must agree) or two plain totals.
    """
    if isinstance(dynamic, FlopsBreakdown) or isinstance(dense, FlopsBreakdown):
        if not (isinstance(dynamic, FlopsBreakdown) and isinstance(dense, FlopsBreakdown)):
            raise ConfigError("cannot compare a FlopsBreakdown with a bare number")
        if dynamic.convention is not dense.convention:
            raise ConfigError(
                f"FLOPs conventions differ: {dynamic.convention.value} vs {dense.convention.value}"
            )
        dynamic, dense = dynamic.total, dense.total
    if dense <= 0:
        raise ConfigError("dense FLOPs must be positive")
    return 100.0 * (1.0 - dynamic / dense)
