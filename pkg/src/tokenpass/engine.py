"""End-to-end segmentation forward with dynamic token-pass."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import (
    ModelSpec,
    TokenSequence,
    Weights,
    block_ranges,
    check_weights,
    layer_forward,
    patch_embed,
    validate_decision_layers,
)
from .errors import ConfigError
from .flops import FlopsBreakdown, FlopsConvention, model_flops
from .heads import aux_head, decoder_head, tokens_to_feature_map
from .token_pass import (
    ConfidenceMap,
    confidence_map,
    decision_mask,
    gather,
    merge_stopped_into_class,
    reconstruct,
    update_mask,
)

DEFAULT_XI = 0.985
_DTYPES = {"f64": np.float64, "f32": np.float32}


def default_decision_layers(num_layers: int) -> tuple[int, ...]:
    """Evenly spaced decision layers: (3, 6, 9) for 12 layers, (6, 12, 18) for 24.

    Shallow backbones that cannot fit three nonadjacent decision layers get
    two, then one, then none.
    """
    for count in (3, 2, 1):
        layers = tuple(round(num_layers * k / (count + 1)) for k in range(1, count + 1))
        try:
            validate_decision_layers(layers, num_layers)
        except ConfigError:
            continue
        return layers
    return ()


@dataclass(frozen=True)
class EngineConfig:
    xi: float = DEFAULT_XI
    decision_layers: tuple[int, ...] | None = None  # None: use the model's own
    mode: str = "dynamic"
    enable_merging: bool = True
    precision: str = "f64"
    flops_convention: str = "paper_compat"

    def __post_init__(self):
        if not 0.0 <= self.xi <= 1.0:
            raise ConfigError(f"xi={self.xi} outside [0, 1]")
        if self.mode not in ("dynamic", "dense"):
            raise ConfigError(f"mode must be 'dynamic' or 'dense', not {self.mode!r}")
        if self.precision not in _DTYPES:
            raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, not {self.precision!r}")
        try:
            FlopsConvention(self.flops_convention)
        except ValueError:
            raise ConfigError(f"unknown FLOPs convention {self.flops_convention!r}") from None
        if self.decision_layers is not None:
            object.__setattr__(self, "decision_layers", tuple(int(d) for d in self.decision_layers))

    def to_dict(self) -> dict:
        d = dict(vars(self))
        if self.decision_layers is not None:
            d["decision_layers"] = list(self.decision_layers)
        return d


@dataclass
class Model:
    spec: ModelSpec
    weights: Weights
    metadata: dict = field(default_factory=dict)
    _cast: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        check_weights(self.spec, self.weights)

    def weights_as(self, dtype) -> Weights:
        dtype = np.dtype(dtype)
        if self.weights.patch_weight.dtype == dtype:
            return self.weights
        if dtype not in self._cast:
            self._cast[dtype] = self.weights.astype(dtype)
        return self._cast[dtype]


@dataclass
class BlockStat:
    block_index: int
    kept_count: int
    stopped_count: int
    flops: int


@dataclass
class SegReport:
    pred_labels: np.ndarray  # H x W
    final_probs: np.ndarray  # C x H x W
    per_block: list[BlockStat]
    aux_probs: list[np.ndarray]  # C x h x w per decision layer
    aux_confidences: list[ConfidenceMap]
    masks: list[np.ndarray]  # cumulative keep mask after each decision layer
    flops: FlopsBreakdown
    wall_time: float
    config: EngineConfig

    @property
    def total_flops(self) -> int:
        return self.flops.total

    @property
    def kept_counts(self) -> list[int]:
        return [b.kept_count for b in self.per_block]


def _resolve_layers(spec: ModelSpec, weights: Weights, cfg: EngineConfig) -> ModelSpec:
    if cfg.decision_layers is None or cfg.decision_layers == spec.decision_layers:
        return spec
    if len(cfg.decision_layers) != len(weights.aux_heads):
        raise ConfigError(
            f"{len(cfg.decision_layers)} decision layers requested but the model has "
            f"{len(weights.aux_heads)} auxiliary heads"
        )
    return spec.with_decision_layers(cfg.decision_layers)


def forward(image: np.ndarray, model: Model, cfg: EngineConfig | None = None) -> SegReport:
    """Run the segmentation network on one ``3 x H x W`` image.

    The first block always sees every token. After each decision layer the
    probe head classifies the full (reconstructed) token map; tokens whose top
    class probability exceeds ``cfg.xi`` stop for good. The next block's layers
    then run on the kept tokens only, stopped tokens are carried unchanged, and
    both are scattered back to raster order before the next probe or the
    decoder. In ``dense`` mode the mask is never updated, so all tokens run
    through every layer.
    """
    cfg = cfg or EngineConfig()
    start = time.perf_counter()
    spec = _resolve_layers(model.spec, model.weights, cfg)
    dtype = _DTYPES[cfg.precision]
    w = model.weights_as(dtype)
    dynamic = cfg.mode == "dynamic"
    has_cls = spec.use_class_token
    gh, gw, n = spec.grid_h, spec.grid_w, spec.num_tokens

    seq = patch_embed(np.asarray(image, dtype=dtype), spec, w)
    mask = np.ones(n, dtype=bool)
    kept_counts: list[int] = []
    aux_probs, aux_conf, masks = [], [], []

    for b, layers in enumerate(block_ranges(spec.num_layers, spec.decision_layers)):
        if b > 0:
            probs = aux_head(tokens_to_feature_map(seq, gh, gw), w.aux_heads[b - 1])
            conf = confidence_map(probs)
            aux_probs.append(probs)
            aux_conf.append(conf)
            if dynamic:
                mask = update_mask(decision_mask(conf, cfg.xi), mask)
            masks.append(mask.copy())
            if dynamic and has_cls and cfg.enable_merging:
                stopped, _ = gather(seq, ~mask, carry_class=False)
                tokens = seq.tokens.copy()
                tokens[0] = merge_stopped_into_class(tokens[0], stopped)
                seq = TokenSequence(tokens, True)

        kept, kept_idx = gather(seq, mask)
        stopped, stopped_idx = gather(seq, ~mask, carry_class=False)
        if len(kept):
            x = kept.tokens
            for li in layers:
                x = layer_forward(x, w.layers[li], spec.num_heads)
            kept = TokenSequence(x, kept.has_class_token)
        seq = reconstruct(kept, kept_idx, stopped, stopped_idx)
        kept_counts.append(int(kept_idx.size))

    probs = decoder_head(tokens_to_feature_map(seq, gh, gw), w.decoder, spec.image_h, spec.image_w)
    wall = time.perf_counter() - start

    flops = model_flops(spec, kept_counts, cfg.flops_convention)
    per_block = [
        BlockStat(i, k, n - k, bf.flops) for i, (k, bf) in enumerate(zip(kept_counts, flops.per_block))
    ]
    return SegReport(
        pred_labels=probs.argmax(axis=0),
        final_probs=probs,
        per_block=per_block,
        aux_probs=aux_probs,
        aux_confidences=aux_conf,
        masks=masks,
        flops=flops,
        wall_time=wall,
        config=cfg,
    )


def forward_dense(image: np.ndarray, model: Model, cfg: EngineConfig | None = None) -> SegReport:
    """Baseline: every token through every layer."""
    cfg = replace(cfg or EngineConfig(), mode="dense")
    return forward(image, model, cfg)
