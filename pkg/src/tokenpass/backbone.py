"""ViT backbone: model description, parameters, patch embedding and layers."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import gelu, layer_norm, matmul, softmax

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    image_h: int
    image_w: int
    patch_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    num_classes: int
    decision_layers: tuple[int, ...] = (3, 6, 9)
    mlp_ratio: int = 4
    use_class_token: bool = False
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "decision_layers", tuple(int(d) for d in self.decision_layers))
        if self.patch_size <= 0 or self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1 or self.num_classes < 1 or self.mlp_ratio < 1:
            raise ConfigError("num_layers, num_classes and mlp_ratio must be positive")
        validate_decision_layers(self.decision_layers, self.num_layers)

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    def with_decision_layers(self, layers) -> "ModelSpec":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["decision_layers"] = tuple(layers)
        return ModelSpec(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["decision_layers"] = list(self.decision_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def validate_decision_layers(layers, num_layers: int) -> None:
    """Decision layers must be strictly increasing, inside [1, L-1] and pairwise nonadjacent."""
    layers = tuple(layers)
    for i, d in enumerate(layers):
        if not 1 <= d <= num_layers - 1:
            raise ConfigError(f"decision layer {d} outside [1, {num_layers - 1}]")
        if i and d - layers[i - 1] < 2:
            raise ConfigError(f"decision layers {layers} must be strictly increasing and nonadjacent")


def block_ranges(num_layers: int, decision_layers) -> list[range]:
    """Split layers 0..L-1 into D+1 blocks ending at each decision layer.

    Decision layers are 1-based layer numbers, so (3, 6, 9) with L=12 gives
    blocks of layers 1-3, 4-6, 7-9, 10-12 (0-based ranges 0:3, 3:6, ...).
    """
    bounds = [0, *decision_layers, num_layers]
    return [range(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


@dataclass
class LayerParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_mlp1: np.ndarray
    b_mlp1: np.ndarray
    w_mlp2: np.ndarray
    b_mlp2: np.ndarray

    @staticmethod
    def shapes(embed_dim: int, mlp_dim: int) -> dict[str, tuple[int, ...]]:
        e, m = embed_dim, mlp_dim
        return {
            "ln1_gamma": (e,), "ln1_beta": (e,),
            "w_q": (e, e), "b_q": (e,),
            "w_k": (e, e), "b_k": (e,),
            "w_v": (e, e), "b_v": (e,),
            "w_o": (e, e), "b_o": (e,),
            "ln2_gamma": (e,), "ln2_beta": (e,),
            "w_mlp1": (e, m), "b_mlp1": (m,),
            "w_mlp2": (m, e), "b_mlp2": (e,),
        }


@dataclass
class HeadParams:
    """Per-token linear classifier (a 1x1 convolution over the feature map)."""

    weight: np.ndarray  # E x C
    bias: np.ndarray  # C


@dataclass
class Weights:
    patch_weight: np.ndarray  # (in_channels * P * P) x E
    patch_bias: np.ndarray
    pos_embed: np.ndarray  # N x E, spatial tokens only
    layers: list[LayerParams]
    aux_heads: list[HeadParams]
    decoder: HeadParams
    cls_token: np.ndarray | None = None
    cls_pos_embed: np.ndarray | None = None

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Flatten into ``name -> array`` in a fixed, documented order."""
        out = {
            "patch_embed.weight": self.patch_weight,
            "patch_embed.bias": self.patch_bias,
            "pos_embed": self.pos_embed,
        }
        if self.cls_token is not None:
            out["cls_token"] = self.cls_token
            out["cls_pos_embed"] = self.cls_pos_embed
        for i, lp in enumerate(self.layers):
            for f in fields(LayerParams):
                out[f"layers.{i}.{f.name}"] = getattr(lp, f.name)
        for i, h in enumerate(self.aux_heads):
            out[f"aux_heads.{i}.weight"] = h.weight
            out[f"aux_heads.{i}.bias"] = h.bias
        out["decoder.weight"] = self.decoder.weight
        out["decoder.bias"] = self.decoder.bias
        return out

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays: dict[str, np.ndarray]) -> "Weights":
        a = arrays
        layers = [
            LayerParams(**{f.name: a[f"layers.{i}.{f.name}"] for f in fields(LayerParams)})
            for i in range(spec.num_layers)
        ]
        aux = [
            HeadParams(a[f"aux_heads.{i}.weight"], a[f"aux_heads.{i}.bias"])
            for i in range(len(spec.decision_layers))
        ]
        return cls(
            patch_weight=a["patch_embed.weight"],
            patch_bias=a["patch_embed.bias"],
            pos_embed=a["pos_embed"],
            layers=layers,
            aux_heads=aux,
            decoder=HeadParams(a["decoder.weight"], a["decoder.bias"]),
            cls_token=a.get("cls_token"),
            cls_pos_embed=a.get("cls_pos_embed"),
        )

    def astype(self, dtype) -> "Weights":
        def conv(a):
            return None if a is None else np.asarray(a, dtype=dtype)

        def conv_head(h):
            return HeadParams(conv(h.weight), conv(h.bias))

        return Weights(
            patch_weight=conv(self.patch_weight),
            patch_bias=conv(self.patch_bias),
            pos_embed=conv(self.pos_embed),
            layers=[
                LayerParams(**{f.name: conv(getattr(lp, f.name)) for f in fields(LayerParams)})
                for lp in self.layers
            ],
            aux_heads=[conv_head(h) for h in self.aux_heads],
            decoder=conv_head(self.decoder),
            cls_token=conv(self.cls_token),
            cls_pos_embed=conv(self.cls_pos_embed),
        )


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Every parameter a model with ``spec`` needs, in serialization order."""
    e, c = spec.embed_dim, spec.num_classes
    shapes = {
        "patch_embed.weight": (spec.patch_dim, e),
        "patch_embed.bias": (e,),
        "pos_embed": (spec.num_tokens, e),
    }
    if spec.use_class_token:
        shapes["cls_token"] = (e,)
        shapes["cls_pos_embed"] = (e,)
    layer_shapes = LayerParams.shapes(e, spec.mlp_dim)
    for i in range(spec.num_layers):
        for name, shape in layer_shapes.items():
            shapes[f"layers.{i}.{name}"] = shape
    for i in range(len(spec.decision_layers)):
        shapes[f"aux_heads.{i}.weight"] = (e, c)
        shapes[f"aux_heads.{i}.bias"] = (c,)
    shapes["decoder.weight"] = (e, c)
    shapes["decoder.bias"] = (c,)
    return shapes


def check_weights(spec: ModelSpec, weights: Weights) -> None:
    expected = parameter_shapes(spec)
    arrays = weights.to_arrays()
    missing = expected.keys() - arrays.keys()
    extra = arrays.keys() - expected.keys()
    if missing or extra:
        raise ShapeError(f"weights do not match spec: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {arrays[name].shape}")


@dataclass
class TokenSequence:
    """``n x E`` token matrix; the class token, if any, sits at row 0.

    A gathered subset may hold zero rows (every spatial token stopped and no
    class token).
    """

    tokens: np.ndarray
    has_class_token: bool = False

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError(f"token sequence must be an n x E matrix, got {self.tokens.shape}")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def spatial(self) -> np.ndarray:
        return self.tokens[1:] if self.has_class_token else self.tokens

    @property
    def class_token(self) -> np.ndarray | None:
        return self.tokens[0] if self.has_class_token else None


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut a ``C x H x W`` image into raster-ordered patches, each flattened C-major."""
    c, h, w = image.shape
    p = patch_size
    x = image.reshape(c, h // p, p, w // p, p)
    return x.transpose(1, 3, 0, 2, 4).reshape((h // p) * (w // p), c * p * p)


def patch_embed(image: np.ndarray, spec: ModelSpec, weights: Weights) -> TokenSequence:
    image = np.asarray(image)
    expected = (spec.in_channels, spec.image_h, spec.image_w)
    if image.shape != expected:
        raise ShapeError(f"image shape {image.shape} does not match model input {expected}")
    patches = patchify(image.astype(weights.patch_weight.dtype, copy=False), spec.patch_size)
    tokens = matmul(patches, weights.patch_weight) + weights.patch_bias + weights.pos_embed
    if spec.use_class_token:
        cls = (weights.cls_token + weights.cls_pos_embed)[None, :]
        return TokenSequence(np.concatenate([cls, tokens], axis=0), True)
    return TokenSequence(tokens, False)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, e = x.shape
    return x.reshape(n, heads, e // heads).transpose(1, 0, 2)


def attention_probs(x: np.ndarray, params: LayerParams, heads: int) -> np.ndarray:
    """Per-head attention weights (heads x n x n) for already-normalised tokens ``x``."""
    d = x.shape[1] // heads
    q = _split_heads(matmul(x, params.w_q) + params.b_q, heads)
    k = _split_heads(matmul(x, params.w_k) + params.b_k, heads)
    return softmax(q @ k.transpose(0, 2, 1) / math.sqrt(d), axis=-1)


def _attention(x: np.ndarray, params: LayerParams, heads: int) -> np.ndarray:
    n, e = x.shape
    d = e // heads
    scale = 1.0 / math.sqrt(d)
    q = (matmul(x, params.w_q) + params.b_q) * scale
    k = matmul(x, params.w_k) + params.b_k
    v = matmul(x, params.w_v) + params.b_v
    out = np.empty_like(q)
    # One head at a time keeps a single n x n slab alive. The softmax is done
    # in place and normalised after the product with V (n x d, not n x n).
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        scores = matmul(q[:, sl], k[:, sl].T)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        out[:, sl] = matmul(scores, v[:, sl]) / scores.sum(axis=-1, keepdims=True)
    return matmul(out, params.w_o) + params.b_o


def multi_head_attention(seq: TokenSequence, params: LayerParams, heads: int) -> TokenSequence:
    """softmax(Q K^T / sqrt(d)) V per head, heads concatenated, then output-projected."""
    if heads <= 0 or seq.tokens.shape[1] % heads:
        raise ShapeError(f"width {seq.tokens.shape[1]} not divisible into {heads} heads")
    return TokenSequence(_attention(seq.tokens, params, heads), seq.has_class_token)


def _mlp(x: np.ndarray, params: LayerParams) -> np.ndarray:
    return matmul(gelu(matmul(x, params.w_mlp1) + params.b_mlp1), params.w_mlp2) + params.b_mlp2


def layer_forward(x: np.ndarray, params: LayerParams, heads: int) -> np.ndarray:
    """Pre-norm residual block on a bare token matrix."""
    x = x + _attention(layer_norm(x, params.ln1_gamma, params.ln1_beta, LN_EPS), params, heads)
    return x + _mlp(layer_norm(x, params.ln2_gamma, params.ln2_beta, LN_EPS), params)


def transformer_layer(seq: TokenSequence, params: LayerParams, heads: int) -> TokenSequence:
    return TokenSequence(layer_forward(seq.tokens, params, heads), seq.has_class_token)


def zero_layer(embed_dim: int, mlp_dim: int, dtype=np.float64) -> LayerParams:
    return LayerParams(**{k: np.zeros(s, dtype) for k, s in LayerParams.shapes(embed_dim, mlp_dim).items()})
