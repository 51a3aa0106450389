"""Seeded synthetic models and scenes for desk-scale evaluation.

Two weight families are provided. ``random`` draws every parameter from a
scaled normal distribution. ``structured`` additionally wires three reserved
channels into a texture detector so that probe heads are very confident on
flat patches and unsure on textured ones:

* channel 0 receives an alternating +/- sum over each patch's pixels and
  channel 1 its negation, so both are zero for a constant patch;
* every layer's MLP adds ``GELU(s z) + GELU(-s z)`` (roughly ``s |z|``) to
  channel 2, where ``z`` is the normalised difference of channels 0 and 1;
* each probe head (and the decoder) gives class 0 the logit ``b - k * u``
  from channel 2 and all other classes zero logits.

A flat patch therefore scores ``e^b / (e^b + C - 1)`` (0.9999 for the
defaults) and stops at the first decision layer, while a textured patch
scores about ``1 / (C - 1)`` and keeps running. Nothing else writes into the
three reserved channels.
"""

from __future__ import annotations

import numpy as np

from .backbone import HeadParams, LayerParams, ModelSpec, Weights
from .errors import ConfigError

DETECTOR_CHANNELS = 3
FLAT_LOGIT = 10.0
TEXTURE_GAIN = 20.0
DETECTOR_SLOPE = 1000.0


def generate_synthetic_model(spec: ModelSpec, seed: int = 0, structured: bool = False, scale: float = 1.0) -> Weights:
    """Reproducible weights for ``spec``; ``structured`` selects the texture-detector variant."""
    rng = np.random.default_rng(seed)
    e, m, c = spec.embed_dim, spec.mlp_dim, spec.num_classes

    def normal(*shape, fan_in):
        return rng.standard_normal(shape) * (scale / np.sqrt(fan_in))

    def small(*shape):
        return rng.standard_normal(shape) * 0.02

    layers = []
    for _ in range(spec.num_layers):
        layers.append(LayerParams(
            ln1_gamma=1.0 + small(e), ln1_beta=small(e),
            w_q=normal(e, e, fan_in=e), b_q=small(e),
            w_k=normal(e, e, fan_in=e), b_k=small(e),
            w_v=normal(e, e, fan_in=e), b_v=small(e),
            w_o=normal(e, e, fan_in=e), b_o=small(e),
            ln2_gamma=1.0 + small(e), ln2_beta=small(e),
            w_mlp1=normal(e, m, fan_in=e), b_mlp1=small(m),
            w_mlp2=normal(m, e, fan_in=m), b_mlp2=small(e),
        ))
    weights = Weights(
        patch_weight=normal(spec.patch_dim, e, fan_in=spec.patch_dim),
        patch_bias=small(e),
        pos_embed=small(spec.num_tokens, e),
        layers=layers,
        aux_heads=[HeadParams(normal(e, c, fan_in=e), small(c)) for _ in spec.decision_layers],
        decoder=HeadParams(normal(e, c, fan_in=e), small(c)),
    )
    if spec.use_class_token:
        weights.cls_token = small(e)
        weights.cls_pos_embed = small(e)
    if structured:
        _wire_texture_detector(spec, weights)
    return weights


def _alternating(spec: ModelSpec) -> np.ndarray:
    per_channel = np.where(np.arange(spec.patch_size ** 2) % 2 == 0, 1.0, -1.0)
    if per_channel.size % 2:
        per_channel[-1] = 0.0
    return np.tile(per_channel, spec.in_channels) / np.sqrt(spec.patch_dim)


def _wire_texture_detector(spec: ModelSpec, w: Weights) -> None:
    e, c = spec.embed_dim, spec.num_classes
    if e < DETECTOR_CHANNELS + 1:
        raise ConfigError(f"structured model needs embed_dim > {DETECTOR_CHANNELS}")
    if c < 3:
        raise ConfigError("structured model needs at least 3 classes")
    if spec.mlp_dim < 2:
        raise ConfigError("structured model needs an MLP width of at least 2")
    det = slice(0, DETECTOR_CHANNELS)

    diff = _alternating(spec)
    w.patch_weight[:, det] = 0.0
    w.patch_weight[:, 0] = diff
    w.patch_weight[:, 1] = -diff
    w.patch_bias[det] = 0.0
    w.pos_embed[:, det] = 0.0
    if w.cls_token is not None:
        w.cls_token[det] = 0.0
        w.cls_pos_embed[det] = 0.0

    s = DETECTOR_SLOPE
    for lp in w.layers:
        lp.w_o[:, det] = 0.0
        lp.b_o[det] = 0.0
        lp.ln2_gamma[:2] = 1.0
        lp.ln2_beta[:2] = 0.0
        # hidden units 0 and 1 see +s z and -s z only
        lp.w_mlp1[:, :2] = 0.0
        lp.w_mlp1[0, 0], lp.w_mlp1[1, 0] = s, -s
        lp.w_mlp1[0, 1], lp.w_mlp1[1, 1] = -s, s
        lp.b_mlp1[:2] = 0.0
        lp.w_mlp2[:, det] = 0.0
        lp.w_mlp2[0, 2] = 1.0
        lp.w_mlp2[1, 2] = 1.0
        lp.b_mlp2[det] = 0.0

    for head in [*w.aux_heads, w.decoder]:
        head.weight[:] = 0.0
        head.bias[:] = 0.0
        head.weight[2, 0] = -TEXTURE_GAIN
        head.bias[0] = FLAT_LOGIT


def flat_confidence(num_classes: int) -> float:
    """Probe confidence a structured model assigns to a perfectly flat patch."""
    return float(np.exp(FLAT_LOGIT) / (np.exp(FLAT_LOGIT) + num_classes - 1))


def _expand(per_patch: np.ndarray, p: int) -> np.ndarray:
    return np.repeat(np.repeat(per_patch, p, axis=-2), p, axis=-1)


def half_flat_scene(spec: ModelSpec, seed: int = 0, flat_fraction: float = 0.5, noise_amplitude: float = 1.0):
    """Image whose top rows of patches are flat and the rest uniform noise.

    Each flat patch has its own constant colour. Returns ``(image, flat)``
    where ``flat`` is a boolean vector over tokens marking the flat region.
    The split is aligned to patch rows, so no patch straddles the boundary.
    """
    rng = np.random.default_rng(seed)
    gh, gw, p = spec.grid_h, spec.grid_w, spec.patch_size
    flat_rows = int(round(flat_fraction * gh))
    colours = rng.uniform(0.0, 1.0, size=(spec.in_channels, gh, gw))
    image = _expand(colours, p)
    noise = rng.uniform(0.0, 1.0, size=image.shape)
    image[:, flat_rows * p:, :] = (
        0.5 + noise_amplitude * (noise[:, flat_rows * p:, :] - 0.5)
    )
    flat = np.zeros((gh, gw), dtype=bool)
    flat[:flat_rows] = True
    return np.clip(image, 0.0, 1.0), flat.reshape(-1)


def texture_scene(spec: ModelSpec, seed: int = 0, min_amplitude: float = 1e-4, max_amplitude: float = 1.0):
    """Image whose patches carry noise of log-uniformly varying amplitude.

    Gives a structured model a spread of probe confidences. Returns
    ``(image, amplitudes)`` with one amplitude per token.
    """
    rng = np.random.default_rng(seed)
    gh, gw, p = spec.grid_h, spec.grid_w, spec.patch_size
    amps = np.exp(rng.uniform(np.log(min_amplitude), np.log(max_amplitude), size=(gh, gw)))
    base = _expand(rng.uniform(0.25, 0.75, size=(spec.in_channels, gh, gw)), p)
    noise = rng.uniform(-0.5, 0.5, size=base.shape) * _expand(amps[None], p)
    return np.clip(base + noise, 0.0, 1.0), amps.reshape(-1)


def random_image(spec: ModelSpec, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(spec.in_channels, spec.image_h, spec.image_w))
