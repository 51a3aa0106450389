import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tokenpass.backbone import LayerParams, ModelSpec  # noqa: E402
from tokenpass.engine import Model  # noqa: E402
from tokenpass.synthetic import generate_synthetic_model  # noqa: E402


def layer_as_lists(lp: LayerParams) -> dict:
    return {f.name: getattr(lp, f.name).tolist() for f in fields(LayerParams)}


def random_layer(rng, e, m, scale=0.5) -> LayerParams:
    arrays = {}
    for name, shape in LayerParams.shapes(e, m).items():
        if name.endswith("gamma"):
            arrays[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            arrays[name] = scale * rng.standard_normal(shape)
    return LayerParams(**arrays)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return ModelSpec(image_h=32, image_w=32, patch_size=4, embed_dim=16, num_layers=4,
                     num_heads=2, num_classes=5, decision_layers=(1, 3))


@pytest.fixture
def tiny_model(tiny_spec):
    return Model(tiny_spec, generate_synthetic_model(tiny_spec, seed=3))


@pytest.fixture
def structured_model():
    spec = ModelSpec(image_h=64, image_w=64, patch_size=4, embed_dim=32, num_layers=6,
                     num_heads=4, num_classes=5, decision_layers=(2, 4), use_class_token=True)
    return Model(spec, generate_synthetic_model(spec, seed=11, structured=True))
