import json

import numpy as np
import pytest

from tokenpass.backbone import HeadParams, ModelSpec, Weights, parameter_shapes
from tokenpass.errors import ArrayShapeError, ChecksumError, ImageFormatError, MissingArrayError, WeightsError
from tokenpass.io import (
    load_image,
    load_label_map,
    load_model,
    payload_checksum,
    read_manifest,
    save_label_map,
    save_model,
    save_ppm,
    save_raw,
)
from tokenpass.synthetic import generate_synthetic_model


@pytest.fixture
def saved(tmp_path, tiny_spec):
    weights = generate_synthetic_model(tiny_spec, seed=7)
    path = save_model(tmp_path / "tiny.json", tiny_spec, weights, metadata={"seed": 7})
    return path, weights


def _edit_manifest(path, fn):
    manifest = json.loads(path.read_text())
    fn(manifest)
    path.write_text(json.dumps(manifest))


class TestWeightsFormat:
    def test_roundtrip_bitwise(self, saved, tiny_spec):
        path, weights = saved
        model = load_model(path)
        assert model.spec == tiny_spec and model.metadata == {"seed": 7}
        for (name, a), b in zip(weights.to_arrays().items(), model.weights.to_arrays().values()):
            assert a.tobytes() == b.tobytes(), name

    def test_float32_payload(self, tmp_path, tiny_spec):
        weights = generate_synthetic_model(tiny_spec, seed=7)
        path = save_model(tmp_path / "f32.json", tiny_spec, weights, dtype="float32")
        assert read_manifest(path)["dtype"] == "float32"
        loaded = load_model(path).weights
        np.testing.assert_array_equal(loaded.pos_embed, weights.pos_embed.astype(np.float32))

    def test_manifest_layout(self, saved):
        path, weights = saved
        manifest = read_manifest(path)
        assert manifest["byte_order"] == "little"
        offsets = [e["offset"] for e in manifest["arrays"]]
        sizes = [e["nbytes"] for e in manifest["arrays"]]
        assert offsets == list(np.cumsum([0] + sizes[:-1]))
        assert sum(sizes) == manifest["payload_bytes"] == path.with_suffix(".bin").stat().st_size
        assert manifest["checksum"]["value"] == payload_checksum(weights)

    def test_truncated_payload(self, saved):
        path, _ = saved
        payload = path.with_suffix(".bin")
        payload.write_bytes(payload.read_bytes()[:-8])
        with pytest.raises(ChecksumError):
            load_model(path)

    def test_corrupted_payload(self, saved):
        path, _ = saved
        payload = path.with_suffix(".bin")
        data = bytearray(payload.read_bytes())
        data[100] ^= 1
        payload.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load_model(path)

    def test_missing_array(self, saved):
        path, _ = saved
        _edit_manifest(path, lambda m: m["arrays"][-1].update(name="decoder.extra"))
        with pytest.raises(MissingArrayError):
            load_model(path)

    def test_shape_mismatch(self, saved):
        path, _ = saved

        def transpose_decoder(m):
            entry = next(e for e in m["arrays"] if e["name"] == "decoder.weight")
            entry["shape"] = entry["shape"][::-1]

        _edit_manifest(path, transpose_decoder)
        with pytest.raises(ArrayShapeError):
            load_model(path)

    def test_errors_are_distinct(self):
        assert len({ChecksumError, MissingArrayError, ArrayShapeError}) == 3
        assert not issubclass(ChecksumError, MissingArrayError)

    def test_not_a_manifest(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(WeightsError):
            load_model(tmp_path / "x.json")

    def test_vit_small_manifest(self, tmp_path):
        spec = ModelSpec(1024, 2048, 16, 384, 12, 6, 19, decision_layers=(3, 6, 9))
        arrays = {name: np.zeros(shape) for name, shape in parameter_shapes(spec).items()}
        weights = Weights.from_arrays(spec, arrays)
        path = save_model(tmp_path / "vit_s.json", spec, weights, dtype="float32")
        model = load_model(path)
        assert model.spec.num_tokens == 8192
        assert (model.spec.embed_dim, model.spec.num_layers, model.spec.num_heads) == (384, 12, 6)


class TestImages:
    def test_solid_ppm(self, tmp_path):
        image = np.zeros((3, 4, 6))
        image[0], image[1], image[2] = 1.0, 0.0, 128 / 255
        save_ppm(tmp_path / "solid.ppm", image)
        loaded = load_image(tmp_path / "solid.ppm")
        assert loaded.shape == (3, 4, 6)
        for ch, value in enumerate([1.0, 0.0, 128 / 255]):
            assert (loaded[ch] == value).all()

    def test_ppm_with_comment(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        loaded = load_image(path)
        assert loaded[:, 0, 0].tolist() == [1.0, 0.0, 0.0]
        assert loaded[:, 0, 1].tolist() == [0.0, 0.0, 1.0]

    def test_raw_roundtrip(self, tmp_path, rng):
        image = rng.random((3, 8, 4)).astype(np.float32)
        save_raw(tmp_path / "x.raw", image)
        assert np.array_equal(load_image(tmp_path / "x.raw"), image.astype(np.float64))

    def test_cityscapes_ppm_token_count(self, tmp_path):
        from tokenpass.backbone import patch_embed

        spec = ModelSpec(1024, 2048, 16, 4, 1, 1, 2, decision_layers=())
        save_ppm(tmp_path / "big.ppm", np.full((3, 1024, 2048), 0.5))
        image = load_image(tmp_path / "big.ppm", patch_size=16)
        arrays = {name: np.zeros(shape) for name, shape in parameter_shapes(spec).items()}
        seq = patch_embed(image, spec, Weights.from_arrays(spec, arrays))
        assert len(seq) == 8192

    def test_indivisible_rejected_unless_cropped(self, tmp_path, rng):
        save_raw(tmp_path / "odd.raw", rng.random((3, 10, 13)))
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "odd.raw", patch_size=4)
        cropped = load_image(tmp_path / "odd.raw", patch_size=4, center_crop=True)
        full = load_image(tmp_path / "odd.raw")
        assert cropped.shape == (3, 8, 12)
        assert np.array_equal(cropped, full[:, 1:9, 0:12])

    def test_unknown_format(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"\x89PNG....")
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "x.png")

    def test_truncated_ppm(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "t.ppm")

    def test_label_map_roundtrip(self, tmp_path, rng):
        labels = rng.integers(0, 19, (5, 7))
        labels[0, 0] = 255
        save_label_map(tmp_path / "l.pgm", labels)
        assert np.array_equal(load_label_map(tmp_path / "l.pgm"), labels)
