"""Weights manifest/payload files and image/label readers.

Weights on disk
---------------
A model is two files: a JSON manifest and a binary payload.

The manifest holds ``format`` (``"tokenpass-weights"``), ``version``, the
model ``spec``, ``dtype`` (``float32`` or ``float64``), ``byte_order``
(always ``little``), the payload file name, ``payload_bytes``, a
``checksum`` object (``{"algorithm": "sha256", "value": <hex>}``) over the
whole payload, an ``arrays`` list of ``{name, shape, offset, nbytes}``
entries in payload order, and an optional free-form ``metadata`` object.

The payload is every array, C-order, little-endian, concatenated in manifest
order with no padding.

Images
------
* binary PPM (``P6``), maxval up to 65535, scaled to ``[0, 1]``;
* raw tensors: an ASCII header line ``TPRAW1 <C> <H> <W>\\n`` followed by
  ``C*H*W`` little-endian float32 values, loaded as-is;
* label maps: binary PGM (``P5``, 8-bit), one class index per pixel.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .backbone import ModelSpec, Weights, parameter_shapes
from .engine import Model
from .errors import (
    ArrayShapeError,
    ChecksumError,
    ImageFormatError,
    MissingArrayError,
    WeightsError,
)

FORMAT_NAME = "tokenpass-weights"
FORMAT_VERSION = 1
RAW_MAGIC = b"TPRAW1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "f32": "<f4", "f64": "<f8"}


def _le_dtype(dtype: str) -> np.dtype:
    try:
        return np.dtype(_DTYPES[dtype])
    except KeyError:
        raise WeightsError(f"unsupported weight dtype {dtype!r}") from None


def save_model(manifest_path, spec: ModelSpec, weights: Weights, dtype: str = "float64", metadata: dict | None = None) -> Path:
    """Write ``<name>.json`` plus ``<name>.bin`` and return the manifest path."""
    manifest_path = Path(manifest_path)
    payload_path = manifest_path.with_suffix(".bin")
    le = _le_dtype(dtype)
    entries, chunks, offset = [], [], 0
    for name, arr in weights.to_arrays().items():
        data = np.ascontiguousarray(arr, dtype=le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    payload_path.write_bytes(payload)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "dtype": le.name,
        "byte_order": "little",
        "payload": payload_path.name,
        "payload_bytes": len(payload),
        "checksum": {"algorithm": "sha256", "value": hashlib.sha256(payload).hexdigest()},
        "arrays": entries,
        "metadata": metadata or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def read_manifest(manifest_path) -> dict:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightsError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise WeightsError(f"{manifest_path} is not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise WeightsError(f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def load_model(manifest_path) -> Model:
    """Read, checksum and shape-validate a saved model."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    spec = ModelSpec.from_dict(manifest["spec"])
    payload_path = manifest_path.parent / manifest["payload"]
    try:
        payload = payload_path.read_bytes()
    except OSError as exc:
        raise WeightsError(f"cannot read payload {payload_path}: {exc}") from exc

    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["checksum"]["value"]:
        raise ChecksumError(
            f"payload checksum mismatch for {payload_path} ({len(payload)} bytes, "
            f"expected {manifest['payload_bytes']})"
        )

    dtype = _le_dtype(manifest["dtype"])
    declared = {}
    for entry in manifest["arrays"]:
        if entry["name"] in declared:
            raise WeightsError(f"array {entry['name']!r} declared twice")
        declared[entry["name"]] = entry
    if sum(e["nbytes"] for e in declared.values()) != len(payload):
        raise WeightsError("declared array sizes do not add up to the payload length")

    arrays = {}
    for name, shape in parameter_shapes(spec).items():
        entry = declared.get(name)
        if entry is None:
            raise MissingArrayError(f"manifest has no array {name!r}")
        if tuple(entry["shape"]) != shape:
            raise ArrayShapeError(f"{name}: manifest shape {tuple(entry['shape'])}, model needs {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        if entry["nbytes"] != count * dtype.itemsize:
            raise ArrayShapeError(f"{name}: {entry['nbytes']} bytes cannot hold shape {shape}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        arrays[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return Model(spec, Weights.from_arrays(spec, arrays), metadata=dict(manifest.get("metadata") or {}))


def payload_checksum(weights: Weights, dtype: str = "float64") -> str:
    le = _le_dtype(dtype)
    h = hashlib.sha256()
    for arr in weights.to_arrays().values():
        h.update(np.ascontiguousarray(arr, dtype=le).tobytes())
    return h.hexdigest()


def _ppm_tokens(data: bytes, count: int):
    """Split the first ``count`` whitespace-separated header fields, skipping # comments."""
    fields, pos = [], 0
    while len(fields) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        fields.append(data[start:pos])
    return fields, pos + 1  # exactly one whitespace byte ends the header


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = _ppm_tokens(data, 4)
    if fields[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} file, found {fields[0][:2]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: bad dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    if len(data) - pos < count * dtype.itemsize:
        raise ImageFormatError(f"{path}: pixel data truncated")
    pix = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return pix.reshape(h, w, channels).transpose(2, 0, 1), maxval


def _center_crop(image: np.ndarray, multiple: int) -> np.ndarray:
    _, h, w = image.shape
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ImageFormatError(f"image {h}x{w} is smaller than one {multiple}px patch")
    top, left = (h - nh) // 2, (w - nw) // 2
    return image[:, top:top + nh, left:left + nw]


def load_image(path, patch_size: int | None = None, center_crop: bool = False) -> np.ndarray:
    """Load a P6 PPM or raw float32 tensor as a ``C x H x W`` float64 array.

    With ``patch_size`` set, both sides must be multiples of it; with
    ``center_crop`` the image is instead trimmed symmetrically until they are.
    """
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(6)
    if head.startswith(b"P6"):
        pix, maxval = _read_pnm(path, b"P6", 3)
        image = pix.astype(np.float64) / maxval
    elif head == RAW_MAGIC:
        image = _read_raw(path)
    else:
        raise ImageFormatError(f"{path}: unsupported image format (expected P6 PPM or {RAW_MAGIC.decode()})")
    if patch_size:
        _, h, w = image.shape
        if h % patch_size or w % patch_size:
            if not center_crop:
                raise ImageFormatError(
                    f"{path}: {h}x{w} is not divisible by patch size {patch_size} (use center crop)"
                )
            image = _center_crop(image, patch_size)
    return image


def save_ppm(path, image: np.ndarray) -> None:
    """Write a ``3 x H x W`` image in [0, 1] as an 8-bit P6 file."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError(f"PPM needs a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    pix = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pix.tobytes())


def save_raw(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ImageFormatError(f"raw tensor must be C x H x W, got {image.shape}")
    c, h, w = image.shape
    header = RAW_MAGIC + b" %d %d %d\n" % (c, h, w)
    Path(path).write_bytes(header + np.ascontiguousarray(image, dtype="<f4").tobytes())


def _read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    parts = data[:end].split()
    if end < 0 or len(parts) != 4 or parts[0] != RAW_MAGIC:
        raise ImageFormatError(f"{path}: malformed raw tensor header")
    try:
        c, h, w = (int(p) for p in parts[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed raw tensor header") from None
    count = c * h * w
    if len(data) - end - 1 != count * 4:
        raise ImageFormatError(f"{path}: expected {count} float32 values")
    return np.frombuffer(data, dtype="<f4", count=count, offset=end + 1).reshape(c, h, w).astype(np.float64)


def load_label_map(path) -> np.ndarray:
    pix, _ = _read_pnm(path, b"P5", 1)
    return pix[0].astype(np.int64)


def save_label_map(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())
