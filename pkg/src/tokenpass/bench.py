"""Run, sweep and timing harness plus report serialization.

Every report is a JSON-serializable dict::

    {
      "schema": "tokenpass-report", "schema_version": 1,
      "kind": "run" | "sweep" | "bench",
      "header": {config, model, seed, precision, flops_convention, convention_note, resolution},
      "rows": [per-image entries],
      "aggregate": {...}
    }

``REPORT_SCHEMA`` is the JSON Schema for that layout; ``CSV_COLUMNS`` lists
the fixed leading CSV columns, followed by ``kept_b<i>`` and ``flops_b<i>``
for each block.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .engine import EngineConfig, Model, SegReport, forward
from .flops import FlopsConvention, dense_flops, reduction_ratio
from .losses import confusion_matrix, metrics_from_confusion

SCHEMA_NAME = "tokenpass-report"
SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "image", "xi", "mode", "merging", "precision", "flops_convention",
    "total_flops", "dense_flops", "reduction_pct", "wall_time_s",
]

_ROW_SCHEMA = {
    "type": "object",
    "required": ["image", "xi", "mode", "kept_counts", "stopped_counts", "block_flops",
                 "total_flops", "dense_flops", "reduction_pct", "wall_time_s"],
    "properties": {
        "image": {"type": "string"},
        "xi": {"type": "number", "minimum": 0, "maximum": 1},
        "mode": {"enum": ["dynamic", "dense"]},
        "merging": {"type": "boolean"},
        "kept_counts": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "stopped_counts": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "block_flops": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "total_flops": {"type": "integer", "minimum": 0},
        "dense_flops": {"type": "integer", "minimum": 0},
        "reduction_pct": {"type": "number"},
        "wall_time_s": {"type": "number", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "schema_version", "kind", "header", "rows", "aggregate"],
    "properties": {
        "schema": {"const": SCHEMA_NAME},
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": ["run", "sweep", "bench"]},
        "header": {
            "type": "object",
            "required": ["config", "model", "seed", "precision", "flops_convention", "convention_note", "resolution"],
            "properties": {
                "config": {"type": "object"},
                "model": {"type": "object"},
                "precision": {"enum": ["f64", "f32"]},
                "flops_convention": {"enum": [c.value for c in FlopsConvention]},
                "convention_note": {"type": "string"},
                "resolution": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
            },
        },
        "rows": {"type": "array", "items": _ROW_SCHEMA},
        "aggregate": {"type": "object"},
    },
}


def _header(model: Model, cfg: EngineConfig, seed=None) -> dict:
    conv = FlopsConvention(cfg.flops_convention)
    return {
        "config": cfg.to_dict(),
        "model": model.spec.to_dict(),
        "seed": seed if seed is not None else model.metadata.get("seed"),
        "precision": cfg.precision,
        "flops_convention": conv.value,
        "convention_note": conv.note,
        "resolution": [model.spec.image_h, model.spec.image_w],
    }


def _report(kind: str, model: Model, cfg: EngineConfig, rows: list, aggregate: dict, seed=None) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "header": _header(model, cfg, seed),
        "rows": rows,
        "aggregate": aggregate,
    }


def summarize(report: SegReport, model: Model, image_id: str = "image") -> dict:
    """Per-image row: token trajectory, FLOPs and timing (no pixel arrays)."""
    cfg = report.config
    dense = dense_flops(model.spec, cfg.flops_convention)
    return {
        "image": image_id,
        "xi": float(cfg.xi),
        "mode": cfg.mode,
        "merging": bool(cfg.enable_merging),
        "precision": cfg.precision,
        "flops_convention": cfg.flops_convention,
        "kept_counts": [b.kept_count for b in report.per_block],
        "stopped_counts": [b.stopped_count for b in report.per_block],
        "block_flops": [b.flops for b in report.per_block],
        "total_flops": report.total_flops,
        "dense_flops": dense.total,
        "reduction_pct": reduction_ratio(report.flops, dense),
        "wall_time_s": report.wall_time,
    }


def dump_maps(report: SegReport, path) -> None:
    """Save label map, final probabilities, probe confidences and masks to an ``.npz``."""
    arrays = {"pred_labels": report.pred_labels, "final_probs": report.final_probs}
    for i, (conf, mask) in enumerate(zip(report.aux_confidences, report.masks)):
        arrays[f"confidence_{i}"] = conf.scores
        arrays[f"aux_labels_{i}"] = conf.labels
        arrays[f"keep_mask_{i}"] = mask
    np.savez_compressed(path, **arrays)


def run_once(model: Model, image: np.ndarray, cfg: EngineConfig | None = None, image_id: str = "image",
             seed=None) -> tuple[dict, SegReport]:
    cfg = cfg or EngineConfig()
    seg = forward(image, model, cfg)
    row = summarize(seg, model, image_id)
    return _report("run", model, cfg, [row], {"mean_total_flops": float(row["total_flops"])}, seed), seg


def _mean_trajectory(rows) -> list[float]:
    return [float(v) for v in np.mean([r["kept_counts"] for r in rows], axis=0)]


def sweep_threshold(model: Model, images, xi_list, cfg: EngineConfig | None = None, seed=None) -> dict:
    """One row per (image, xi); ``images`` is an iterable of ``(image_id, array)``."""
    cfg = cfg or EngineConfig()
    images = list(images)
    xi_list = [float(x) for x in xi_list]
    if not images or not xi_list:
        raise ValueError("sweep needs at least one image and one threshold")
    rows = []
    for image_id, image in images:
        for xi in xi_list:
            rows.append(summarize(forward(image, model, replace(cfg, xi=xi)), model, image_id))
    per_xi = {}
    for xi in xi_list:
        sel = [r for r in rows if r["xi"] == xi]
        per_xi[repr(xi)] = {
            "xi": xi,
            "mean_total_flops": float(np.mean([r["total_flops"] for r in sel])),
            "mean_reduction_pct": float(np.mean([r["reduction_pct"] for r in sel])),
            "mean_kept_trajectory": _mean_trajectory(sel),
            "mean_wall_time_s": float(np.mean([r["wall_time_s"] for r in sel])),
        }
    return _report("sweep", model, cfg, rows, {"per_xi": list(per_xi.values())}, seed)


def _time(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def bench_speed(model: Model, image: np.ndarray, cfg: EngineConfig | None = None, warmup: int = 3,
                iters: int = 20, image_id: str = "image", seed=None) -> dict:
    """Wall-clock comparison of ``cfg`` against the dense baseline.

    BLAS is pinned to one thread and the two configurations are run
    alternately so that slow drifts in machine load hit both equally.
    Speedup is the ratio of median wall times.
    """
    cfg = cfg or EngineConfig()
    if iters < 1:
        raise ValueError("iters must be at least 1")
    dense_cfg = replace(cfg, mode="dense")
    dense_t, dyn_t = [], []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            forward(image, model, dense_cfg)
            forward(image, model, cfg)
        for _ in range(iters):
            dense_t.append(_time(lambda: forward(image, model, dense_cfg)))
            dyn_t.append(_time(lambda: forward(image, model, cfg)))
        last = forward(image, model, cfg)
    row = summarize(last, model, image_id)
    row["wall_time_s"] = statistics.median(dyn_t)
    med_dense, med_dyn = statistics.median(dense_t), statistics.median(dyn_t)
    aggregate = {
        "warmup": warmup,
        "iters": iters,
        "threads": 1,
        "dense_median_s": med_dense,
        "dense_mean_s": statistics.fmean(dense_t),
        "dynamic_median_s": med_dyn,
        "dynamic_mean_s": statistics.fmean(dyn_t),
        "speedup": med_dense / med_dyn,
        "fps": 1.0 / med_dyn,
        "dense_fps": 1.0 / med_dense,
        "throughput_images_per_s": iters / sum(dyn_t),
        "dense_throughput_images_per_s": iters / sum(dense_t),
        "mean_total_flops": float(row["total_flops"]),
        "dense_times_s": dense_t,
        "dynamic_times_s": dyn_t,
    }
    return _report("bench", model, cfg, [row], aggregate, seed)


def throughput(model: Model, images, cfg: EngineConfig | None = None, workers: int = 1) -> float:
    """Images per second over a batch, ``workers`` forwards in flight on shared weights."""
    cfg = cfg or EngineConfig()
    images = list(images)
    model.weights_as(np.float32 if cfg.precision == "f32" else np.float64)
    t0 = time.perf_counter()
    if workers <= 1:
        for img in images:
            forward(img, model, cfg)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda img: forward(img, model, cfg), images))
    return len(images) / (time.perf_counter() - t0)


def evaluate_directory(model: Model, image_dir, label_dir, cfg: EngineConfig | None = None,
                       center_crop: bool = False) -> dict:
    """mIoU/PA/mPA over ``<image_dir>/*.ppm`` paired with ``<label_dir>/<stem>.pgm``."""
    from .io import load_image, load_label_map

    cfg = cfg or EngineConfig()
    c = model.spec.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    paths = sorted(Path(image_dir).glob("*.ppm"))
    for path in paths:
        image = load_image(path, model.spec.patch_size, center_crop)
        labels = load_label_map(Path(label_dir) / f"{path.stem}.pgm")
        if labels.shape != image.shape[1:]:
            labels = labels[: image.shape[1], : image.shape[2]]
        cm += confusion_matrix(forward(image, model, cfg).pred_labels, labels, c)
    metrics = metrics_from_confusion(cm)
    metrics["images"] = len(paths)
    return metrics


def rows_to_csv(report: dict) -> str:
    rows = report["rows"]
    blocks = max(len(r["kept_counts"]) for r in rows)
    columns = CSV_COLUMNS + [f"kept_b{i}" for i in range(blocks)] + [f"flops_b{i}" for i in range(blocks)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        out = {k: r.get(k) for k in CSV_COLUMNS}
        for k in ("xi", "reduction_pct", "wall_time_s"):
            out[k] = repr(float(r[k]))
        for i, (kept, fl) in enumerate(zip(r["kept_counts"], r["block_flops"])):
            out[f"kept_b{i}"] = kept
            out[f"flops_b{i}"] = fl
        writer.writerow(out)
    return buf.getvalue()
