"""Command-line front end: ``tokenpass {run,sweep,bench,gen-model,inspect-weights}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .backbone import ModelSpec, parameter_shapes
from .engine import EngineConfig, Model, default_decision_layers
from .errors import ConfigError, TokenPassError
from .flops import FlopsConvention, dense_flops
from .io import load_image, load_model, payload_checksum, read_manifest, save_model
from .synthetic import generate_synthetic_model, half_flat_scene, random_image, texture_scene

EXIT_ERROR = 2

SCENES = {
    "half-flat": lambda spec, seed: half_flat_scene(spec, seed)[0],
    "texture": lambda spec, seed: texture_scene(spec, seed, min_amplitude=1e-5)[0],
    "random": random_image,
}


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _engine_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("model", help="weights manifest (.json)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="P6 PPM or raw float32 tensor")
    src.add_argument("--synthetic", choices=sorted(SCENES), default=None, help="generate a scene instead")
    p.add_argument("--seed", type=int, default=0, help="scene seed for --synthetic")
    p.add_argument("--center-crop", action="store_true")
    p.add_argument("--xi", type=float, default=0.985)
    p.add_argument("--mode", choices=["dynamic", "dense"], default="dynamic")
    p.add_argument("--decision-layers", type=_int_list, default=None)
    p.add_argument("--merging", choices=["on", "off"], default="on")
    p.add_argument("--precision", choices=["f64", "f32"], default="f64")
    p.add_argument("--flops-convention", choices=[c.value for c in FlopsConvention], default="paper_compat")
    p.add_argument("--out", choices=["json", "csv"], default="json")
    p.add_argument("--output", "-o", help="write the report here instead of stdout")


def _config(args) -> EngineConfig:
    return EngineConfig(
        xi=args.xi,
        decision_layers=args.decision_layers,
        mode=args.mode,
        enable_merging=args.merging == "on",
        precision=args.precision,
        flops_convention=args.flops_convention,
    )


def _image(args, model: Model) -> tuple[str, np.ndarray]:
    if args.image:
        return Path(args.image).name, load_image(args.image, model.spec.patch_size, args.center_crop)
    scene = args.synthetic or "half-flat"
    return f"{scene}-{args.seed}", SCENES[scene](model.spec, args.seed)


def _emit(report: dict, args) -> None:
    text = bench.rows_to_csv(report) if args.out == "csv" else json.dumps(report, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> None:
    model = load_model(args.model)
    image_id, image = _image(args, model)
    report, seg = bench.run_once(model, image, _config(args), image_id)
    if args.dump_maps:
        bench.dump_maps(seg, args.dump_maps)
    _emit(report, args)


def cmd_sweep(args) -> None:
    model = load_model(args.model)
    if args.images:
        paths = sorted(Path(args.images).glob("*.ppm")) + sorted(Path(args.images).glob("*.raw"))
        if not paths:
            raise ConfigError(f"no .ppm or .raw images in {args.images}")
        images = [(p.name, load_image(p, model.spec.patch_size, args.center_crop)) for p in paths]
    else:
        scene = args.synthetic or "texture"
        images = [(f"{scene}-{s}", SCENES[scene](model.spec, args.seed + s)) for s in range(args.count)]
    _emit(bench.sweep_threshold(model, images, args.xi_list, _config(args)), args)


def cmd_bench(args) -> None:
    model = load_model(args.model)
    image_id, image = _image(args, model)
    _emit(bench.bench_speed(model, image, _config(args), args.warmup, args.iters, image_id), args)


def cmd_gen_model(args) -> None:
    layers = args.decision_layers or default_decision_layers(args.layers)
    spec = ModelSpec(
        image_h=args.image_size[0],
        image_w=args.image_size[1],
        patch_size=args.patch,
        embed_dim=args.embed_dim,
        num_layers=args.layers,
        num_heads=args.heads,
        num_classes=args.classes,
        decision_layers=layers,
        mlp_ratio=args.mlp_ratio,
        use_class_token=args.class_token,
    )
    weights = generate_synthetic_model(spec, args.seed, structured=args.structured)
    meta = {"seed": args.seed, "generator": "structured" if args.structured else "random"}
    path = save_model(args.output, spec, weights, args.dtype, meta)
    print(json.dumps({"manifest": str(path), "tokens": spec.num_tokens,
                      "checksum": payload_checksum(weights, args.dtype)}))


def cmd_inspect(args) -> None:
    manifest = read_manifest(args.model)
    model = load_model(args.model)
    spec = model.spec
    shapes = parameter_shapes(spec)
    info = {
        "spec": spec.to_dict(),
        "tokens": spec.num_tokens,
        "grid": [spec.grid_h, spec.grid_w],
        "dtype": manifest["dtype"],
        "arrays": len(shapes),
        "parameters": int(sum(int(np.prod(s)) for s in shapes.values())),
        "checksum": manifest["checksum"],
        "checksum_ok": True,
        "metadata": model.metadata,
        "dense_flops": {c.value: dense_flops(spec, c).total for c in FlopsConvention},
    }
    print(json.dumps(info, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenpass", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="segment one image and report token counts and FLOPs")
    _engine_args(p)
    p.add_argument("--dump-maps", help="save label map, confidences and keep masks to this .npz")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep the confidence threshold over a set of images")
    _engine_args(p)
    p.add_argument("--images", help="directory of .ppm/.raw images")
    p.add_argument("--count", type=int, default=20, help="number of synthetic scenes")
    p.add_argument("--xi-list", type=_float_list, default=[0.95, 0.97, 0.985, 0.99, 1.0])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="single-threaded wall-clock comparison against the dense forward")
    _engine_args(p)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--iters", type=int, default=20)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-model", help="write a seeded synthetic model")
    p.add_argument("output", help="manifest path; the payload goes next to it as .bin")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"), default=(64, 64))
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--classes", type=int, default=19)
    p.add_argument("--mlp-ratio", type=int, default=4)
    p.add_argument("--decision-layers", type=_int_list, default=None)
    p.add_argument("--class-token", action="store_true")
    p.add_argument("--structured", action="store_true", help="probe heads confident on flat patches")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("inspect-weights", help="validate a weights manifest and print a summary")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (TokenPassError, OSError) as exc:
        print(f"tokenpass: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
