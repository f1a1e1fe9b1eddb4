"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 I/O or data error, 3 numerical
failure. Flags override values from an optional --config JSON file, which in
turn overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import formats, gradcheck, model, sampler, synthdata, training
from .geometry import CameraModel, DensityMap, GridSpec, render_depth_multisets

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise formats.FormatError(f"cannot read config file {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise formats.FormatError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(flag_value, file_cfg: dict, key: str, default):
    """Flag > config file > default."""
    if flag_value is not None:
        return flag_value
    if key in file_cfg:
        return file_cfg[key]
    return default


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _load_config_file(args.config)
    shapes = _resolve(args.shapes, cfg, "shapes", 15)
    views = _resolve(args.views, cfg, "views", 5)
    seed = _resolve(args.seed, cfg, "seed", 0)
    points = _resolve(args.surface_points, cfg, "surface_points", 2048)
    size = _resolve(args.image_size, cfg, "image_size", 64)
    if shapes < 1 or views < 1:
        raise UsageError("--shapes and --views must be at least 1")
    if points < 1 or size < 2:
        raise UsageError("--surface-points must be >= 1 and --image-size >= 2")
    manifest_path = synthdata.make_dataset(
        shapes, views, seed, args.out, n_surface_points=points, image_size=size
    )
    print(manifest_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_ARCHES = ("full", "simenc")


def _model_config_from(cfg_file: dict, manifest: dict, arch: str) -> model.ModelConfig:
    base = model.ModelConfig(
        image_size=manifest["image_size"],
        grid_width=manifest["grid"]["width"],
        grid_height=manifest["grid"]["height"],
    )
    if arch == "simenc":
        base = base.simenc()
    overrides = cfg_file.get("model", {})
    if overrides:
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
        base = model.ModelConfig(**{**base.__dict__, **fields})
    return base


def cmd_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    manifest = formats.load_manifest(args.data + "/manifest.json")
    arch = _resolve(args.arch, cfg_file, "arch", "full")
    if arch not in _ARCHES:
        raise UsageError(f"--arch must be one of {_ARCHES}")
    train_cfg = training.TrainConfig(
        epochs=_resolve(args.epochs, cfg_file, "epochs", 30),
        lr=_resolve(args.lr, cfg_file, "lr", 1e-3),
        lambda_cd=_resolve(args.lambda_cd, cfg_file, "lambda_cd", 1.0),
        lambda_d=_resolve(args.lambda_d, cfg_file, "lambda_d", 1e4),
        n_points=_resolve(args.points, cfg_file, "points", 1024),
        location_source=_resolve(args.location_source, cfg_file, "location_source", "gt-density"),
        seed=_resolve(args.seed, cfg_file, "seed", 0),
    )
    model_cfg = _model_config_from(cfg_file, manifest, arch)

    def progress(row):
        epoch, l_cd, l_d, total = row
        print(f"epoch {epoch:3d}  cd {l_cd:.6f}  density {l_d:.6f}  total {total:.4f}")

    params, history = training.train(
        manifest, args.data, train_cfg, model_cfg, progress=progress if args.verbose else None
    )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_checkpoint(out, {n: p.values for n, p in params.tensors.items()})
    formats.write_loss_csv(args.loss_csv or f"{args.out}.loss.csv", history)
    dump = {
        "epochs": train_cfg.epochs,
        "lr": train_cfg.lr,
        "lambda_cd": train_cfg.lambda_cd,
        "lambda_d": train_cfg.lambda_d,
        "points": train_cfg.n_points,
        "location_source": train_cfg.location_source,
        "seed": train_cfg.seed,
        "arch": arch,
        "model": {
            "image_size": model_cfg.image_size,
            "encoder_channels": list(model_cfg.encoder_channels),
            "decoder_channels": list(model_cfg.decoder_channels),
            "density_hidden": list(model_cfg.density_hidden),
            "depth_width": model_cfg.depth_width,
            "depth_blocks": model_cfg.depth_blocks,
            "noise_dim": model_cfg.noise_dim,
            "grid_width": model_cfg.grid_width,
            "grid_height": model_cfg.grid_height,
        },
    }
    Path(f"{args.out}.config.json").write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def _params_from_checkpoint(path, image_size, grid_w, grid_h) -> model.ModelParams:
    arrays = formats.load_checkpoint(path)
    cfg = model.config_from_tensors(arrays, image_size, grid_w, grid_h)
    return model.params_from_arrays(cfg, arrays)


def cmd_sample(args) -> int:
    if args.points < 1:
        raise UsageError("--points must be at least 1")
    sketch = formats.load_pgm(args.sketch)
    img_h, img_w = sketch.shape
    if args.use_gt_density:
        density_values = formats.load_dmap(args.use_gt_density)
        grid_h, grid_w = density_values.shape
    else:
        density_values = None
        grid_h, grid_w = img_h, img_w

    params = _params_from_checkpoint(args.ckpt, img_w, grid_w, grid_h)
    cam = CameraModel(s=args.scale)
    grid = GridSpec(grid_w, grid_h)
    f = model.translate(sketch, params)
    if density_values is None:
        m = DensityMap(grid, model.predict_density(f, params).values)
    else:
        m = DensityMap(grid, density_values)

    oracle = None
    depth_source = "generator"
    if args.oracle_cloud:
        oracle = render_depth_multisets(formats.load_ply(args.oracle_cloud), grid, cam)
        depth_source = "oracle-multiset"

    cfg_s = sampler.SamplerConfig(
        n_points=args.points,
        seed=args.seed,
        source="gt-density" if args.use_gt_density else "predicted-density",
        depth_source=depth_source,
        homogeneous=args.homo,
    )
    cloud = sampler.generate_cloud(m, f, params, cam, cfg_s, depth_oracle=oracle)
    formats.write_ply(args.out, cloud)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    manifest = formats.load_manifest(args.data + "/manifest.json")
    metric_names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    for name in metric_names:
        if name not in training.METRICS:
            raise UsageError(f"unknown metric {name!r}; available: {sorted(training.METRICS)}")
    if args.variant not in training.VARIANTS:
        raise UsageError(f"--variant must be one of {training.VARIANTS}")
    grid = manifest["grid"]
    params = _params_from_checkpoint(args.ckpt, manifest["image_size"], grid["width"], grid["height"])
    rows, means = training.evaluate(
        params,
        manifest,
        args.data,
        split=args.split,
        metric_names=metric_names,
        variant=args.variant,
        n_points=args.points,
        seed=args.seed,
    )
    formats.write_metrics_csv(args.out, rows)
    for name in metric_names:
        print(f"mean {name}: {means[name]:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(seed=args.seed)
    width = max(len(n) for n in report)
    ok = True
    for name, err in sorted(report.items()):
        status = "ok" if err < gradcheck.DEFAULT_RTOL else "FAIL"
        ok &= err < gradcheck.DEFAULT_RTOL
        print(f"{name:<{width}}  max rel err {err:.3e}  {status}")
    return EXIT_OK if ok else EXIT_USAGE


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sketchcloud", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--shapes", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--surface-points", type=int, dest="surface_points")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-cd", type=float, dest="lambda_cd")
    p.add_argument("--lambda-d", type=float, dest="lambda_d")
    p.add_argument("--points", type=int)
    p.add_argument("--location-source", dest="location_source")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=_ARCHES)
    p.add_argument("--config")
    p.add_argument("--loss-csv", dest="loss_csv")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate a point cloud from a sketch")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sketch", required=True)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--use-gt-density", dest="use_gt_density")
    p.add_argument("--oracle-cloud", dest="oracle_cloud")
    p.add_argument("--homo", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metrics", default="cd,emd,iou,fpd")
    p.add_argument("--variant", default="ours")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (formats.FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
