"""Command-line surface: gen-data, pretrain, eval, visualize, sweep.

Configuration is a flat key = value text file whose keys are the TrainConfig
fields plus a handful of command-specific keys. Unknown keys are rejected with
exit code 2, naming the offending key.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .data import gen_synthetic_dataset, load_dataset
from .evaluation import (
    affinity_map,
    evaluate_jaccard,
    export_visualization,
    kmeans_regions,
    snap_centroid,
    image_to_feature_coords,
)
from .sweep import SweepSpec, checkpoint_encode_fn, run_sweep
from .training import TrainConfig, run_pretraining


class ConfigError(Exception):
    pass


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}

# extra keys understood by individual subcommands
_EXTRA_KEYS = {
    "count": (int, 200, "gen-data: number of images to generate"),
    "image_size": (int, 64, "gen-data: square image side in pixels"),
    "shapes_min": (int, 1, "gen-data: minimum shapes per image"),
    "shapes_max": (int, 3, "gen-data: maximum shapes per image"),
    "data": (str, "", "dataset directory"),
    "dataset_kind": (str, "synthetic", "dataset kind: synthetic | image_folder"),
    "checkpoint": (str, "", "checkpoint file for eval/visualize"),
    "sweep_parameter": (str, "", "sweep: parameter name"),
    "sweep_values": (str, "", "sweep: comma-separated value list"),
    "eval_images": (int, 0, "eval/sweep: cap on evaluated images (0 = all)"),
    "image_index": (int, 0, "visualize: dataset index to render"),
    "point": (str, "", "visualize: 'row,col' on the feature grid (default: centroid)"),
    "kmeans_k": (int, 0, "visualize: also export a k-means label map (0 = off)"),
}


def _coerce(key: str, raw: str):
    if key in _TRAIN_FIELDS:
        target = _TRAIN_FIELDS[key].type
        caster = {"int": int, "float": float, "str": str}.get(str(target), str)
    elif key in _EXTRA_KEYS:
        caster = _EXTRA_KEYS[key][0]
    else:
        raise ConfigError(f"unknown config key: {key}")
    try:
        return caster(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for config key {key}: {raw!r}") from exc


def parse_config_file(path: str | Path) -> dict:
    """Parse a flat 'key = value' file; '#' starts a comment line."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = _coerce(key.strip(), raw.strip())
    return values


def _config_epilog() -> str:
    lines = ["config file keys (key = value per line) and defaults:"]
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"  {f.name} = {f.default}")
    for key, (_, default, help_text) in _EXTRA_KEYS.items():
        lines.append(f"  {key} = {default}  ({help_text})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointcontrast",
        description="Point-level region contrast pre-training at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("gen-data", "generate a synthetic shapes dataset with ground-truth masks"),
        ("pretrain", "run pre-training on a dataset"),
        ("eval", "score a checkpoint's affinity masks against ground-truth masks"),
        ("visualize", "export an affinity-map (and optional k-means) figure"),
        ("sweep", "train and evaluate one run per swept hyper-parameter value"),
    ):
        cmd = sub.add_parser(
            name,
            help=desc,
            epilog=_config_epilog(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        cmd.add_argument("--config", type=str, default=None, help="key = value config file")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--out", type=str, required=True, help="output directory or file")
    return parser


def _load_settings(args) -> dict:
    settings = dict()
    if args.config:
        settings.update(parse_config_file(args.config))
    if args.seed is not None:
        settings["seed"] = args.seed
    return settings


def _train_config(settings: dict) -> TrainConfig:
    kwargs = {k: v for k, v in settings.items() if k in _TRAIN_FIELDS}
    cfg = TrainConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _setting(settings: dict, key: str):
    return settings.get(key, _EXTRA_KEYS[key][1])


def _open_dataset(settings: dict):
    data_dir = _setting(settings, "data")
    if not data_dir:
        raise ConfigError("config key 'data' (dataset directory) is required")
    return load_dataset(data_dir, _setting(settings, "dataset_kind"))


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _load_settings(args)
        if args.command == "gen-data":
            gen_synthetic_dataset(
                count=_setting(settings, "count"),
                image_size=_setting(settings, "image_size"),
                shapes_range=(_setting(settings, "shapes_min"), _setting(settings, "shapes_max")),
                seed=settings.get("seed", 0),
                out_dir=args.out,
            )
            print(f"wrote dataset to {args.out}")
        elif args.command == "pretrain":
            cfg = _train_config(settings)
            dataset = _open_dataset(settings)
            run_dir = run_pretraining(cfg, dataset, args.out)
            print(f"run complete: {run_dir}")
        elif args.command == "eval":
            report = _run_eval(settings)
            out = Path(args.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(report, indent=2))
            print(f"mean Jaccard {report['mean_jaccard']:.4f} over {report['n_objects']} objects")
        elif args.command == "visualize":
            _run_visualize(settings, Path(args.out))
        elif args.command == "sweep":
            cfg = _train_config(settings)
            parameter = _setting(settings, "sweep_parameter")
            if not parameter:
                raise ConfigError("config key 'sweep_parameter' is required")
            raw_values = [v for v in str(_setting(settings, "sweep_values")).split(",") if v]
            try:
                spec = SweepSpec(parameter, raw_values, cfg)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            dataset = _open_dataset(settings)
            max_images = _setting(settings, "eval_images") or None
            report = run_sweep(spec, dataset, args.out, eval_max_images=max_images)
            print(json.dumps(report["rows"], indent=2))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface the failure, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _run_eval(settings: dict) -> dict:
    ckpt = _setting(settings, "checkpoint")
    if not ckpt:
        raise ConfigError("config key 'checkpoint' is required")
    dataset = _open_dataset(settings)
    if not dataset.has_gt_masks:
        raise ConfigError("eval needs a dataset with ground-truth masks")
    cfg = _train_config(settings)
    max_images = _setting(settings, "eval_images") or None
    return evaluate_jaccard(
        dataset,
        checkpoint_encode_fn(ckpt),
        keep_fraction=cfg.keep_fraction,
        max_images=max_images,
        checkpoint_id=str(ckpt),
    )


def _run_visualize(settings: dict, out_dir: Path) -> None:
    ckpt = _setting(settings, "checkpoint")
    if not ckpt:
        raise ConfigError("config key 'checkpoint' is required")
    dataset = _open_dataset(settings)
    index = _setting(settings, "image_index")
    if not 0 <= index < len(dataset):
        raise ConfigError(f"image_index {index} outside dataset of {len(dataset)}")
    sample = dataset[index]
    encode = checkpoint_encode_fn(ckpt)
    dense = encode(sample.image)
    res = dense.point_map.shape[0]

    point_raw = _setting(settings, "point")
    if point_raw:
        try:
            row, col = (int(v) for v in point_raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad 'point' value {point_raw!r}; expected 'row,col'") from exc
    elif sample.masks:
        py, px = snap_centroid(sample.masks[0])
        row, col = image_to_feature_coords(py, px, sample.image.shape[:2], res)
    else:
        row = col = res // 2

    out_dir.mkdir(parents=True, exist_ok=True)
    amap = affinity_map(dense, (row, col))
    export_visualization(sample.image, amap, out_dir / f"{sample.sample_id}_affinity.png")
    k = _setting(settings, "kmeans_k")
    if k:
        labels = kmeans_regions(dense, k, rng=np.random.default_rng(settings.get("seed", 0)))
        export_visualization(sample.image, labels, out_dir / f"{sample.sample_id}_kmeans.png")
    print(f"visualizations written to {out_dir}")


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
