"""Ablation sweeps: train one run per swept value, score each by mean Jaccard."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import load_checkpoint
from .evaluation import evaluate_jaccard
from .geometry import ViewTransform, render_view
from .training import TrainConfig, run_pretraining

SWEEPABLE = (
    "alpha",
    "beta",
    "tau_s",
    "tau_t",
    "P",
    "n",
    "R",
    "strategy",
    "region_source",
)

# sweep shorthands bundling a region source with its grid size
_REGION_VALUES = {
    "gt_mask": {"region_source": "gt_mask"},
    "gt_box": {"region_source": "gt_box"},
    "grid4": {"region_source": "grid", "n": 4},
    "grid2": {"region_source": "grid", "n": 2},
}


@dataclass
class SweepSpec:
    parameter: str
    values: list
    base: TrainConfig

    def __post_init__(self) -> None:
        if self.parameter not in SWEEPABLE:
            raise ValueError(f"cannot sweep {self.parameter!r}; choose from {SWEEPABLE}")


def apply_sweep_value(base: TrainConfig, parameter: str, value) -> TrainConfig:
    """New config with the swept value applied (seed and budget untouched)."""
    if parameter == "region_source":
        if value not in _REGION_VALUES:
            raise ValueError(f"region_source sweep value must be one of {sorted(_REGION_VALUES)}")
        cfg = dataclasses.replace(base, **_REGION_VALUES[value])
    elif parameter in ("P", "n", "R", "strategy"):
        cfg = dataclasses.replace(base, **{parameter: int(value)})
    else:
        cfg = dataclasses.replace(base, **{parameter: float(value)})
    cfg.validate()
    return cfg


def checkpoint_encode_fn(checkpoint_path: str | Path):
    """Wrap a checkpoint's base encoder as an image -> DenseOutput callable."""
    pair, _, _ = load_checkpoint(checkpoint_path)
    pair.base.eval()
    size = pair.base.cfg.input_size

    def encode(image: np.ndarray):
        h, w = image.shape[:2]
        view = render_view(image, ViewTransform((0, 0, w, h), False, size))
        with torch.no_grad():
            return pair.base(torch.from_numpy(view).permute(2, 0, 1).unsqueeze(0)).item(0)

    return encode


def run_sweep(
    spec: SweepSpec,
    dataset,
    out_dir: str | Path,
    eval_max_images: int | None = None,
) -> dict:
    """Train and evaluate one run per swept value; failures don't stop the sweep."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in spec.values:
        run_dir = out_dir / f"{spec.parameter}_{value}"
        row = {"parameter": spec.parameter, "value": value, "run_dir": str(run_dir)}
        try:
            cfg = apply_sweep_value(spec.base, spec.parameter, value)
            run_pretraining(cfg, dataset, run_dir)
            ckpt = run_dir / "checkpoints" / f"step_{cfg.steps}.ckpt"
            report = evaluate_jaccard(
                dataset,
                checkpoint_encode_fn(ckpt),
                keep_fraction=cfg.keep_fraction,
                max_images=eval_max_images,
                checkpoint_id=str(ckpt),
            )
            row["mean_jaccard"] = report["mean_jaccard"]
            row["n_objects"] = report["n_objects"]
        except Exception as exc:  # noqa: BLE001 - per-run failures are recorded
            row["error"] = str(exc)
        rows.append(row)

    report = {"parameter": spec.parameter, "rows": rows}
    with open(out_dir / "sweep.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    (out_dir / "sweep_report.json").write_text(json.dumps(report, indent=2))
    return report
