"""Pre-training orchestration: dual views, momentum bank, warm-up, checkpoints.

Every random draw is keyed by (seed, step, image index, purpose), so runs are
reproducible regardless of batching or worker scheduling, and a reference
pipeline can regenerate the exact views of any step without replaying the
whole run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .encoder import (
    DenseOutput,
    EncoderConfig,
    EncoderPair,
    ema_update,
    gather_point_features,
    save_checkpoint,
)
from .geometry import (
    RegionLabelMap,
    ViewTransform,
    color_jitter,
    make_annotation_regions,
    make_grid_regions,
    mask_bounding_box,
    render_view,
    sample_points,
    sample_valid_masks,
    sample_view_transform,
    transform_label_map,
)

# purpose tags for derived RNG streams
_RNG_VIEW = 11
_RNG_REGION = 22
_RNG_BATCH = 33

REGION_SOURCES = ("grid", "gt_box", "gt_mask")
LOSS_MODES = ("point", "pooled_region")
INTER_NEGATIVE_MODES = ("batch", "none")


@dataclass
class TrainConfig:
    """Flat run configuration; field names double as config-file keys.

    n: grid size (n x n cells); N: region masks sampled per view; P: points
    sampled per mask; R: up-sampled feature resolution; tau: contrast
    temperature; tau_t / tau_s: teacher / student distillation temperatures.
    lr = 0 selects the scaled default 0.03 * batch_size / 256.
    """

    n: int = 4
    N: int = 16
    P: int = 16
    R: int = 64
    tau: float = 0.2
    tau_t: float = 0.07
    tau_s: float = 0.1
    alpha: float = 0.5
    beta: float = 0.7
    ema: float = 0.999
    queue_capacity: int = 4096
    warmup_fraction: float = 0.15
    strategy: int = 1
    region_source: str = "grid"
    batch_size: int = 32
    steps: int = 2000
    lr: float = 0.0
    seed: int = 0
    out_size: int = 64
    embed_dim: int = 64
    scale_min: float = 0.2
    scale_max: float = 1.0
    color_jitter: float = 0.4
    inter_negatives: str = "batch"
    loss_mode: str = "point"
    keep_fraction: float = 0.8
    checkpoint_every: int = 0

    def validate(self) -> None:
        if min(self.tau, self.tau_t, self.tau_s) <= 0:
            raise ValueError("temperatures must be positive")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if not 0.0 <= self.ema <= 1.0:
            raise ValueError("ema must lie in [0, 1]")
        if self.strategy not in (1, 2, 3):
            raise ValueError("strategy must be 1, 2, or 3")
        if self.region_source not in REGION_SOURCES:
            raise ValueError(f"region_source must be one of {REGION_SOURCES}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.inter_negatives not in INTER_NEGATIVE_MODES:
            raise ValueError(f"inter_negatives must be one of {INTER_NEGATIVE_MODES}")
        if not (0.0 < self.scale_min <= self.scale_max <= 1.0):
            raise ValueError("scale range must satisfy 0 < min <= max <= 1")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if min(self.n, self.N, self.P, self.R, self.batch_size, self.out_size) < 1:
            raise ValueError("n, N, P, R, batch_size, and out_size must be positive")
        if self.steps < 0 or self.queue_capacity < 1:
            raise ValueError("steps must be >= 0 and queue_capacity >= 1")

    @property
    def resolved_lr(self) -> float:
        return self.lr if self.lr > 0 else 0.03 * self.batch_size / 256.0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_size=self.out_size, embed_dim=self.embed_dim, feature_res=self.R
        )


class MemoryQueue:
    """Fixed-capacity FIFO of unit-norm momentum embeddings."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def enqueue(self, embeddings: torch.Tensor) -> None:
        emb = embeddings.detach()
        if emb.ndim == 1:
            emb = emb.unsqueeze(0)
        for row in emb:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def negatives(self) -> torch.Tensor:
        """Current contents, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count].clone()
        return torch.cat([self.buffer[self.cursor :], self.buffer[: self.cursor]]).clone()


def warmup_weight(step_index: int, total_steps: int, warmup_fraction: float) -> int:
    """Hard distillation gate: 0 before warmup_fraction * total_steps, else 1."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return 0 if step_index < warmup_fraction * total_steps else 1


def view_rng(seed: int, step_index: int, image_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step_index, image_index, _RNG_VIEW])


def region_rng(seed: int, step_index: int, image_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step_index, image_index, _RNG_REGION])


def batch_rng(seed: int, step_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step_index, _RNG_BATCH])


def build_views(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: TrainConfig,
    transforms: tuple[ViewTransform, ViewTransform] | None = None,
) -> tuple[ViewTransform, ViewTransform, np.ndarray, np.ndarray]:
    """Sample (or accept) two view transforms and render the jittered views."""
    height, width = image.shape[:2]
    if transforms is None:
        t1 = sample_view_transform(height, width, rng, (cfg.scale_min, cfg.scale_max), cfg.out_size)
        t2 = sample_view_transform(height, width, rng, (cfg.scale_min, cfg.scale_max), cfg.out_size)
    else:
        t1, t2 = transforms
    view1 = color_jitter(render_view(image, t1), rng, cfg.color_jitter)
    view2 = color_jitter(render_view(image, t2), rng, cfg.color_jitter)
    return t1, t2, view1, view2


def _source_regions(sample, cfg: TrainConfig) -> RegionLabelMap:
    height, width = sample.image.shape[:2]
    if cfg.region_source == "grid":
        return make_grid_regions(height, width, cfg.n)
    if not sample.masks:
        raise ValueError(
            f"region_source={cfg.region_source!r} needs ground-truth masks, "
            f"but sample {getattr(sample, 'sample_id', '?')} has none"
        )
    if cfg.region_source == "gt_mask":
        return make_annotation_regions(sample.masks, height, width, "mask")
    boxes = [mask_bounding_box(m) for m in sample.masks]
    return make_annotation_regions(boxes, height, width, "box")


def _region_mean_features(dense: DenseOutput, label_map: RegionLabelMap, ids: np.ndarray) -> torch.Tensor:
    """Mask-averaged, re-normalized feature vector per sampled region id."""
    rows = []
    for rid in ids:
        ys, xs = np.nonzero(label_map.labels == rid)
        feats = dense.point_map[ys, xs]
        rows.append(torch.nn.functional.normalize(feats.mean(dim=0), dim=0))
    return torch.stack(rows)


def train_step(
    batch: Sequence,
    pair: EncoderPair,
    queue: MemoryQueue,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    step_index: int,
    view_transforms: Sequence[tuple[ViewTransform, ViewTransform]] | None = None,
) -> losses.LossReport:
    """Run one full pre-training step over a batch of samples.

    Per image: sample two aligned views, build region label maps, encode view 1
    with the base encoder and view 2 with the momentum encoder (plus whatever
    extra passes the distillation strategy needs), compute the image-level,
    point-contrast, and distillation terms, and combine them. Images whose
    views share no region contribute the image-level loss only. Afterwards the
    base weights take one gradient step, the momentum weights one EMA step, and
    the view-2 pooled embeddings are enqueued. ``view_transforms`` lets tests
    inject crops instead of sampling them.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    cfg.validate()
    dtype = next(pair.base.parameters()).dtype
    gate = warmup_weight(step_index, max(cfg.steps, 1), cfg.warmup_fraction)
    distill_on = (
        cfg.loss_mode == "point" and gate == 1 and cfg.alpha < 1.0 and cfg.beta > 0.0
    )

    views1, views2 = [], []
    maps1, maps2 = [], []
    sampled: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None] = []
    for i, sample in enumerate(batch):
        rng_v = view_rng(cfg.seed, step_index, i)
        injected = None if view_transforms is None else view_transforms[i]
        t1, t2, view1, view2 = build_views(sample.image, rng_v, cfg, injected)
        views1.append(view1)
        views2.append(view2)
        source = _source_regions(sample, cfg)
        lm1 = transform_label_map(source, t1, cfg.R)
        lm2 = transform_label_map(source, t2, cfg.R)
        maps1.append(lm1)
        maps2.append(lm2)
        rng_r = region_rng(cfg.seed, step_index, i)
        ids = sample_valid_masks(lm1, lm2, cfg.N, rng_r)
        if ids is None:
            sampled.append(None)
            continue
        coords1, ind1 = sample_points(lm1, ids, cfg.P, rng_r)
        coords2, ind2 = sample_points(lm2, ids, cfg.P, rng_r)
        sampled.append((ids, coords1, ind1, coords2, ind2))

    stack1 = torch.from_numpy(np.stack(views1)).permute(0, 3, 1, 2).to(dtype)
    stack2 = torch.from_numpy(np.stack(views2)).permute(0, 3, 1, 2).to(dtype)
    dense1 = pair.base(stack1)
    with torch.no_grad():
        dense2 = pair.momentum(stack2)
        dense1_mom = pair.momentum(stack1) if (distill_on and cfg.strategy in (1, 3)) else None
        dense2_base = pair.base(stack2) if (distill_on and cfg.strategy in (2, 3)) else None

    negatives = queue.negatives()
    zero = torch.zeros((), dtype=torch.float64)

    point_feats: list[tuple[losses.PointBatch, losses.PointBatch] | None] = []
    region_feats: list[tuple[torch.Tensor, torch.Tensor, np.ndarray] | None] = []
    for i, info in enumerate(sampled):
        if info is None:
            point_feats.append(None)
            region_feats.append(None)
            continue
        ids, coords1, ind1, coords2, ind2 = info
        if cfg.loss_mode == "pooled_region":
            f1 = _region_mean_features(dense1.item(i), maps1[i], ids)
            f2 = _region_mean_features(dense2.item(i), maps2[i], ids)
            region_feats.append((f1, f2, ids))
            point_feats.append(None)
        else:
            p1 = losses.PointBatch(coords1, ind1, gather_point_features(dense1.item(i), coords1))
            p2 = losses.PointBatch(coords2, ind2, gather_point_features(dense2.item(i), coords2))
            point_feats.append((p1, p2))
            region_feats.append(None)

    per_image_totals = []
    image_terms, contrast_terms, affinity_terms = [], [], []
    n_pairs_total = 0
    n_skipped = 0
    for i in range(len(batch)):
        l_img = losses.info_nce_image(dense1.pooled[i], dense2.pooled[i], negatives, cfg.tau)
        image_terms.append(l_img)
        if sampled[i] is None:
            n_skipped += 1
            per_image_totals.append(l_img)
            continue

        if cfg.loss_mode == "pooled_region":
            f1, f2, ids = region_feats[i]
            inter = _inter_pool(region_feats, i, cfg)
            l_con, n_pairs = losses.pooled_region_contrast(f1, f2, ids, inter, cfg.tau)
        else:
            p1, p2 = point_feats[i]
            inter = _inter_points(point_feats, i, cfg)
            l_con, n_pairs = losses.point_region_contrast(p1, p2, inter, cfg.tau)
        if l_con is None:
            n_skipped += 1
            per_image_totals.append(l_img)
            continue
        n_pairs_total += n_pairs

        if distill_on:
            p1, p2 = point_feats[i]
            ids, coords1, _, coords2, _ = sampled[i]
            mom_v1 = (
                gather_point_features(dense1_mom.item(i), coords1)
                if dense1_mom is not None
                else None
            )
            base_v2 = (
                gather_point_features(dense2_base.item(i), coords2)
                if dense2_base is not None
                else None
            )
            teacher, student = losses.build_distillation_pair(
                cfg.strategy, p1.features, base_v2, mom_v1, p2.features, cfg.tau_t, cfg.tau_s
            )
            l_aff = losses.affinity_distillation(teacher, student)
        else:
            l_aff = zero

        contrast_terms.append(l_con)
        affinity_terms.append(l_aff)
        l_point = losses.combine_point(l_con, l_aff, cfg.alpha)
        per_image_totals.append(losses.combine_total(l_point, l_img, cfg.beta))

    total = torch.stack(per_image_totals).mean()
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    ema_update(pair)
    queue.enqueue(dense2.pooled)

    l_image = float(torch.stack(image_terms).detach().mean())
    n_valid = len(batch) - n_skipped
    l_contrast = float(torch.stack(contrast_terms).detach().mean()) if contrast_terms else 0.0
    l_affinity = float(torch.stack(affinity_terms).detach().mean()) if affinity_terms else 0.0
    l_point = float(losses.combine_point(l_contrast, l_affinity, cfg.alpha)) if n_valid else 0.0
    return losses.LossReport(
        l_image=l_image,
        l_contrast=l_contrast,
        l_affinity=l_affinity,
        l_point=l_point,
        l_total=float(total.detach()),
        n_positive_pairs=n_pairs_total,
        skipped=n_valid == 0,
        n_skipped=n_skipped,
    )


def _inter_points(point_feats, index: int, cfg: TrainConfig) -> torch.Tensor | None:
    if cfg.inter_negatives != "batch":
        return None
    others = [
        pf[1].features for j, pf in enumerate(point_feats) if j != index and pf is not None
    ]
    if not others:
        return None
    return torch.cat(others, dim=0)


def _inter_pool(region_feats, index: int, cfg: TrainConfig) -> torch.Tensor | None:
    if cfg.inter_negatives != "batch":
        return None
    others = [rf[1] for j, rf in enumerate(region_feats) if j != index and rf is not None]
    if not others:
        return None
    return torch.cat(others, dim=0)


def cosine_lr(base_lr: float, step_index: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step_index / total_steps))


def run_pretraining(cfg: TrainConfig, dataset, out_dir: str | Path) -> Path:
    """Train for cfg.steps steps, writing config, metrics, and checkpoints.

    Layout: config.json (snapshot), metrics.jsonl (one record per step), and
    checkpoints/step_<k>.ckpt with at least the initial and final states.
    """
    cfg.validate()
    if cfg.region_source in ("gt_box", "gt_mask") and not getattr(dataset, "has_gt_masks", False):
        raise ValueError(
            f"region_source={cfg.region_source!r} requires a dataset with ground-truth masks"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2))

    torch.manual_seed(cfg.seed)
    pair = EncoderPair.build(cfg.encoder_config(), ema=cfg.ema)
    optimizer = torch.optim.SGD(pair.base.parameters(), lr=cfg.resolved_lr, momentum=0.9)
    queue = MemoryQueue(cfg.queue_capacity, cfg.embed_dim)
    save_checkpoint(ckpt_dir / "step_0.ckpt", pair, 0, optimizer)

    if cfg.steps == 0:
        return out_dir

    n_items = len(dataset)
    with open(out_dir / "metrics.jsonl", "w") as metrics:
        for step in range(cfg.steps):
            lr = cosine_lr(cfg.resolved_lr, step, cfg.steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = batch_rng(cfg.seed, step).choice(
                n_items, size=cfg.batch_size, replace=n_items < cfg.batch_size
            )
            samples = [dataset[int(j)] for j in idx]
            report = train_step(samples, pair, queue, optimizer, cfg, step)
            record = {
                "step": step,
                "l_image": report.l_image,
                "l_contrast": report.l_contrast,
                "l_affinity": report.l_affinity,
                "l_point": report.l_point,
                "l_total": report.l_total,
                "n_positive_pairs": report.n_positive_pairs,
                "n_skipped": report.n_skipped,
            }
            metrics.write(json.dumps(record) + "\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"step_{step + 1}.ckpt", pair, step + 1, optimizer)

    save_checkpoint(ckpt_dir / f"step_{cfg.steps}.ckpt", pair, cfg.steps, optimizer)
    return out_dir
