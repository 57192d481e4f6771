"""Affinity-map evaluation: thresholded masks, Jaccard scoring, clustering.

The protocol mirrors the pre-training's dense output: pick a point, take the
cosine similarity from its unit feature to every grid location, keep the
top fraction of locations, and score the resulting mask against ground truth
at image resolution (nearest-neighbor up-sampled).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .encoder import DenseOutput


@dataclass
class AffinityMap:
    """Cosine similarity from one picked point to every feature-grid location."""

    values: np.ndarray  # (R, R) in [-1, 1]
    source_point: tuple[int, int]
    resolution: int


def affinity_map(dense: DenseOutput, point: tuple[int, int]) -> AffinityMap:
    pm = dense.point_map
    if pm.ndim != 3:
        raise ValueError("affinity_map expects a single image's DenseOutput")
    res = pm.shape[0]
    row, col = int(point[0]), int(point[1])
    if not (0 <= row < res and 0 <= col < res):
        raise ValueError(f"point {point} outside {res}x{res} feature grid")
    grid = pm.detach().cpu().numpy().astype(np.float64)
    values = grid @ grid[row, col]
    return AffinityMap(values, (row, col), res)


def mask_from_affinity(amap: AffinityMap, keep_fraction: float = 0.8) -> np.ndarray:
    """Keep the top ceil(keep_fraction * R^2) locations by affinity value.

    Ties break in row-major order, so the kept count is exact for any input.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    flat = amap.values.ravel()
    keep = math.ceil(keep_fraction * flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:keep]] = True
    return mask.reshape(amap.values.shape)


def upsample_mask_nearest(mask: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor up-sampling with pixel-center alignment.

    Works on (H, W) masks and (H, W, C) panels alike.
    """
    src_h, src_w = mask.shape[:2]
    out_h, out_w = out_shape
    rows = ((2 * np.arange(out_h) + 1) * src_h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * src_w) // (2 * out_w)
    return mask[np.ix_(rows, cols)]


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when the union is empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, gt).sum() / union)


def snap_centroid(mask: np.ndarray) -> tuple[int, int]:
    """Mask centroid snapped to the nearest pixel inside the mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("cannot take the centroid of an empty mask")
    cy, cx = ys.mean(), xs.mean()
    nearest = np.argmin((ys - cy) ** 2 + (xs - cx) ** 2)
    return int(ys[nearest]), int(xs[nearest])


def image_to_feature_coords(row: int, col: int, image_shape: tuple[int, int], res: int) -> tuple[int, int]:
    h, w = image_shape
    fr = min(res - 1, ((2 * row + 1) * res) // (2 * h))
    fc = min(res - 1, ((2 * col + 1) * res) // (2 * w))
    return int(fr), int(fc)


def evaluate_jaccard(
    dataset,
    encode_fn: Callable[[np.ndarray], DenseOutput],
    keep_fraction: float = 0.8,
    max_images: int | None = None,
    checkpoint_id: str | None = None,
) -> dict:
    """Mean Jaccard of affinity masks seeded at ground-truth object centers.

    For every object: pick the snapped centroid, compute the affinity map from
    that point, threshold at keep_fraction, up-sample to image resolution, and
    score against the object's mask. Objects with empty masks are skipped and
    counted.
    """
    records = []
    n_empty = 0
    total = len(dataset) if max_images is None else min(max_images, len(dataset))
    for idx in range(total):
        sample = dataset[idx]
        if not sample.masks:
            continue
        dense = encode_fn(sample.image)
        res = dense.point_map.shape[0]
        img_shape = sample.image.shape[:2]
        for k, mask in enumerate(sample.masks):
            if not np.any(mask):
                n_empty += 1
                continue
            py, px = snap_centroid(mask)
            amap = affinity_map(dense, image_to_feature_coords(py, px, img_shape, res))
            pred = upsample_mask_nearest(mask_from_affinity(amap, keep_fraction), img_shape)
            records.append(
                {
                    "image": getattr(sample, "sample_id", str(idx)),
                    "object": k,
                    "jaccard": jaccard(pred, np.asarray(mask, dtype=bool)),
                }
            )
    mean = float(np.mean([r["jaccard"] for r in records])) if records else 0.0
    return {
        "mean_jaccard": mean,
        "per_object": records,
        "keep_fraction": keep_fraction,
        "checkpoint_id": checkpoint_id,
        "n_objects": len(records),
        "n_empty_masks_skipped": n_empty,
    }


def kmeans_regions(
    dense: DenseOutput,
    k: int,
    iters: int = 20,
    rng: np.random.Generator | None = None,
    with_objectives: bool = False,
) -> np.ndarray | tuple[np.ndarray, list[float]]:
    """Cluster the point-feature grid into k regions with Lloyd's algorithm.

    Unit-norm features make squared Euclidean equivalent to cosine distance.
    Initialization is k-means++; an emptied cluster is re-seeded from the point
    farthest from its current centroid, which keeps the objective
    non-increasing across iterations. With with_objectives=True, also returns
    the objective recorded after every assignment.
    """
    pm = dense.point_map
    if pm.ndim != 3:
        raise ValueError("kmeans_regions expects a single image's DenseOutput")
    res = pm.shape[0]
    feats = pm.detach().cpu().numpy().astype(np.float64).reshape(res * res, -1)
    n = feats.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    rng = rng if rng is not None else np.random.default_rng(0)

    centers = np.empty((k, feats.shape[1]))
    centers[0] = feats[rng.integers(n)]
    closest = ((feats - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest / total))
        centers[j] = feats[pick]
        closest = np.minimum(closest, ((feats - centers[j]) ** 2).sum(axis=1))

    assign = _assign(feats, centers)
    objectives = [kmeans_objective(feats, centers, assign)]
    for _ in range(iters):
        for j in range(k):
            members = feats[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                dists = ((feats - centers[assign]) ** 2).sum(axis=1)
                centers[j] = feats[int(np.argmax(dists))]
        assign = _assign(feats, centers)
        objectives.append(kmeans_objective(feats, centers, assign))
    labels = assign.reshape(res, res)
    if with_objectives:
        return labels, objectives
    return labels


def kmeans_objective(feats: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    return float(((feats - centers[assign]) ** 2).sum())


def _assign(feats: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        (feats**2).sum(axis=1, keepdims=True)
        - 2.0 * feats @ centers.T
        + (centers**2).sum(axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


# ---------------------------------------------------------------------------
# visualization export
# ---------------------------------------------------------------------------

_PALETTE = np.array(
    [
        [230, 60, 60],
        [60, 160, 230],
        [90, 200, 90],
        [240, 190, 60],
        [170, 90, 220],
        [240, 130, 50],
        [70, 210, 200],
        [220, 110, 170],
        [140, 140, 140],
        [120, 90, 60],
    ],
    dtype=np.uint8,
)


def _heat_ramp(values: np.ndarray) -> np.ndarray:
    """Monotone-brightness heat colors; channel sum is exactly 3 * value."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(3.0 * v, 0.0, 1.0)
    g = np.clip(3.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * v - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def export_visualization(
    image: np.ndarray,
    payload: AffinityMap | np.ndarray,
    path: str | Path,
) -> Path:
    """Write a side-by-side PNG: source image (picked point marked) + map.

    An AffinityMap renders as a heatmap normalized to [0, 1]; an integer label
    map renders with a fixed color palette.
    """
    path = Path(path)
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    height, width = img.shape[:2]
    left = (img * 255).round().astype(np.uint8)

    if isinstance(payload, AffinityMap):
        vals = payload.values.astype(np.float64)
        span = vals.max() - vals.min()
        norm = np.full_like(vals, 0.5) if span <= 0 else (vals - vals.min()) / span
        panel = _heat_ramp(norm)
        right = (
            upsample_mask_nearest((panel * 255).round().astype(np.uint8), (height, width))
            if panel.shape[:2] != (height, width)
            else (panel * 255).round().astype(np.uint8)
        )
        pr, pc = payload.source_point
        my = ((2 * pr + 1) * height) // (2 * payload.resolution)
        mx = ((2 * pc + 1) * width) // (2 * payload.resolution)
        left = _mark_point(left, my, mx)
    else:
        labels = np.asarray(payload)
        colored = _PALETTE[labels % len(_PALETTE)]
        right = (
            upsample_mask_nearest(colored, (height, width))
            if colored.shape[:2] != (height, width)
            else colored
        )

    combined = np.concatenate([left, right], axis=1)
    Image.fromarray(combined).save(path)
    return path


def _mark_point(image: np.ndarray, row: int, col: int, radius: int = 2) -> np.ndarray:
    out = image.copy()
    h, w = out.shape[:2]
    ys = np.arange(max(0, row - radius), min(h, row + radius + 1))
    xs = np.arange(max(0, col - radius), min(w, col + radius + 1))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    inside = (yy - row) ** 2 + (xx - col) ** 2 <= radius**2
    out[yy[inside], xx[inside]] = (255, 0, 0)
    return out
