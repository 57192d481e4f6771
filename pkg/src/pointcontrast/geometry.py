"""View geometry: region label maps, aligned augmentations, mask/point sampling.

Region identity is defined in source-image coordinates (a grid cell id or an
annotated-shape id). Both augmented views of an image carry a label map warped
with the exact same crop/flip as the view itself, so a region id means the
same thing in either view. All index arithmetic is integer-exact so that the
view -> source round trip is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

Box = tuple[int, int, int, int]  # x0, y0, w, h in source pixels

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class ViewTransform:
    """Geometric recipe producing a square view from a source image."""

    crop_box: Box
    hflip: bool
    out_size: int

    def __post_init__(self) -> None:
        x0, y0, w, h = self.crop_box
        if w <= 0 or h <= 0 or x0 < 0 or y0 < 0:
            raise ValueError(f"degenerate crop box {self.crop_box}")
        if self.out_size <= 0:
            raise ValueError("out_size must be positive")


@dataclass
class RegionLabelMap:
    """Per-pixel integer region ids; -1 marks 'no region'."""

    labels: np.ndarray  # 2D int array
    n_regions: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2D grid")
        if self.labels.size and int(self.labels.max(initial=-1)) >= self.n_regions:
            raise ValueError("label id exceeds n_regions")

    def present_ids(self) -> np.ndarray:
        """Sorted region ids that cover at least one pixel."""
        ids = np.unique(self.labels)
        return ids[ids >= 0]


def make_grid_regions(height: int, width: int, n: int) -> RegionLabelMap:
    """Partition an image into an n-by-n grid; cell (r, c) gets id r*n + c.

    Cell extents along each axis differ by at most one pixel.
    """
    if n < 1:
        raise ValueError("grid size must be >= 1")
    if height < n or width < n:
        raise ValueError(f"image {height}x{width} cannot host a {n}x{n} grid")
    row_cell = (np.arange(height) * n) // height
    col_cell = (np.arange(width) * n) // width
    labels = (row_cell[:, None] * n + col_cell[None, :]).astype(np.int64)
    return RegionLabelMap(labels, n * n)


def make_annotation_regions(
    shapes: Sequence[np.ndarray | Box],
    height: int,
    width: int,
    mode: str,
) -> RegionLabelMap:
    """Rasterize annotated shapes into a label map.

    Shape k covers id k; uncovered pixels share the background id
    ``len(shapes)`` so the background is a region of its own. Overlaps are
    resolved later-shape-wins. ``mode`` is "mask" (boolean arrays) or "box"
    (x0, y0, w, h rectangles).
    """
    if mode not in ("mask", "box"):
        raise ValueError(f"unknown annotation mode {mode!r}")
    background = len(shapes)
    labels = np.full((height, width), background, dtype=np.int64)
    for k, shape in enumerate(shapes):
        if mode == "mask":
            mask = np.asarray(shape, dtype=bool)
            if mask.shape != (height, width):
                raise ValueError(f"mask {k} shape {mask.shape} != image {(height, width)}")
            labels[mask] = k
        else:
            x0, y0, w, h = (int(v) for v in shape)
            if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > width or y0 + h > height:
                raise ValueError(f"box {k} {shape} outside {height}x{width} image")
            labels[y0 : y0 + h, x0 : x0 + w] = k
    return RegionLabelMap(labels, background + 1)


def mask_bounding_box(mask: np.ndarray) -> Box:
    """Tight axis-aligned box (x0, y0, w, h) around a non-empty boolean mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("cannot bound an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def sample_view_transform(
    height: int,
    width: int,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.2, 1.0),
    out_size: int = 64,
) -> ViewTransform:
    """Random resized crop plus coin-flip mirror.

    The accepted crop always satisfies area/source-area within scale_range and
    aspect ratio within [3/4, 4/3]; after 10 failed draws it falls back to a
    centered square crop (the largest one whose area fraction stays in range,
    so near-square sources keep the contract).
    """
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"scale_range {scale_range} not within (0, 1]")
    area = height * width
    crop: Box | None = None
    for _ in range(_CROP_ATTEMPTS):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])))
        w = round(math.sqrt(target * aspect))
        h = round(math.sqrt(target / aspect))
        if not (0 < w <= width and 0 < h <= height):
            continue
        if not (lo * area <= w * h <= hi * area):
            continue
        if not (ASPECT_RANGE[0] <= w / h <= ASPECT_RANGE[1]):
            continue
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        crop = (x0, y0, w, h)
        break
    if crop is None:
        side = min(height, width, int(math.sqrt(hi * area)))
        while side * side < lo * area and side < min(height, width):
            side += 1
        side = max(side, 1)
        crop = ((width - side) // 2, (height - side) // 2, side, side)
    hflip = bool(rng.random() < 0.5)
    return ViewTransform(crop, hflip, out_size)


def _source_index(dst: np.ndarray, src_extent: int, out_res: int) -> np.ndarray:
    # nearest-neighbor with pixel-center alignment, integer-exact
    return ((2 * dst + 1) * src_extent) // (2 * out_res)


def transform_label_map(label_map: RegionLabelMap, t: ViewTransform, out_res: int) -> RegionLabelMap:
    """Crop, optionally mirror, and nearest-neighbor resize a label map.

    Ids are gathered, never interpolated; the output is the region mask set in
    view coordinates at out_res x out_res.
    """
    if out_res <= 0:
        raise ValueError("out_res must be positive")
    src_h, src_w = label_map.labels.shape
    x0, y0, w, h = t.crop_box
    if x0 + w > src_w or y0 + h > src_h:
        raise ValueError(f"crop box {t.crop_box} exceeds {src_h}x{src_w} label map")
    rows = y0 + _source_index(np.arange(out_res), h, out_res)
    cols = x0 + _source_index(np.arange(out_res), w, out_res)
    out = label_map.labels[np.ix_(rows, cols)]
    if t.hflip:
        out = out[:, ::-1]
    return RegionLabelMap(np.ascontiguousarray(out), label_map.n_regions)


def view_point_to_source(t: ViewTransform, out_res: int, row: int, col: int) -> tuple[int, int]:
    """Map a view-grid point back to the source pixel it was sampled from."""
    if not (0 <= row < out_res and 0 <= col < out_res):
        raise ValueError(f"point ({row}, {col}) outside {out_res}x{out_res} grid")
    x0, y0, w, h = t.crop_box
    if t.hflip:
        col = out_res - 1 - col
    src_r = y0 + ((2 * row + 1) * h) // (2 * out_res)
    src_c = x0 + ((2 * col + 1) * w) // (2 * out_res)
    return int(src_r), int(src_c)


def sample_valid_masks(
    labels1: RegionLabelMap,
    labels2: RegionLabelMap,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray | None:
    """Draw region ids (with repetition) present in both views.

    Returns None when the views share no region: the caller skips the point
    losses for this image.
    """
    shared = np.intersect1d(labels1.present_ids(), labels2.present_ids())
    if shared.size == 0:
        return None
    return rng.choice(shared, size=count, replace=True)


def sample_points(
    label_map: RegionLabelMap,
    region_ids: Sequence[int],
    points_per_region: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly sample pixel positions from each listed region.

    Sampling is without replacement whenever the region has at least
    points_per_region pixels. Repeated region ids draw fresh point sets.
    Returns (coords, indicators) with coords as (row, col) pairs.
    """
    coords = []
    indicators = []
    for rid in region_ids:
        ys, xs = np.nonzero(label_map.labels == rid)
        if ys.size == 0:
            raise ValueError(f"region id {rid} is empty in this label map")
        replace = ys.size < points_per_region
        sel = rng.choice(ys.size, size=points_per_region, replace=replace)
        coords.append(np.stack([ys[sel], xs[sel]], axis=1))
        indicators.append(np.full(points_per_region, rid, dtype=np.int64))
    if not coords:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(coords).astype(np.int64), np.concatenate(indicators)


def render_view(image: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Crop, bilinearly resize, and optionally mirror an image for one view.

    Expects (H, W, 3) float in [0, 1]; returns (out_size, out_size, 3) float32.
    """
    src_h, src_w = image.shape[:2]
    x0, y0, w, h = t.crop_box
    if x0 + w > src_w or y0 + h > src_h:
        raise ValueError(f"crop box {t.crop_box} exceeds {src_h}x{src_w} image")
    crop = np.ascontiguousarray(image[y0 : y0 + h, x0 : x0 + w], dtype=np.float32)
    tens = torch.from_numpy(crop).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(tens, size=(t.out_size, t.out_size), mode="bilinear", align_corners=False)
    if t.hflip:
        out = torch.flip(out, dims=[3])
    return out.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def color_jitter(image: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Random brightness/contrast jitter, clipped back to [0, 1]."""
    if strength <= 0:
        return image
    contrast = 1.0 + rng.uniform(-strength, strength)
    shift = rng.uniform(-0.5 * strength, 0.5 * strength)
    out = (image - 0.5) * contrast + 0.5 + shift
    return np.clip(out, 0.0, 1.0).astype(np.float32)
