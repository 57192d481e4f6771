"""Synthetic shapes dataset with ground-truth masks, plus folder ingestion.

The generator stands in for a real detection corpus at desk scale: every image
is a textured background with a few large colored shapes (disk, rectangle,
triangle), each paired with its binary mask so mask-dependent evaluation and
region-quality ablations stay testable. Everything derives from the seed, and
the written PNG bytes are reproducible.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

_RNG_DATA = 44


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    masks: list[np.ndarray]  # per-object boolean masks
    sample_id: str
    meta: dict = field(default_factory=dict)


# `Sample` is the protocol the training/eval code relies on; the synthetic
# and folder datasets both yield SyntheticSample instances.
Sample = SyntheticSample


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 6) -> np.ndarray:
    """Bilinearly up-sampled coarse noise in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, size)
    i0 = np.floor(pos).astype(int).clip(0, cells - 1)
    frac = pos - i0
    rows = coarse[i0, :] * (1 - frac)[:, None] + coarse[i0 + 1, :] * frac[:, None]
    out = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return out


def _disk_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    radius = rng.uniform(0.46, 0.58) * size
    lo, hi = min(radius, size / 2), max(size - radius, size / 2)
    cy = rng.uniform(lo, hi + 1e-9)
    cx = rng.uniform(lo, hi + 1e-9)
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _rect_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    w = min(size, int(rng.uniform(0.82, 0.98) * size))
    h = min(size, int(rng.uniform(0.82, 0.98) * size))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    mask = np.zeros((size, size), dtype=bool)
    mask[y0 : y0 + h, x0 : x0 + w] = True
    return mask


def _triangle_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    radius = rng.uniform(0.62, 0.78) * size
    cy = rng.uniform(0.42, 0.58) * size
    cx = rng.uniform(0.42, 0.58) * size
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.25, 0.25, 3)
    pts = np.stack([cy + radius * np.sin(angles), cx + radius * np.cos(angles)], axis=1)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.ones((size, size), dtype=bool)
    for a in range(3):
        p, q = pts[a], pts[(a + 1) % 3]
        cross = (q[0] - p[0]) * (xx - p[1]) - (q[1] - p[1]) * (yy - p[0])
        orient = (q[0] - p[0]) * (pts[(a + 2) % 3][1] - p[1]) - (q[1] - p[1]) * (
            pts[(a + 2) % 3][0] - p[0]
        )
        mask &= (cross * np.sign(orient)) >= 0
    return mask


_SHAPE_MAKERS = {"disk": _disk_mask, "rect": _rect_mask, "triangle": _triangle_mask}


def render_synthetic_sample(
    rng: np.random.Generator, image_size: int, shapes_range: tuple[int, int]
) -> SyntheticSample:
    """Draw one textured-background image with shapes_range colored shapes.

    The background is colored patch noise spanning the same intensity range as
    the shapes, so raw color similarity alone does not cleanly separate object
    from background. Shapes are large solid-colored regions; the recorded
    masks are occlusion-aware (a later shape claims the overlap), matching the
    later-shape-wins rule used when rasterizing regions.
    """
    size = image_size
    # per-channel coarse color patches plus fine luminance noise
    channels = [0.5 + 0.3 * _smooth_noise(rng, size, cells=5) for _ in range(3)]
    image = np.stack(channels, axis=2)
    image += 0.05 * rng.normal(0.0, 1.0, (size, size, 1))
    image = np.clip(image, 0.0, 1.0)

    yy, xx = np.mgrid[0:size, 0:size]
    n_shapes = int(rng.integers(shapes_range[0], shapes_range[1] + 1))
    masks: list[np.ndarray] = []
    kinds: list[str] = []
    colors: list[list[float]] = []
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(n_shapes):
        kind = str(rng.choice(sorted(_SHAPE_MAKERS)))
        mask = _SHAPE_MAKERS[kind](rng, size)
        for _ in range(10):  # prefer mostly non-overlapping placements
            overlap = np.logical_and(mask, occupied).sum()
            if mask.sum() > 0 and overlap <= 0.1 * mask.sum():
                break
            mask = _SHAPE_MAKERS[kind](rng, size)
        hue = rng.uniform(0.0, 1.0)
        color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.7, 0.95), 1.0))
        # strong luminance ramp across the shape at constant hue: brightness
        # alone does not identify the object, matching the brightness/contrast
        # jitter the views are trained to ignore
        angle = rng.uniform(0.0, 2 * np.pi)
        proj = np.cos(angle) * xx + np.sin(angle) * yy
        lo, hi = proj[mask].min(), proj[mask].max()
        ramp = (proj - lo) / max(hi - lo, 1e-9)
        v0 = rng.uniform(0.30, 0.45)
        v1 = rng.uniform(0.90, 1.0)
        value = v0 + (v1 - v0) * ramp + rng.normal(0.0, 0.02, (size, size))
        image[mask] = np.clip(color[None, :] * value[mask, None], 0.0, 1.0)
        occupied |= mask
        # the new shape is painted on top: trim the overlap off earlier masks
        # (but never let one go empty)
        for j in range(len(masks)):
            trimmed = masks[j] & ~mask
            if trimmed.any():
                masks[j] = trimmed
        masks.append(mask)
        kinds.append(kind)
        colors.append([float(c) for c in color])

    return SyntheticSample(
        image=image.astype(np.float32),
        masks=masks,
        sample_id="",
        meta={"kinds": kinds, "colors": colors},
    )


def gen_synthetic_dataset(
    count: int,
    image_size: int,
    shapes_range: tuple[int, int],
    seed: int,
    out_dir: str | Path,
) -> Path:
    """Write images/, masks/, and index.jsonl; byte-identical per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 1 <= shapes_range[0] <= shapes_range[1]:
        raise ValueError(f"invalid shapes range {shapes_range}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    with open(out_dir / "index.jsonl", "w") as index:
        for i in range(count):
            rng = np.random.default_rng([seed, i, _RNG_DATA])
            sample = render_synthetic_sample(rng, image_size, shapes_range)
            sample_id = f"{i:05d}"
            Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(
                out_dir / "images" / f"{sample_id}.png"
            )
            for k, mask in enumerate(sample.masks):
                Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(
                    out_dir / "masks" / f"{sample_id}_{k}.png"
                )
            index.write(
                json.dumps(
                    {
                        "id": sample_id,
                        "size": [image_size, image_size],
                        "n_masks": len(sample.masks),
                        "seed": seed,
                    }
                )
                + "\n"
            )
    return out_dir


class SyntheticDataset:
    """Reads a generated dataset directory; iteration follows the index file."""

    has_gt_masks = True

    def __init__(self, root: str | Path):
        self.root = Path(root)
        index_path = self.root / "index.jsonl"
        if not index_path.exists():
            raise FileNotFoundError(f"missing index file {index_path}")
        self.entries = [json.loads(line) for line in index_path.read_text().splitlines() if line]
        self._cache: dict[int, SyntheticSample] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> SyntheticSample:
        if idx in self._cache:
            return self._cache[idx]
        entry = self.entries[idx]
        sid = entry["id"]
        image = _load_image(self.root / "images" / f"{sid}.png")
        masks = [
            np.asarray(Image.open(self.root / "masks" / f"{sid}_{k}.png")) > 127
            for k in range(entry["n_masks"])
        ]
        sample = SyntheticSample(image=image, masks=masks, sample_id=sid, meta=dict(entry))
        self._cache[idx] = sample
        return sample


class ImageFolderDataset:
    """Plain folder of images; no ground truth, so only grid regions apply."""

    has_gt_masks = False

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"{self.root} is not a directory")
        self.paths = sorted(
            p for p in self.root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
        if not self.paths:
            raise FileNotFoundError(f"no images found under {self.root}")
        self._cache: dict[int, SyntheticSample] = {}

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, idx: int) -> SyntheticSample:
        if idx in self._cache:
            return self._cache[idx]
        path = self.paths[idx]
        sample = SyntheticSample(image=_load_image(path), masks=[], sample_id=path.stem)
        self._cache[idx] = sample
        return sample


def load_dataset(path: str | Path, kind: str = "synthetic"):
    """Open a dataset directory as the requested kind."""
    if kind == "synthetic":
        return SyntheticDataset(path)
    if kind == "image_folder":
        return ImageFolderDataset(path)
    raise ValueError(f"unknown dataset kind {kind!r}")


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
