"""Contrastive and distillation objectives over pooled and point features.

Conventions shared by every operation here:
  * key-side and negative inputs are detached internally, so gradients only
    ever flow through the query-side base-encoder features;
  * softmax terms go through max-subtracted log-sum-exp;
  * the final scalar accumulation happens in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

NORM_TOLERANCE = 1e-3


@dataclass
class PointBatch:
    """Sampled points of one view: grid coords, region indicators, unit features."""

    coords: np.ndarray  # (n, 2) int rows/cols on the feature grid
    indicators: np.ndarray  # (n,) region ids in source-image terms
    features: torch.Tensor  # (n, D), rows unit-norm

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.indicators = np.asarray(self.indicators, dtype=np.int64).reshape(-1)
        if not (len(self.coords) == len(self.indicators) == len(self.features)):
            raise ValueError("coords, indicators, and features must align")


@dataclass
class AffinityMatrix:
    """Row-stochastic softmax similarities from query points to key points."""

    values: torch.Tensor  # (n_query, n_key), rows sum to 1
    temperature: float
    log_values: torch.Tensor | None = field(default=None, repr=False)

    def row_log_probs(self) -> torch.Tensor:
        if self.log_values is not None:
            return self.log_values
        return torch.log(self.values)


@dataclass
class LossReport:
    """Per-step loss accounting.

    When every image in the step was skipped (no shared region between its
    views), l_contrast and l_affinity are zero and l_total equals l_image.
    Otherwise l_point = alpha*l_contrast + (1-alpha)*l_affinity and
    l_total = beta*l_point + (1-beta)*l_image over the non-skipped images.
    """

    l_image: float
    l_contrast: float
    l_affinity: float
    l_point: float
    l_total: float
    n_positive_pairs: int
    skipped: bool
    n_skipped: int = 0


def _check_unit(x: torch.Tensor, name: str) -> None:
    if x.numel() == 0:
        return
    err = (x.norm(dim=-1) - 1.0).abs().max().item()
    if err > NORM_TOLERANCE:
        raise ValueError(f"{name} is not unit-normalized (max deviation {err:.2e})")


def info_nce_image(
    z: torch.Tensor,
    z_pos: torch.Tensor,
    negatives: torch.Tensor | None,
    tau: float,
) -> torch.Tensor:
    """Image-level InfoNCE: -log softmax of the positive among the candidates.

    z is the query embedding (gradients flow through it alone); z_pos and the
    negatives are treated as constants. With no negatives the softmax is over
    a single element and the loss is exactly zero.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    _check_unit(z, "z")
    _check_unit(z_pos, "z_pos")
    z_pos = z_pos.detach()
    logits = [(z * z_pos).sum().reshape(1)]
    if negatives is not None and negatives.numel() > 0:
        _check_unit(negatives, "negatives")
        logits.append(negatives.detach().to(z.dtype) @ z)
    logits = torch.cat(logits) / tau
    return (torch.logsumexp(logits, dim=0) - logits[0]).double()


def point_region_contrast(
    points: PointBatch,
    points_m: PointBatch,
    inter_negatives: torch.Tensor | None,
    tau: float,
) -> tuple[torch.Tensor | None, int]:
    """Cross-view point contrast between same-region point pairs.

    Every pair (i, k) with matching region indicators contributes
    -log softmax(p_i . p'_k / tau), where the softmax denominator runs over
    all momentum points of the second view plus any inter-image negatives.
    The sum is divided by the number of positive pairs C. Returns (None, 0)
    when no pair matches, signalling the caller to skip.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    queries = points.features
    keys = points_m.features.detach().to(queries.dtype)
    pos_mask = torch.from_numpy(
        (points.indicators[:, None] == points_m.indicators[None, :])
    ).to(queries.device)
    n_pairs = int(pos_mask.sum().item())
    if n_pairs == 0:
        return None, 0
    if inter_negatives is not None and inter_negatives.numel() > 0:
        keys = torch.cat([keys, inter_negatives.detach().to(queries.dtype)], dim=0)
    logits = (queries @ keys.t()) / tau
    log_denom = torch.logsumexp(logits, dim=1)
    intra = logits[:, : len(points_m.features)]
    per_pair = (log_denom[:, None] - intra) * pos_mask
    loss = per_pair.double().sum() / n_pairs
    return loss, n_pairs


def point_affinity(queries: torch.Tensor, keys: torch.Tensor, tau: float) -> AffinityMatrix:
    """Softmax-normalized similarities from each query point to all key points."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if keys is None or keys.numel() == 0:
        raise ValueError("affinity needs at least one key point")
    logits = (queries @ keys.to(queries.dtype).t()) / tau
    log_values = F.log_softmax(logits, dim=1)
    return AffinityMatrix(log_values.exp(), tau, log_values)


def affinity_distillation(teacher: AffinityMatrix, student: AffinityMatrix) -> torch.Tensor:
    """Row-averaged cross entropy from detached teacher rows to student rows."""
    if teacher.values.shape != student.values.shape:
        raise ValueError(
            f"teacher {tuple(teacher.values.shape)} and student "
            f"{tuple(student.values.shape)} shapes differ"
        )
    t = teacher.values.detach().double()
    log_s = student.row_log_probs().double()
    # 0 * log(0) is treated as 0 so hand-built one-hot teachers are valid
    terms = torch.where(t > 0, t * log_s, torch.zeros((), dtype=torch.float64))
    return -terms.sum(dim=1).mean()


def build_distillation_pair(
    strategy: int,
    base_v1: torch.Tensor,
    base_v2: torch.Tensor | None,
    mom_v1: torch.Tensor | None,
    mom_v2: torch.Tensor | None,
    tau_t: float,
    tau_s: float,
) -> tuple[AffinityMatrix, AffinityMatrix]:
    """Assemble (teacher, student) affinities for one of the three strategies.

    Feature tensors are the same image's sampled point features: view-1 points
    under the base or momentum encoder (base_v1 / mom_v1) and view-2 points
    likewise (base_v2 / mom_v2). Strategies:
      1. teacher momentum/momentum, student base query on momentum keys;
      2. teacher base-query/momentum-key, student base/base;
      3. teacher momentum/momentum, student base/base (costs one extra
         momentum forward on view 1 on top of strategy 2's extra base pass).
    Teachers are always detached; the student's keys are detached too, so its
    gradient reaches only the view-1 base-encoder query features.
    """
    if strategy not in (1, 2, 3):
        raise ValueError(f"unknown distillation strategy {strategy}")
    if base_v1 is None:
        raise ValueError("all strategies need base-encoder features of view 1")
    if strategy in (1, 3) and mom_v1 is None:
        raise ValueError(f"strategy {strategy} requires momentum features of view 1")
    if mom_v2 is None:
        raise ValueError("all strategies need momentum features of view 2")
    if strategy in (2, 3) and base_v2 is None:
        raise ValueError(f"strategy {strategy} requires base-encoder features of view 2")

    if strategy == 1:
        teacher = point_affinity(mom_v1.detach(), mom_v2.detach(), tau_t)
        student = point_affinity(base_v1, mom_v2.detach(), tau_s)
    elif strategy == 2:
        teacher = point_affinity(base_v1.detach(), mom_v2.detach(), tau_t)
        student = point_affinity(base_v1, base_v2.detach(), tau_s)
    else:
        teacher = point_affinity(mom_v1.detach(), mom_v2.detach(), tau_t)
        student = point_affinity(base_v1, base_v2.detach(), tau_s)
    return teacher, student


def combine_point(l_contrast, l_affinity, alpha: float):
    """Blend the contrast and distillation point losses."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * l_contrast + (1.0 - alpha) * l_affinity


def combine_total(l_point, l_image, beta: float):
    """Blend the point-level and image-level losses."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return beta * l_point + (1.0 - beta) * l_image


def pooled_region_contrast(
    region_features: torch.Tensor,
    region_features_m: torch.Tensor,
    region_ids: np.ndarray,
    inter_negatives: torch.Tensor | None,
    tau: float,
) -> tuple[torch.Tensor | None, int]:
    """Region-level ablation: contrast mask-averaged region vectors directly.

    Same candidate-set rules as point_region_contrast, but each sampled region
    is represented by one aggregated vector instead of its individual points.
    """
    ids = np.asarray(region_ids, dtype=np.int64)
    batch = PointBatch(np.zeros((len(ids), 2), dtype=np.int64), ids, region_features)
    batch_m = PointBatch(np.zeros((len(ids), 2), dtype=np.int64), ids, region_features_m)
    return point_region_contrast(batch, batch_m, inter_negatives, tau)
