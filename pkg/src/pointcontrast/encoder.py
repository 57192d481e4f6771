"""Convolutional encoder pair producing dense point features and a pooled embedding.

The base encoder is trained by gradient descent; its momentum twin is updated
only by exponential moving average and never receives gradients. The dense
head keeps spatial structure: a 1x1-conv projector followed by bilinear
up-sampling to an R x R grid of unit-norm feature vectors. The pooled branch
averages the (pre-normalization) projector output over space and passes it
through a small projector of its own.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_CKPT_MAGIC = b"PCCKPT01"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class EncoderConfig:
    input_size: int = 64
    widths: tuple[int, ...] = (32, 64, 128, 128)
    embed_dim: int = 64
    feature_res: int = 64  # R: side of the up-sampled point-feature grid
    norm_groups: int = 4


@dataclass
class DenseOutput:
    """point_map: (..., R, R, D) unit-norm rows; pooled: (..., D) unit norm."""

    point_map: torch.Tensor
    pooled: torch.Tensor

    def item(self, i: int) -> "DenseOutput":
        return DenseOutput(self.point_map[i], self.pooled[i])


class DenseEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = 3
        for out_ch in cfg.widths:
            groups = cfg.norm_groups if out_ch % cfg.norm_groups == 0 else 1
            stages += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(groups, out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.backbone = nn.Sequential(*stages)
        self.dense_proj = nn.Sequential(
            nn.Conv2d(in_ch, in_ch, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_ch, cfg.embed_dim, kernel_size=1),
        )
        self.pooled_proj = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
        )

    def forward(self, views: torch.Tensor) -> DenseOutput:
        """Encode a batch of (B, 3, S, S) views in [0, 1]."""
        if views.ndim != 4 or views.shape[1] != 3:
            raise ValueError(f"expected (B, 3, S, S) input, got {tuple(views.shape)}")
        size = self.cfg.input_size
        if views.shape[2] != size or views.shape[3] != size:
            raise ValueError(f"view size {tuple(views.shape[2:])} != configured {size}x{size}")
        feats = self.backbone(views)
        dense = self.dense_proj(feats)  # (B, D, h, w), pre-normalization
        res = self.cfg.feature_res
        up = F.interpolate(dense, size=(res, res), mode="bilinear", align_corners=False)
        point_map = F.normalize(up, dim=1).permute(0, 2, 3, 1).contiguous()
        pooled = F.normalize(self.pooled_proj(dense.mean(dim=(2, 3))), dim=1)
        return DenseOutput(point_map, pooled)


def gather_point_features(dense: DenseOutput, coords: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Read point_map rows at (row, col) coords, order preserving.

    Works on a single image's DenseOutput; returns an (n, D) tensor.
    """
    pm = dense.point_map
    if pm.ndim != 3:
        raise ValueError("gather_point_features expects a single image's DenseOutput")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if coords.shape[0] == 0:
        return pm.new_zeros((0, pm.shape[-1]))
    res = pm.shape[0]
    if coords.min() < 0 or coords.max() >= res:
        raise ValueError(f"point coordinates outside [0, {res}) grid")
    return pm[coords[:, 0], coords[:, 1]]


class EncoderPair:
    """Base encoder plus its EMA momentum copy (which never sees gradients)."""

    def __init__(self, base: DenseEncoder, momentum: DenseEncoder, ema: float):
        if not 0.0 <= ema <= 1.0:
            raise ValueError("ema coefficient must lie in [0, 1]")
        self.base = base
        self.momentum = momentum
        self.ema = ema
        self.momentum.requires_grad_(False)

    @classmethod
    def build(cls, cfg: EncoderConfig, ema: float = 0.999) -> "EncoderPair":
        base = DenseEncoder(cfg)
        momentum = copy.deepcopy(base)
        return cls(base, momentum, ema)

    def to_double(self) -> "EncoderPair":
        self.base.double()
        self.momentum.double()
        return self


@torch.no_grad()
def ema_update(pair: EncoderPair) -> EncoderPair:
    """momentum <- m * momentum + (1 - m) * base, elementwise; base untouched."""
    m = pair.ema
    for p_base, p_mom in zip(pair.base.parameters(), pair.momentum.parameters()):
        p_mom.mul_(m).add_(p_base, alpha=1.0 - m)
    return pair


# ---------------------------------------------------------------------------
# checkpoint format: magic, u64 header length, JSON header, raw tensor bytes
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    pair: EncoderPair,
    step: int,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    """Write both weight sets, the EMA coefficient, optimizer state, and step."""
    path = Path(path)
    named: list[tuple[str, torch.Tensor]] = []
    for name, p in pair.base.state_dict().items():
        named.append((f"base.{name}", p))
    for name, p in pair.momentum.state_dict().items():
        named.append((f"momentum.{name}", p))
    if optimizer is not None:
        buffers = _optimizer_buffers(pair.base, optimizer)
        for name, buf in buffers.items():
            named.append((f"opt.{name}", buf))

    entries = []
    blobs = []
    offset = 0
    for name, tensor in named:
        arr = tensor.detach().cpu().numpy()
        if str(arr.dtype) not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[str(arr.dtype)]).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "meta": {"ema": pair.ema, "step": int(step), "encoder": asdict(pair.base.cfg)},
        "tensors": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path: str | Path) -> tuple[EncoderPair, int, dict[str, torch.Tensor]]:
    """Rebuild an EncoderPair from a checkpoint file.

    Returns (pair, step, optimizer_buffers) where optimizer_buffers maps base
    parameter names to their SGD momentum buffers (empty if none were saved).
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()

    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(entry["dtype"]))

    meta = header["meta"]
    enc_cfg = EncoderConfig(**{**meta["encoder"], "widths": tuple(meta["encoder"]["widths"])})
    pair = EncoderPair.build(enc_cfg, ema=float(meta["ema"]))
    pair.base.load_state_dict(
        {k[len("base.") :]: v for k, v in tensors.items() if k.startswith("base.")}
    )
    pair.momentum.load_state_dict(
        {k[len("momentum.") :]: v for k, v in tensors.items() if k.startswith("momentum.")}
    )
    opt_buffers = {k[len("opt.") :]: v for k, v in tensors.items() if k.startswith("opt.")}
    return pair, int(meta["step"]), opt_buffers


def _optimizer_buffers(module: nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    by_param = {id(p): name for name, p in module.named_parameters()}
    out: dict[str, torch.Tensor] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            buf = state.get("momentum_buffer")
            if buf is not None and id(p) in by_param:
                out[by_param[id(p)]] = buf
    return out


def restore_optimizer_buffers(
    module: nn.Module, optimizer: torch.optim.Optimizer, buffers: dict[str, torch.Tensor]
) -> None:
    """Install saved SGD momentum buffers onto a fresh optimizer."""
    by_name = dict(module.named_parameters())
    for name, buf in buffers.items():
        param = by_name.get(name)
        if param is None:
            raise ValueError(f"optimizer buffer for unknown parameter {name!r}")
        optimizer.state[param] = {"momentum_buffer": buf.clone()}
