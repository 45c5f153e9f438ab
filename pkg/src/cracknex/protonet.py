"""Prototypes: masked average pooling, prototype fusion, self-support and matching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .network import FeatureMap

COSINE_EPS = 1e-12


@dataclass
class Prototype:
    fg: torch.Tensor  # (C,)
    bg: torch.Tensor  # (C,)
    fg_fallback: bool = False
    bg_fallback: bool = False

    def sides(self):
        return self.fg, self.bg


@dataclass
class SSPConfig:
    tau_fg: float = 0.7
    tau_bg: float = 0.6
    blend: float = 0.5

    def __post_init__(self):
        for name in ("tau_fg", "tau_bg"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1), got {getattr(self, name)}")
        if not 0 <= self.blend <= 1:
            raise ValueError(f"blend must be in [0, 1], got {self.blend}")


def downsample_mask(mask, stride: int) -> np.ndarray:
    """Nearest-neighbour downsampling that samples each cell at its centre pixel."""
    mask = np.asarray(mask)
    if mask.shape[0] % stride or mask.shape[1] % stride:
        raise ValueError(f"mask shape {mask.shape} is not divisible by stride {stride}")
    off = stride // 2
    return np.ascontiguousarray(mask[off::stride, off::stride])


def _mask_tensor(mask, feature: FeatureMap) -> torch.Tensor:
    if tuple(np.shape(mask)) != tuple(feature.origin_size):
        raise ValueError(f"mask shape {np.shape(mask)} != feature origin size {feature.origin_size}")
    small = downsample_mask(mask, feature.stride)
    return torch.from_numpy(small.astype(np.float64)).to(feature.grid.dtype)


def masked_average_pool(feature: FeatureMap, mask) -> Prototype:
    """Average feature cells under the (downsampled) mask and its complement.

    A side whose region is empty at feature resolution falls back to the
    global average of the feature map, and is flagged as such.
    """
    grid = feature.grid
    m = _mask_tensor(mask, feature)
    global_mean = grid.mean(dim=(-2, -1))

    def pool(weights):
        total = weights.sum()
        if total.item() == 0:
            return global_mean, True
        return (grid * weights).sum(dim=(-2, -1)) / total, False

    fg, fg_fb = pool(m)
    bg, bg_fb = pool(1.0 - m)
    return Prototype(fg, bg, fg_fb, bg_fb)


def merge_prototypes(protos: Sequence[Prototype]) -> Prototype:
    if not protos:
        raise ValueError("cannot merge an empty list of prototypes")
    if len(protos) == 1:
        return protos[0]
    fg = torch.stack([p.fg for p in protos]).mean(dim=0)
    bg = torch.stack([p.bg for p in protos]).mean(dim=0)
    return Prototype(fg, bg, all(p.fg_fallback for p in protos), all(p.bg_fallback for p in protos))


class PrototypeFusion(nn.Module):
    """Co-attention gate computed from a (prototype, reflectance prototype) pair.

    ``alpha`` starts at zero, so the module is the identity at initialisation.
    """

    def __init__(self, width: int):
        super().__init__()
        self.mix = nn.Linear(2 * width, 2 * width)
        self.f1 = nn.Linear(2 * width, width)
        self.f2 = nn.Linear(width, width)
        self.alpha = nn.Parameter(torch.zeros(()))

    def attention(self, p: torch.Tensor, p_r: torch.Tensor) -> torch.Tensor:
        x = self.mix(torch.cat([p, p_r], dim=-1))
        x = x / x.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
        return torch.sigmoid(self.f2(F.relu(self.f1(x))))

    def forward(self, p: torch.Tensor, p_r: torch.Tensor):
        gate = 1 + self.alpha * self.attention(p, p_r)
        return gate * p, gate * p_r


def pfm_fuse(P: Prototype, P_r: Prototype, pfm: PrototypeFusion):
    """Rescale both prototypes by (1 + alpha * W), each side (fg, bg) separately."""
    if P.fg.shape != P_r.fg.shape:
        raise ValueError(f"prototype widths differ: {tuple(P.fg.shape)} vs {tuple(P_r.fg.shape)}")
    fg, fg_r = pfm(P.fg, P_r.fg)
    bg, bg_r = pfm(P.bg, P_r.bg)
    return (Prototype(fg, bg, P.fg_fallback, P.bg_fallback),
            Prototype(fg_r, bg_r, P_r.fg_fallback, P_r.bg_fallback))


def cosine_map(grid: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine between every cell of a (C, h, w) grid and a C-vector; 0 for zero vectors."""
    dot = torch.einsum("chw,c->hw", grid, v)
    norms = grid.norm(dim=0) * v.norm()
    return torch.where(norms > 0, dot / norms.clamp_min(COSINE_EPS), torch.zeros_like(dot))


def ssp_augment(P: Prototype, feature: FeatureMap, cfg: SSPConfig = SSPConfig()) -> Prototype:
    """Blend each prototype side with the mean of confidently matching query cells."""
    grid = feature.grid
    if grid.shape[0] != P.fg.shape[0]:
        raise ValueError(f"feature width {grid.shape[0]} != prototype width {P.fg.shape[0]}")
    cells = grid.reshape(grid.shape[0], -1)

    def augment(proto, tau):
        chosen = (cosine_map(grid, proto) > tau).reshape(-1)
        if not bool(chosen.any()):
            return proto
        self_proto = cells[:, chosen].mean(dim=1)
        return cfg.blend * proto + (1 - cfg.blend) * self_proto

    return Prototype(augment(P.fg, cfg.tau_fg), augment(P.bg, cfg.tau_bg),
                     P.fg_fallback, P.bg_fallback)


def match_logits(P: Prototype, grid: torch.Tensor, temperature: float = 10.0) -> torch.Tensor:
    """Temperature-scaled fg-minus-bg cosine similarity for every cell of ``grid``."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return temperature * (cosine_map(grid, P.fg) - cosine_map(grid, P.bg))


def foreground_probability(P: Prototype, grid: torch.Tensor, temperature: float = 10.0) -> torch.Tensor:
    """Two-way temperature softmax over fg/bg cosine similarity, at grid resolution."""
    # softmax over two logits == sigmoid of their difference
    return torch.sigmoid(match_logits(P, grid, temperature))


def match(P: Prototype, feature: FeatureMap, temperature: float = 10.0) -> torch.Tensor:
    """Foreground probability for every pixel of the original image (H, W).

    The similarity logits are upsampled bilinearly before the softmax, so the
    decision boundary can fall between feature cells.
    """
    logits = match_logits(P, feature.grid, temperature)
    if feature.stride != 1:
        logits = F.interpolate(logits[None, None], size=feature.origin_size, mode="bilinear",
                               align_corners=False)[0, 0]
    return torch.sigmoid(logits)
