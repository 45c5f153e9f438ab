"""Convolutional encoders and the ASPP fusion of query and reflectance features."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PADDING_MODES = ("zeros", "circular", "replicate")
STRIDE = 8


@dataclass
class FeatureMap:
    """Feature grid stored channel-first as (C, h, w), or (N, C, h, w) for batches."""

    grid: torch.Tensor
    stride: int
    origin_size: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid.shape[-2:]
        H, W = self.origin_size
        if (h * self.stride, w * self.stride) != (H, W):
            raise ValueError(
                f"grid {h}x{w} at stride {self.stride} does not cover origin size {H}x{W}"
            )

    @property
    def channels(self) -> int:
        return self.grid.shape[-3]


def pad2d(x: torch.Tensor, pad: int, mode: str) -> torch.Tensor:
    """Pad the last two dims by ``pad`` on every side; works for any pad size."""
    if pad == 0:
        return x
    if mode == "zeros":
        return F.pad(x, (pad, pad, pad, pad))
    h, w = x.shape[-2:]
    rows = torch.arange(-pad, h + pad, device=x.device)
    cols = torch.arange(-pad, w + pad, device=x.device)
    if mode == "circular":
        rows, cols = rows % h, cols % w
    elif mode == "replicate":
        rows, cols = rows.clamp(0, h - 1), cols.clamp(0, w - 1)
    else:
        raise ValueError(f"unknown padding mode {mode!r}; expected one of {PADDING_MODES}")
    return x.index_select(-2, rows).index_select(-1, cols)


class Conv(nn.Module):
    """Conv2d with an explicit padding mode and fan-in (Kaiming) initialisation."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 dilation: int = 1, padding_mode: str = "zeros", bias: bool = True):
        super().__init__()
        if padding_mode not in PADDING_MODES:
            raise ValueError(f"unknown padding mode {padding_mode!r}")
        self.stride, self.dilation, self.padding_mode = stride, dilation, padding_mode
        self.pad = dilation * (kernel - 1) // 2
        fan_in = in_ch * kernel * kernel
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel) * math.sqrt(2.0 / fan_in))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None

    def forward(self, x):
        x = pad2d(x, self.pad, self.padding_mode)
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation)


def _groups(channels: int, target: int = 4) -> int:
    # at least two channels per group so 1x1 grids still normalise
    g = max(1, min(target, channels // 2))
    while channels % g:
        g -= 1
    return g


class ConvNormAct(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, dilation=1, padding_mode="zeros"):
        super().__init__(
            Conv(in_ch, out_ch, kernel, stride, dilation, padding_mode, bias=False),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(),
        )


class Encoder(nn.Module):
    """Four-stage encoder with an overall stride of 8.

    The stem and the next two stages halve the resolution; the last stage keeps
    it, as in dilated ResNet backbones used for segmentation. Any module with
    the same (N, 3, H, W) -> (N, width, H/8, W/8) contract can replace it.
    """

    def __init__(self, width: int = 64, padding_mode: str = "zeros"):
        super().__init__()
        self.width = width
        self.stages = nn.Sequential(
            ConvNormAct(3, width, stride=2, padding_mode=padding_mode),
            ConvNormAct(width, width, stride=2, padding_mode=padding_mode),
            ConvNormAct(width, width, stride=2, padding_mode=padding_mode),
            ConvNormAct(width, width, stride=1, padding_mode=padding_mode),
        )

    def forward(self, x):
        return self.stages(x)


def _check_divisible(H: int, W: int):
    if H % STRIDE or W % STRIDE:
        raise ValueError(f"image size {H}x{W} is not divisible by {STRIDE}")


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 array (or a list of them) -> (N, 3, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        t = images if images.dim() == 4 else images.unsqueeze(0)
        return t.to(dtype)
    if isinstance(images, np.ndarray):
        images = [images]
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def encode_batch(images, encoder: nn.Module) -> torch.Tensor:
    x = to_tensor(images, _dtype(encoder))
    _check_divisible(*x.shape[-2:])
    return encoder(x)


def encode(image, encoder: nn.Module) -> FeatureMap:
    """Encode one HxWx3 image into a stride-8 feature map."""
    grid = encode_batch(image, encoder)[0]
    H, W = np.shape(image)[:2] if not isinstance(image, torch.Tensor) else image.shape[-2:]
    return FeatureMap(grid, STRIDE, (int(H), int(W)))


def encode_pairs(query, query_reflectance, supports: Sequence, support_reflectances: Sequence,
                 rgb_encoder: nn.Module, refl_encoder: Optional[nn.Module]):
    """Encode query and supports with shared weights per modality.

    Images go through ``rgb_encoder`` and reflectances through ``refl_encoder``
    in a single batch each, so query and support paths share parameters by
    construction. Returns (F_q, F_r, [F_ss], [F_sr]); F_r and F_sr are None
    when ``refl_encoder`` is None.
    """
    sizes = {tuple(np.shape(im)[:2]) for im in [query, *supports]}
    if refl_encoder is not None:
        sizes |= {tuple(np.shape(im)[:2]) for im in [query_reflectance, *support_reflectances]}
    if len(sizes) != 1:
        raise ValueError(f"all inputs must share one size, got {sorted(sizes)}")
    if len(support_reflectances) != len(supports) and refl_encoder is not None:
        raise ValueError("one reflectance image per support image is required")
    (H, W), = sizes
    _check_divisible(H, W)

    def split(images, encoder):
        grids = encode_batch([np.asarray(im) for im in images], encoder)
        return [FeatureMap(g, STRIDE, (H, W)) for g in grids]

    rgb = split([query, *supports], rgb_encoder)
    if refl_encoder is None:
        return rgb[0], None, rgb[1:], None
    refl = split([query_reflectance, *support_reflectances], refl_encoder)
    return rgb[0], refl[0], rgb[1:], refl[1:]


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling on query features, fused with reflectance features."""

    def __init__(self, width: int, rates: Sequence[int] = (6, 12, 18), padding_mode: str = "zeros"):
        super().__init__()
        self.rates = tuple(rates)
        self.branch1x1 = ConvNormAct(width, width, kernel=1)
        self.atrous = nn.ModuleList(
            ConvNormAct(width, width, kernel=3, dilation=r, padding_mode=padding_mode) for r in rates
        )
        self.pool_proj = Conv(width, width, kernel=1)
        self.merge = ConvNormAct(width * (len(rates) + 2), width, kernel=1)
        self.low_proj = Conv(width, width, kernel=1)
        self.fuse = nn.Sequential(
            ConvNormAct(2 * width, width, padding_mode=padding_mode),
            ConvNormAct(width, width, padding_mode=padding_mode),
        )

    def trunk(self, fq: torch.Tensor) -> torch.Tensor:
        pooled = F.relu(self.pool_proj(fq.mean(dim=(-2, -1), keepdim=True)))
        branches = [self.branch1x1(fq), *(conv(fq) for conv in self.atrous),
                    pooled.expand(-1, -1, *fq.shape[-2:])]
        return self.merge(torch.cat(branches, dim=1))

    def low_level(self, fr: torch.Tensor) -> torch.Tensor:
        return F.relu(self.low_proj(fr))

    def forward(self, fq: torch.Tensor, fr: Optional[torch.Tensor]) -> torch.Tensor:
        high = upsample2x(self.trunk(fq))
        if fr is None:
            low = torch.zeros_like(high)
        else:
            low = upsample2x(self.low_level(fr))
        return self.fuse(torch.cat([high, low], dim=1))


def aspp_fuse(F_q: FeatureMap, F_r: Optional[FeatureMap], aspp: ASPP) -> FeatureMap:
    """Multi-scale query features at stride 8 -> reflectance-enriched features at stride 4."""
    if F_r is not None and F_r.grid.shape != F_q.grid.shape:
        raise ValueError(f"F_q {tuple(F_q.grid.shape)} and F_r {tuple(F_r.grid.shape)} differ")
    batched = F_q.grid.dim() == 4
    fq = F_q.grid if batched else F_q.grid.unsqueeze(0)
    fr = None if F_r is None else (F_r.grid if batched else F_r.grid.unsqueeze(0))
    out = aspp(fq, fr)
    return FeatureMap(out if batched else out[0], F_q.stride // 2, F_q.origin_size)


class QueryProjection(nn.Module):
    """Plain 1x1 projection plus 2x upsampling, used when ASPP is disabled."""

    def __init__(self, width: int):
        super().__init__()
        self.proj = Conv(width, width, kernel=1)

    def forward(self, fq: torch.Tensor) -> torch.Tensor:
        return upsample2x(self.proj(fq))


def project_query(F_q: FeatureMap, projection: QueryProjection) -> FeatureMap:
    batched = F_q.grid.dim() == 4
    fq = F_q.grid if batched else F_q.grid.unsqueeze(0)
    out = projection(fq)
    return FeatureMap(out if batched else out[0], F_q.stride // 2, F_q.origin_size)
