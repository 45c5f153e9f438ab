"""Segmentation, support self-support and query self-support losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .network import FeatureMap
from .protonet import Prototype, downsample_mask, foreground_probability, masked_average_pool

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.2

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(like.dtype)
    return torch.from_numpy(np.asarray(x, dtype=np.float64)).to(like.dtype)


def bce(pred: torch.Tensor, target) -> torch.Tensor:
    """Mean binary cross-entropy of a probability map against a binary mask."""
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def feature_bce(P: Prototype, feature: FeatureMap, mask, temperature: float) -> torch.Tensor:
    """BCE between the prototype-vs-feature probability map and the mask at feature resolution."""
    if tuple(np.shape(mask)) != tuple(feature.origin_size):
        raise ValueError(f"mask shape {np.shape(mask)} != feature origin size {feature.origin_size}")
    prob = foreground_probability(P, feature.grid, temperature)
    return bce(prob, downsample_mask(mask, feature.stride))


def support_self_loss(P: Prototype, P_r: Optional[Prototype], support_features: Sequence[FeatureMap],
                      support_refl_features: Optional[Sequence[FeatureMap]], support_masks: Sequence,
                      temperature: float = 10.0) -> torch.Tensor:
    """Per-shot BCE of the fused prototypes against their own supports, averaged over shots.

    The reflectance term is dropped when ``P_r`` is None.
    """
    if len(support_features) != len(support_masks):
        raise ValueError("one mask per support feature map is required")
    terms = []
    for k, (fs, mask) in enumerate(zip(support_features, support_masks)):
        loss = feature_bce(P, fs, mask, temperature)
        if P_r is not None:
            loss = loss + feature_bce(P_r, support_refl_features[k], mask, temperature)
        terms.append(loss)
    return torch.stack(terms).mean()


def query_self_loss(query_feature: FeatureMap, query_mask, temperature: float = 10.0) -> torch.Tensor:
    """BCE of the query's own masked-average prototype matched back against the query."""
    Q = masked_average_pool(query_feature, query_mask)
    return feature_bce(Q, query_feature, query_mask, temperature)


def total_loss(seg, support, query, weights: LossWeights = LossWeights()):
    return seg + weights.lambda1 * support + weights.lambda2 * query
