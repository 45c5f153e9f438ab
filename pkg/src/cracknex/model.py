"""The full few-shot pipeline: decomposition, encoders, fusion, prototypes and matching."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import TrainConfig
from .data import Episode
from .losses import bce, query_self_loss, support_self_loss, total_loss
from .network import (ASPP, Encoder, FeatureMap, QueryProjection, aspp_fuse, encode_pairs,
                      project_query, upsample2x)
from .protonet import (PrototypeFusion, masked_average_pool, match, merge_prototypes,
                       pfm_fuse, ssp_augment)
from .retinex import decompose, default_sigma

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CrackNex(nn.Module):
    """Parameter container for one configuration of the pipeline.

    Only the components enabled by the configuration's toggles are built:
    the reflectance encoder with ``use_reflectance``, the fusion gate with
    ``use_reflectance and use_pfm``, and either ASPP or a plain query
    projection depending on ``use_aspp``.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        C, pad = config.width, config.padding_mode
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.rgb_encoder = Encoder(C, pad)
            self.refl_encoder = Encoder(C, pad) if config.use_reflectance else None
            self.aspp = ASPP(C, padding_mode=pad) if config.use_aspp else None
            self.query_proj = None if config.use_aspp else QueryProjection(C)
            self.pfm = PrototypeFusion(C) if config.use_reflectance and config.use_pfm else None
        self.to(DTYPES[config.dtype])

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def concat_mode(self) -> bool:
        """Reflectance on, fusion gate off: features are concatenated before pooling."""
        return self.refl_encoder is not None and self.pfm is None


def _cat(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    return FeatureMap(torch.cat([a.grid, b.grid], dim=0), a.stride, a.origin_size)


def reflectances(episode: Episode, sigma: Optional[float]):
    images = [s.image for s in episode.support] + [episode.query.image]
    if sigma is None:
        sigma = default_sigma(images[0].shape)
    refl = [decompose(im, sigma).reflectance for im in images]
    return refl[:-1], refl[-1]


def forward_episode(episode: Episode, model: CrackNex, config: Optional[TrainConfig] = None):
    """Run one episode through the pipeline.

    Returns the query foreground probability map (H, W) and a dict of
    intermediates (feature maps and prototypes) used by the losses.
    """
    cfg = config or model.config
    support_imgs = [s.image for s in episode.support]
    support_masks = [s.mask for s in episode.support]

    if model.refl_encoder is not None:
        support_refl, query_refl = reflectances(episode, cfg.smoothing_sigma)
    else:
        support_refl, query_refl = None, None
    F_q, F_r, F_ss, F_sr = encode_pairs(episode.query.image, query_refl, support_imgs,
                                        support_refl or [], model.rgb_encoder, model.refl_encoder)

    if model.aspp is not None:
        Fq_prime = aspp_fuse(F_q, F_r, model.aspp)
    else:
        Fq_prime = project_query(F_q, model.query_proj)

    P_r = P_r_fused = None
    if model.concat_mode:
        support_feats = [_cat(a, b) for a, b in zip(F_ss, F_sr)]
        query_feats = FeatureMap(torch.cat([Fq_prime.grid, upsample2x(F_r.grid[None])[0]]),
                                 Fq_prime.stride, Fq_prime.origin_size)
        P = merge_prototypes([masked_average_pool(f, m) for f, m in zip(support_feats, support_masks)])
        P_fused = P
    else:
        support_feats, query_feats = F_ss, Fq_prime
        P = merge_prototypes([masked_average_pool(f, m) for f, m in zip(F_ss, support_masks)])
        P_fused = P
        if model.pfm is not None:
            P_r = merge_prototypes([masked_average_pool(f, m) for f, m in zip(F_sr, support_masks)])
            P_fused, P_r_fused = pfm_fuse(P, P_r, model.pfm)

    P_aug = ssp_augment(P_fused, query_feats, cfg.ssp)
    pred = match(P_aug, query_feats, cfg.temperature)
    intermediates = {
        "F_q": F_q, "F_r": F_r, "F_ss": F_ss, "F_sr": F_sr, "Fq_prime": Fq_prime,
        "support_features": support_feats, "query_features": query_feats,
        "P": P, "P_r": P_r, "P_fused": P_fused, "P_r_fused": P_r_fused, "P_aug": P_aug,
    }
    return pred, intermediates


def episode_losses(pred: torch.Tensor, inter: dict, episode: Episode, config: TrainConfig) -> dict:
    """Segmentation, support and query losses plus their weighted total."""
    support_masks = [s.mask for s in episode.support]
    seg = bce(pred, episode.query.mask)
    if inter["P_r_fused"] is not None:
        ls = support_self_loss(inter["P_fused"], inter["P_r_fused"], inter["F_ss"], inter["F_sr"],
                               support_masks, config.temperature)
    else:
        ls = support_self_loss(inter["P_fused"], None, inter["support_features"], None,
                               support_masks, config.temperature)
    lq = query_self_loss(inter["query_features"], episode.query.mask, config.temperature)
    return {"seg": seg, "ls": ls, "lq": lq,
            "total": total_loss(seg, ls, lq, config.loss_weights)}


def predict(episode: Episode, model: CrackNex) -> np.ndarray:
    with torch.no_grad():
        pred, _ = forward_episode(episode, model)
    return pred.double().numpy()
