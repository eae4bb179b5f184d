"""Open-vocabulary inference: out-vocabulary scoring, ensembling, postprocessing.

In-vocabulary probabilities come from trained class embeddings against the
(adapted) text classifier. Out-vocabulary probabilities come from mask-pooled
frozen backbone features against the same classifier, so categories never
seen in training still receive grounded scores. The two are combined per
class with a geometric mean whose exponent differs for base and novel
categories, then renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from .encoders import FeatureGrid
from .regions import pool_regional_context
from .text_adaptation import classify
from .vocabulary import CategorySet

__all__ = [
    "EnsembleConfig",
    "InstancePrediction",
    "SegmentationResult",
    "out_vocab_logits",
    "ensemble_scores",
    "postprocess",
]


@dataclass(frozen=True)
class EnsembleConfig:
    alpha: float = 0.4  # geometric weight of the out-vocab term on base classes
    beta: float = 0.8  # geometric weight of the out-vocab term on novel classes
    ov_backbone: Literal["general", "context"] = "general"

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")


@dataclass
class InstancePrediction:
    mask: np.ndarray  # (h, w) bool
    category_index: int
    score: float


@dataclass
class SegmentationResult:
    instances: list[InstancePrediction]

    def __len__(self) -> int:
        return len(self.instances)


def out_vocab_logits(
    mask_logits: torch.Tensor,
    backbone_grid: FeatureGrid,
    classifier,
    temperature: float,
    mask_threshold: float = 0.5,
) -> torch.Tensor:
    """Mask-pool backbone features under raw predicted masks, then classify.

    Uses the undilated masks: dilation is a training-time context mechanism,
    while out-vocabulary scoring wants the object's own appearance.
    """
    masks = (mask_logits.sigmoid() > mask_threshold).to(mask_logits.dtype)
    grid = torch.as_tensor(
        np.ascontiguousarray(backbone_grid.values), dtype=mask_logits.dtype
    )
    pooled = pool_regional_context(grid, masks)
    return classify(pooled.vectors, classifier, temperature)


def ensemble_scores(
    in_probs: torch.Tensor,
    out_probs: torch.Tensor,
    categories: CategorySet,
    cfg: EnsembleConfig = EnsembleConfig(),
) -> torch.Tensor:
    """Row-stochastic geometric ensemble of in- and out-vocabulary probabilities.

    Base classes use exponent ``alpha`` on the out-vocabulary term, novel
    classes ``beta``. The endpoints are exact: alpha = beta = 0 returns the
    in-vocabulary probabilities unchanged, alpha = beta = 1 the
    out-vocabulary ones.
    """
    if in_probs.shape != out_probs.shape:
        raise ValueError("probability tables must share a shape")
    if in_probs.shape[1] != len(categories):
        raise ValueError("one probability column per category required")
    if cfg.alpha == 0.0 and cfg.beta == 0.0:
        return in_probs.clone()
    if cfg.alpha == 1.0 and cfg.beta == 1.0:
        return out_probs.clone()
    base = torch.as_tensor(categories.base_mask, device=in_probs.device)
    expo = torch.where(
        base,
        torch.full((len(categories),), float(cfg.alpha), dtype=in_probs.dtype),
        torch.full((len(categories),), float(cfg.beta), dtype=in_probs.dtype),
    )
    eps = torch.finfo(in_probs.dtype).tiny
    combined = in_probs.clamp_min(eps).pow(1.0 - expo) * out_probs.clamp_min(eps).pow(expo)
    return combined / combined.sum(dim=1, keepdim=True).clamp_min(eps)


def postprocess(
    mask_logits: torch.Tensor,
    final_probs: torch.Tensor,
    background_prob: torch.Tensor | None = None,
    score_threshold: float = 0.05,
    mask_threshold: float = 0.5,
    top_k: int = 100,
) -> SegmentationResult:
    """Final instance list: argmax class, confidence = class prob x mask score.

    The mask score is the mean sigmoid inside the thresholded mask. Class
    probability is scaled by (1 - background probability) when the training
    background slot is available; clearly-background proposals
    (background prob > 0.5) and empty masks are dropped, the rest are
    thresholded on confidence and truncated to the top ``top_k``.
    """
    probs = mask_logits.sigmoid()
    binary = probs > mask_threshold
    n = mask_logits.shape[0]
    class_prob, class_idx = final_probs.max(dim=1)
    keep: list[tuple[float, int]] = []
    for i in range(n):
        area = int(binary[i].sum())
        if area == 0:
            continue
        not_bg = 1.0
        if background_prob is not None:
            p_bg = float(background_prob[i])
            if p_bg > 0.5:
                continue
            not_bg = 1.0 - p_bg
        mask_score = float(probs[i][binary[i]].mean())
        confidence = float(class_prob[i]) * not_bg * mask_score
        if confidence < score_threshold:
            continue
        keep.append((confidence, i))
    keep.sort(key=lambda pair: (-pair[0], pair[1]))
    instances = [
        InstancePrediction(
            mask=binary[i].cpu().numpy().astype(bool),
            category_index=int(class_idx[i]),
            score=float(conf),
        )
        for conf, i in keep[:top_k]
    ]
    return SegmentationResult(instances=instances)
