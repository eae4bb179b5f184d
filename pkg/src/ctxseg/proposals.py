"""Query-based instance proposal generation and set-prediction training.

A small transformer decoder turns a frozen backbone feature grid into a
fixed number of (class embedding, mask logit map) pairs. Training follows
the usual set-prediction recipe: bipartite matching on a class/dice/bce
cost, cross-entropy toward matched categories (unmatched queries toward a
background slot), and dice + bce mask losses on matched pairs.

The mask head is dot-product style: per-query mask embeddings against a
per-pixel embedding map. The per-pixel map fuses the upsampled backbone
grid with a raw-image lateral so mask boundaries are not limited to the
backbone stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from .encoders import FeatureGrid
from .errors import NumericsError

__all__ = [
    "GroundTruthInstance",
    "InstanceProposalSet",
    "MatchResult",
    "LossWeights",
    "ProposalGenerator",
    "hungarian_match",
    "compute_losses",
    "dice_loss_matrix",
    "bce_loss_matrix",
]


@dataclass(frozen=True)
class GroundTruthInstance:
    """One annotated instance: boolean mask plus index into the train vocabulary."""

    mask: np.ndarray
    category_index: int

    def __post_init__(self) -> None:
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.mask.shape}")
        if not self.mask.any():
            raise ValueError("ground-truth mask must contain at least one pixel")


@dataclass
class InstanceProposalSet:
    """Fixed-size set of per-query class embeddings and mask logit maps."""

    class_embeddings: torch.Tensor  # (n, embed_dim)
    mask_logits: torch.Tensor  # (n, h, w), pre-sigmoid

    def __post_init__(self) -> None:
        if self.class_embeddings.shape[0] != self.mask_logits.shape[0]:
            raise ValueError("one mask logit map per class embedding required")

    @property
    def num_queries(self) -> int:
        return int(self.class_embeddings.shape[0])


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (query_index, gt_index)
    unmatched_queries: tuple[int, ...]

    def __post_init__(self) -> None:
        qs = [q for q, _ in self.pairs]
        gs = [g for _, g in self.pairs]
        if len(set(qs)) != len(qs) or len(set(gs)) != len(gs):
            raise ValueError("matching must be one-to-one")


@dataclass(frozen=True)
class LossWeights:
    class_weight: float = 2.0
    dice_weight: float = 5.0
    bce_weight: float = 5.0
    no_object_weight: float = 0.1


def _sine_positions(gh: int, gw: int, dim: int, dtype, device) -> torch.Tensor:
    """2-D sinusoidal position encoding for grid tokens, (gh * gw, dim)."""
    if dim % 4 != 0:
        raise ValueError("position encoding needs dim divisible by 4")
    quarter = dim // 4
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(quarter, dtype=dtype, device=device) / quarter
    )
    ys = torch.arange(gh, dtype=dtype, device=device)[:, None] * freqs[None, :]
    xs = torch.arange(gw, dtype=dtype, device=device)[:, None] * freqs[None, :]
    y_enc = torch.cat([ys.sin(), ys.cos()], dim=1)  # (gh, dim/2)
    x_enc = torch.cat([xs.sin(), xs.cos()], dim=1)  # (gw, dim/2)
    grid = torch.cat(
        [
            y_enc[:, None, :].expand(gh, gw, dim // 2),
            x_enc[None, :, :].expand(gh, gw, dim // 2),
        ],
        dim=2,
    )
    return grid.reshape(gh * gw, dim)


class _DecoderLayer(nn.Module):
    """Pre-norm self-attention + cross-attention + feed-forward block."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm_self = nn.LayerNorm(dim)
        self.norm_cross = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        q = self.norm_self(queries)
        queries = queries + self.self_attn(q, q, q, need_weights=False)[0]
        q = self.norm_cross(queries)
        queries = queries + self.cross_attn(q, memory, memory, need_weights=False)[0]
        return queries + self.ffn(self.norm_ffn(queries))


class ProposalGenerator(nn.Module):
    """Learned-query decoder over a single-scale frozen feature grid.

    ``mask_stride`` divides the input image resolution to set the mask
    logit resolution (1 = full resolution, the desk-scale default).
    """

    def __init__(
        self,
        backbone_dim: int,
        embed_dim: int,
        num_queries: int = 300,
        hidden_dim: int = 64,
        heads: int = 4,
        decoder_layers: int = 2,
        mask_dim: int = 16,
        mask_stride: int = 1,
    ):
        super().__init__()
        self.num_queries = num_queries
        self.embed_dim = embed_dim
        self.mask_stride = mask_stride
        self.query_embed = nn.Parameter(torch.randn(num_queries, hidden_dim) * 0.1)
        self.input_proj = nn.Linear(backbone_dim, hidden_dim)
        self.layers = nn.ModuleList(
            _DecoderLayer(hidden_dim, heads, 4 * hidden_dim) for _ in range(decoder_layers)
        )
        self.final_norm = nn.LayerNorm(hidden_dim)
        self.class_head = nn.Linear(hidden_dim, embed_dim)
        self.mask_query_head = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, mask_dim)
        )
        self.grid_conv = nn.Conv2d(hidden_dim, mask_dim, 3, padding=1)
        self.image_lateral = nn.Conv2d(3, mask_dim, 3, padding=1)
        self.fuse_conv = nn.Conv2d(mask_dim, mask_dim, 3, padding=1)

    @property
    def dtype(self) -> torch.dtype:
        return self.query_embed.dtype

    def _pixel_embeddings(self, grid_feats: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        """(hidden, gh, gw) grid + (3, h, w) image -> (mask_dim, h/s, w/s)."""
        h, w = image.shape[1:]
        th, tw = h // self.mask_stride, w // self.mask_stride
        up = F.interpolate(
            self.grid_conv(grid_feats.unsqueeze(0)), size=(th, tw),
            mode="bilinear", align_corners=False,
        )
        img = image.unsqueeze(0)
        if (th, tw) != (h, w):
            img = F.interpolate(img, size=(th, tw), mode="area")
        lateral = self.image_lateral(img)
        return self.fuse_conv(F.gelu(up + lateral)).squeeze(0)

    def forward(self, features: FeatureGrid, image_pixels: np.ndarray) -> InstanceProposalSet:
        dtype = self.dtype
        device = self.query_embed.device
        grid = torch.as_tensor(np.ascontiguousarray(features.values), dtype=dtype, device=device)
        gh, gw, _ = grid.shape
        tokens = self.input_proj(grid.reshape(gh * gw, -1))
        tokens = tokens + _sine_positions(gh, gw, tokens.shape[1], dtype, device)

        queries = self.query_embed.unsqueeze(0)
        memory = tokens.unsqueeze(0)
        for layer in self.layers:
            queries = layer(queries, memory)
        decoded = self.final_norm(queries.squeeze(0))

        image = torch.as_tensor(
            np.ascontiguousarray(image_pixels), dtype=dtype, device=device
        ).permute(2, 0, 1)
        grid_chw = self.input_proj(grid).permute(2, 0, 1)
        pixel = self._pixel_embeddings(grid_chw, image)
        mask_queries = self.mask_query_head(decoded)
        mask_logits = torch.einsum("nc,chw->nhw", mask_queries, pixel)

        return InstanceProposalSet(
            class_embeddings=self.class_head(decoded), mask_logits=mask_logits
        )


def dice_loss_matrix(mask_logits: torch.Tensor, gt_masks: torch.Tensor) -> torch.Tensor:
    """Pairwise dice loss, (n, g), from (n, h, w) logits and (g, h, w) targets."""
    probs = mask_logits.sigmoid().flatten(1)
    gts = gt_masks.flatten(1).to(probs.dtype)
    numer = 2.0 * probs @ gts.T
    denom = probs.sum(dim=1, keepdim=True) + gts.sum(dim=1)[None, :]
    return 1.0 - (numer + 1.0) / (denom + 1.0)


def bce_loss_matrix(mask_logits: torch.Tensor, gt_masks: torch.Tensor) -> torch.Tensor:
    """Pairwise mean binary cross-entropy, (n, g)."""
    logits = mask_logits.flatten(1)
    gts = gt_masks.flatten(1).to(logits.dtype)
    pos = F.binary_cross_entropy_with_logits(
        logits, torch.ones_like(logits), reduction="none"
    )
    neg = F.binary_cross_entropy_with_logits(
        logits, torch.zeros_like(logits), reduction="none"
    )
    return (pos @ gts.T + neg @ (1.0 - gts).T) / logits.shape[1]


def _pair_costs(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    gt_classes: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    log_probs = F.log_softmax(class_logits, dim=-1)
    cost_class = -log_probs[:, gt_classes]
    cost_dice = dice_loss_matrix(mask_logits, gt_masks)
    cost_bce = bce_loss_matrix(mask_logits, gt_masks)
    return (
        weights.class_weight * cost_class
        + weights.dice_weight * cost_dice
        + weights.bce_weight * cost_bce
    )


def hungarian_match(
    proposals: InstanceProposalSet,
    class_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    gt_classes: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> MatchResult:
    """Optimal one-to-one assignment of ground truth to queries.

    Minimizes summed class + dice + bce cost. Every ground-truth instance is
    matched; raises when there are more instances than queries (callers skip
    such samples).
    """
    n = proposals.num_queries
    g = int(gt_masks.shape[0])
    if g > n:
        raise ValueError(f"{g} ground-truth instances exceed {n} queries")
    if g == 0:
        return MatchResult(pairs=(), unmatched_queries=tuple(range(n)))
    with torch.no_grad():
        cost = _pair_costs(class_logits, proposals.mask_logits, gt_masks, gt_classes, weights)
    rows, cols = linear_sum_assignment(cost.T.cpu().numpy())  # rows: gt, cols: query
    pairs = tuple(sorted((int(q), int(gt)) for gt, q in zip(rows, cols)))
    matched = {q for q, _ in pairs}
    return MatchResult(
        pairs=pairs, unmatched_queries=tuple(i for i in range(n) if i not in matched)
    )


def compute_losses(
    proposals: InstanceProposalSet,
    class_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    gt_classes: torch.Tensor,
    match: MatchResult,
    weights: LossWeights = LossWeights(),
) -> dict[str, torch.Tensor]:
    """Weighted cross-entropy + dice + bce under a fixed matching.

    Unmatched queries are supervised toward the background slot (the last
    class-logit column) with a reduced weight so real objects dominate.
    Returns per-term values plus the weighted ``total``.
    """
    n, num_cols = class_logits.shape
    background_index = num_cols - 1
    targets = torch.full((n,), background_index, dtype=torch.long, device=class_logits.device)
    for q, gt in match.pairs:
        targets[q] = gt_classes[gt]
    class_weight_vec = torch.ones(num_cols, dtype=class_logits.dtype, device=class_logits.device)
    class_weight_vec[background_index] = weights.no_object_weight
    loss_class = F.cross_entropy(class_logits, targets, weight=class_weight_vec)

    if match.pairs:
        q_idx = torch.tensor([q for q, _ in match.pairs], device=class_logits.device)
        g_idx = torch.tensor([g for _, g in match.pairs], device=class_logits.device)
        pred = proposals.mask_logits[q_idx]
        gt = gt_masks[g_idx].to(pred.dtype)
        probs = pred.sigmoid().flatten(1)
        flat_gt = gt.flatten(1)
        numer = 2.0 * (probs * flat_gt).sum(dim=1)
        denom = probs.sum(dim=1) + flat_gt.sum(dim=1)
        loss_dice = (1.0 - (numer + 1.0) / (denom + 1.0)).mean()
        loss_bce = F.binary_cross_entropy_with_logits(pred.flatten(1), flat_gt)
    else:
        loss_dice = class_logits.new_zeros(())
        loss_bce = class_logits.new_zeros(())

    total = (
        weights.class_weight * loss_class
        + weights.dice_weight * loss_dice
        + weights.bce_weight * loss_bce
    )
    if not torch.isfinite(total):
        raise NumericsError(
            f"non-finite loss: class={loss_class.item()} dice={loss_dice.item()} "
            f"bce={loss_bce.item()}"
        )
    return {"total": total, "class": loss_class, "dice": loss_dice, "bce": loss_bce}
