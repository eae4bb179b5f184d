"""Regional scene context: adaptive mask dilation, pooling, and integration.

Predicted instance masks are dilated by a learnable amount, the context
branch's patch grid is mask-pooled under the dilated masks, and the pooled
context is fused into the class embeddings through a small stack of
cross-attention layers.

The dilation kernel size is ``3 + clamp(delta, 0, 10)`` rounded to the
nearest odd integer (ties up) so that stride-1 max pooling with padding
``(k - 1) // 2`` preserves spatial size. ``delta`` is discrete in the
forward pass; its gradient comes from a straight-through surrogate that
linearly blends the dilations at the two neighboring odd kernel sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericsError

__all__ = [
    "effective_kernel",
    "kernel_neighbors",
    "expand_masks",
    "AdaptiveDilation",
    "RegionalContext",
    "pool_regional_context",
    "ContextIntegrator",
]

KERNEL_BASE = 3
CLAMP_LO = 0.0
CLAMP_HI = 10.0
EMPTY_REGION_EPS = 1e-6


def effective_kernel(delta: float) -> int:
    """Kernel size for a raw dilation parameter: odd, between 3 and 13."""
    soft = KERNEL_BASE + min(max(float(delta), CLAMP_LO), CLAMP_HI)
    steps = math.floor((soft - KERNEL_BASE) / 2.0 + 0.5)
    return KERNEL_BASE + 2 * int(steps)


def kernel_neighbors(delta: float) -> tuple[int, int, float]:
    """Odd kernel sizes bracketing the soft value, and the blend fraction.

    Returns ``(k_lo, k_hi, t)`` with ``soft = (1 - t) * k_lo + t * k_hi``.
    """
    soft = KERNEL_BASE + min(max(float(delta), CLAMP_LO), CLAMP_HI)
    k_lo = KERNEL_BASE + 2 * int(math.floor((soft - KERNEL_BASE) / 2.0))
    k_hi = min(k_lo + 2, KERNEL_BASE + 2 * int(CLAMP_HI // 2))
    if k_hi == k_lo:
        return k_lo, k_hi, 0.0
    return k_lo, k_hi, (soft - k_lo) / (k_hi - k_lo)


def expand_masks(masks: torch.Tensor, k: int) -> torch.Tensor:
    """Morphological dilation of (n, h, w) masks by a k x k neighborhood max.

    Stride 1, padding (k - 1) // 2; output matches the input spatial size and
    dominates the input pointwise.
    """
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if k < KERNEL_BASE:
        raise ValueError(f"kernel size must be >= {KERNEL_BASE}, got {k}")
    return F.max_pool2d(masks.unsqueeze(1), k, stride=1, padding=(k - 1) // 2).squeeze(1)


class AdaptiveDilation(nn.Module):
    """Learnable mask expansion.

    Stores ``delta`` raw (unclamped, initialized to 1). The forward value
    uses the rounded odd kernel; the backward pass sees the blend of the two
    neighboring kernels, so ``delta`` receives a finite-difference-style
    gradient despite the discrete kernel size.
    """

    def __init__(self, init_delta: float = 1.0):
        super().__init__()
        self.delta = nn.Parameter(torch.tensor(float(init_delta)))

    @property
    def kernel_size(self) -> int:
        return effective_kernel(self.delta.item())

    def forward(self, masks: torch.Tensor, hard: bool = True) -> torch.Tensor:
        k_lo, k_hi, _ = kernel_neighbors(self.delta.item())
        lo = expand_masks(masks, k_lo)
        if k_hi == k_lo:
            surrogate = lo
        else:
            t = (self.delta.clamp(CLAMP_LO, CLAMP_HI) + KERNEL_BASE - k_lo) / (k_hi - k_lo)
            surrogate = (1.0 - t) * lo + t * expand_masks(masks, k_hi)
        if not hard:
            return surrogate
        hard_value = expand_masks(masks, self.kernel_size)
        return surrogate + (hard_value - surrogate).detach()


@dataclass
class RegionalContext:
    """Per-proposal pooled context vectors plus mask coverage diagnostics."""

    vectors: torch.Tensor  # (n, dim)
    coverage: torch.Tensor  # (n,) fraction of grid cells inside the mask

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


def pool_regional_context(
    grid_values: torch.Tensor, masks: torch.Tensor, eps: float = EMPTY_REGION_EPS
) -> RegionalContext:
    """Weighted-average pool of a (gh, gw, dim) grid under (n, h, w) masks.

    Masks are area-resampled to the grid resolution; weights are the mask
    values normalized to sum to one per proposal. Proposals whose resampled
    mask mass falls below ``eps`` of the cell count fall back to uniform
    global pooling with coverage 0.
    """
    gh, gw, _ = grid_values.shape
    n = masks.shape[0]
    if masks.shape[1:] != (gh, gw):
        resampled = F.interpolate(masks.unsqueeze(1).float(), size=(gh, gw), mode="area").squeeze(1)
    else:
        resampled = masks.float()
    flat = resampled.reshape(n, gh * gw)
    mass = flat.sum(dim=1, keepdim=True)
    threshold = eps * gh * gw
    empty = mass.squeeze(1) < threshold
    weights = flat / mass.clamp_min(threshold)
    uniform = torch.full_like(flat, 1.0 / (gh * gw))
    weights = torch.where(empty.unsqueeze(1), uniform, weights)
    vectors = weights @ grid_values.reshape(gh * gw, -1)
    coverage = (flat.mean(dim=1)).clamp(0.0, 1.0)
    coverage = torch.where(empty, torch.zeros_like(coverage), coverage)
    return RegionalContext(vectors=vectors, coverage=coverage)


class _CrossAttentionLayer(nn.Module):
    """Pre-norm cross-attention + feed-forward with zero-initialized outputs.

    Zero init on the attention output projection and the second feed-forward
    linear makes the layer the identity at construction, so enabling the
    integrator cannot change logits until training moves it.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_o = nn.Linear(dim, dim)
        self.ffn_in = nn.Linear(dim, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, dim)
        nn.init.zeros_(self.w_o.weight)
        nn.init.zeros_(self.w_o.bias)
        nn.init.zeros_(self.ffn_out.weight)
        nn.init.zeros_(self.ffn_out.bias)

    def _attend(
        self, queries: torch.Tensor, context: torch.Tensor, paired: bool
    ) -> tuple[torch.Tensor, torch.Tensor]:
        n = queries.shape[0]
        q = self.w_q(queries).reshape(n, self.heads, self.head_dim)
        if paired:
            k = self.w_k(context).reshape(n, 1, self.heads, self.head_dim)
            v = self.w_v(context).reshape(n, 1, self.heads, self.head_dim)
            scores = torch.einsum("nhd,nkhd->nhk", q, k) / math.sqrt(self.head_dim)
            attn = scores.softmax(dim=-1)
            out = torch.einsum("nhk,nkhd->nhd", attn, v)
        else:
            m = context.shape[0]
            k = self.w_k(context).reshape(m, self.heads, self.head_dim)
            v = self.w_v(context).reshape(m, self.heads, self.head_dim)
            scores = torch.einsum("nhd,mhd->nhm", q, k) / math.sqrt(self.head_dim)
            attn = scores.softmax(dim=-1)
            out = torch.einsum("nhm,mhd->nhd", attn, v)
        return self.w_o(out.reshape(n, self.dim)), attn

    def forward(
        self, x: torch.Tensor, context: torch.Tensor, paired: bool
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attended, attn = self._attend(self.norm_attn(x), context, paired)
        x = x + attended
        x = x + self.ffn_out(F.gelu(self.ffn_in(self.norm_ffn(x))))
        return x, attn


class ContextIntegrator(nn.Module):
    """Sequential cross-attention stack fusing pooled context into embeddings.

    ``temperature`` scales the context vectors before the key/value
    projections. ``paired=True`` restricts each embedding to its own
    context row; the default shares all context rows as one key/value set.
    """

    def __init__(
        self,
        dim: int,
        context_dim: int | None = None,
        layers: int = 2,
        heads: int = 8,
        temperature: float = 1.0,
        trainable_temperature: bool = False,
        ffn_ratio: int = 4,
    ):
        super().__init__()
        if layers < 1:
            raise ValueError("at least one integration layer required")
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        context_dim = dim if context_dim is None else context_dim
        self.context_proj = nn.Linear(context_dim, dim) if context_dim != dim else None
        self.layers = nn.ModuleList(
            _CrossAttentionLayer(dim, heads, ffn_ratio * dim) for _ in range(layers)
        )
        t = torch.tensor(float(temperature))
        if trainable_temperature:
            self.raw_temperature = nn.Parameter(t)
        else:
            self.register_buffer("raw_temperature", t)

    @property
    def temperature(self) -> float:
        return float(self.raw_temperature.clamp_min(0.0).item())

    def forward(
        self,
        embeddings: torch.Tensor,
        context: torch.Tensor,
        paired: bool = False,
        return_attention: bool = False,
    ):
        if paired and context.shape[0] != embeddings.shape[0]:
            raise ValueError("paired integration needs one context row per embedding")
        ctx = context * self.raw_temperature.clamp_min(0.0)
        if self.context_proj is not None:
            ctx = self.context_proj(ctx)
        x = embeddings
        attentions = []
        for i, layer in enumerate(self.layers):
            x, attn = layer(x, ctx, paired)
            if not torch.isfinite(x).all():
                raise NumericsError(f"non-finite embeddings after integration layer {i}")
            attentions.append(attn)
        if return_attention:
            return x, attentions
        return x
