"""Adapting the frozen text classifier with image-level scene context.

The pooled global token from the context branch attends over the text
embedding rows (one query, multi-head), and the attended vector is gated
into every row as a residual. The residual gate and the attention output
projection start at zero, so an untrained adapter leaves classification
logits untouched. Cosine classification normalizes rows at use, which keeps
the adapted matrix well-scaled without renormalizing inside the adapter
(renormalizing an unchanged matrix would perturb low-order bits and break
the exact no-op guarantee at initialization).

Fusion variants besides multi-head attention ("add", "concat", "none")
exist for ablation; "concat" widens both classifier rows and query
embeddings with the raw context token, so it changes the classifier shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoders import GlobalContextToken
from .errors import ConfigurationError
from .vocabulary import VocabularyEmbedding

__all__ = ["GlobalContextAdapter", "AdaptedClassifier", "classify", "cosine_logits"]

FUSIONS = ("mha", "add", "concat", "none")
DIRECTIONS = ("context_to_text", "text_to_context")


@dataclass
class AdaptedClassifier:
    """Classifier matrix after context injection, plus its provenance."""

    matrix: torch.Tensor  # (m, dim); (m, dim + context_dim) under concat fusion
    source: VocabularyEmbedding | None = None
    context: GlobalContextToken | None = None

    @property
    def num_categories(self) -> int:
        return int(self.matrix.shape[0])


class GlobalContextAdapter(nn.Module):
    """Multi-head cross-attention between one context token and text rows."""

    def __init__(
        self,
        dim: int,
        context_dim: int | None = None,
        heads: int = 8,
        fusion: str = "mha",
        direction: str = "context_to_text",
    ):
        super().__init__()
        if fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {fusion!r}, expected one of {FUSIONS}")
        if direction not in DIRECTIONS:
            raise ConfigurationError(f"unknown direction {direction!r}")
        if dim % heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        context_dim = dim if context_dim is None else context_dim
        if fusion in ("add",) and context_dim != dim:
            raise ConfigurationError("'add' fusion requires matching context and text dims")
        self.dim = dim
        self.context_dim = context_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.fusion = fusion
        self.direction = direction
        if fusion == "mha":
            q_in = context_dim if direction == "context_to_text" else dim
            kv_in = dim if direction == "context_to_text" else context_dim
            self.w_q = nn.Linear(q_in, dim)
            self.w_k = nn.Linear(kv_in, dim)
            self.w_v = nn.Linear(kv_in, dim)
            self.out_proj = nn.Linear(dim, dim)
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)
            self.gate = nn.Parameter(torch.zeros(()))

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float32

    def _as_matrix(self, classifier) -> torch.Tensor:
        if isinstance(classifier, VocabularyEmbedding):
            return torch.as_tensor(classifier.matrix, dtype=self.dtype)
        return torch.as_tensor(classifier, dtype=self.dtype)

    def _as_context(self, cls) -> torch.Tensor:
        values = cls.values if isinstance(cls, GlobalContextToken) else cls
        if isinstance(values, np.ndarray):
            values = np.ascontiguousarray(values)
        return torch.as_tensor(values, dtype=self.dtype)

    def _attend(self, text: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Attention residual to broadcast over text rows: (dim,) or (m, dim)."""
        if self.direction == "context_to_text":
            q = self.w_q(context).reshape(self.heads, 1, self.head_dim)
            k = self.w_k(text).reshape(-1, self.heads, self.head_dim).transpose(0, 1)
            v = self.w_v(text).reshape(-1, self.heads, self.head_dim).transpose(0, 1)
            scores = (q @ k.transpose(1, 2)) / (self.head_dim**0.5)  # (heads, 1, m)
            attn = scores.softmax(dim=-1)
            out = (attn @ v).reshape(self.dim)
        else:
            q = self.w_q(text).reshape(-1, self.heads, self.head_dim).transpose(0, 1)
            k = self.w_k(context).reshape(self.heads, 1, self.head_dim)
            v = self.w_v(context).reshape(self.heads, 1, self.head_dim)
            scores = (q @ k.transpose(1, 2)) / (self.head_dim**0.5)  # (heads, m, 1)
            attn = scores.softmax(dim=-1)
            out = (attn @ v).transpose(0, 1).reshape(-1, self.dim)
        return self.out_proj(out)

    def adapt(self, classifier, cls) -> AdaptedClassifier:
        """Produce the context-conditioned classifier for one image."""
        text = self._as_matrix(classifier)
        if text.shape[0] == 0:
            raise ValueError("classifier must contain at least one category")
        context = self._as_context(cls)
        if context.shape[-1] != self.context_dim:
            raise ConfigurationError(
                f"context dim {context.shape[-1]} != expected {self.context_dim}"
            )
        if self.fusion == "none":
            adapted = text
        elif self.fusion == "add":
            adapted = text + context
        elif self.fusion == "concat":
            adapted = torch.cat([text, context.expand(text.shape[0], -1)], dim=1)
        else:
            adapted = text + self.gate * self._attend(text, context)
        source = classifier if isinstance(classifier, VocabularyEmbedding) else None
        ctx_token = cls if isinstance(cls, GlobalContextToken) else None
        return AdaptedClassifier(matrix=adapted, source=source, context=ctx_token)

    def transform_embeddings(self, embeddings: torch.Tensor, cls) -> torch.Tensor:
        """Match query embeddings to the adapted classifier's feature space."""
        if self.fusion == "concat":
            context = self._as_context(cls).to(embeddings.dtype)
            return torch.cat(
                [embeddings, context.expand(embeddings.shape[0], -1)], dim=1
            )
        return embeddings

    def forward(self, classifier, cls) -> AdaptedClassifier:
        return self.adapt(classifier, cls)


def cosine_logits(
    embeddings: torch.Tensor, matrix: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Cosine similarity / temperature; zero-norm rows score 0 everywhere."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if embeddings.shape[1] != matrix.shape[1]:
        raise ValueError(
            f"embedding dim {embeddings.shape[1]} != classifier dim {matrix.shape[1]}"
        )
    eps = torch.finfo(embeddings.dtype).tiny
    e = embeddings / embeddings.norm(dim=1, keepdim=True).clamp_min(eps)
    t = matrix / matrix.norm(dim=1, keepdim=True).clamp_min(eps)
    return (e @ t.T) / temperature


def classify(embeddings: torch.Tensor, classifier, temperature: float) -> torch.Tensor:
    """(n, dim) embeddings against an (m, dim) classifier -> (n, m) logits."""
    matrix = classifier.matrix if isinstance(classifier, AdaptedClassifier) else classifier
    if not isinstance(matrix, torch.Tensor):
        matrix = torch.as_tensor(np.asarray(matrix), dtype=embeddings.dtype)
    return cosine_logits(embeddings, matrix.to(embeddings.dtype), temperature)
