"""Full segmentation head: proposals, context refinement, adapted classifier.

Composes the trainable pieces (proposal generator, adaptive dilation +
context integrator, text adapter, background embedding) over a pair of
frozen encoder families. The module owns everything the optimizer sees;
encoders live outside the parameter tree, so freezing needs no special
casing.

Runtime toggles keep the module count fixed while enabling/disabling the
two context mechanisms, which is what the component ablation grid flips.
Both mechanisms are exact no-ops at initialization (zero-initialized
output projections), so an untrained toggled-on model reproduces the
baseline bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoders import FeatureGrid, GlobalContextToken, ImageTensor
from .errors import ConfigurationError
from .inference import EnsembleConfig, SegmentationResult, ensemble_scores, out_vocab_logits, postprocess
from .proposals import InstanceProposalSet, ProposalGenerator
from .regions import AdaptiveDilation, ContextIntegrator, pool_regional_context
from .text_adaptation import GlobalContextAdapter, classify
from .vocabulary import CategorySet, VocabularyEmbedding

__all__ = ["FeatureBundle", "SceneContextModel"]

CONTEXT_SOURCES = ("regional", "cls", "patch")


@dataclass
class FeatureBundle:
    """Frozen-encoder outputs for one image (cacheable across epochs)."""

    instance_grid: FeatureGrid
    context_grid: FeatureGrid
    context_cls: GlobalContextToken
    patch_context: FeatureGrid | None = None


class SceneContextModel(nn.Module):
    def __init__(
        self,
        instance_encoders,
        context_encoders,
        num_queries: int = 12,
        hidden_dim: int = 64,
        decoder_layers: int = 2,
        decoder_heads: int = 4,
        mask_dim: int = 16,
        mask_stride: int = 1,
        use_regional_context: bool = True,
        use_text_adaptation: bool = True,
        context_source: str = "regional",
        context_layer: int | str = "final",
        paired_context: bool = False,
        integration_layers: int = 2,
        integration_heads: int = 8,
        integration_temperature: float = 1.0,
        gca_heads: int = 8,
        gca_fusion: str = "mha",
        gca_direction: str = "context_to_text",
        gca_gate_init: float = 1.0,
        logit_temperature: float = 0.07,
        ensemble: EnsembleConfig = EnsembleConfig(),
    ):
        super().__init__()
        if context_source not in CONTEXT_SOURCES:
            raise ConfigurationError(
                f"context_source must be one of {CONTEXT_SOURCES}, got {context_source!r}"
            )
        if logit_temperature <= 0:
            raise ConfigurationError("logit_temperature must be positive")
        self.instance_image_encoder, self.instance_text_encoder = instance_encoders
        self.context_image_encoder, self.context_text_encoder = context_encoders
        inst_dim = self.instance_image_encoder.descriptor.embedding_dim
        ctx_dim = self.context_image_encoder.descriptor.embedding_dim
        text_dim = self.instance_text_encoder.descriptor.embedding_dim
        if text_dim != inst_dim:
            raise ConfigurationError(
                f"instance family image dim {inst_dim} != text dim {text_dim}"
            )
        if ensemble.ov_backbone == "context" and ctx_dim != text_dim:
            raise ConfigurationError(
                "context-branch out-vocabulary scoring needs matching embedding dims "
                f"(context {ctx_dim} vs text {text_dim})"
            )
        self.embed_dim = text_dim
        self.context_dim = ctx_dim
        self.use_regional_context = use_regional_context
        self.use_text_adaptation = use_text_adaptation
        self.context_source = context_source
        self.context_layer = context_layer
        self.paired_context = paired_context
        self.logit_temperature = float(logit_temperature)
        self.ensemble = ensemble

        self.generator = ProposalGenerator(
            backbone_dim=inst_dim,
            embed_dim=text_dim,
            num_queries=num_queries,
            hidden_dim=hidden_dim,
            heads=decoder_heads,
            decoder_layers=decoder_layers,
            mask_dim=mask_dim,
            mask_stride=mask_stride,
        )
        self.dilation = AdaptiveDilation()
        self.integrator = ContextIntegrator(
            dim=text_dim,
            context_dim=ctx_dim,
            layers=integration_layers,
            heads=integration_heads,
            temperature=integration_temperature,
        )
        self.adapter = GlobalContextAdapter(
            dim=text_dim,
            context_dim=ctx_dim,
            heads=gca_heads,
            fusion=gca_fusion,
            direction=gca_direction,
        )
        if gca_fusion == "mha":
            with torch.no_grad():
                self.adapter.gate.fill_(float(gca_gate_init))
        self.background_embedding = nn.Parameter(torch.randn(text_dim) * 0.02)

    # ----------------------------------------------------------- features
    def encode(self, image: ImageTensor) -> FeatureBundle:
        _, inst_grid = self.instance_image_encoder.encode_image(image)
        ctx_cls, ctx_grid = self.context_image_encoder.encode_image(image)
        patch_ctx = None
        if self.context_source == "patch":
            layer = 1 if self.context_layer == "final" else self.context_layer
            _, patch_ctx = self.context_image_encoder.encode_image(image, layer_index=layer)
        return FeatureBundle(inst_grid, ctx_grid, ctx_cls, patch_ctx)

    # ----------------------------------------------------------- refinement
    def _context_tensor(self, grid: FeatureGrid) -> torch.Tensor:
        return torch.as_tensor(
            np.ascontiguousarray(grid.values), dtype=self.generator.dtype
        )

    def refine_embeddings(
        self, proposals: InstanceProposalSet, features: FeatureBundle, training: bool
    ) -> torch.Tensor:
        """Class embeddings after regional-context integration (identity when off)."""
        if not self.use_regional_context:
            return proposals.class_embeddings
        if self.context_source == "cls":
            context = torch.as_tensor(
                np.ascontiguousarray(features.context_cls.values), dtype=self.generator.dtype
            ).unsqueeze(0)
            return self.integrator(proposals.class_embeddings, context, paired=False)
        if self.context_source == "patch":
            grid = self._context_tensor(features.patch_context)
            tokens = grid.reshape(-1, grid.shape[-1])
            return self.integrator(proposals.class_embeddings, tokens, paired=False)
        masks = proposals.mask_logits.sigmoid()
        if not training:
            masks = (masks > 0.5).to(masks.dtype)
        expanded = self.dilation(masks)
        pooled = pool_regional_context(self._context_tensor(features.context_grid), expanded)
        return self.integrator(
            proposals.class_embeddings, pooled.vectors, paired=self.paired_context
        )

    # ----------------------------------------------------------- classifiers
    def adapted_classifier(self, classifier, features: FeatureBundle):
        """Per-image classifier matrix (text adaptation applied when enabled)."""
        matrix = classifier.matrix if isinstance(classifier, VocabularyEmbedding) else classifier
        matrix = torch.as_tensor(np.asarray(matrix), dtype=self.generator.dtype)
        if not self.use_text_adaptation:
            return matrix
        return self.adapter.adapt(matrix, features.context_cls).matrix

    def class_logits(
        self,
        embeddings: torch.Tensor,
        classifier_matrix: torch.Tensor,
        features: FeatureBundle,
        with_background: bool,
    ) -> torch.Tensor:
        """Cosine logits against the classifier, optionally + background slot."""
        rows = classifier_matrix
        bg = self.background_embedding.unsqueeze(0)
        if self.use_text_adaptation:
            embeddings = self.adapter.transform_embeddings(embeddings, features.context_cls)
            bg = self.adapter.transform_embeddings(bg, features.context_cls)
        if with_background:
            rows = torch.cat([rows, bg.to(rows.dtype)], dim=0)
        return classify(embeddings, rows, self.logit_temperature)

    # ----------------------------------------------------------- training path
    def training_forward(
        self, image: ImageTensor, features: FeatureBundle, classifier: VocabularyEmbedding
    ) -> tuple[InstanceProposalSet, torch.Tensor]:
        """Proposals plus (num_queries, M+1) training logits for one image."""
        proposals = self.generator(features.instance_grid, image.pixels)
        refined = self.refine_embeddings(proposals, features, training=True)
        matrix = self.adapted_classifier(classifier, features)
        logits = self.class_logits(refined, matrix, features, with_background=True)
        return proposals, logits

    # ----------------------------------------------------------- inference path
    @torch.no_grad()
    def infer(
        self,
        image: ImageTensor,
        classifier: VocabularyEmbedding,
        categories: CategorySet,
        score_threshold: float = 0.05,
        mask_threshold: float = 0.5,
        top_k: int = 100,
    ) -> SegmentationResult:
        features = self.encode(image)
        proposals = self.generator(features.instance_grid, image.pixels)
        refined = self.refine_embeddings(proposals, features, training=False)
        matrix = self.adapted_classifier(classifier, features)

        full = self.class_logits(refined, matrix, features, with_background=True)
        probs_full = full.softmax(dim=-1)
        p_bg = probs_full[:, -1]
        denom = (1.0 - p_bg).clamp_min(torch.finfo(probs_full.dtype).tiny)
        in_probs = probs_full[:, :-1] / denom.unsqueeze(1)

        ov_grid = (
            features.instance_grid
            if self.ensemble.ov_backbone == "general"
            else features.context_grid
        )
        mask_logits = proposals.mask_logits
        if mask_logits.shape[1:] != (image.height, image.width):
            mask_logits = torch.nn.functional.interpolate(
                mask_logits.unsqueeze(0),
                size=(image.height, image.width),
                mode="bilinear",
                align_corners=False,
            ).squeeze(0)
        pooled_transform = None
        if self.use_text_adaptation and self.adapter.fusion == "concat":
            pooled_transform = lambda v: self.adapter.transform_embeddings(  # noqa: E731
                v, features.context_cls
            )
        out_logits = _out_vocab(
            mask_logits, ov_grid, matrix, self.logit_temperature, mask_threshold,
            pooled_transform,
        )
        out_probs = out_logits.softmax(dim=-1)

        final = ensemble_scores(in_probs, out_probs, categories, self.ensemble)
        return postprocess(
            mask_logits,
            final,
            background_prob=p_bg,
            score_threshold=score_threshold,
            mask_threshold=mask_threshold,
            top_k=top_k,
        )


def _out_vocab(mask_logits, grid, matrix, temperature, mask_threshold, transform):
    if transform is None:
        return out_vocab_logits(mask_logits, grid, matrix, temperature, mask_threshold)
    masks = (mask_logits.sigmoid() > mask_threshold).to(mask_logits.dtype)
    grid_t = torch.as_tensor(np.ascontiguousarray(grid.values), dtype=mask_logits.dtype)
    pooled = pool_regional_context(grid_t, masks)
    return classify(transform(pooled.vectors), matrix, temperature)
