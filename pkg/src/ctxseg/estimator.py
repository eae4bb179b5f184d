"""Scikit-learn style estimator wrapping the full segmentation pipeline.

``fit`` trains the proposal generator and both context modules against a
training vocabulary; ``predict`` segments images against any vocabulary,
including names never seen in training. Constructor arguments follow
sklearn conventions (stored verbatim, learned state in trailing-underscore
attributes), so ``get_params``/``set_params``/``clone`` compose with the
wider ecosystem.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .data import DatasetDescriptor, SegmentationDataset, load_dataset, preprocess, resize_mask
from .encoders import resolve_vlm
from .errors import ConfigurationError
from .evaluation import EvalReport, evaluate
from .inference import EnsembleConfig, SegmentationResult
from .model import SceneContextModel
from .proposals import LossWeights
from .trainer import TrainConfig, Trainer
from .validation import as_image_tensor, as_instances, check_fitted_attrs
from .vocabulary import CategorySet, VocabularyEmbedding, build_classifier, default_templates
from . import rle

__all__ = ["OpenVocabSegmenter"]


class OpenVocabSegmenter(BaseEstimator):
    """Open-vocabulary instance segmenter with scene-context refinement.

    Parameters mirror the run configuration: encoder family specs, proposal
    generator size, the two context-module toggles, ensemble weights, and
    the training protocol defaults (epochs=50, batch size 2, AdamW at
    1.25e-5). Desk-scale runs override image_size/num_queries/learning_rate.
    """

    def __init__(
        self,
        instance_vlm: str = "synthetic:toy-general:32:8",
        context_vlm: str = "synthetic:toy-rs:32:8",
        image_size: int = 512,
        num_queries: int = 300,
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
        epochs: int = 50,
        max_steps: int | None = None,
        batch_size: int = 2,
        learning_rate: float = 1.25e-5,
        weight_decay: float = 1e-4,
        class_loss_weight: float = 2.0,
        dice_loss_weight: float = 5.0,
        bce_loss_weight: float = 5.0,
        no_object_weight: float = 0.1,
        alpha: float = 0.4,
        beta: float = 0.8,
        ov_backbone: str = "general",
        score_threshold: float = 0.05,
        mask_threshold: float = 0.5,
        top_k: int = 100,
        templates: list[str] | None = None,
        seed: int = 0,
    ):
        self.instance_vlm = instance_vlm
        self.context_vlm = context_vlm
        self.image_size = image_size
        self.num_queries = num_queries
        self.hidden_dim = hidden_dim
        self.decoder_layers = decoder_layers
        self.decoder_heads = decoder_heads
        self.mask_dim = mask_dim
        self.mask_stride = mask_stride
        self.use_regional_context = use_regional_context
        self.use_text_adaptation = use_text_adaptation
        self.context_source = context_source
        self.context_layer = context_layer
        self.paired_context = paired_context
        self.integration_layers = integration_layers
        self.integration_heads = integration_heads
        self.integration_temperature = integration_temperature
        self.gca_heads = gca_heads
        self.gca_fusion = gca_fusion
        self.gca_direction = gca_direction
        self.gca_gate_init = gca_gate_init
        self.logit_temperature = logit_temperature
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.class_loss_weight = class_loss_weight
        self.dice_loss_weight = dice_loss_weight
        self.bce_loss_weight = bce_loss_weight
        self.no_object_weight = no_object_weight
        self.alpha = alpha
        self.beta = beta
        self.ov_backbone = ov_backbone
        self.score_threshold = score_threshold
        self.mask_threshold = mask_threshold
        self.top_k = top_k
        self.templates = templates
        self.seed = seed

    # ------------------------------------------------------------ building
    def _templates(self) -> list[str]:
        return list(self.templates) if self.templates is not None else default_templates()

    def _ensemble(self) -> EnsembleConfig:
        return EnsembleConfig(alpha=self.alpha, beta=self.beta, ov_backbone=self.ov_backbone)

    def _loss_weights(self) -> LossWeights:
        return LossWeights(
            class_weight=self.class_loss_weight,
            dice_weight=self.dice_loss_weight,
            bce_weight=self.bce_loss_weight,
            no_object_weight=self.no_object_weight,
        )

    def build_model(self) -> SceneContextModel:
        """Construct encoders and the (seeded) trainable head without fitting."""
        instance_pair = resolve_vlm(self.instance_vlm)
        context_pair = resolve_vlm(self.context_vlm)
        torch.manual_seed(self.seed)
        return SceneContextModel(
            instance_encoders=instance_pair,
            context_encoders=context_pair,
            num_queries=self.num_queries,
            hidden_dim=self.hidden_dim,
            decoder_layers=self.decoder_layers,
            decoder_heads=self.decoder_heads,
            mask_dim=self.mask_dim,
            mask_stride=self.mask_stride,
            use_regional_context=self.use_regional_context,
            use_text_adaptation=self.use_text_adaptation,
            context_source=self.context_source,
            context_layer=self.context_layer,
            paired_context=self.paired_context,
            integration_layers=self.integration_layers,
            integration_heads=self.integration_heads,
            integration_temperature=self.integration_temperature,
            gca_heads=self.gca_heads,
            gca_fusion=self.gca_fusion,
            gca_direction=self.gca_direction,
            gca_gate_init=self.gca_gate_init,
            logit_temperature=self.logit_temperature,
            ensemble=self._ensemble(),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            loss_weights=self._loss_weights(),
            image_size=self.image_size,
        )

    # ------------------------------------------------------------ fitting
    def fit(
        self,
        X,
        y=None,
        categories=None,
        metrics_path=None,
        checkpoint_path=None,
    ):
        """Train on a dataset descriptor, a loaded dataset, or (X, y) lists.

        ``categories`` (names or a CategorySet) is required for raw (X, y)
        input; datasets carry their own category files.
        """
        dataset = self._coerce_training_data(X, y, categories)
        self.categories_ = dataset.categories
        self.model_ = self.build_model()
        self.classifier_ = build_classifier(
            self.model_.instance_text_encoder, self.categories_, self._templates()
        )
        trainer = Trainer(
            self.model_,
            dataset,
            self.classifier_,
            self._train_config(),
            metrics_path=metrics_path,
            checkpoint_path=checkpoint_path,
            seed=self.seed,
        )
        self.history_ = trainer.run()
        self.trainer_ = trainer
        return self

    def _coerce_training_data(self, X, y, categories) -> SegmentationDataset:
        if isinstance(X, SegmentationDataset):
            return X
        if isinstance(X, DatasetDescriptor):
            return load_dataset(X)
        if categories is None:
            raise ConfigurationError("categories required when fitting from arrays")
        cats = (
            categories
            if isinstance(categories, CategorySet)
            else CategorySet.from_names(list(categories), split_tag="train")
        )
        from .data import Sample

        samples = []
        for i, (img, inst) in enumerate(zip(X, y)):
            image = as_image_tensor(img, source_id=f"array_{i}")
            samples.append(
                Sample(
                    image=image,
                    instances=as_instances(inst),
                    image_id=i + 1,
                    native_size=(image.height, image.width),
                )
            )
        descriptor = DatasetDescriptor(
            name="in-memory", images_dir="", annotations_path="", category_file="", role="train"
        )
        return SegmentationDataset(descriptor, cats, samples)

    # ------------------------------------------------------------ inference
    def _test_categories(self, categories) -> CategorySet:
        if categories is None:
            return self.categories_
        if isinstance(categories, CategorySet):
            return categories
        return CategorySet.from_names(
            list(categories), split_tag="test", train_names=self.categories_.names
        )

    def predict(self, X, categories=None) -> list[SegmentationResult]:
        """Segment images against the given (possibly novel) vocabulary.

        Masks come back at each input image's native resolution.
        """
        check_fitted_attrs(self, ("model_", "classifier_"))
        cats = self._test_categories(categories)
        classifier = self._classifier_for(cats)
        results = []
        for i, item in enumerate(X):
            image = as_image_tensor(item, source_id=f"predict_{i}")
            native = (image.height, image.width)
            resized, _ = preprocess(image, [], self.image_size, train=False)
            result = self.model_.infer(
                resized,
                classifier,
                cats,
                score_threshold=self.score_threshold,
                mask_threshold=self.mask_threshold,
                top_k=self.top_k,
            )
            if native != (self.image_size, self.image_size):
                for inst in result.instances:
                    inst.mask = resize_mask(inst.mask, native)
            results.append(result)
        return results

    def _classifier_for(self, cats: CategorySet) -> VocabularyEmbedding:
        if hasattr(self, "categories_") and cats.names == self.categories_.names:
            return self.classifier_
        return build_classifier(self.model_.instance_text_encoder, cats, self._templates())

    def score_dataset(self, dataset: DatasetDescriptor | SegmentationDataset) -> EvalReport:
        """Cross-dataset evaluation: predict every image, score with mask mAP."""
        check_fitted_attrs(self, ("model_", "classifier_"))
        if isinstance(dataset, DatasetDescriptor):
            dataset = load_dataset(dataset, train_names=list(self.categories_.names))
        annotations = json.loads(Path(dataset.descriptor.annotations_path).read_text())
        cats = dataset.categories
        if cats.split_tag != "test":
            cats = CategorySet.from_names(
                cats.names, split_tag="test", train_names=self.categories_.names
            )
        predictions = self.predictions_as_coco(dataset, cats)
        return evaluate(predictions, annotations, cats)

    def predictions_as_coco(self, dataset: SegmentationDataset, cats=None) -> list[dict]:
        """Run inference over a dataset and emit COCO-format result dicts."""
        check_fitted_attrs(self, ("model_", "classifier_"))
        cats = self._test_categories(cats if cats is not None else dataset.categories)
        annotations = json.loads(Path(dataset.descriptor.annotations_path).read_text())
        id_by_name = {c["name"]: c["id"] for c in annotations["categories"]}
        predictions: list[dict] = []
        for sample in dataset:
            [result] = self.predict([sample.image], categories=cats)
            for inst in result.instances:
                name = cats.names[inst.category_index]
                if name not in id_by_name:
                    continue
                predictions.append(
                    {
                        "image_id": sample.image_id,
                        "category_id": id_by_name[name],
                        "segmentation": rle.encode(inst.mask),
                        "score": float(inst.score),
                    }
                )
        return predictions
