"""Training loop over frozen-encoder features with set-prediction losses.

Frozen encoders are deterministic, so per-image features are computed once
and cached. Each step matches proposals to ground truth, accumulates the
class/dice/bce losses over the batch, and takes one AdamW step. Runs are
reproducible bit for bit on a single worker: parameter init, data order,
and optimizer state all derive from the configured seed, and checkpoints
carry the RNG states so resumed runs continue the exact stream.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SegmentationDataset, preprocess
from .errors import NumericsError
from .model import FeatureBundle, SceneContextModel
from .proposals import LossWeights, compute_losses, hungarian_match
from .vocabulary import VocabularyEmbedding

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "Trainer", "PreparedSample", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    max_steps: int | None = None
    batch_size: int = 2
    learning_rate: float = 1.25e-5
    weight_decay: float = 1e-4
    loss_weights: LossWeights = LossWeights()
    image_size: int = 512
    num_threads: int = 1


@dataclass
class PreparedSample:
    image: object  # ImageTensor
    features: FeatureBundle
    gt_masks: torch.Tensor  # (g, h, w) float at mask-logit resolution
    gt_classes: torch.Tensor  # (g,) long


class Trainer:
    def __init__(
        self,
        model: SceneContextModel,
        dataset: SegmentationDataset,
        classifier: VocabularyEmbedding,
        config: TrainConfig = TrainConfig(),
        metrics_path: str | Path | None = None,
        checkpoint_path: str | Path | None = None,
        seed: int = 0,
    ):
        self.model = model
        self.config = config
        self.classifier = classifier
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        self.sampler = np.random.default_rng(seed)
        self.step = 0
        self.epoch = 0
        self.epoch_losses: list[float] = []
        torch.set_num_threads(config.num_threads)
        self.samples = self._prepare(dataset)

    def _prepare(self, dataset: SegmentationDataset) -> list[PreparedSample]:
        prepared = []
        divisor = self.model.generator.mask_stride
        for sample in dataset:
            image, instances = preprocess(
                sample.image, sample.instances, self.config.image_size, train=True
            )
            features = self.model.encode(image)
            h = image.height // divisor
            w = image.width // divisor
            masks = []
            classes = []
            for inst in instances:
                mask = inst.mask
                if mask.shape != (h, w):
                    from .data import resize_mask

                    mask = resize_mask(mask, (h, w))
                    if not mask.any():
                        continue
                masks.append(torch.as_tensor(mask, dtype=torch.float32))
                classes.append(inst.category_index)
            gt_masks = (
                torch.stack(masks) if masks else torch.zeros((0, h, w), dtype=torch.float32)
            )
            gt_classes = torch.as_tensor(classes, dtype=torch.long)
            prepared.append(PreparedSample(image, features, gt_masks, gt_classes))
        return prepared

    def _sample_loss(self, sample: PreparedSample) -> dict[str, torch.Tensor] | None:
        proposals, logits = self.model.training_forward(
            sample.image, sample.features, self.classifier
        )
        try:
            match = hungarian_match(
                proposals, logits, sample.gt_masks, sample.gt_classes,
                self.config.loss_weights,
            )
        except ValueError as exc:
            warnings.warn(f"skipping sample: {exc}")
            return None
        return compute_losses(
            proposals, logits, sample.gt_masks, sample.gt_classes, match,
            self.config.loss_weights,
        )

    def _log(self, record: dict) -> None:
        if self.metrics_path is None:
            return
        with self.metrics_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def run(self) -> list[float]:
        """Train to the configured epoch/step budget; returns per-epoch losses."""
        target_epochs = self.config.epochs
        while self.epoch < target_epochs:
            order = self.sampler.permutation(len(self.samples))
            epoch_total = 0.0
            batches = 0
            for start in range(0, len(order), self.config.batch_size):
                if self.config.max_steps is not None and self.step >= self.config.max_steps:
                    break
                idxs = order[start : start + self.config.batch_size]
                losses = []
                terms = {"class": 0.0, "dice": 0.0, "bce": 0.0}
                for i in idxs:
                    out = self._sample_loss(self.samples[int(i)])
                    if out is None:
                        continue
                    losses.append(out["total"])
                    for key in terms:
                        terms[key] += float(out[key].detach())
                if not losses:
                    continue
                batch_loss = torch.stack(losses).mean()
                if not torch.isfinite(batch_loss):
                    raise NumericsError(f"non-finite loss at step {self.step}")
                self.optimizer.zero_grad()
                batch_loss.backward()
                self.optimizer.step()
                self.step += 1
                batches += 1
                value = float(batch_loss.detach())
                epoch_total += value
                self._log(
                    {
                        "step": self.step,
                        "epoch": self.epoch,
                        "loss": value,
                        **{k: v / len(losses) for k, v in terms.items()},
                    }
                )
            self.epoch += 1
            mean_loss = epoch_total / max(batches, 1)
            self.epoch_losses.append(mean_loss)
            self._log({"epoch_summary": self.epoch, "mean_loss": mean_loss, "step": self.step})
            if self.checkpoint_path is not None:
                save_checkpoint(self, self.checkpoint_path)
            if self.config.max_steps is not None and self.step >= self.config.max_steps:
                break
        return self.epoch_losses

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "model_state": self.model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "sampler_state": self.sampler.bit_generator.state,
            "torch_rng_state": torch.get_rng_state(),
            "step": self.step,
            "epoch": self.epoch,
            "epoch_losses": self.epoch_losses,
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')}")
        self.model.load_state_dict(state["model_state"])
        self.optimizer.load_state_dict(state["optimizer_state"])
        self.sampler.bit_generator.state = state["sampler_state"]
        torch.set_rng_state(state["torch_rng_state"])
        self.step = int(state["step"])
        self.epoch = int(state["epoch"])
        self.epoch_losses = list(state["epoch_losses"])


def save_checkpoint(trainer: Trainer, path: str | Path, extra: dict | None = None) -> None:
    """Atomic write: the previous checkpoint survives a crash mid-save."""
    path = Path(path)
    payload = trainer.state_dict()
    if extra:
        payload["extra"] = extra
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload
