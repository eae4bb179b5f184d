"""Frozen vision-language encoder contract.

Two encoder families feed the pipeline: a general-domain VLM backs the
instance branch (and the text classifier), and an aerial-domain VLM backs the
context branch. Both are frozen: they expose no trainable parameters and
their outputs are deterministic functions of the input.

A synthetic family makes the whole system testable without checkpoint files.
Its image side projects per-patch mean colors through a fixed random linear
map (seeded by the family name); its text side embeds prompts from per-word
hash vectors plus, for words naming a known color, the same linear map
applied to that color. Sharing the map is what aligns the two modalities,
so mask-pooled image features land near the text embedding of a
matching color word, mimicking contrastively trained encoder pairs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "ImageTensor",
    "FeatureGrid",
    "GlobalContextToken",
    "EncoderDescriptor",
    "SyntheticImageEncoder",
    "SyntheticTextEncoder",
    "make_synthetic_vlm",
    "HFCLIPImageEncoder",
    "HFCLIPTextEncoder",
    "resolve_vlm",
    "pad_to_multiple",
    "COLOR_LEXICON",
]

LayerIndex = int | Literal["final"]

# Word -> RGB grounding used by the synthetic text encoder. The synthetic
# dataset generator draws objects in these colors, closing the loop between
# category names and pixel content.
COLOR_LEXICON: dict[str, tuple[float, float, float]] = {
    "crimson": (0.86, 0.08, 0.24),
    "amber": (0.95, 0.65, 0.15),
    "olive": (0.50, 0.52, 0.13),
    "navy": (0.10, 0.15, 0.45),
    "teal": (0.10, 0.55, 0.55),
    "violet": (0.55, 0.20, 0.70),
    "charcoal": (0.20, 0.20, 0.22),
    "ivory": (0.95, 0.94, 0.88),
}

_GROUNDING_GAIN = 2.0


@dataclass(frozen=True)
class ImageTensor:
    """RGB image, float values in [0, 1], shape (height, width, 3)."""

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) pixels, got {px.shape}")
        if px.shape[0] <= 0 or px.shape[1] <= 0:
            raise ValueError("image must be non-empty")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class FeatureGrid:
    """Dense per-patch embeddings, shape (gh, gw, dim), with stride metadata."""

    values: np.ndarray
    patch_stride: int
    layer_index: LayerIndex = "final"

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ValueError(f"expected (gh, gw, dim) values, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature grid contains non-finite values")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    @property
    def dim(self) -> int:
        return int(self.values.shape[2])


@dataclass(frozen=True)
class GlobalContextToken:
    """Image-level pooled embedding, shape (dim,)."""

    values: np.ndarray
    layer_index: LayerIndex = "final"

    def __post_init__(self) -> None:
        if self.values.ndim != 1:
            raise ValueError(f"expected 1-D values, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("global token contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class EncoderDescriptor:
    name: str
    embedding_dim: int
    patch_stride: int
    modality: Literal["image", "text"]
    frozen: bool = field(default=True)

    def __post_init__(self) -> None:
        if self.embedding_dim <= 0:
            raise ConfigurationError("embedding_dim must be positive")
        if not self.frozen:
            raise ConfigurationError("encoders are frozen by contract")


def _seed_from(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def pad_to_multiple(pixels: np.ndarray, stride: int) -> np.ndarray:
    """Pad (h, w, 3) pixels up to the next multiple of ``stride`` per side.

    Reflect padding when the image is large enough, edge padding otherwise
    (reflect requires pad < dim).
    """
    h, w = pixels.shape[:2]
    pad_h = (-h) % stride
    pad_w = (-w) % stride
    if pad_h == 0 and pad_w == 0:
        return pixels
    mode = "reflect" if (pad_h < h and pad_w < w) else "edge"
    return np.pad(pixels, ((0, pad_h), (0, pad_w), (0, 0)), mode=mode)


def _patch_means(pixels: np.ndarray, stride: int) -> np.ndarray:
    """Mean RGB per (stride x stride) patch -> (gh, gw, 3)."""
    h, w = pixels.shape[:2]
    gh, gw = h // stride, w // stride
    blocks = pixels.reshape(gh, stride, gw, stride, 3)
    return blocks.mean(axis=(1, 3))


def _cell_means(pixels: np.ndarray, cells: int) -> np.ndarray:
    """Mean RGB over a cells x cells partition of the image (any size)."""
    h, w = pixels.shape[:2]
    ys = np.linspace(0, h, cells + 1).astype(int)
    xs = np.linspace(0, w, cells + 1).astype(int)
    out = np.zeros((cells, cells, 3), dtype=np.float64)
    for i in range(cells):
        y0, y1 = ys[i], max(ys[i + 1], ys[i] + 1)
        for j in range(cells):
            x0, x1 = xs[j], max(xs[j + 1], xs[j] + 1)
            out[i, j] = pixels[y0:y1, x0:x1].mean(axis=(0, 1))
    return out


class SyntheticImageEncoder:
    """Deterministic stand-in for a frozen ViT image tower.

    Patch grid: fixed random linear map of centered per-patch mean colors.
    Global token: mean of a second fixed projection of an 8x8 thumbnail.
    Intermediate layers get their own projection matrices so the
    layer-choice ablation has something to switch between.
    """

    THUMB = 8

    def __init__(self, name: str, embedding_dim: int, patch_stride: int, num_layers: int = 4):
        if patch_stride <= 0:
            raise ConfigurationError("patch_stride must be positive")
        self.descriptor = EncoderDescriptor(name, embedding_dim, patch_stride, "image")
        self.num_layers = num_layers
        rng = np.random.default_rng(_seed_from(name))
        scale = 1.0 / math.sqrt(3)
        self._w_patch = rng.standard_normal((3, embedding_dim)) * scale
        self._w_cls = rng.standard_normal((3, embedding_dim)) * scale
        self._w_layers = [
            rng.standard_normal((3, embedding_dim)) * scale for _ in range(num_layers - 1)
        ]

    @property
    def projection(self) -> np.ndarray:
        """The final-layer patch projection; shared with the paired text encoder."""
        return self._w_patch

    def _grid_projection(self, layer_index: LayerIndex) -> np.ndarray:
        if layer_index == "final" or layer_index == self.num_layers - 1:
            return self._w_patch
        if not 0 <= int(layer_index) < self.num_layers:
            raise ConfigurationError(
                f"layer_index {layer_index} out of range for {self.num_layers}-layer encoder"
            )
        return self._w_layers[int(layer_index)]

    def encode_image(
        self, image: ImageTensor, layer_index: LayerIndex = "final"
    ) -> tuple[GlobalContextToken, FeatureGrid]:
        stride = self.descriptor.patch_stride
        padded = pad_to_multiple(np.asarray(image.pixels, dtype=np.float64), stride)
        means = _patch_means(padded, stride) - 0.5
        grid = means @ self._grid_projection(layer_index)

        thumb = _cell_means(padded, self.THUMB) - 0.5
        cls = (thumb.reshape(-1, 3) @ self._w_cls).mean(axis=0)

        return (
            GlobalContextToken(cls.astype(np.float32)),
            FeatureGrid(grid.astype(np.float32), stride, layer_index),
        )


def _tokenize(prompt: str) -> list[str]:
    word = []
    out: list[str] = []
    for ch in prompt.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


class SyntheticTextEncoder:
    """Deterministic text tower paired with :class:`SyntheticImageEncoder`.

    A prompt embeds as the mean over its words of a per-word hash vector,
    plus the shared patch projection of the word's color when the word names
    one (see ``COLOR_LEXICON``). Purely lexical, but deterministic and
    aligned with the image side the way a contrastive text tower would be.
    """

    def __init__(self, name: str, embedding_dim: int, projection: np.ndarray):
        self.descriptor = EncoderDescriptor(name, embedding_dim, 1, "text")
        if projection.shape != (3, embedding_dim):
            raise ConfigurationError("projection must map RGB to embedding_dim")
        self._projection = projection
        self._salt = name

    def _word_vector(self, word: str) -> np.ndarray:
        rng = np.random.default_rng(_seed_from(f"{self._salt}|{word}"))
        vec = rng.standard_normal(self.descriptor.embedding_dim)
        if word in COLOR_LEXICON:
            rgb = np.asarray(COLOR_LEXICON[word], dtype=np.float64) - 0.5
            vec = vec + _GROUNDING_GAIN * (rgb @ self._projection)
        return vec

    def encode_text(self, prompts: list[str]) -> np.ndarray:
        if len(prompts) == 0:
            raise ValueError("prompts must be non-empty")
        rows = np.zeros((len(prompts), self.descriptor.embedding_dim), dtype=np.float64)
        for i, prompt in enumerate(prompts):
            words = _tokenize(prompt)
            if not words:
                words = ["<empty>"]
            rows[i] = np.mean([self._word_vector(w) for w in words], axis=0)
        return rows.astype(np.float32)


def make_synthetic_vlm(
    name: str, embedding_dim: int = 32, patch_stride: int = 8
) -> tuple[SyntheticImageEncoder, SyntheticTextEncoder]:
    """Build a paired (image, text) synthetic encoder family sharing one space."""
    image = SyntheticImageEncoder(f"{name}/image", embedding_dim, patch_stride)
    text = SyntheticTextEncoder(f"{name}/text", embedding_dim, image.projection)
    return image, text


class HFCLIPImageEncoder:
    """Adapter around a local ``transformers`` CLIP checkpoint (vision tower).

    Loads lazily so the dependency stays optional; the model is frozen and
    switched to eval mode. Uses the checkpoint's native preprocessing.
    """

    def __init__(self, checkpoint_path: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise ConfigurationError("checkpoint adapters require transformers") from exc
        self._torch = torch
        self._model = CLIPModel.from_pretrained(checkpoint_path)
        self._model.eval()
        self._model.requires_grad_(False)
        self._processor = CLIPProcessor.from_pretrained(checkpoint_path)
        cfg = self._model.config.vision_config
        self.descriptor = EncoderDescriptor(
            f"clip:{checkpoint_path}", int(self._model.config.projection_dim),
            int(cfg.patch_size), "image",
        )

    def encode_image(
        self, image: ImageTensor, layer_index: LayerIndex = "final"
    ) -> tuple[GlobalContextToken, FeatureGrid]:
        if layer_index != "final":
            raise ConfigurationError("checkpoint adapter exposes only the final layer")
        torch = self._torch
        arr = (np.asarray(image.pixels) * 255).astype(np.uint8)
        inputs = self._processor(images=arr, return_tensors="pt")
        with torch.no_grad():
            out = self._model.vision_model(**inputs)
            cls = self._model.visual_projection(out.pooler_output)[0]
            patches = self._model.visual_projection(out.last_hidden_state[0, 1:])
        n = patches.shape[0]
        side = int(round(math.sqrt(n)))
        grid = patches.reshape(side, side, -1).numpy().astype(np.float32)
        return (
            GlobalContextToken(cls.numpy().astype(np.float32)),
            FeatureGrid(grid, self.descriptor.patch_stride),
        )


class HFCLIPTextEncoder:
    def __init__(self, checkpoint_path: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise ConfigurationError("checkpoint adapters require transformers") from exc
        self._torch = torch
        self._model = CLIPModel.from_pretrained(checkpoint_path)
        self._model.eval()
        self._model.requires_grad_(False)
        self._processor = CLIPProcessor.from_pretrained(checkpoint_path)
        self.descriptor = EncoderDescriptor(
            f"clip:{checkpoint_path}", int(self._model.config.projection_dim), 1, "text"
        )

    def encode_text(self, prompts: list[str]) -> np.ndarray:
        if len(prompts) == 0:
            raise ValueError("prompts must be non-empty")
        torch = self._torch
        inputs = self._processor(text=list(prompts), return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats.numpy().astype(np.float32)


def resolve_vlm(spec: str):
    """Resolve an encoder family spec string to an (image, text) encoder pair.

    ``synthetic:<name>[:dim[:stride]]`` builds the deterministic family;
    ``clip:<path>`` wraps a local checkpoint directory.
    """
    parts = spec.split(":")
    kind = parts[0]
    if kind == "synthetic":
        if len(parts) < 2 or not parts[1]:
            raise ConfigurationError(f"bad synthetic encoder spec {spec!r}")
        name = parts[1]
        dim = int(parts[2]) if len(parts) > 2 else 32
        stride = int(parts[3]) if len(parts) > 3 else 8
        return make_synthetic_vlm(name, dim, stride)
    if kind == "clip":
        path = spec.split(":", 1)[1]
        return HFCLIPImageEncoder(path), HFCLIPTextEncoder(path)
    raise ConfigurationError(f"unknown encoder kind {kind!r} in {spec!r}")


def trainable_parameters(encoder) -> list:
    """Parameters an optimizer would see for this encoder: empty, by contract."""
    params = getattr(encoder, "parameters", None)
    if params is None:
        return []
    return [p for p in params() if p.requires_grad]
