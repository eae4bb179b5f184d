"""Text classifier construction from category names.

Each category name is substituted into every prompt template, the prompt
embeddings are averaged per category, and the averaged row is L2-normalized.
Train and test vocabularies are separate objects so cross-dataset evaluation
never retrains: a test vocabulary only needs names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import FormatError

__all__ = [
    "CategorySet",
    "VocabularyEmbedding",
    "build_classifier",
    "load_category_file",
    "load_templates",
    "default_templates",
]


@dataclass(frozen=True)
class CategorySet:
    """Ordered category names with a train/test tag and per-name base flags.

    ``base_mask[j]`` is true iff ``names[j]`` appears in the training
    vocabulary; novel categories carry false.
    """

    names: tuple[str, ...]
    split_tag: Literal["train", "test"]
    base_mask: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise FormatError(f"duplicate category names: {dupes}")
        if len(self.base_mask) != len(self.names):
            raise FormatError("base_mask length must match names length")

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_names(
        cls,
        names: Sequence[str],
        split_tag: Literal["train", "test"] = "train",
        train_names: Sequence[str] | None = None,
    ) -> "CategorySet":
        if train_names is None:
            base = tuple(True for _ in names) if split_tag == "train" else tuple(False for _ in names)
        else:
            known = set(train_names)
            base = tuple(n in known for n in names)
        return cls(tuple(names), split_tag, base)


@dataclass(frozen=True)
class VocabularyEmbedding:
    """Unit-row classifier matrix (num categories x embedding dim)."""

    matrix: np.ndarray
    category_set: CategorySet
    template_count: int

    def __post_init__(self) -> None:
        if self.matrix.shape[0] != len(self.category_set):
            raise ValueError("one classifier row per category required")

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


def build_classifier(
    text_encoder, categories: CategorySet, templates: Sequence[str]
) -> VocabularyEmbedding:
    """Encode every (template, category) prompt, average per category, normalize."""
    if len(templates) == 0:
        raise ValueError("templates must be non-empty")
    for t in templates:
        if t.count("{}") != 1:
            raise ValueError(f"template must contain exactly one '{{}}' placeholder: {t!r}")
    prompts = [t.format(name) for name in categories.names for t in templates]
    rows = text_encoder.encode_text(prompts).astype(np.float64)
    rows = rows.reshape(len(categories), len(templates), -1).mean(axis=1)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if (norms == 0).any():
        bad = [categories.names[i] for i in np.flatnonzero(norms[:, 0] == 0)]
        raise ValueError(f"zero-norm text embedding for categories: {bad}")
    matrix = (rows / norms).astype(np.float32)
    return VocabularyEmbedding(matrix, categories, len(templates))


def load_category_file(
    path: str | Path,
    split_tag: Literal["train", "test"] = "train",
    train_names: Sequence[str] | None = None,
) -> CategorySet:
    """Read a JSON array of category names into an ordered :class:`CategorySet`."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, list) or not all(isinstance(n, str) for n in data):
        raise FormatError(f"{path}: expected a JSON array of strings")
    if len(data) == 0:
        raise FormatError(f"{path}: category file is empty")
    return CategorySet.from_names(data, split_tag=split_tag, train_names=train_names)


def load_templates(path: str | Path) -> list[str]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list) or not all(isinstance(t, str) for t in data):
        raise FormatError(f"{path}: expected a JSON array of template strings")
    return data


def default_templates() -> list[str]:
    """The bundled aerial/satellite prompt template set."""
    text = resources.files("ctxseg.resources").joinpath("templates_remote_sensing.json").read_text()
    return json.loads(text)
