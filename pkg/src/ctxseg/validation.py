"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .encoders import ImageTensor
from .proposals import GroundTruthInstance

__all__ = ["as_image_tensor", "as_instances", "check_fitted_attrs"]


def as_image_tensor(x, source_id: str = "") -> ImageTensor:
    """Coerce an array-like or ImageTensor to a validated ImageTensor."""
    if isinstance(x, ImageTensor):
        return x
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.max() > 1.5:  # accept 8-bit inputs
        arr = arr / 255.0
    return ImageTensor(arr, source_id=source_id)


def as_instances(y) -> list[GroundTruthInstance]:
    """Coerce per-image labels to GroundTruthInstance objects.

    Accepts GroundTruthInstance, (mask, category_index) pairs, or dicts with
    ``mask`` and ``category_index`` keys.
    """
    out: list[GroundTruthInstance] = []
    for item in y:
        if isinstance(item, GroundTruthInstance):
            out.append(item)
        elif isinstance(item, dict):
            out.append(
                GroundTruthInstance(
                    mask=np.asarray(item["mask"], dtype=bool),
                    category_index=int(item["category_index"]),
                )
            )
        else:
            mask, idx = item
            out.append(GroundTruthInstance(mask=np.asarray(mask, dtype=bool),
                                           category_index=int(idx)))
    return out


def check_fitted_attrs(estimator, attrs: tuple[str, ...]) -> None:
    from sklearn.exceptions import NotFittedError

    missing = [a for a in attrs if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first "
            f"(missing {missing})"
        )
