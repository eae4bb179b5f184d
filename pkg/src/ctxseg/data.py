"""Dataset ingestion, preprocessing, and synthetic aerial-style scenes.

The synthetic generator is the test bed for the whole system. Every image
contains two background textures (water and pavement). Two categories,
"cargo barge" and "freight trailer", are rendered as the *same* light-gray
elongated rectangle; barges only ever sit on water, trailers only on
pavement, so nothing but the surrounding texture separates them. Two more
categories are color-coded ellipses ("amber depot", "crimson arena") whose
names the synthetic text encoder grounds, giving the out-vocabulary path a
real signal for held-out categories.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rle
from .encoders import ImageTensor
from .errors import FormatError
from .proposals import GroundTruthInstance
from .vocabulary import CategorySet, load_category_file

logger = logging.getLogger(__name__)

__all__ = [
    "DatasetDescriptor",
    "SyntheticSceneSpec",
    "SegmentationDataset",
    "load_dataset",
    "resize_image",
    "resize_mask",
    "preprocess",
    "generate_synthetic",
    "SYNTHETIC_CATEGORIES",
]

MAX_SKIP_FRACTION = 0.01


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    images_dir: str
    annotations_path: str
    category_file: str
    role: str = "eval"  # train | eval

    def validate(self) -> None:
        for p in (self.images_dir, self.annotations_path, self.category_file):
            if not Path(p).exists():
                raise FormatError(f"dataset {self.name}: missing path {p}")


@dataclass
class Sample:
    image: ImageTensor
    instances: list[GroundTruthInstance]
    image_id: int
    native_size: tuple[int, int]


class SegmentationDataset:
    """In-memory COCO-style dataset with categories remapped to file order."""

    def __init__(self, descriptor: DatasetDescriptor, categories: CategorySet,
                 samples: list[Sample]):
        self.descriptor = descriptor
        self.categories = categories
        self.samples = samples

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx: int) -> Sample:
        return self.samples[idx]


def _decode_ann(ann: dict, height: int, width: int) -> np.ndarray:
    segm = ann["segmentation"]
    if isinstance(segm, dict):
        return rle.decode(segm)
    if isinstance(segm, list):
        return rle.polygon_to_mask(segm, height, width)
    raise FormatError(f"annotation {ann.get('id')}: unsupported segmentation type")


def load_dataset(
    descriptor: DatasetDescriptor, train_names: list[str] | None = None
) -> SegmentationDataset:
    """Read a COCO-format dataset; corrupt annotations are skipped with a
    warning, but more than 1% skipped is a hard error."""
    descriptor.validate()
    split_tag = "train" if descriptor.role == "train" else "test"
    categories = load_category_file(
        descriptor.category_file, split_tag=split_tag, train_names=train_names
    )
    coco = json.loads(Path(descriptor.annotations_path).read_text())
    name_by_id = {c["id"]: c["name"] for c in coco["categories"]}
    unknown_names = sorted(set(name_by_id.values()) - set(categories.names))
    if unknown_names:
        raise FormatError(
            f"dataset {descriptor.name}: annotation categories {unknown_names} "
            "missing from the category file"
        )
    index_by_id = {cid: categories.index_of(name) for cid, name in name_by_id.items()}

    anns_by_image: dict[int, list[dict]] = {}
    for ann in coco["annotations"]:
        anns_by_image.setdefault(ann["image_id"], []).append(ann)

    samples: list[Sample] = []
    total = 0
    skipped = 0
    for img in sorted(coco["images"], key=lambda i: i["id"]):
        path = Path(descriptor.images_dir) / img["file_name"]
        pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        instances: list[GroundTruthInstance] = []
        for ann in anns_by_image.get(img["id"], []):
            total += 1
            try:
                mask = _decode_ann(ann, img["height"], img["width"])
                instances.append(
                    GroundTruthInstance(mask=mask, category_index=index_by_id[ann["category_id"]])
                )
            except (KeyError, ValueError) as exc:
                skipped += 1
                logger.warning("skipping annotation %s: %s", ann.get("id"), exc)
        samples.append(
            Sample(
                image=ImageTensor(pixels, source_id=img["file_name"]),
                instances=instances,
                image_id=int(img["id"]),
                native_size=(int(img["height"]), int(img["width"])),
            )
        )
    if total and skipped / total > MAX_SKIP_FRACTION:
        raise FormatError(
            f"dataset {descriptor.name}: {skipped}/{total} annotations unreadable"
        )
    return SegmentationDataset(descriptor, categories, samples)


def resize_image(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (h, w, 3) float pixels to (height, width)."""
    h, w = size
    if pixels.shape[:2] == (h, w):
        return pixels
    img = Image.fromarray((np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8))
    out = img.resize((w, h), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32) / 255.0


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a boolean mask (no fractional labels)."""
    h, w = size
    if mask.shape == (h, w):
        return mask.astype(bool)
    img = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(img.resize((w, h), Image.NEAREST)) > 127


def preprocess(
    image: ImageTensor,
    instances: list[GroundTruthInstance],
    target_size: int,
    train: bool = True,
) -> tuple[ImageTensor, list[GroundTruthInstance]]:
    """Resize a sample to the square training resolution.

    Masks resize nearest-neighbor; instances whose mask empties out at the
    target resolution are dropped (train path only; they cannot be
    supervised). The eval path keeps the native size on the sample and maps
    predictions back before scoring.
    """
    size = (target_size, target_size)
    pixels = resize_image(image.pixels, size)
    out: list[GroundTruthInstance] = []
    for inst in instances:
        mask = resize_mask(inst.mask, size)
        if not mask.any():
            if train:
                logger.warning("instance vanished at %dpx, dropping", target_size)
                continue
            raise FormatError("instance mask empty after resize in eval path")
        out.append(GroundTruthInstance(mask=mask, category_index=inst.category_index))
    return ImageTensor(pixels, source_id=image.source_id), out


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

SYNTHETIC_CATEGORIES: list[dict] = [
    {"name": "cargo barge", "shape": "rect", "fill": (0.82, 0.82, 0.80),
     "background": "water", "elongated": True},
    {"name": "freight trailer", "shape": "rect", "fill": (0.82, 0.82, 0.80),
     "background": "pavement", "elongated": True},
    {"name": "amber depot", "shape": "ellipse", "fill": (0.95, 0.65, 0.15),
     "background": None, "elongated": False},
    {"name": "crimson arena", "shape": "ellipse", "fill": (0.86, 0.08, 0.24),
     "background": None, "elongated": False},
]


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    image_size: int = 64
    num_train: int = 16
    num_eval: int = 8
    holdout: tuple[str, ...] = ()
    min_instances: int = 2
    max_instances: int = 3
    noise: float = 0.01

    def __post_init__(self) -> None:
        known = {c["name"] for c in SYNTHETIC_CATEGORIES}
        bad = [h for h in self.holdout if h not in known]
        if bad:
            raise ValueError(f"unknown holdout categories: {bad}")


def _water_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = np.array([0.12, 0.22, 0.50])
    img = np.tile(base, (h, w, 1))
    ys = np.arange(h)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.05 * np.sin(2 * np.pi * ys / 7.0 + phase)
    img[..., 2] += 0.03 * np.cos(2 * np.pi * ys / 11.0 + phase)
    img += rng.normal(0.0, 0.015, size=(h, w, 3))
    return img


def _pavement_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = np.array([0.46, 0.46, 0.47])
    img = np.tile(base, (h, w, 1))
    img += rng.normal(0.0, 0.03, size=(h, w, 1))  # gray speckle
    img += rng.normal(0.0, 0.008, size=(h, w, 3))
    return img


def _raster_shape(
    shape: str, y0: int, x0: int, height: int, width: int, size: int
) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if shape == "rect":
        mask[y0 : y0 + height, x0 : x0 + width] = True
        return mask
    cy, cx = y0 + (height - 1) / 2.0, x0 + (width - 1) / 2.0
    ry, rx = height / 2.0, width / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
    return mask


def _place_instance(
    rng: np.random.Generator,
    cat: dict,
    region: tuple[int, int, int, int],
    occupied: np.ndarray,
    size: int,
) -> np.ndarray | None:
    """Try to place one instance inside (y0, y1, x0, x1); None if it won't fit."""
    ry0, ry1, rx0, rx1 = region
    for _ in range(40):
        if cat["elongated"]:
            long_side = int(rng.integers(18, 30))
            short_side = int(rng.integers(6, 11))
            if rng.random() < 0.5:
                h, w = short_side, long_side
            else:
                h, w = long_side, short_side
        else:
            h = int(rng.integers(12, 24))
            w = int(rng.integers(12, 24))
        if ry1 - ry0 - h <= 0 or rx1 - rx0 - w <= 0:
            continue
        y0 = int(rng.integers(ry0, ry1 - h))
        x0 = int(rng.integers(rx0, rx1 - w))
        mask = _raster_shape(cat["shape"], y0, x0, h, w, size)
        if not mask.any():
            continue
        grown = np.zeros_like(mask)
        gy0, gy1 = max(y0 - 2, 0), min(y0 + h + 2, size)
        gx0, gx1 = max(x0 - 2, 0), min(x0 + w + 2, size)
        grown[gy0:gy1, gx0:gx1] = True
        if (grown & occupied).any():
            continue
        occupied |= grown
        return mask
    return None


def _bbox(mask: np.ndarray) -> list[float]:
    ys, xs = np.nonzero(mask)
    return [float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1),
            float(ys.max() - ys.min() + 1)]


def _render_split(
    spec: SyntheticSceneSpec,
    split: str,
    num_images: int,
    categories: list[dict],
    out_dir: Path,
) -> tuple[dict, dict[str, int]]:
    size = spec.image_size
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    coco = {
        "images": [],
        "annotations": [],
        "categories": [{"id": i + 1, "name": c["name"]} for i, c in enumerate(categories)],
    }
    cat_index = {c["name"]: i for i, c in enumerate(categories)}
    counts = {c["name"]: 0 for c in categories}
    ann_id = 1
    split_id = 0 if split == "train" else 1
    for idx in range(num_images):
        rng = np.random.default_rng([spec.seed, split_id, idx])
        horizontal = rng.random() < 0.5
        frac = rng.uniform(0.42, 0.58)
        cut = int(round(frac * size))
        water_first = rng.random() < 0.5

        canvas = np.zeros((size, size, 3))
        regions: dict[str, tuple[int, int, int, int]] = {}
        if horizontal:
            a, b = (slice(0, cut), slice(cut, size))
            first_region = (2, cut - 2, 2, size - 2)
            second_region = (cut + 2, size - 2, 2, size - 2)
            canvas[a, :, :] = (_water_texture if water_first else _pavement_texture)(rng, cut, size)
            canvas[b, :, :] = (_pavement_texture if water_first else _water_texture)(rng, size - cut, size)
        else:
            a, b = (slice(0, cut), slice(cut, size))
            first_region = (2, size - 2, 2, cut - 2)
            second_region = (2, size - 2, cut + 2, size - 2)
            canvas[:, a, :] = (_water_texture if water_first else _pavement_texture)(rng, size, cut)
            canvas[:, b, :] = (_pavement_texture if water_first else _water_texture)(rng, size, size - cut)
        regions["water"] = first_region if water_first else second_region
        regions["pavement"] = second_region if water_first else first_region

        num_instances = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        occupied = np.zeros((size, size), dtype=bool)
        placed: list[tuple[int, np.ndarray]] = []
        for j in range(num_instances):
            if j == 0:
                cat = categories[idx % len(categories)]  # every category recurs
            else:
                cat = categories[int(rng.integers(0, len(categories)))]
            region = regions[cat["background"]] if cat["background"] else (
                regions["water"] if rng.random() < 0.5 else regions["pavement"]
            )
            mask = _place_instance(rng, cat, region, occupied, size)
            if mask is None:
                continue
            fill = np.asarray(cat["fill"]) + rng.normal(0.0, 0.015, size=3)
            canvas[mask] = fill
            placed.append((cat_index[cat["name"]], mask))

        canvas += rng.normal(0.0, spec.noise, size=canvas.shape)
        canvas = np.clip(canvas, 0.0, 1.0)
        file_name = f"{split}_{idx:04d}.png"
        Image.fromarray((canvas * 255).astype(np.uint8)).save(images_dir / file_name)
        image_id = idx + 1
        coco["images"].append(
            {"id": image_id, "file_name": file_name, "height": size, "width": size}
        )
        for cat_idx, mask in placed:
            encoded = rle.encode(mask)
            coco["annotations"].append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": cat_idx + 1,
                    "segmentation": encoded,
                    "area": int(mask.sum()),
                    "bbox": _bbox(mask),
                    "iscrowd": 0,
                }
            )
            counts[categories[cat_idx]["name"]] += 1
            ann_id += 1

    (out_dir / "annotations.json").write_text(json.dumps(coco, sort_keys=True))
    names = [c["name"] for c in categories]
    (out_dir / "categories.json").write_text(json.dumps(names))
    return coco, counts


def generate_synthetic(
    spec: SyntheticSceneSpec, out_dir: str | Path
) -> tuple[DatasetDescriptor, DatasetDescriptor, dict]:
    """Write a deterministic two-texture micro-dataset; returns descriptors.

    Held-out categories are neither drawn nor listed in the train split (an
    unlabeled object would wrongly supervise queries toward background);
    the eval split always carries the full vocabulary.
    """
    out_dir = Path(out_dir)
    train_cats = [c for c in SYNTHETIC_CATEGORIES if c["name"] not in spec.holdout]
    eval_cats = list(SYNTHETIC_CATEGORIES)
    _, train_counts = _render_split(spec, "train", spec.num_train, train_cats, out_dir / "train")
    _, eval_counts = _render_split(spec, "eval", spec.num_eval, eval_cats, out_dir / "eval")
    manifest = {
        "seed": spec.seed,
        "image_size": spec.image_size,
        "holdout": list(spec.holdout),
        "train_instance_counts": train_counts,
        "eval_instance_counts": eval_counts,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    train_desc = DatasetDescriptor(
        name="synthetic-train",
        images_dir=str(out_dir / "train" / "images"),
        annotations_path=str(out_dir / "train" / "annotations.json"),
        category_file=str(out_dir / "train" / "categories.json"),
        role="train",
    )
    eval_desc = DatasetDescriptor(
        name="synthetic-eval",
        images_dir=str(out_dir / "eval" / "images"),
        annotations_path=str(out_dir / "eval" / "annotations.json"),
        category_file=str(out_dir / "eval" / "categories.json"),
        role="eval",
    )
    return train_desc, eval_desc, manifest
