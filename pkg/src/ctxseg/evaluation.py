"""COCO-style mask mAP over IoU thresholds 0.50:0.05:0.95.

Implements the standard recipe: per category, detections are matched to
ground truth greedily in score order at each IoU threshold (best IoU wins,
first on ties), precision is made monotone non-increasing and sampled at
101 recall points, and mAP averages over thresholds then categories.
Categories with no ground-truth instances are excluded from the mean.
Reports also break out base vs. novel categories for open-vocabulary runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rle
from .errors import EvaluationError
from .vocabulary import CategorySet

__all__ = ["mask_iou", "evaluate", "EvalReport", "IOU_THRESHOLDS", "MAX_DETECTIONS"]

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when the union is empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class EvalReport:
    map_all: float
    ap50: float
    map_base: float
    map_novel: float
    map_per_category: dict[str, float]
    num_images: int
    num_instances: int
    num_predictions: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map_all": self.map_all,
            "ap50": self.ap50,
            "map_base": self.map_base,
            "map_novel": self.map_novel,
            "map_per_category": self.map_per_category,
            "counts": {
                "images": self.num_images,
                "instances": self.num_instances,
                "predictions": self.num_predictions,
            },
            **self.extras,
        }


def _decode_segmentation(segm, height: int, width: int) -> np.ndarray:
    if isinstance(segm, dict):
        return rle.decode(segm)
    if isinstance(segm, list):
        return rle.polygon_to_mask(segm, height, width)
    raise EvaluationError(f"unsupported segmentation payload of type {type(segm)!r}")


def _match_single_threshold(
    ious: np.ndarray, threshold: float, num_gt: int
) -> np.ndarray:
    """Greedy score-order matching; returns the matched gt index or -1 per det."""
    num_det = ious.shape[0]
    gt_taken = np.full(num_gt, False)
    det_match = np.full(num_det, -1, dtype=int)
    for d in range(num_det):
        best = min(threshold, 1.0 - 1e-10)
        best_g = -1
        for g in range(num_gt):
            if gt_taken[g]:
                continue
            if ious[d, g] < best:
                continue
            best = ious[d, g]
            best_g = g
        if best_g >= 0:
            gt_taken[best_g] = True
            det_match[d] = best_g
    return det_match


def _average_precision(scores: np.ndarray, matched: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from global score-sorted match flags."""
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(matched[order])
    fp = np.cumsum(~matched[order])
    recall = tp / num_gt
    precision = tp / (tp + fp + np.spacing(1))
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    sampled = np.zeros(len(RECALL_POINTS))
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = inds < len(precision)
    sampled[valid] = precision[inds[valid]]
    return float(sampled.mean())


def evaluate(
    predictions: list[dict],
    annotations: dict,
    categories: CategorySet | None = None,
    max_detections: int = MAX_DETECTIONS,
) -> EvalReport:
    """Score COCO-format results against COCO-format ground truth.

    ``predictions`` is the standard results list (image_id, category_id,
    segmentation, score); ``annotations`` the GT dict with images,
    annotations, and categories. When ``categories`` is given, its names
    must cover the GT category names and its base mask drives the
    base/novel breakdown.
    """
    images = {img["id"]: img for img in annotations["images"]}
    cat_by_id = {c["id"]: c["name"] for c in annotations["categories"]}

    unknown = sorted({p["category_id"] for p in predictions} - set(cat_by_id))
    if unknown:
        raise EvaluationError(f"predictions reference unknown category ids: {unknown}")
    missing_imgs = sorted({p["image_id"] for p in predictions} - set(images))
    if missing_imgs:
        raise EvaluationError(f"predictions reference unknown image ids: {missing_imgs}")

    if categories is not None:
        missing = sorted(set(cat_by_id.values()) - set(categories.names))
        if missing:
            raise EvaluationError(f"category set lacks ground-truth names: {missing}")
        base_by_name = dict(zip(categories.names, categories.base_mask))
    else:
        base_by_name = {name: True for name in cat_by_id.values()}

    gt_by_img_cat: dict[tuple[int, int], list[np.ndarray]] = {}
    num_instances = 0
    for ann in annotations["annotations"]:
        img = images[ann["image_id"]]
        mask = _decode_segmentation(ann["segmentation"], img["height"], img["width"])
        gt_by_img_cat.setdefault((ann["image_id"], ann["category_id"]), []).append(mask)
        num_instances += 1

    det_by_img_cat: dict[tuple[int, int], list[dict]] = {}
    for pred in predictions:
        det_by_img_cat.setdefault((pred["image_id"], pred["category_id"]), []).append(pred)

    num_thresholds = len(IOU_THRESHOLDS)
    ap_table: dict[int, np.ndarray] = {}
    for cat_id in sorted(cat_by_id):
        gt_count = sum(
            len(gt_by_img_cat.get((img_id, cat_id), ())) for img_id in images
        )
        if gt_count == 0:
            continue
        all_scores: list[float] = []
        all_matched: list[np.ndarray] = []  # (num_thresholds,) bool per det
        for img_id in sorted(images):
            dets = det_by_img_cat.get((img_id, cat_id), [])
            gts = gt_by_img_cat.get((img_id, cat_id), [])
            if not dets:
                continue
            scores = np.asarray([d["score"] for d in dets], dtype=np.float64)
            order = np.argsort(-scores, kind="mergesort")[:max_detections]
            img = images[img_id]
            det_masks = [
                _decode_segmentation(dets[i]["segmentation"], img["height"], img["width"])
                for i in order
            ]
            ious = np.zeros((len(det_masks), len(gts)))
            for di, dm in enumerate(det_masks):
                for gi, gm in enumerate(gts):
                    ious[di, gi] = mask_iou(dm, gm)
            matched = np.zeros((len(det_masks), num_thresholds), dtype=bool)
            for ti, thr in enumerate(IOU_THRESHOLDS):
                matched[:, ti] = _match_single_threshold(ious, float(thr), len(gts)) >= 0
            all_scores.extend(scores[order].tolist())
            all_matched.extend(matched)
        aps = np.zeros(num_thresholds)
        if all_scores:
            score_arr = np.asarray(all_scores)
            match_arr = np.stack(all_matched, axis=0)
            for ti in range(num_thresholds):
                aps[ti] = _average_precision(score_arr, match_arr[:, ti], gt_count)
        ap_table[cat_id] = aps

    per_category = {cat_by_id[cid]: float(aps.mean()) for cid, aps in ap_table.items()}
    if ap_table:
        stacked = np.stack(list(ap_table.values()))
        map_all = float(stacked.mean())
        ap50 = float(stacked[:, 0].mean())
    else:
        map_all = 0.0
        ap50 = 0.0

    base_vals = [v for name, v in per_category.items() if base_by_name.get(name, True)]
    novel_vals = [v for name, v in per_category.items() if not base_by_name.get(name, True)]
    return EvalReport(
        map_all=map_all,
        ap50=ap50,
        map_base=float(np.mean(base_vals)) if base_vals else 0.0,
        map_novel=float(np.mean(novel_vals)) if novel_vals else 0.0,
        map_per_category=per_category,
        num_images=len(images),
        num_instances=num_instances,
        num_predictions=len(predictions),
    )
