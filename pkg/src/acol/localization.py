"""From a normalized localization map to a box, and boxes to error rates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "BBox",
    "LocMetrics",
    "SamplePrediction",
    "segment_foreground",
    "largest_connected_component",
    "tight_bbox",
    "iou",
    "map_to_box",
    "evaluate",
    "write_metrics",
    "write_sample_details",
]

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, v: Sequence[int]) -> "BBox":
        return cls(*(int(a) for a in v))

    def within(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height


def segment_foreground(m: np.ndarray, tau_rel: float = 0.2) -> np.ndarray:
    """Pixels strictly above ``tau_rel * max(m)``; an all-zero map has no foreground."""
    if not 0.0 < tau_rel < 1.0:
        raise ValueError(f"tau_rel must lie in (0, 1), got {tau_rel}")
    m = np.asarray(m)
    peak = m.max()
    if peak <= 0:
        return np.zeros(m.shape, dtype=bool)
    return m > tau_rel * peak


def largest_connected_component(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Boolean mask of the largest connected component (empty if ``mask`` is).

    ``ndimage.label`` numbers components in raster order of their first
    pixel, so taking the first maximum breaks size ties toward the component
    with the smallest row-major pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if count == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def tight_bbox(component: np.ndarray, image_size: tuple[int, int] | int | None = None) -> BBox | None:
    """Tight box of a component mask, scaled from map to image coordinates.

    ``image_size`` is ``(height, width)``. Box corners are scaled by
    ``image / map`` and rounded outward. An empty component returns None,
    which callers score as a failed localization.
    """
    component = np.asarray(component, dtype=bool)
    rows = np.flatnonzero(component.any(axis=1))
    cols = np.flatnonzero(component.any(axis=0))
    if rows.size == 0:
        return None
    mh, mw = component.shape
    if image_size is None:
        ih, iw = mh, mw
    elif isinstance(image_size, int):
        ih = iw = image_size
    else:
        ih, iw = image_size
    sy, sx = ih / mh, iw / mw
    return BBox(
        math.floor(cols[0] * sx),
        math.floor(rows[0] * sy),
        min(iw, math.ceil((cols[-1] + 1) * sx)),
        min(ih, math.ceil((rows[-1] + 1) * sy)),
    )


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union by pixel area."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = iw * ih if iw > 0 and ih > 0 else 0
    return inter / (a.area + b.area - inter)


def map_to_box(m: np.ndarray, tau_rel: float = 0.2, connectivity: int = 8) -> BBox | None:
    """Threshold, keep the largest blob, return its tight box (map coordinates)."""
    comp = largest_connected_component(segment_foreground(m, tau_rel), connectivity)
    return tight_bbox(comp)


@dataclass
class SamplePrediction:
    """Ranked category guesses with one box per guess.

    ``gt_known_box`` is the box extracted from the true category's map.
    Boxes may be None for failed extraction.
    """

    guesses: list[int]
    boxes: list[BBox | None]
    gt_known_box: BBox | None = None


@dataclass
class LocMetrics:
    top1_loc_err: float
    topk_loc_err: float
    gt_known_loc_err: float
    cls_err: float
    n_samples: int
    k: int = 5
    details: list[dict] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        # the top-k field keeps its conventional name; "top_k" records the k used
        return {
            "top1_loc_err": self.top1_loc_err,
            "top5_loc_err": self.topk_loc_err,
            "gt_known_loc_err": self.gt_known_loc_err,
            "cls_err": self.cls_err,
            "n": self.n_samples,
            "top_k": self.k,
        }


def _hit(box: BBox | None, gt: BBox, thresh: float) -> tuple[bool, float]:
    if box is None:
        return False, 0.0
    v = iou(box, gt)
    return v > thresh, v


def evaluate(
    predictions: Sequence[SamplePrediction],
    ground_truth: Sequence[tuple[int, BBox]],
    k: int = 5,
    k_box: int | None = None,
    iou_thresh: float = 0.5,
) -> LocMetrics:
    """Top-1, top-k and GT-known localization error plus top-1 classification error.

    A sample is correct for top-k localization when one of its first ``k``
    guesses has the true category and a box with IoU strictly above
    ``iou_thresh``. ``k_box`` (<= k) limits which guesses carry a box.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(
            f"{len(predictions)} predictions but {len(ground_truth)} ground-truth records"
        )
    if k < 1:
        raise ValueError("k must be >= 1")
    k_box = k if k_box is None else min(k_box, k)
    n = len(predictions)
    if n == 0:
        raise ValueError("no samples to evaluate")
    top1 = topk = gtk = cls = 0
    details = []
    for idx, (pred, gt) in enumerate(zip(predictions, ground_truth)):
        if gt is None:
            raise ValueError(f"sample {idx} has no ground truth")
        label, gt_box = gt
        if len(pred.guesses) < k:
            raise ValueError(f"sample {idx} has {len(pred.guesses)} guesses, need {k}")
        ok1, iou1 = _hit(pred.boxes[0], gt_box, iou_thresh)
        cls_ok = pred.guesses[0] == label
        top1 += cls_ok and ok1
        cls += cls_ok
        rank = None
        for r in range(min(k, k_box)):
            if pred.guesses[r] == label and _hit(pred.boxes[r], gt_box, iou_thresh)[0]:
                rank = r
                break
        topk += rank is not None
        okg, ioug = _hit(pred.gt_known_box, gt_box, iou_thresh)
        gtk += okg
        details.append(
            {
                "index": idx,
                "label": int(label),
                "pred": int(pred.guesses[0]),
                "pred_box": pred.boxes[0].as_list() if pred.boxes[0] else None,
                "gt_box": gt_box.as_list(),
                "iou": iou1,
                "gt_known_box": pred.gt_known_box.as_list() if pred.gt_known_box else None,
                "gt_known_iou": ioug,
                "hit_rank": rank,
            }
        )
    return LocMetrics(
        top1_loc_err=1 - top1 / n,
        topk_loc_err=1 - topk / n,
        gt_known_loc_err=1 - gtk / n,
        cls_err=1 - cls / n,
        n_samples=n,
        k=k,
        details=details,
    )


def write_metrics(metrics: LocMetrics, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(metrics.to_json(), indent=2) + "\n")
    return path


def write_sample_details(metrics: LocMetrics, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for row in metrics.details:
            fh.write(json.dumps(row) + "\n")
    return path

