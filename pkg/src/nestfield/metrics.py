"""Localization, segmentation IoU and segment-retrieval metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .query import RelevancyMap

DEFAULT_THRESHOLD = 0.5


def argmax_pixel(values: np.ndarray) -> tuple[int, int]:
    """(x, y) of the maximum; ties go to the lowest row-major index."""
    y, x = np.unravel_index(int(np.argmax(values)), values.shape)
    return int(x), int(y)


def localization_hit(rel: RelevancyMap | np.ndarray, box) -> bool:
    """True iff the highest-relevancy pixel lies in the closed box (x0, y0, x1, y1)."""
    values = rel.values if isinstance(rel, RelevancyMap) else np.asarray(rel)
    x, y = argmax_pixel(values)
    x0, y0, x1, y1 = box
    return bool(x0 <= x <= x1 and y0 <= y <= y1)


def binarize(rel: RelevancyMap | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Min-max normalize over pixels with a defined relevancy (> 0) and threshold.

    Pixels without any rendered embedding score exactly 0 and are never positive.
    """
    values = rel.values if isinstance(rel, RelevancyMap) else np.asarray(rel)
    live = values > 0
    if not live.any():
        return np.zeros(values.shape, dtype=bool)
    lo, hi = values[live].min(), values[live].max()
    if hi <= lo:
        return live.copy()
    return live & ((values - lo) / (hi - lo) >= threshold)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou(rel: RelevancyMap | np.ndarray, mask: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> float:
    """IoU of the binarized relevancy map against a ground-truth mask."""
    return iou(binarize(rel, threshold), mask)


def segment_scores(rel: RelevancyMap | np.ndarray, pool: Sequence[np.ndarray]) -> np.ndarray:
    """Mean relevancy over each segment's pixels."""
    values = rel.values if isinstance(rel, RelevancyMap) else np.asarray(rel)
    return np.array([values[np.asarray(m, dtype=bool)].mean() if np.any(m) else 0.0 for m in pool])


def retrieval_rank(rel: RelevancyMap | np.ndarray, pool: Sequence[np.ndarray], gt_index: int) -> int:
    """1-based rank of the ground-truth segment; ties broken by segment id."""
    scores = segment_scores(rel, pool)
    order = np.lexsort((np.arange(scores.size), -scores))
    return int(np.nonzero(order == gt_index)[0][0]) + 1


def retrieval_hit(rel, pool, gt_index: int, k: int) -> bool:
    return retrieval_rank(rel, pool, gt_index) <= k


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return 0.0
    return float(np.mean(ranks <= k))
