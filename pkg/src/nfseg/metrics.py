"""Evaluation: detection rate over convex hulls, mask IoU, clustering accuracy.

Detection follows the bounding-box overlap criterion: a hull counts as a
detection of a ground-truth box when the intersection covers more than half
of the box and exceeds the hull area lying outside it. Mask IoU compares
rasterized, dilated label masks against ground-truth masks. Clustering
accuracy scores a labeling against per-observation source ids under the
best injective label-to-source matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .core import Labeling, SegmentationResult, Window
from .errors import AlignmentError, DimensionMismatch, InactiveLabel

Box = tuple[float, float, float, float]


def convex_hull(points) -> np.ndarray:
    """Convex hull polygon of a point set, counter-clockwise.

    Collinear interior vertices are dropped. Degenerate inputs yield a
    1-vertex (point) or 2-vertex (segment) polygon.
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if pts.shape[0] == 0:
        raise ValueError("hull of an empty point set")
    if pts.shape[0] == 1:
        return pts
    # np.unique sorts lexicographically, as the monotone chain needs.
    def half(points_iter):
        chain: list[np.ndarray] = []
        for p in points_iter:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if hull.shape[0] < 2:  # all points collinear: keep the two extremes
        return np.array([pts[0], pts[-1]])
    return hull


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon (absolute value)."""
    p = np.asarray(poly, dtype=float)
    if p.shape[0] < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon_to_box(poly: np.ndarray, box: Box) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against an axis-aligned box."""
    x0, y0, x1, y1 = box
    planes = (
        (lambda p: p[0] >= x0, lambda a, b: _x_cross(a, b, x0)),
        (lambda p: p[0] <= x1, lambda a, b: _x_cross(a, b, x1)),
        (lambda p: p[1] >= y0, lambda a, b: _y_cross(a, b, y0)),
        (lambda p: p[1] <= y1, lambda a, b: _y_cross(a, b, y1)),
    )
    out = [tuple(p) for p in np.asarray(poly, dtype=float)]
    for inside, cross in planes:
        if not out:
            break
        nxt = []
        for i, cur in enumerate(out):
            prev = out[i - 1]
            if inside(cur):
                if not inside(prev):
                    nxt.append(cross(prev, cur))
                nxt.append(cur)
            elif inside(prev):
                nxt.append(cross(prev, cur))
        out = nxt
    return np.array(out).reshape(-1, 2)


def _x_cross(a, b, x):
    t = (x - a[0]) / (b[0] - a[0])
    return (x, a[1] + t * (b[1] - a[1]))


def _y_cross(a, b, y):
    t = (y - a[1]) / (b[1] - a[1])
    return (a[0] + t * (b[0] - a[0]), y)


def detection_success(hull: np.ndarray, gt_box: Box) -> bool:
    """Overlap test of a detection hull against a ground-truth box.

    True when the intersection covers more than half the box area and
    exceeds the hull area falling outside the box. Degenerate hulls and
    zero-area boxes never succeed.
    """
    box_area = max(gt_box[2] - gt_box[0], 0.0) * max(gt_box[3] - gt_box[1], 0.0)
    hull_area = polygon_area(hull)
    if box_area <= 0.0 or hull_area <= 0.0:
        return False
    inter = polygon_area(clip_polygon_to_box(hull, gt_box))
    return (inter / box_area > 0.5) and (inter > hull_area - inter)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two boolean masks; empty vs empty is 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return inter / union


def box_iou(a: Box, b: Box) -> float:
    """IoU of two axis-aligned rectangles."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix1 - ix0, 0.0) * max(iy1 - iy0, 0.0)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def rasterize_label(
    result: SegmentationResult,
    window: Window,
    label: int,
    dilate_r: int = 3,
) -> np.ndarray:
    """Boolean sensor-sized mask of a label's members, dilated by dilate_r."""
    if label not in result.labeling.active_labels:
        raise InactiveLabel(f"label {label} has no members")
    h, w = window.sensor_height, window.sensor_width
    mask = np.zeros((h, w), dtype=bool)
    members = result.labeling.members(label)
    px = np.clip(np.rint(window.xy[members, 0]).astype(int), 0, w - 1)
    py = np.clip(np.rint(window.xy[members, 1]).astype(int), 0, h - 1)
    mask[py, px] = True
    if dilate_r > 0:
        mask = ndimage.binary_dilation(mask, structure=np.ones((1, 2 * dilate_r + 1), bool))
        mask = ndimage.binary_dilation(mask, structure=np.ones((2 * dilate_r + 1, 1), bool))
    return mask


def clustering_accuracy(labeling: Labeling, gt_sources: np.ndarray) -> float:
    """Best-matching agreement between a labeling and ground-truth sources.

    Maximizes the fraction of agreeing observations over injective
    label-to-source matchings (Hungarian assignment on the contingency
    table). Raises AlignmentError unless the records align one-to-one.
    """
    gt = np.asarray(gt_sources).astype(np.int64).ravel()
    assignment = labeling.assignment
    if gt.size != assignment.size:
        raise AlignmentError(f"{assignment.size} observations vs {gt.size} ground-truth records")
    if gt.size == 0:
        return 1.0
    labels = np.unique(assignment)
    sources = np.unique(gt)
    li = np.searchsorted(labels, assignment)
    si = np.searchsorted(sources, gt)
    contingency = np.zeros((labels.size, sources.size), dtype=np.int64)
    np.add.at(contingency, (li, si), 1)
    rows, cols = linear_sum_assignment(contingency, maximize=True)
    return float(contingency[rows, cols].sum()) / gt.size


@dataclass(frozen=True)
class DetectionOutcome:
    """Detection bookkeeping for one sequence of windows.

    ``matched`` holds one flag per ground-truth object instance;
    ``matched_hulls`` the first hull that satisfied the criterion (None for
    misses); ``rate`` the fraction of matched instances.
    """

    matched: tuple[bool, ...]
    matched_hulls: tuple
    rate: float

    @classmethod
    def evaluate(cls, per_object: list[tuple[bool, np.ndarray | None]]) -> "DetectionOutcome":
        if not per_object:
            return cls(matched=(), matched_hulls=(), rate=0.0)
        flags = tuple(ok for ok, _ in per_object)
        hulls = tuple(h for _, h in per_object)
        return cls(matched=flags, matched_hulls=hulls, rate=sum(flags) / len(flags))


def detection_outcome(
    results: list[tuple[SegmentationResult, Window]],
    gt_boxes_per_window: list[list[Box]],
) -> DetectionOutcome:
    """Detection rate of segmentation results against per-window truth boxes.

    Every ground-truth box instance counts once; it is matched when any
    non-background cluster's convex hull satisfies the overlap criterion.
    """
    per_object: list[tuple[bool, np.ndarray | None]] = []
    for (result, window), gt_boxes in zip(results, gt_boxes_per_window):
        hulls = []
        for label in sorted(result.labeling.active_labels):
            if label == result.background_label:
                continue
            members = result.labeling.members(label)
            if members.size == 0:
                continue
            hulls.append(convex_hull(window.xy[members]))
        for box in gt_boxes:
            hit = next((h for h in hulls if detection_success(h, box)), None)
            per_object.append((hit is not None, hit))
    return DetectionOutcome.evaluate(per_object)
