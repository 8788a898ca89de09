"""Candidate motion models for a window.

Two sources: greedy farthest-point sampling of translation seeds straight
from the normal-flow vectors, and motion-predicted models carried over from
the previous window's moving-object regions. When predictions exist the
sampler emits 6 models, otherwise 12; an identity model is always appended
as a background seed so near-static windows have a low-cost label available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import AffineMotionModel, SegmentationResult, Window
from .errors import EmptyWindow, InsufficientObservations, NonFinite
from .fitting import fit_nonlinear

DEFAULT_D_MIN = 1.0          # px/window, sampling diversity floor
DEFAULT_R_GROW = 3           # px, region-growing dilation radius
DEFAULT_MIN_CLUSTER = 30     # observations, smallest trackable cluster
DEFAULT_MIN_BOX_AREA = 25.0  # px^2, smallest surviving predicted box
SAMPLES_WITH_PREDICTIONS = 6
SAMPLES_WITHOUT_PREDICTIONS = 12

Box = tuple[float, float, float, float]  # x0, y0, x1, y1


@dataclass(frozen=True)
class CandidateSet:
    models: tuple[AffineMotionModel, ...]
    provenance: tuple[str, ...]  # "predicted" | "sampled" | "identity"

    def __post_init__(self):
        if len(self.models) != len(self.provenance):
            raise ValueError("models and provenance must align")

    def __len__(self) -> int:
        return len(self.models)

    def count(self, kind: str) -> int:
        return sum(1 for p in self.provenance if p == kind)


@dataclass(frozen=True)
class TrackedIMO:
    """A moving-object cluster carried from the previous window."""

    label: int
    model: AffineMotionModel
    box: Box
    member_count: int


def fast_sample(window: Window, n: int, d_min: float = DEFAULT_D_MIN) -> CandidateSet:
    """Pick up to ``n`` mutually distant flow vectors as translation seeds.

    Greedy farthest-point selection in flow space: the first pick is the
    largest-magnitude vector, each following pick maximizes its minimum
    distance to the picks so far, and selection stops early once that
    distance falls below ``d_min``. Every pick becomes a model with unit
    scale, zero rotation and the vector as translation.
    """
    if len(window) == 0:
        raise EmptyWindow("cannot sample candidates from an empty window")
    if n < 1:
        raise ValueError("sample count must be >= 1")
    flow = window.flow
    mags = np.einsum("ij,ij->i", flow, flow)
    first = int(np.argmax(mags))
    picks = [first]
    min_dist_sq = np.einsum("ij,ij->i", flow - flow[first], flow - flow[first])
    while len(picks) < n:
        nxt = int(np.argmax(min_dist_sq))
        if min_dist_sq[nxt] < d_min * d_min:
            break
        picks.append(nxt)
        d = np.einsum("ij,ij->i", flow - flow[nxt], flow - flow[nxt])
        np.minimum(min_dist_sq, d, out=min_dist_sq)
    models = tuple(
        AffineMotionModel(rho=1.0, theta=0.0, t_x=float(flow[i, 0]), t_y=float(flow[i, 1]))
        for i in picks
    )
    return CandidateSet(models=models, provenance=("sampled",) * len(models))


def grow_imo_boxes(
    result: SegmentationResult,
    window: Window,
    r_grow: int = DEFAULT_R_GROW,
    min_cluster_size: int = DEFAULT_MIN_CLUSTER,
) -> list[TrackedIMO]:
    """Bounding boxes of the non-background clusters, grown and cleaned.

    Each sufficiently large cluster is rasterized, dilated by ``r_grow``
    pixels (Chebyshev ball), and reduced to its largest connected component;
    the returned box is that component's tight bounding box. Box edges use
    the pixel convention (max index + 1), so areas count pixels.
    """
    out: list[TrackedIMO] = []
    assignment = result.labeling.assignment
    w, h = window.sensor_width, window.sensor_height
    for label in sorted(result.labeling.active_labels):
        if label == result.background_label:
            continue
        members = np.flatnonzero(assignment == label)
        if members.size < min_cluster_size:
            continue
        px = np.clip(np.rint(window.xy[members, 0]).astype(int), 0, w - 1)
        py = np.clip(np.rint(window.xy[members, 1]).astype(int), 0, h - 1)
        x0, x1 = px.min(), px.max()
        y0, y1 = py.min(), py.max()
        # Work on a crop with an r_grow margin; dilation cannot escape it.
        cx0, cy0 = max(0, x0 - r_grow), max(0, y0 - r_grow)
        cx1, cy1 = min(w - 1, x1 + r_grow), min(h - 1, y1 + r_grow)
        grid = np.zeros((cy1 - cy0 + 1, cx1 - cx0 + 1), dtype=bool)
        grid[py - cy0, px - cx0] = True
        if r_grow > 0:
            grid = ndimage.binary_dilation(grid, structure=np.ones((1, 2 * r_grow + 1), bool))
            grid = ndimage.binary_dilation(grid, structure=np.ones((2 * r_grow + 1, 1), bool))
        components, n_comp = ndimage.label(grid)
        if n_comp == 0:
            continue
        if n_comp == 1:
            keep = 1
        else:
            # Largest component by contained member count, ties to lower id.
            member_comp = components[py - cy0, px - cx0]
            counts = np.bincount(member_comp, minlength=n_comp + 1)
            keep = int(np.argmax(counts[1:])) + 1
        ys, xs = np.nonzero(components == keep)
        box = (
            float(xs.min() + cx0),
            float(ys.min() + cy0),
            float(xs.max() + cx0) + 1.0,
            float(ys.max() + cy0) + 1.0,
        )
        out.append(
            TrackedIMO(label=label, model=result.models[label], box=box, member_count=int(members.size))
        )
    return out


def predict_boxes(
    tracked: list[TrackedIMO],
    dt: float,
    window_duration: float,
    sensor_width: int,
    sensor_height: int,
    min_area: float = DEFAULT_MIN_BOX_AREA,
) -> list[tuple[Box, AffineMotionModel]]:
    """Translate tracked boxes forward by their models, clamped to the sensor.

    Boxes move by the model translation scaled by dt / window_duration;
    boxes whose clamped area drops below ``min_area`` are dropped.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    scale = dt / window_duration
    out = []
    for imo in tracked:
        dx, dy = imo.model.t_x * scale, imo.model.t_y * scale
        x0 = min(max(imo.box[0] + dx, 0.0), float(sensor_width))
        y0 = min(max(imo.box[1] + dy, 0.0), float(sensor_height))
        x1 = min(max(imo.box[2] + dx, 0.0), float(sensor_width))
        y1 = min(max(imo.box[3] + dy, 0.0), float(sensor_height))
        if (x1 - x0) * (y1 - y0) < min_area:
            continue
        out.append(((x0, y0, x1, y1), imo.model))
    return out


def build_candidates(
    window: Window,
    predicted: list[tuple[Box, AffineMotionModel]],
    d_min: float = DEFAULT_D_MIN,
    tau: float = 1.0,
    truncate: bool = True,
) -> CandidateSet:
    """Assemble the candidate model set for one window.

    Each predicted box contributes a model refit on the observations inside
    it (seeded by the prior model, skipped below 4 observations), then
    fast sampling adds 6 seeds when any prediction survived and 12
    otherwise, and the identity background seed closes the list.
    """
    if len(window) == 0:
        raise EmptyWindow("cannot build candidates for an empty window")
    models: list[AffineMotionModel] = []
    provenance: list[str] = []
    x, y = window.xy[:, 0], window.xy[:, 1]
    for box, prior in predicted:
        inside = (x >= box[0]) & (x < box[2]) & (y >= box[1]) & (y < box[3])
        if int(inside.sum()) < 4:
            continue
        try:
            report = fit_nonlinear(
                (window.xy[inside], window.flow[inside]), prior, tau=tau, truncate=truncate
            )
        except (InsufficientObservations, NonFinite):
            continue
        models.append(report.model)
        provenance.append("predicted")

    n = SAMPLES_WITH_PREDICTIONS if models else SAMPLES_WITHOUT_PREDICTIONS
    sampled = fast_sample(window, n, d_min=d_min)
    models.extend(sampled.models)
    provenance.extend(sampled.provenance)

    models.append(AffineMotionModel(rho=1.0, theta=0.0, t_x=0.0, t_y=0.0))
    provenance.append("identity")
    return CandidateSet(models=tuple(models), provenance=tuple(provenance))
