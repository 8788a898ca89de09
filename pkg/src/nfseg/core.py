"""Domain types shared by all modules, plus affine-model evaluation.

Everything here is an immutable value; array fields are marked read-only so
instances can be shared freely between workers.

Units convention: observation flow vectors are stored in px per window once a
window has been assembled (flow files on disk carry px/s; the windowing step
multiplies by the window duration). Affine models describe the warp of one
window, so their translations are px per window as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateModel, ZeroNormalFlow

THETA_MIN = -math.pi / 2  # exclusive
THETA_MAX = math.pi / 2   # inclusive

_RHO_FLOOR = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


def float_repr(value) -> str:
    """Shortest decimal representation that parses back to the same float.

    Text formats write every real number through this so that a
    write -> read -> write cycle is byte identical.
    """
    return repr(float(value))


@dataclass(frozen=True)
class NormalFlowObservation:
    """One timestamped pixel location with a 2D normal-flow vector."""

    x: float
    y: float
    t: float
    n: np.ndarray  # shape (2,)

    def __post_init__(self):
        object.__setattr__(self, "n", _readonly(np.asarray(self.n, dtype=float)))
        if self.n.shape != (2,):
            raise ValueError("normal flow must be a 2-vector")
        if not math.isfinite(self.t):
            raise ValueError("timestamp must be finite")


@dataclass(frozen=True)
class AffineMotionModel:
    """4-parameter image-plane motion model: scale, rotation, 2D translation.

    ``theta`` is restricted to (-pi/2, pi/2], the principal branch of the
    arcsin used when recovering parameters from the linearized vector form.
    """

    rho: float = 1.0
    theta: float = 0.0
    t_x: float = 0.0
    t_y: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise ValueError(f"rho must be finite and > 0, got {self.rho}")
        if not (THETA_MIN < self.theta <= THETA_MAX):
            raise ValueError(f"theta must lie in (-pi/2, pi/2], got {self.theta}")
        if not (math.isfinite(self.t_x) and math.isfinite(self.t_y)):
            raise ValueError("translation must be finite")

    def params(self) -> tuple[float, float, float, float]:
        return (self.rho, self.theta, self.t_x, self.t_y)

    def warp_minus_identity(self) -> np.ndarray:
        """The 2x3 matrix mapping homogeneous (x, y, 1) to the flow it induces."""
        c = self.rho * math.cos(self.theta)
        s = self.rho * math.sin(self.theta)
        return np.array([[c - 1.0, -s, self.t_x], [s, c - 1.0, self.t_y]])


@dataclass(frozen=True)
class ModelVector:
    """6-entry linearized form of an affine model.

    Entries (1-based): (rho*cos(theta)-1, -rho*sin(theta), t_x,
    rho*sin(theta), rho*cos(theta)-1, t_y). Entries 1 and 5 coincide by
    construction when built from a model; raw vectors from a linear solve
    may violate that and are accepted as-is.
    """

    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", _readonly(np.asarray(self.m, dtype=float)))
        if self.m.shape != (6,):
            raise ValueError("model vector must have 6 entries")

    @classmethod
    def from_model(cls, model: AffineMotionModel) -> "ModelVector":
        v = cls(_model_vector(model))
        assert v.m[0] == v.m[4], "entries 1 and 5 must coincide for a model-built vector"
        return v


def _model_vector(model: AffineMotionModel) -> np.ndarray:
    c = model.rho * math.cos(model.theta)
    s = model.rho * math.sin(model.theta)
    return np.array([c - 1.0, -s, model.t_x, s, c - 1.0, model.t_y])


def to_vector(model: AffineMotionModel) -> ModelVector:
    """Linearize an affine model into its 6-entry vector form."""
    return ModelVector.from_model(model)


def decouple_model(vec: ModelVector | np.ndarray) -> AffineMotionModel:
    """Recover (rho, theta, t_x, t_y) from a 6-entry model vector.

    Inverse of :func:`to_vector` on the domain rho > 0, theta in
    (-pi/2, pi/2). Raises DegenerateModel when the recovered scale factor
    is below 1e-9, where the angle is undefined.
    """
    m = vec.m if isinstance(vec, ModelVector) else np.asarray(vec, dtype=float)
    if m.shape != (6,):
        raise ValueError("model vector must have 6 entries")
    cos_part = (m[0] + m[4]) / 2.0 + 1.0
    sin_part = (m[1] - m[3]) / 2.0
    rho = math.hypot(cos_part, sin_part)
    if rho < _RHO_FLOOR:
        raise DegenerateModel(f"scale factor {rho} below {_RHO_FLOOR}")
    arg = (m[3] - m[1]) / (2.0 * rho)
    # |arg| <= 1 up to rounding because rho majorizes the sine component.
    arg = min(1.0, max(-1.0, arg))
    theta = math.asin(arg)
    return AffineMotionModel(rho=rho, theta=theta, t_x=float(m[2]), t_y=float(m[5]))


def affine_flow(model: AffineMotionModel, x: Sequence[float] | np.ndarray) -> np.ndarray:
    """Flow induced by ``model`` at pixel position(s) ``x``.

    ``x`` may be a single (2,) position or an (n, 2) array; the result has
    the same shape. Units are px per window.
    """
    xy = np.asarray(x, dtype=float)
    w = model.warp_minus_identity()
    if xy.ndim == 1:
        return w[:, :2] @ xy + w[:, 2]
    return xy @ w[:, :2].T + w[:, 2]


def flow_residual(n: Sequence[float] | np.ndarray, u: Sequence[float] | np.ndarray) -> float:
    """Normal-flow constraint residual n.u - |n|^2 for a single observation.

    Zero exactly when the component of the full flow ``u`` along the
    normal direction equals the normal flow's magnitude.
    """
    n = np.asarray(n, dtype=float)
    u = np.asarray(u, dtype=float)
    nsq = float(n @ n)
    if nsq == 0.0:
        raise ZeroNormalFlow("constraint undefined for a zero normal-flow vector")
    return float(n @ u) - nsq


def flow_residuals(model: AffineMotionModel, xy: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Vectorized constraint residuals for observation arrays.

    ``xy`` is (k, 2) positions, ``flow`` is (k, 2) normal-flow vectors in px
    per window; returns (k,) residuals. Zero-magnitude rows yield residual 0
    rather than raising; ingest drops them before they reach this path.
    """
    u = affine_flow(model, xy)
    return np.einsum("ij,ij->i", flow, u) - np.einsum("ij,ij->i", flow, flow)


@dataclass(frozen=True)
class Labeling:
    """Assignment of every observation to a label id (ids are >= 1)."""

    assignment: np.ndarray
    active_labels: frozenset[int]

    def __post_init__(self):
        object.__setattr__(
            self, "assignment", _readonly(np.asarray(self.assignment, dtype=np.int32))
        )
        distinct = frozenset(int(v) for v in np.unique(self.assignment)) if self.assignment.size else frozenset()
        if distinct != self.active_labels:
            raise ValueError("active_labels must equal the distinct assignment values")

    @classmethod
    def from_assignment(cls, assignment: np.ndarray) -> "Labeling":
        assignment = np.asarray(assignment, dtype=np.int32)
        active = frozenset(int(v) for v in np.unique(assignment)) if assignment.size else frozenset()
        return cls(assignment=assignment, active_labels=active)

    def __len__(self) -> int:
        return int(self.assignment.size)

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == label)


@dataclass(frozen=True)
class Window:
    """Observations of one fixed time interval, as parallel arrays.

    ``t`` is sorted ascending; ``xy`` holds pixel positions; ``flow`` is in
    px per window. ``source_index`` optionally records each observation's
    record index in the pre-downsampling input stream so results can be
    aligned with ground-truth sidecars.
    """

    start_time: float
    duration: float
    sensor_width: int
    sensor_height: int
    t: np.ndarray
    xy: np.ndarray
    flow: np.ndarray
    source_index: np.ndarray | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("window duration must be positive")
        object.__setattr__(self, "t", _readonly(np.asarray(self.t, dtype=float)))
        object.__setattr__(self, "xy", _readonly(np.asarray(self.xy, dtype=float).reshape(-1, 2)))
        object.__setattr__(self, "flow", _readonly(np.asarray(self.flow, dtype=float).reshape(-1, 2)))
        if self.source_index is not None:
            object.__setattr__(
                self, "source_index", _readonly(np.asarray(self.source_index, dtype=np.int64))
            )
        n = self.t.size
        if self.xy.shape[0] != n or self.flow.shape[0] != n:
            raise ValueError("t, xy and flow must have matching lengths")
        if n:
            if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.xy))
                    and np.all(np.isfinite(self.flow))):
                raise ValueError("observations must be finite")
            if np.any(np.diff(self.t) < 0):
                raise ValueError("observations must be sorted by timestamp")
            if self.t[0] < self.start_time or self.t[-1] >= self.start_time + self.duration:
                raise ValueError("timestamps must lie within [start, start + duration)")
            x, y = self.xy[:, 0], self.xy[:, 1]
            if np.any(x < 0) or np.any(x >= self.sensor_width) or np.any(y < 0) or np.any(y >= self.sensor_height):
                raise ValueError("pixel positions out of sensor bounds")

    def __len__(self) -> int:
        return int(self.t.size)

    @classmethod
    def from_observations(
        cls,
        observations: Sequence[NormalFlowObservation],
        start_time: float,
        duration: float,
        sensor_width: int,
        sensor_height: int,
        source_index: np.ndarray | None = None,
    ) -> "Window":
        if observations:
            t = np.array([o.t for o in observations])
            xy = np.array([[o.x, o.y] for o in observations])
            flow = np.array([o.n for o in observations])
        else:
            t = np.empty(0)
            xy = np.empty((0, 2))
            flow = np.empty((0, 2))
        return cls(start_time, duration, sensor_width, sensor_height, t, xy, flow, source_index)

    @property
    def observations(self) -> list[NormalFlowObservation]:
        return [
            NormalFlowObservation(x=self.xy[i, 0], y=self.xy[i, 1], t=self.t[i], n=self.flow[i])
            for i in range(len(self))
        ]

    def __iter__(self) -> Iterator[NormalFlowObservation]:
        return iter(self.observations)


@dataclass(frozen=True)
class TracePoint:
    """One energy snapshot in the optimization trace of a window."""

    phase: str
    data: float
    smoothness: float
    label_cost: float
    total: float


@dataclass(frozen=True)
class SegmentationResult:
    """Converged labeling of one window plus the fitted models and boxes."""

    labeling: Labeling
    models: dict[int, AffineMotionModel]
    background_label: int
    imo_boxes: tuple[tuple[int, tuple[float, float, float, float]], ...]
    final_energy: float
    iterations: int
    energy_trace: tuple[TracePoint, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for label in self.labeling.active_labels:
            if label not in self.models:
                raise ValueError(f"active label {label} has no model")
        if self.background_label not in self.labeling.active_labels:
            raise ValueError("background label must be active")
        if not math.isfinite(self.final_energy):
            raise ValueError("final energy must be finite")
