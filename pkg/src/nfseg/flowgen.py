"""Sources of normal-flow observations.

Three ways in: a time-surface gradient estimator (geometric fallback for raw
event grids), a synthetic scene generator with ground truth (the oracle used
throughout the tests), and flow-file ingest in the text and binary formats
described in the README.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import AffineMotionModel, NormalFlowObservation, Window, affine_flow
from .core import float_repr as fr
from .errors import EmptyRegion, FormatError, UndefinedGradient

TEXT_HEADER_PREFIX = "# nfseg-flow v1"
BINARY_MAGIC = b"NFSEG1\0"
_RECORD = struct.Struct("<dffff")  # t, x, y, nx, ny

DEFAULT_FLOW_FLOOR = 0.1  # px per window


class TimeSurface:
    """Per-pixel timestamp of the most recent event.

    Insertion never decreases a pixel's stored timestamp, so replaying a
    stream in any order that respects per-pixel ordering yields the same
    surface.
    """

    def __init__(self, sensor_width: int, sensor_height: int):
        self.sensor_width = int(sensor_width)
        self.sensor_height = int(sensor_height)
        self.grid = np.zeros((self.sensor_height, self.sensor_width))
        self.valid = np.zeros((self.sensor_height, self.sensor_width), dtype=bool)

    def record(self, x: int, y: int, t: float) -> None:
        if self.valid[y, x]:
            self.grid[y, x] = max(self.grid[y, x], t)
        else:
            self.grid[y, x] = t
            self.valid[y, x] = True

    @classmethod
    def from_grid(cls, grid: np.ndarray, valid: np.ndarray | None = None) -> "TimeSurface":
        grid = np.asarray(grid, dtype=float)
        ts = cls(grid.shape[1], grid.shape[0])
        ts.grid = grid.copy()
        ts.valid = np.ones_like(grid, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).copy()
        return ts


def normal_flow_from_time_surface(
    ts: TimeSurface, x: int, y: int, g_min: float = 1e-6
) -> np.ndarray:
    """Normal flow at a pixel from the time-surface gradient, in px/s.

    Uses central differences on the 4-neighborhood; the result points along
    the surface gradient with magnitude equal to its reciprocal. Raises
    UndefinedGradient when the neighborhood is incomplete or the gradient
    norm falls below ``g_min`` (seconds per pixel).
    """
    h, w = ts.grid.shape
    if not (1 <= x < w - 1 and 1 <= y < h - 1):
        raise UndefinedGradient(f"pixel ({x}, {y}) lacks a full neighborhood")
    neighborhood = ts.valid[y, x - 1 : x + 2].all() and ts.valid[y - 1 : y + 2, x].all()
    if not neighborhood:
        raise UndefinedGradient(f"pixel ({x}, {y}) neighborhood not fully observed")
    gx = (ts.grid[y, x + 1] - ts.grid[y, x - 1]) / 2.0
    gy = (ts.grid[y + 1, x] - ts.grid[y - 1, x]) / 2.0
    norm_sq = gx * gx + gy * gy
    if norm_sq < g_min * g_min:
        raise UndefinedGradient(f"gradient norm below {g_min} at ({x}, {y})")
    return np.array([gx, gy]) / norm_sq


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned pixel region [x0, x1) x [y0, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def lattice_points(self, width: int, height: int) -> np.ndarray:
        xs = np.arange(max(0, math.ceil(self.x0)), min(width, math.ceil(self.x1)))
        ys = np.arange(max(0, math.ceil(self.y0)), min(height, math.ceil(self.y1)))
        if xs.size == 0 or ys.size == 0:
            return np.empty((0, 2), dtype=np.int64)
        gx, gy = np.meshgrid(xs, ys)
        return np.c_[gx.ravel(), gy.ravel()]

    def shifted(self, dx: float, dy: float) -> "BoxRegion":
        return BoxRegion(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


@dataclass(frozen=True)
class DiskRegion:
    """Disk of radius r around (cx, cy), in pixels."""

    cx: float
    cy: float
    r: float

    def lattice_points(self, width: int, height: int) -> np.ndarray:
        x0 = max(0, math.floor(self.cx - self.r))
        x1 = min(width - 1, math.ceil(self.cx + self.r))
        y0 = max(0, math.floor(self.cy - self.r))
        y1 = min(height - 1, math.ceil(self.cy + self.r))
        if x1 < x0 or y1 < y0:
            return np.empty((0, 2), dtype=np.int64)
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        inside = (gx - self.cx) ** 2 + (gy - self.cy) ** 2 <= self.r**2
        return np.c_[gx[inside], gy[inside]]

    def shifted(self, dx: float, dy: float) -> "DiskRegion":
        return DiskRegion(self.cx + dx, self.cy + dy, self.r)


Region = BoxRegion | DiskRegion


def region_box(region: Region, width: int, height: int) -> tuple[float, float, float, float]:
    """Tight bounding box of a region's lattice points, as (x0, y0, x1, y1).

    The upper edges are exclusive (max pixel + 1) so box areas count pixels.
    """
    pts = region.lattice_points(width, height)
    if pts.size == 0:
        raise EmptyRegion("region contains no lattice points")
    return (
        float(pts[:, 0].min()),
        float(pts[:, 1].min()),
        float(pts[:, 0].max()) + 1.0,
        float(pts[:, 1].max()) + 1.0,
    )


@dataclass(frozen=True)
class SceneObject:
    """One independently moving object: a region, its motion, its texture.

    ``gradient`` is either the string "uniform" (gradient directions drawn
    uniformly per sample, the default) or a fixed angle in radians.
    """

    region: Region
    model: AffineMotionModel
    gradient: str | float = "uniform"


@dataclass(frozen=True)
class SyntheticScene:
    sensor_width: int
    sensor_height: int
    background: AffineMotionModel
    objects: tuple[SceneObject, ...] = ()
    background_gradient: str | float = "uniform"
    sigma_dir: float = 0.0
    sigma_mag: float = 0.0
    outlier_fraction: float = 0.0


@dataclass(frozen=True)
class GroundTruth:
    """Per-observation source ids plus per-object true models and boxes.

    Source id 0 is the background; object k (1-based) maps to
    ``object_models[k - 1]`` and ``object_boxes[k - 1]``.
    """

    source_ids: np.ndarray
    background_model: AffineMotionModel
    object_models: tuple[AffineMotionModel, ...]
    object_boxes: tuple[tuple[float, float, float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "source_ids", np.asarray(self.source_ids, dtype=np.int32))


def _sample_angles(spec: str | float, count: int, rng: np.random.Generator) -> np.ndarray:
    if spec == "uniform":
        return rng.uniform(0.0, 2.0 * math.pi, count)
    return np.full(count, float(spec))


def generate_scene(
    scene: SyntheticScene,
    start_time: float,
    duration: float,
    samples_per_source: int,
    rng_seed: int,
    n_min: float = DEFAULT_FLOW_FLOOR,
    samples_per_object: int | None = None,
) -> tuple[Window, GroundTruth]:
    """Sample a window of normal-flow observations with known origin.

    Each sample point x with unit gradient direction d receives the normal
    flow (u.d) d where u is the true full flow of its source; direction and
    magnitude jitter and a bounded outlier fraction are applied afterwards.
    Observations whose final magnitude falls below ``n_min`` px/window are
    dropped (motion orthogonal to the gradient is invisible), with the
    ground truth kept aligned. Identical seeds produce identical output.

    ``samples_per_source`` applies to the background; objects use
    ``samples_per_object`` when given. Positions repeat only when a source
    region holds fewer lattice points than requested samples.
    """
    if samples_per_source < 1:
        raise ValueError("samples_per_source must be >= 1")
    if samples_per_object is None:
        samples_per_object = samples_per_source
    if samples_per_object < 1:
        raise ValueError("samples_per_object must be >= 1")
    rng = np.random.default_rng(rng_seed)
    w, h = scene.sensor_width, scene.sensor_height

    occupied = np.zeros((h, w), dtype=bool)
    object_pts: list[np.ndarray] = []
    # Later objects occlude earlier ones, and all objects occlude background.
    for k in reversed(range(len(scene.objects))):
        pts = scene.objects[k].region.lattice_points(w, h)
        if pts.size == 0:
            raise EmptyRegion(f"object {k + 1} region contains no lattice points")
        free = ~occupied[pts[:, 1], pts[:, 0]]
        object_pts.append(pts[free])
        occupied[pts[:, 1], pts[:, 0]] = True
    object_pts.reverse()
    bg_pts = np.argwhere(~occupied)[:, ::-1]  # (x, y)

    xs, ys, src, angles, models = [], [], [], [], []
    sources: list[tuple[int, np.ndarray, AffineMotionModel, str | float, int]] = [
        (0, bg_pts, scene.background, scene.background_gradient, samples_per_source)
    ]
    for k, obj in enumerate(scene.objects):
        sources.append((k + 1, object_pts[k], obj.model, obj.gradient, samples_per_object))
    for source_id, pts, model, gradient, n_samples in sources:
        if pts.shape[0] == 0:
            continue
        replace = pts.shape[0] < n_samples
        idx = rng.choice(pts.shape[0], size=n_samples, replace=replace)
        chosen = pts[idx]
        xs.append(chosen[:, 0])
        ys.append(chosen[:, 1])
        src.append(np.full(n_samples, source_id, dtype=np.int32))
        angles.append(_sample_angles(gradient, n_samples, rng))
        models.append(model)

    x = np.concatenate(xs).astype(float)
    y = np.concatenate(ys).astype(float)
    source_ids = np.concatenate(src)
    phi = np.concatenate(angles)
    t = rng.uniform(start_time, start_time + duration, x.size)

    xy = np.c_[x, y]
    flow = np.zeros_like(xy)
    all_models = [scene.background] + [o.model for o in scene.objects]
    for sid, model in enumerate(all_models):
        mask = source_ids == sid
        if not mask.any():
            continue
        u = affine_flow(model, xy[mask])
        d = np.c_[np.cos(phi[mask]), np.sin(phi[mask])]
        proj = np.einsum("ij,ij->i", u, d)
        flow[mask] = proj[:, None] * d

    if scene.sigma_dir > 0:
        rot = rng.normal(0.0, scene.sigma_dir, x.size)
        c, s = np.cos(rot), np.sin(rot)
        fx, fy = flow[:, 0].copy(), flow[:, 1].copy()
        flow[:, 0] = c * fx - s * fy
        flow[:, 1] = s * fx + c * fy
    if scene.sigma_mag > 0:
        flow *= (1.0 + rng.normal(0.0, scene.sigma_mag, x.size))[:, None]
    if scene.outlier_fraction > 0:
        outlier = rng.random(x.size) < scene.outlier_fraction
        mags = np.linalg.norm(flow[~outlier], axis=1) if (~outlier).any() else np.zeros(1)
        lo, hi = float(mags.min()), float(mags.max())
        k = int(outlier.sum())
        ang = rng.uniform(0.0, 2.0 * math.pi, k)
        mag = rng.uniform(lo, hi, k)
        flow[outlier] = np.c_[mag * np.cos(ang), mag * np.sin(ang)]

    keep = np.linalg.norm(flow, axis=1) >= n_min
    x, y, t, flow, source_ids = x[keep], y[keep], t[keep], flow[keep], source_ids[keep]

    order = np.argsort(t, kind="stable")
    window = Window(
        start_time=start_time,
        duration=duration,
        sensor_width=w,
        sensor_height=h,
        t=t[order],
        xy=np.c_[x, y][order],
        flow=flow[order],
    )
    boxes = tuple(region_box(o.region, w, h) for o in scene.objects)
    gt = GroundTruth(
        source_ids=source_ids[order],
        background_model=scene.background,
        object_models=tuple(o.model for o in scene.objects),
        object_boxes=boxes,
    )
    return window, gt


def shift_scene(scene: SyntheticScene, windows_elapsed: int) -> SyntheticScene:
    """Scene with every object region translated by its per-window motion."""
    moved = tuple(
        SceneObject(
            region=o.region.shifted(
                o.model.t_x * windows_elapsed, o.model.t_y * windows_elapsed
            ),
            model=o.model,
            gradient=o.gradient,
        )
        for o in scene.objects
    )
    return SyntheticScene(
        sensor_width=scene.sensor_width,
        sensor_height=scene.sensor_height,
        background=scene.background,
        objects=moved,
        background_gradient=scene.background_gradient,
        sigma_dir=scene.sigma_dir,
        sigma_mag=scene.sigma_mag,
        outlier_fraction=scene.outlier_fraction,
    )


def generate_sequence(
    scene: SyntheticScene,
    n_windows: int,
    window_duration: float,
    samples_per_source: int,
    rng_seed: int,
    n_min: float = DEFAULT_FLOW_FLOOR,
    samples_per_object: int | None = None,
) -> list[tuple[Window, GroundTruth]]:
    """Consecutive windows with each object translated by its model each step."""
    out = []
    for k in range(n_windows):
        current = shift_scene(scene, k)
        out.append(
            generate_scene(
                current,
                start_time=k * window_duration,
                duration=window_duration,
                samples_per_source=samples_per_source,
                rng_seed=rng_seed + k,
                n_min=n_min,
                samples_per_object=samples_per_object,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Flow files


@dataclass
class FlowData:
    """Flow-file contents as parallel arrays; vectors are px/s (disk units)."""

    width: int
    height: int
    t: np.ndarray
    xy: np.ndarray
    flow: np.ndarray

    def __len__(self) -> int:
        return int(self.t.size)

    def __iter__(self) -> Iterator[NormalFlowObservation]:
        for i in range(len(self)):
            yield NormalFlowObservation(
                x=float(self.xy[i, 0]), y=float(self.xy[i, 1]), t=float(self.t[i]), n=self.flow[i]
            )


def _validate_records(width, height, t, x, y, first_record=1):
    bad_value = ~(np.isfinite(t) & np.isfinite(x) & np.isfinite(y))
    if np.any(bad_value):
        raise FormatError("non-finite field", record=first_record + int(np.flatnonzero(bad_value)[0]))
    if np.any(np.diff(t) < 0):
        bad = int(np.flatnonzero(np.diff(t) < 0)[0]) + 1
        raise FormatError("records not sorted by timestamp", record=first_record + bad)
    oob = (x < 0) | (x >= width) | (y < 0) | (y >= height)
    if np.any(oob):
        raise FormatError("pixel coordinates out of bounds", record=first_record + int(np.flatnonzero(oob)[0]))


def read_flow_file(path) -> FlowData:
    """Read a flow file, auto-detecting the binary or text format."""
    with open(path, "rb") as f:
        head = f.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        return _read_flow_binary(path)
    return _read_flow_text(path)


def _read_flow_text(path) -> FlowData:
    with open(path, "r") as f:
        header = f.readline().rstrip("\n")
        if not header.startswith(TEXT_HEADER_PREFIX):
            raise FormatError(f"bad header: {header!r}")
        try:
            fields = dict(part.split("=") for part in header[len(TEXT_HEADER_PREFIX):].split())
            width, height = int(fields["width"]), int(fields["height"])
        except (ValueError, KeyError) as exc:
            raise FormatError(f"bad header: {header!r}") from exc
        rows = []
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FormatError(f"expected 5 fields, got {len(parts)}", record=i)
            try:
                t = float(parts[0])
                x, y = int(parts[1]), int(parts[2])
                nx, ny = float(parts[3]), float(parts[4])
            except ValueError as exc:
                raise FormatError(str(exc), record=i) from exc
            rows.append((t, x, y, nx, ny))
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    _validate_records(width, height, arr[:, 0], arr[:, 1], arr[:, 2])
    return FlowData(width, height, t=arr[:, 0], xy=arr[:, 1:3], flow=arr[:, 3:5])


def _read_flow_binary(path) -> FlowData:
    with open(path, "rb") as f:
        blob = f.read()
    head_len = len(BINARY_MAGIC) + 4 + 4 + 8
    if len(blob) < head_len or blob[: len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise FormatError("bad binary header")
    width, height = struct.unpack_from("<II", blob, len(BINARY_MAGIC))
    (count,) = struct.unpack_from("<Q", blob, len(BINARY_MAGIC) + 8)
    expected = head_len + count * _RECORD.size
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes for {count} records, got {len(blob)}")
    raw = np.frombuffer(
        blob,
        dtype=np.dtype([("t", "<f8"), ("x", "<f4"), ("y", "<f4"), ("nx", "<f4"), ("ny", "<f4")]),
        offset=head_len,
    )
    t = raw["t"].astype(float)
    xy = np.c_[raw["x"].astype(float), raw["y"].astype(float)]
    flow = np.c_[raw["nx"].astype(float), raw["ny"].astype(float)]
    _validate_records(width, height, t, xy[:, 0], xy[:, 1])
    return FlowData(width, height, t=t, xy=xy, flow=flow)


def _as_flow_data(observations, width, height) -> FlowData:
    if isinstance(observations, FlowData):
        return observations
    obs = list(observations)
    if obs:
        t = np.array([o.t for o in obs])
        xy = np.array([[o.x, o.y] for o in obs], dtype=float)
        flow = np.array([o.n for o in obs], dtype=float)
    else:
        t, xy, flow = np.empty(0), np.empty((0, 2)), np.empty((0, 2))
    return FlowData(width, height, t=t, xy=xy, flow=flow)


def write_flow_file(path, observations, width=None, height=None, binary=False) -> None:
    """Write observations (px/s) to disk; ``observations`` may be a FlowData."""
    data = _as_flow_data(observations, width, height)
    if data.width is None or data.height is None:
        raise ValueError("sensor dimensions are required")
    _validate_records(data.width, data.height, data.t, data.xy[:, 0], data.xy[:, 1])
    if binary:
        with open(path, "wb") as f:
            f.write(BINARY_MAGIC)
            f.write(struct.pack("<IIQ", data.width, data.height, len(data)))
            x32 = data.xy.astype(np.float32)
            n32 = data.flow.astype(np.float32)
            for i in range(len(data)):
                f.write(_RECORD.pack(data.t[i], x32[i, 0], x32[i, 1], n32[i, 0], n32[i, 1]))
    else:
        with open(path, "w") as f:
            f.write(f"{TEXT_HEADER_PREFIX} width={data.width} height={data.height}\n")
            for i in range(len(data)):
                x, y = data.xy[i]
                if x != int(x) or y != int(y):
                    raise ValueError("text flow format requires integer pixel coordinates")
                f.write(f"{fr(data.t[i])},{int(x)},{int(y)},{fr(data.flow[i, 0])},{fr(data.flow[i, 1])}\n")


def write_sidecar(path, t: np.ndarray, xy: np.ndarray, source_ids: np.ndarray) -> None:
    """Ground-truth sidecar: one `t,x,y,source_id` row per flow record."""
    with open(path, "w") as f:
        f.write("t,x,y,source_id\n")
        for i in range(len(t)):
            f.write(f"{fr(t[i])},{int(xy[i, 0])},{int(xy[i, 1])},{int(source_ids[i])}\n")


def read_sidecar(path) -> np.ndarray:
    """Source ids of a ground-truth sidecar, aligned with the flow file by index."""
    ids = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("t,x,y,source_id"):
            raise FormatError(f"bad sidecar header: {header!r}")
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"expected 4 fields, got {len(parts)}", record=i)
            try:
                ids.append(int(parts[3]))
            except ValueError as exc:
                raise FormatError(str(exc), record=i) from exc
    return np.array(ids, dtype=np.int32)


# ---------------------------------------------------------------------------
# Scene specification files (used by the synth command)


@dataclass(frozen=True)
class SceneSpec:
    scene: SyntheticScene
    windows: int
    window_duration: float
    samples_background: int
    samples_per_object: int


def _parse_model(value: str) -> AffineMotionModel:
    parts = value.split()
    if len(parts) != 4:
        raise ValueError(f"model needs 4 values (rho theta tx ty), got {value!r}")
    rho, theta, tx, ty = (float(p) for p in parts)
    return AffineMotionModel(rho=rho, theta=theta, t_x=tx, t_y=ty)


def _parse_region(value: str) -> Region:
    parts = value.split()
    if parts and parts[0] == "box" and len(parts) == 5:
        return BoxRegion(*(float(p) for p in parts[1:]))
    if parts and parts[0] == "disk" and len(parts) == 4:
        return DiskRegion(*(float(p) for p in parts[1:]))
    raise ValueError(f"region must be 'box x0 y0 x1 y1' or 'disk cx cy r', got {value!r}")


def _parse_gradient(value: str) -> str | float:
    return "uniform" if value.strip() == "uniform" else float(value)


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse the key = value scene description used by the synth command."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value', got {raw!r}", record=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value

    def take(key, convert=str, default=None):
        if key not in entries:
            if default is not None:
                return default
            raise FormatError(f"missing scene key '{key}'")
        try:
            return convert(entries.pop(key))
        except ValueError as exc:
            raise FormatError(f"scene key '{key}': {exc}") from exc

    width = take("sensor_width", int)
    height = take("sensor_height", int)
    background = take("background.model", _parse_model)
    bg_gradient = take("background.gradient", _parse_gradient, default="uniform")
    sigma_dir = take("noise.sigma_dir", float, default=0.0)
    sigma_mag = take("noise.sigma_mag", float, default=0.0)
    outliers = take("noise.outlier_fraction", float, default=0.0)
    windows = take("windows", int, default=1)
    window_duration = take("window_duration", float, default=0.010)
    samples_bg = take("samples_background", int)
    samples_obj = take("samples_per_object", int, default=samples_bg)

    objects = []
    index = 1
    while f"object.{index}.region" in entries or f"object.{index}.model" in entries:
        region = take(f"object.{index}.region", _parse_region)
        model = take(f"object.{index}.model", _parse_model)
        gradient = take(f"object.{index}.gradient", _parse_gradient, default="uniform")
        objects.append(SceneObject(region=region, model=model, gradient=gradient))
        index += 1
    if entries:
        raise FormatError(f"unknown scene key '{sorted(entries)[0]}'")

    scene = SyntheticScene(
        sensor_width=width,
        sensor_height=height,
        background=background,
        objects=tuple(objects),
        background_gradient=bg_gradient,
        sigma_dir=sigma_dir,
        sigma_mag=sigma_mag,
        outlier_fraction=outliers,
    )
    return SceneSpec(
        scene=scene,
        windows=windows,
        window_duration=window_duration,
        samples_background=samples_bg,
        samples_per_object=samples_obj,
    )
