"""End-to-end orchestration: windowing, downsampling, and the labeling loop.

A window is downsampled onto a cell grid, triangulated, seeded with
candidate models, and then alternates expansion-move labeling with
per-cluster model refits until both the labeling and the models stop
moving. Moving-object boxes found in window k seed the candidates of
window k+1.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .candidates import (
    CandidateSet,
    TrackedIMO,
    build_candidates,
    grow_imo_boxes,
    predict_boxes,
)
from .core import (
    AffineMotionModel,
    Labeling,
    SegmentationResult,
    TracePoint,
    Window,
)
from .errors import ConfigError, EmptyWindow
from .fitting import MIN_NONLINEAR, fit_nonlinear
from .flowgen import FlowData
from .graph import SpatialGraph, build_graph
from .mrf import EnergyParams, alpha_expansion, data_term_matrix, energy


@dataclass(frozen=True)
class PipelineConfig:
    window_duration: float = 0.010      # s
    cell_size: int = 2                  # px, downsampling grid
    max_observations: int = 5000        # per window after downsampling
    n_min: float = 0.1                  # px/window flow-magnitude floor
    lambda_p: float = 0.5               # smoothness weight
    lambda_m: float = 30.0              # per-active-label cost
    tau_d: float = 1.0                  # px, data-term truncation
    max_outer_iterations: int = 10
    model_tol: float = 1e-4             # convergence: max parameter change
    label_change_tol: float = 0.001     # convergence: relabeled fraction
    smoothness_weighting: str = "uniform"     # "uniform" | "exp_dist"
    label_cost_mode: str = "delong"           # "delong" | "prune"
    truncate_fitting: bool = True

    def __post_init__(self):
        positive = (
            "window_duration", "cell_size", "max_observations", "n_min",
            "tau_d", "max_outer_iterations", "model_tol", "label_change_tol",
        )
        for name in positive:
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(float(v))):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        for name in ("lambda_p", "lambda_m"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be non-negative and finite, got {v}")
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        if self.max_observations < 1:
            raise ValueError("max_observations must be >= 1")
        if self.smoothness_weighting not in ("uniform", "exp_dist"):
            raise ValueError(f"unknown smoothness_weighting {self.smoothness_weighting!r}")
        if self.label_cost_mode not in ("delong", "prune"):
            raise ValueError(f"unknown label_cost_mode {self.label_cost_mode!r}")

    def energy_params(self) -> EnergyParams:
        return EnergyParams(lambda_p=self.lambda_p, lambda_m=self.lambda_m, tau_d=self.tau_d)


# Config files are flat `key = value` text. Scalar fields use their own
# names; the module-scoped switches use dotted keys.
_CONFIG_KEYS: dict[str, tuple[str, type]] = {
    "window_duration": ("window_duration", float),
    "cell_size": ("cell_size", int),
    "max_observations": ("max_observations", int),
    "n_min": ("n_min", float),
    "lambda_p": ("lambda_p", float),
    "lambda_m": ("lambda_m", float),
    "tau_d": ("tau_d", float),
    "max_outer_iterations": ("max_outer_iterations", int),
    "model_tol": ("model_tol", float),
    "label_change_tol": ("label_change_tol", float),
    "smoothness.weighting": ("smoothness_weighting", str),
    "mrf.label_cost_mode": ("label_cost_mode", str),
    "fitting.truncate": ("truncate_fitting", bool),
}


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def parse_config(text: str) -> PipelineConfig:
    """Parse a config file; every key must be present exactly once."""
    seen: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError("unknown key", key=key)
        if key in seen:
            raise ConfigError("duplicate key", key=key)
        seen[key] = value
    for key in _CONFIG_KEYS:
        if key not in seen:
            raise ConfigError("missing key", key=key)
    kwargs = {}
    for key, value in seen.items():
        attr, conv = _CONFIG_KEYS[key]
        try:
            kwargs[attr] = _parse_bool(value) if conv is bool else conv(value)
        except ValueError as exc:
            raise ConfigError(str(exc), key=key) from exc
    try:
        return PipelineConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(config: PipelineConfig) -> str:
    lines = []
    for key, (attr, conv) in _CONFIG_KEYS.items():
        v = getattr(config, attr)
        if conv is bool:
            v = "true" if v else "false"
        elif conv is float:
            v = repr(float(v))
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


class StageTimer:
    """Wall-clock accumulator for the benchmark stages, in milliseconds."""

    def __init__(self):
        self.ms: dict[str, float] = {}
        self._open: dict[str, float] = {}

    def start(self, stage: str) -> None:
        self._open[stage] = time.perf_counter()

    def stop(self, stage: str) -> None:
        t0 = self._open.pop(stage)
        self.ms[stage] = self.ms.get(stage, 0.0) + (time.perf_counter() - t0) * 1e3


def downsample(
    observations: FlowData | tuple,
    config: PipelineConfig,
    window_start: float,
    sensor_width: int | None = None,
    sensor_height: int | None = None,
    source_offset: int = 0,
) -> Window:
    """Reduce one window's worth of raw observations to its working set.

    Keeps the most recent observation in each cell_size x cell_size pixel
    cell, drops flows whose per-window magnitude falls below the floor,
    then thins by uniform striding if the count still exceeds the cap.
    Flow vectors are converted from px/s to px per window here.
    """
    if isinstance(observations, FlowData):
        t, xy, flw = observations.t, observations.xy, observations.flow
        sensor_width = observations.width
        sensor_height = observations.height
    else:
        t, xy, flw = observations
        t = np.asarray(t, dtype=float)
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        flw = np.asarray(flw, dtype=float).reshape(-1, 2)
    if sensor_width is None or sensor_height is None:
        raise ValueError("sensor dimensions are required")
    dt = config.window_duration

    flow_pw = flw * dt
    keep = np.einsum("ij,ij->i", flow_pw, flow_pw) >= config.n_min * config.n_min
    idx = np.flatnonzero(keep)

    if idx.size:
        c = config.cell_size
        cells_x = (sensor_width + c - 1) // c
        cell = (xy[idx, 1].astype(np.int64) // c) * cells_x + xy[idx, 0].astype(np.int64) // c
        order = np.argsort(cell, kind="stable")
        cell_sorted = cell[order]
        boundaries = np.r_[np.flatnonzero(cell_sorted[1:] != cell_sorted[:-1]), cell_sorted.size - 1]
        # Input is time-sorted, so the last index in each cell group is the
        # most recent observation of that cell.
        last_in_group = np.maximum.reduceat(order, np.r_[0, boundaries[:-1] + 1])
        idx = np.sort(idx[last_in_group])

    if idx.size > config.max_observations:
        stride = int(math.ceil(idx.size / config.max_observations))
        idx = idx[::stride]

    return Window(
        start_time=window_start,
        duration=dt,
        sensor_width=sensor_width,
        sensor_height=sensor_height,
        t=t[idx],
        xy=xy[idx],
        flow=flow_pw[idx],
        source_index=idx + source_offset,
    )


def _initial_labeling(window: Window, graph: SpatialGraph, cand: CandidateSet, tau_d: float) -> np.ndarray:
    """Per-node best candidate by truncated residual; labels are 1-based.

    Fully saturated nodes (no candidate below the truncation) carry no
    evidence, so they take the identity background seed, which is the last
    candidate by construction.
    """
    d_obs = data_term_matrix(window, list(cand.models), tau_d)
    n_nodes = graph.node_count
    if len(window) == n_nodes:
        d_node = np.empty_like(d_obs)
        d_node[graph.observation_node] = d_obs
    else:
        d_node = np.zeros((n_nodes, len(cand)))
        np.add.at(d_node, graph.observation_node, d_obs)
        counts = np.bincount(graph.observation_node, minlength=n_nodes)
        d_node /= np.maximum(counts, 1)[:, None]
    best = np.argmin(d_node, axis=1).astype(np.int32)
    saturated = d_node[np.arange(n_nodes), best] >= tau_d * tau_d - 1e-12
    best[saturated] = len(cand.models) - 1
    return (best + 1)[graph.observation_node]


def _max_model_change(old: AffineMotionModel, new: AffineMotionModel) -> float:
    return max(
        abs(new.rho - old.rho),
        abs(new.theta - old.theta),
        abs(new.t_x - old.t_x),
        abs(new.t_y - old.t_y),
    )


def _fit_active_labels(
    window: Window,
    labeling: Labeling,
    models: dict[int, AffineMotionModel],
    config: PipelineConfig,
) -> tuple[dict[int, AffineMotionModel], float]:
    """Refit every active label on its members; tiny clusters keep their model."""
    out = dict(models)
    max_change = 0.0
    for label in sorted(labeling.active_labels):
        members = labeling.members(label)
        if members.size < MIN_NONLINEAR:
            continue
        report = fit_nonlinear(
            (window.xy[members], window.flow[members]),
            out[label],
            tau=config.tau_d,
            truncate=config.truncate_fitting,
        )
        max_change = max(max_change, _max_model_change(out[label], report.model))
        out[label] = report.model
    return out, max_change


def segment_window(
    window: Window,
    prior_tracks: Sequence[TrackedIMO],
    config: PipelineConfig,
    track_dt: float | None = None,
    graph: SpatialGraph | None = None,
    timer: StageTimer | None = None,
) -> SegmentationResult:
    """Segment one window into background plus moving-object clusters.

    Alternates expansion-move labeling with per-label model refits until the
    relabeled fraction and the largest model-parameter change both fall
    under their tolerances (or the iteration cap is hit). The label with the
    most members becomes the background.
    """
    if len(window) == 0:
        raise EmptyWindow("cannot segment an empty window")
    if graph is None:
        graph = build_graph(window, weighting=config.smoothness_weighting)
    params = config.energy_params()

    if timer:
        timer.start("initialization")
    predicted = predict_boxes(
        list(prior_tracks),
        dt=config.window_duration if track_dt is None else track_dt,
        window_duration=config.window_duration,
        sensor_width=window.sensor_width,
        sensor_height=window.sensor_height,
    )
    cand = build_candidates(window, predicted, tau=config.tau_d, truncate=config.truncate_fitting)
    if timer:
        timer.stop("initialization")

    if timer:
        timer.start("labeling_fitting")
    assignment = _initial_labeling(window, graph, cand, config.tau_d)
    labeling = Labeling.from_assignment(assignment)
    models: dict[int, AffineMotionModel] = {
        i + 1: m for i, m in enumerate(cand.models) if (i + 1) in labeling.active_labels
    }
    # Sampled seeds are single-direction translation guesses; refitting each
    # one on its initial members before the first sweep turns them into
    # models the data term can actually discriminate, which the nascent
    # clusters need to survive that sweep.
    models = _fit_active_labels(window, labeling, models, config)[0]

    trace: list[TracePoint] = []
    breakdown = energy(labeling, models, graph, window, params)
    trace.append(breakdown.trace_point("initial"))

    iterations = 0
    for _ in range(config.max_outer_iterations):
        iterations += 1
        order = sorted(
            labeling.active_labels,
            key=lambda l: (-int(np.count_nonzero(labeling.assignment == l)), l),
        )
        prev_assignment = labeling.assignment
        labeling, breakdown = alpha_expansion(
            labeling, models, graph, window, params, order,
            label_cost_mode=config.label_cost_mode, trace_out=trace,
        )
        relabeled = float(np.mean(labeling.assignment != prev_assignment)) if len(labeling) else 0.0

        models = {l: m for l, m in models.items() if l in labeling.active_labels}
        models, max_change = _fit_active_labels(window, labeling, models, config)
        breakdown = energy(labeling, models, graph, window, params)
        trace.append(breakdown.trace_point("fit"))

        if relabeled < config.label_change_tol and max_change < config.model_tol:
            break

    counts = {l: int(np.count_nonzero(labeling.assignment == l)) for l in labeling.active_labels}
    background = min(counts, key=lambda l: (-counts[l], l))

    result = SegmentationResult(
        labeling=labeling,
        models=models,
        background_label=background,
        imo_boxes=(),
        final_energy=breakdown.total,
        iterations=iterations,
        energy_trace=tuple(trace),
    )
    boxes = tuple((imo.label, imo.box) for imo in grow_imo_boxes(result, window))
    result = replace(result, imo_boxes=boxes)
    if timer:
        timer.stop("labeling_fitting")
    return result


@dataclass(frozen=True)
class WindowOutcome:
    """Per-window record emitted by run_sequence; result is None when empty."""

    index: int
    start_time: float
    window: Window
    result: SegmentationResult | None
    predicted_boxes: tuple = ()


def run_sequence(
    stream: FlowData,
    config: PipelineConfig,
    timer: StageTimer | None = None,
) -> Iterator[WindowOutcome]:
    """Segment a full stream window by window, carrying tracks forward.

    Windows are consecutive spans of ``window_duration`` starting at the
    first observation's timestamp. Empty windows yield a result-less
    outcome; tracks survive a single empty window and then expire. A timer
    accumulates per-stage wall time across the run.
    """
    if len(stream) == 0:
        return
    t = stream.t
    t0 = float(t[0])
    dt = config.window_duration
    n_windows = int(math.floor((float(t[-1]) - t0) / dt)) + 1

    tracks: list[TrackedIMO] = []
    gaps = 0
    for k in range(n_windows):
        start = t0 + k * dt
        lo = int(np.searchsorted(t, start, side="left"))
        hi = int(np.searchsorted(t, start + dt, side="left"))
        if timer:
            timer.start("pre_processing")
        window = downsample(
            (t[lo:hi], stream.xy[lo:hi], stream.flow[lo:hi]),
            config,
            window_start=start,
            sensor_width=stream.width,
            sensor_height=stream.height,
            source_offset=lo,
        )
        graph = build_graph(window, weighting=config.smoothness_weighting) if len(window) else None
        if timer:
            timer.stop("pre_processing")
        if len(window) == 0:
            gaps += 1
            if gaps > 1:
                tracks = []
            yield WindowOutcome(index=k, start_time=start, window=window, result=None)
            continue
        track_dt = (gaps + 1) * dt
        predicted = tuple(
            predict_boxes(
                tracks, dt=track_dt, window_duration=dt,
                sensor_width=stream.width, sensor_height=stream.height,
            )
        )
        result = segment_window(window, tracks, config, track_dt=track_dt,
                                graph=graph, timer=timer)
        tracks = grow_imo_boxes(result, window)
        gaps = 0
        yield WindowOutcome(
            index=k, start_time=start, window=window, result=result, predicted_boxes=predicted
        )
