"""Result serialization (`nfseg-result v1`), run manifests, metric reports.

The result format is line oriented: each window opens with a `window` line,
carries `energy`, `labels`, `indices`, `pixels`, `model`, `box` and optional
`trace` lines, and closes with `end`. Floats are written with their shortest
round-tripping representation, so write -> read -> write is byte identical.
The `pixels` line stores the downsampled observation positions, which lets
evaluation rebuild hulls and masks without the original flow file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import AffineMotionModel, Labeling, SegmentationResult, TracePoint
from .core import float_repr as fr
from .errors import FormatError

RESULT_HEADER = "# nfseg-result v1"


@dataclass
class WindowRecord:
    """One window's worth of serialized results."""

    index: int
    start_time: float
    duration: float
    empty: bool
    labels: np.ndarray | None = None
    source_indices: np.ndarray | None = None
    pixels: np.ndarray | None = None
    models: dict[int, AffineMotionModel] = field(default_factory=dict)
    background: int | None = None
    boxes: list[tuple[int, tuple[float, float, float, float]]] = field(default_factory=list)
    energy: tuple[float, float, float, float] | None = None  # data, smooth, label, total
    iterations: int = 0
    trace: list[TracePoint] = field(default_factory=list)

    @classmethod
    def from_result(cls, index, start_time, duration, result: SegmentationResult | None,
                    source_indices=None, pixels=None) -> "WindowRecord":
        if result is None:
            return cls(index=index, start_time=start_time, duration=duration, empty=True)
        last = result.energy_trace[-1] if result.energy_trace else None
        energy = (
            (last.data, last.smoothness, last.label_cost, last.total)
            if last is not None
            else (0.0, 0.0, 0.0, result.final_energy)
        )
        return cls(
            index=index,
            start_time=start_time,
            duration=duration,
            empty=False,
            labels=np.asarray(result.labeling.assignment),
            source_indices=None if source_indices is None else np.asarray(source_indices),
            pixels=None if pixels is None else np.asarray(pixels),
            models=dict(result.models),
            background=result.background_label,
            boxes=list(result.imo_boxes),
            energy=energy,
            iterations=result.iterations,
            trace=list(result.energy_trace),
        )

    def to_labeling(self) -> Labeling:
        return Labeling.from_assignment(self.labels)


def write_results(path, records: list[WindowRecord]) -> None:
    with open(path, "w") as f:
        f.write(RESULT_HEADER + "\n")
        for rec in records:
            if rec.empty:
                f.write(f"window {rec.index} start={fr(rec.start_time)} duration={fr(rec.duration)} empty\n")
                f.write("end\n")
                continue
            f.write(
                f"window {rec.index} start={fr(rec.start_time)} duration={fr(rec.duration)} "
                f"count={rec.labels.size} background={rec.background} iterations={rec.iterations}\n"
            )
            d, s, l, t = rec.energy
            f.write(f"energy data={fr(d)} smoothness={fr(s)} label_cost={fr(l)} total={fr(t)}\n")
            f.write("labels " + " ".join(str(int(v)) for v in rec.labels) + "\n")
            if rec.source_indices is not None:
                f.write("indices " + " ".join(str(int(v)) for v in rec.source_indices) + "\n")
            if rec.pixels is not None:
                f.write("pixels " + " ".join(f"{int(x)} {int(y)}" for x, y in rec.pixels) + "\n")
            for label in sorted(rec.models):
                m = rec.models[label]
                f.write(f"model {label} rho={fr(m.rho)} theta={fr(m.theta)} tx={fr(m.t_x)} ty={fr(m.t_y)}\n")
            for label, box in rec.boxes:
                f.write(f"box {label} {fr(box[0])} {fr(box[1])} {fr(box[2])} {fr(box[3])}\n")
            for p in rec.trace:
                f.write(
                    f"trace {p.phase} data={fr(p.data)} smoothness={fr(p.smoothness)} "
                    f"label_cost={fr(p.label_cost)} total={fr(p.total)}\n"
                )
            f.write("end\n")


def _kv(token: str, lineno: int) -> tuple[str, str]:
    if "=" not in token:
        raise FormatError(f"line {lineno}: expected key=value, got {token!r}")
    k, v = token.split("=", 1)
    return k, v


def read_results(path) -> list[WindowRecord]:
    records: list[WindowRecord] = []
    current: WindowRecord | None = None
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != RESULT_HEADER:
            raise FormatError(f"bad result header: {header!r}")
        for lineno, raw in enumerate(f, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            kind, _, rest = line.partition(" ")
            try:
                if kind == "window":
                    if current is not None:
                        raise FormatError(f"line {lineno}: window opened before previous ended")
                    tokens = rest.split()
                    index = int(tokens[0])
                    empty = "empty" in tokens[1:]
                    attrs = dict(_kv(tok, lineno) for tok in tokens[1:] if tok != "empty")
                    current = WindowRecord(
                        index=index,
                        start_time=float(attrs["start"]),
                        duration=float(attrs["duration"]),
                        empty=empty,
                        iterations=int(attrs.get("iterations", 0)),
                        background=int(attrs["background"]) if "background" in attrs else None,
                    )
                elif current is None:
                    raise FormatError(f"line {lineno}: {kind!r} outside a window block")
                elif kind == "energy":
                    attrs = dict(_kv(tok, lineno) for tok in rest.split())
                    current.energy = (
                        float(attrs["data"]), float(attrs["smoothness"]),
                        float(attrs["label_cost"]), float(attrs["total"]),
                    )
                elif kind == "labels":
                    current.labels = np.array([int(v) for v in rest.split()], dtype=np.int32)
                elif kind == "indices":
                    current.source_indices = np.array([int(v) for v in rest.split()], dtype=np.int64)
                elif kind == "pixels":
                    vals = np.array([int(v) for v in rest.split()], dtype=np.int64)
                    if vals.size % 2:
                        raise FormatError(f"line {lineno}: odd pixel coordinate count")
                    current.pixels = vals.reshape(-1, 2)
                elif kind == "model":
                    tokens = rest.split()
                    label = int(tokens[0])
                    attrs = dict(_kv(tok, lineno) for tok in tokens[1:])
                    current.models[label] = AffineMotionModel(
                        rho=float(attrs["rho"]), theta=float(attrs["theta"]),
                        t_x=float(attrs["tx"]), t_y=float(attrs["ty"]),
                    )
                elif kind == "box":
                    tokens = rest.split()
                    current.boxes.append(
                        (int(tokens[0]), tuple(float(v) for v in tokens[1:5]))
                    )
                elif kind == "trace":
                    tokens = rest.split()
                    attrs = dict(_kv(tok, lineno) for tok in tokens[1:])
                    current.trace.append(TracePoint(
                        tokens[0], float(attrs["data"]), float(attrs["smoothness"]),
                        float(attrs["label_cost"]), float(attrs["total"]),
                    ))
                elif kind == "end":
                    records.append(current)
                    current = None
                else:
                    raise FormatError(f"line {lineno}: unknown record kind {kind!r}")
            except (ValueError, KeyError, IndexError) as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
    if current is not None:
        raise FormatError("unterminated window block at end of file")
    return records


def write_manifest(path, entries: dict) -> None:
    """Flat key = value run manifest; callers write this after all other outputs."""
    with open(path, "w") as f:
        for key in entries:
            f.write(f"{key} = {entries[key]}\n")


def write_metric_report(path, rows: list[tuple[str, float, int]]) -> None:
    """Metric report CSV: metric,value,count per row."""
    with open(path, "w") as f:
        f.write("metric,value,count\n")
        for name, value, count in rows:
            f.write(f"{name},{fr(value)},{int(count)}\n")


def read_gt_boxes(path) -> list[tuple[float, int, tuple[float, float, float, float]]]:
    """Ground-truth box CSV rows: (t, object_id, box)."""
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "t,object_id,x_min,y_min,x_max,y_max":
            raise FormatError(f"bad ground-truth box header: {header!r}")
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise FormatError(f"expected 6 fields, got {len(parts)}", record=i)
            try:
                t = float(parts[0])
                obj = int(parts[1])
                box = tuple(float(v) for v in parts[2:6])
            except ValueError as exc:
                raise FormatError(str(exc), record=i) from exc
            rows.append((t, obj, box))
    return rows


def write_gt_boxes(path, rows) -> None:
    with open(path, "w") as f:
        f.write("t,object_id,x_min,y_min,x_max,y_max\n")
        for t, obj, box in rows:
            f.write(f"{fr(t)},{int(obj)},{fr(box[0])},{fr(box[1])},{fr(box[2])},{fr(box[3])}\n")
