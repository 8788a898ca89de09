"""Image output: orientation, magnitude and segmentation maps.

Images are written as binary PPM/PGM so no codec dependency is needed.
Orientation maps the flow angle to hue on the standard color circle;
magnitude is a linear grayscale against the window maximum; segmentation
colors labels from a fixed 12-color palette by descending member count,
with the background cluster dark gray on a black canvas.
"""

from __future__ import annotations

import numpy as np

from .core import SegmentationResult, Window
from .errors import FormatError

# Distinct label colors, assigned by descending member count.
PALETTE = (
    (230, 76, 60),
    (52, 152, 219),
    (46, 204, 113),
    (241, 196, 15),
    (155, 89, 182),
    (26, 188, 156),
    (231, 126, 34),
    (127, 140, 141),
    (192, 57, 43),
    (41, 128, 185),
    (39, 174, 96),
    (142, 68, 173),
)
BACKGROUND_GRAY = (64, 64, 64)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode())
        f.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5",):
        raise FormatError(f"not a binary PGM: {path}")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise FormatError(f"bad PGM header in {path}") from exc
    if maxval > 255:
        raise FormatError("only 8-bit PGM supported")
    data = parts[3][: w * h]
    if len(data) != w * h:
        raise FormatError(f"truncated PGM payload in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"not a binary PPM: {path}")
    w, h = (int(v) for v in parts[1].split())
    data = parts[3][: w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError(f"truncated PPM payload in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def _hue_to_rgb(hue: np.ndarray) -> np.ndarray:
    """Vectorized hue (in turns, [0, 1)) to fully saturated RGB."""
    h6 = (hue % 1.0) * 6.0
    k = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    q = (1.0 - f) * 255.0
    t = f * 255.0
    full = np.full_like(t, 255.0)
    zero = np.zeros_like(t)
    r = np.select([k == 0, k == 1, k == 2, k == 3, k == 4, k == 5], [full, q, zero, zero, t, full])
    g = np.select([k == 0, k == 1, k == 2, k == 3, k == 4, k == 5], [t, full, full, q, zero, zero])
    b = np.select([k == 0, k == 1, k == 2, k == 3, k == 4, k == 5], [zero, zero, t, full, full, q])
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


def _pixel_indices(window: Window) -> tuple[np.ndarray, np.ndarray]:
    px = np.clip(np.rint(window.xy[:, 0]).astype(int), 0, window.sensor_width - 1)
    py = np.clip(np.rint(window.xy[:, 1]).astype(int), 0, window.sensor_height - 1)
    return px, py


def orientation_image(window: Window) -> np.ndarray:
    img = np.zeros((window.sensor_height, window.sensor_width, 3), dtype=np.uint8)
    if len(window):
        px, py = _pixel_indices(window)
        angle = np.arctan2(window.flow[:, 1], window.flow[:, 0])
        img[py, px] = _hue_to_rgb(angle / (2.0 * np.pi))
    return img


def magnitude_image(window: Window) -> np.ndarray:
    img = np.zeros((window.sensor_height, window.sensor_width), dtype=np.uint8)
    if len(window):
        px, py = _pixel_indices(window)
        mag = np.linalg.norm(window.flow, axis=1)
        top = float(mag.max())
        scaled = (mag / top * 255.0).astype(np.uint8) if top > 0 else np.zeros_like(mag, dtype=np.uint8)
        img[py, px] = scaled
    return img


def label_colors(result: SegmentationResult) -> dict[int, tuple[int, int, int]]:
    """Palette assignment by descending member count; background is gray."""
    counts = {
        label: int(result.labeling.members(label).size)
        for label in result.labeling.active_labels
    }
    ordered = sorted(counts, key=lambda l: (-counts[l], l))
    colors: dict[int, tuple[int, int, int]] = {}
    nxt = 0
    for label in ordered:
        if label == result.background_label:
            colors[label] = BACKGROUND_GRAY
        else:
            colors[label] = PALETTE[nxt % len(PALETTE)]
            nxt += 1
    return colors


def segmentation_image(window: Window, result: SegmentationResult) -> np.ndarray:
    img = np.zeros((window.sensor_height, window.sensor_width, 3), dtype=np.uint8)
    if len(window):
        px, py = _pixel_indices(window)
        colors = label_colors(result)
        lut = np.zeros((max(colors) + 1, 3), dtype=np.uint8)
        for label, c in colors.items():
            lut[label] = c
        img[py, px] = lut[result.labeling.assignment]
    return img


def render_visuals(window: Window, result: SegmentationResult | None, out_dir, index: int) -> list:
    """Write the three per-window images; returns the written paths."""
    from pathlib import Path

    out = Path(out_dir)
    paths = [
        out / f"flow_angle_{index:05d}.ppm",
        out / f"flow_norm_{index:05d}.pgm",
        out / f"segmentation_{index:05d}.ppm",
    ]
    write_ppm(paths[0], orientation_image(window))
    write_pgm(paths[1], magnitude_image(window))
    if result is None:
        seg = np.zeros((window.sensor_height, window.sensor_width, 3), dtype=np.uint8)
    else:
        seg = segmentation_image(window, result)
    write_ppm(paths[2], seg)
    return paths
