import math

import numpy as np
import pytest

from nfseg.core import AffineMotionModel, Window, affine_flow
from nfseg.flowgen import BoxRegion, SceneObject, SyntheticScene


def synth_cluster(model, k, seed, sigma_dir=0.0, sigma_mag=0.0, p_out=0.0,
                  width=346, height=260, min_mag=0.1):
    """Aperture-projected observations of one model at random positions.

    Positions are uniform over the sensor, gradient directions uniform over
    the circle; returns (xy, flow) arrays of exactly k observations whose
    magnitudes clear ``min_mag``.
    """
    rng = np.random.default_rng(seed)
    xy_list, flow_list = [], []
    need = k
    while need > 0:
        m = max(4 * need, 32)
        xy = np.c_[rng.uniform(0, width - 1, m), rng.uniform(0, height - 1, m)]
        phi = rng.uniform(0, 2 * math.pi, m)
        d = np.c_[np.cos(phi), np.sin(phi)]
        u = affine_flow(model, xy)
        proj = np.einsum("ij,ij->i", u, d)
        flow = proj[:, None] * d
        if sigma_dir > 0:
            rot = rng.normal(0, sigma_dir, m)
            c, s = np.cos(rot), np.sin(rot)
            fx, fy = flow[:, 0].copy(), flow[:, 1].copy()
            flow[:, 0] = c * fx - s * fy
            flow[:, 1] = s * fx + c * fy
        if sigma_mag > 0:
            flow *= (1 + rng.normal(0, sigma_mag, m))[:, None]
        if p_out > 0:
            out = rng.random(m) < p_out
            mags = np.linalg.norm(flow[~out], axis=1)
            lo, hi = float(mags.min()), float(mags.max())
            nk = int(out.sum())
            ang = rng.uniform(0, 2 * math.pi, nk)
            mag = rng.uniform(lo, hi, nk)
            flow[out] = np.c_[mag * np.cos(ang), mag * np.sin(ang)]
        keep = np.linalg.norm(flow, axis=1) >= min_mag
        xy_list.append(xy[keep])
        flow_list.append(flow[keep])
        need = k - sum(a.shape[0] for a in xy_list)
    xy = np.concatenate(xy_list)[:k]
    flow = np.concatenate(flow_list)[:k]
    return xy, flow


def window_from_arrays(xy, flow, width=346, height=260, start=0.0, duration=0.01):
    n = xy.shape[0]
    t = np.linspace(start, start + duration * (1 - 1e-9), n, endpoint=False) if n else np.empty(0)
    return Window(start_time=start, duration=duration, sensor_width=width,
                  sensor_height=height, t=t, xy=xy, flow=flow)


def edges_admit_empty_circles(pts, edges, rel_eps=1e-9):
    """Vectorized brute-force Delaunay edge check over a whole edge set.

    An edge belongs to a Delaunay triangulation exactly when some circle
    through its endpoints contains no other point; circle centers on the
    perpendicular bisector leave, per third point, a half-line of allowed
    offsets, so the edge passes iff the offset interval is nonempty.
    """
    pts = np.asarray(pts, dtype=float)
    scale = max(1.0, float(np.abs(pts).max()) ** 2)
    for i, j in edges:
        p, q = pts[int(i)], pts[int(j)]
        mid = (p + q) / 2.0
        d = q - p
        norm = math.hypot(d[0], d[1])
        if norm == 0:
            return False
        nhat = np.array([-d[1], d[0]]) / norm
        a0 = np.einsum("ij,ij->i", mid - pts, mid - pts) - (mid - p) @ (mid - p)
        b = 2.0 * (pts @ -nhat + nhat @ p)
        mask = np.ones(pts.shape[0], dtype=bool)
        mask[[int(i), int(j)]] = False
        a0, b = a0[mask], b[mask]
        flat = np.abs(b) <= 1e-15 * scale
        if np.any(flat & (a0 < -rel_eps * scale)):
            return False
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = -a0 / b
        lo = bound[(~flat) & (b > 0)]
        hi = bound[(~flat) & (b < 0)]
        lo_v = lo.max() if lo.size else -np.inf
        hi_v = hi.min() if hi.size else np.inf
        if lo_v > hi_v + rel_eps:
            return False
    return True


@pytest.fixture
def two_imo_scene():
    """Dominant background plus two moving objects, moderate noise."""
    return SyntheticScene(
        sensor_width=346, sensor_height=260,
        background=AffineMotionModel(1.0, 0.0, 0.5, 0.0),
        objects=(
            SceneObject(BoxRegion(60, 60, 110, 110), AffineMotionModel(1.0, 0.0, 8.0, 0.0)),
            SceneObject(BoxRegion(220, 150, 280, 210), AffineMotionModel(1.0, 0.0, -6.0, 3.0)),
        ),
        sigma_dir=0.05, sigma_mag=0.02, outlier_fraction=0.05,
    )
