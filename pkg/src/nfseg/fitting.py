"""Affine model fitting on clusters of normal-flow observations.

Two routes: a closed-form linear solve over the 6-entry vectorized model
(stacked constraint rows, column-equilibrated least squares, then parameter
decoupling), and a Levenberg-Marquardt refinement of the 4 model parameters
under the truncated squared-residual objective shared with the labeling
energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._maxflow import lm_refine
from .core import (
    AffineMotionModel,
    NormalFlowObservation,
    Window,
    decouple_model,
    flow_residuals,
)
from .errors import InsufficientObservations, NonFinite, ZeroNormalFlow

DEFAULT_TAU = 1.0       # px, residual truncation shared with the labeling energy
LM_LAMBDA0 = 1e-3
LM_LAMBDA_UP = 10.0
LM_LAMBDA_DOWN = 10.0
MIN_LINEAR = 6
MIN_NONLINEAR = 4


@dataclass(frozen=True)
class FitReport:
    model: AffineMotionModel
    residual_sum: float
    observation_count: int
    method: str  # "linear" | "nonlinear"
    converged: bool
    lm_iterations: int = 0
    rank_deficient: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.residual_sum) and self.residual_sum >= 0):
            raise ValueError("residual sum must be finite and non-negative")


def _cluster_arrays(cluster) -> tuple[np.ndarray, np.ndarray]:
    """Accepts a Window, an (xy, flow) array pair, or a sequence of observations."""
    if isinstance(cluster, Window):
        return np.asarray(cluster.xy), np.asarray(cluster.flow)
    if isinstance(cluster, tuple) and len(cluster) == 2:
        xy, flow = cluster
        return np.asarray(xy, dtype=float).reshape(-1, 2), np.asarray(flow, dtype=float).reshape(-1, 2)
    obs: Sequence[NormalFlowObservation] = list(cluster)
    if not obs:
        return np.empty((0, 2)), np.empty((0, 2))
    xy = np.array([[o.x, o.y] for o in obs], dtype=float)
    flow = np.array([o.n for o in obs], dtype=float)
    return xy, flow


def design_row(obs: NormalFlowObservation) -> tuple[np.ndarray, float]:
    """Constraint row and right-hand side for one observation.

    The row is (nx*x, nx*y, nx, ny*x, ny*y, ny) and the rhs |n|^2; the dot
    product of the row with the true model vector equals the rhs exactly on
    noise-free data.
    """
    nx, ny = float(obs.n[0]), float(obs.n[1])
    if nx == 0.0 and ny == 0.0:
        raise ZeroNormalFlow("constraint row undefined for zero normal flow")
    row = np.array([nx * obs.x, nx * obs.y, nx, ny * obs.x, ny * obs.y, ny])
    return row, nx * nx + ny * ny


def _design_matrix(xy: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nx, ny = flow[:, 0], flow[:, 1]
    if np.any((nx == 0.0) & (ny == 0.0)):
        raise ZeroNormalFlow("cluster contains a zero normal-flow vector")
    x, y = xy[:, 0], xy[:, 1]
    rows = np.column_stack([nx * x, nx * y, nx, ny * x, ny * y, ny])
    rhs = nx * nx + ny * ny
    return rows, rhs


def _inverse_magnitudes(flow: np.ndarray) -> np.ndarray:
    mags = np.linalg.norm(flow, axis=1)
    return 1.0 / np.where(mags > 0, mags, 1.0)


def cluster_residual(cluster, model: AffineMotionModel, tau: float = DEFAULT_TAU, truncate: bool = True) -> float:
    """Sum of squared constraint residuals of a cluster under a model.

    Residuals are scaled by inverse flow magnitude (the px-valued
    point-to-line distance form); with truncation enabled each squared
    residual is capped at tau^2, the same bounded data term the labeling
    energy uses.
    """
    xy, flow = _cluster_arrays(cluster)
    if xy.shape[0] == 0:
        return 0.0
    r = flow_residuals(model, xy, flow) * _inverse_magnitudes(flow)
    r2 = r * r
    if truncate:
        r2 = np.minimum(r2, tau * tau)
    return float(r2.sum())


def fit_linear(cluster, tau: float = DEFAULT_TAU, truncate: bool = True) -> FitReport:
    """Closed-form model fit: stacked constraint rows solved by least squares.

    Columns are equilibrated to unit max-abs before the solve because raw
    pixel coordinates spread the column scales over two to three orders of
    magnitude. Rank deficiency is reported, not fatal: the minimum-norm
    solution is decoupled as usual.
    """
    xy, flow = _cluster_arrays(cluster)
    k = xy.shape[0]
    if k < MIN_LINEAR:
        raise InsufficientObservations(f"linear fit needs >= {MIN_LINEAR} observations, got {k}")
    rows, rhs = _design_matrix(xy, flow)
    col_scale = np.abs(rows).max(axis=0)
    col_scale[col_scale == 0] = 1.0
    solution, _, rank, _ = np.linalg.lstsq(rows / col_scale, rhs, rcond=None)
    m = solution / col_scale
    model = decouple_model(m)
    return FitReport(
        model=model,
        residual_sum=cluster_residual((xy, flow), model, tau, truncate),
        observation_count=k,
        method="linear",
        converged=True,
        rank_deficient=bool(rank < 6),
    )


def _residuals_and_jacobian(params: np.ndarray, xy: np.ndarray, flow: np.ndarray, inv_mag: np.ndarray):
    rho, theta, tx, ty = params
    c, s = math.cos(theta), math.sin(theta)
    x, y = xy[:, 0], xy[:, 1]
    nx, ny = flow[:, 0], flow[:, 1]
    ux = (rho * c - 1.0) * x - rho * s * y + tx
    uy = rho * s * x + (rho * c - 1.0) * y + ty
    r = (nx * ux + ny * uy - (nx * nx + ny * ny)) * inv_mag
    jac = np.column_stack([
        (nx * (c * x - s * y) + ny * (s * x + c * y)) * inv_mag,
        (nx * (-rho * s * x - rho * c * y) + ny * (rho * c * x - rho * s * y)) * inv_mag,
        nx * inv_mag,
        ny * inv_mag,
    ])
    return r, jac


def residuals_and_jacobian(model: AffineMotionModel, cluster):
    """Least-squares residuals and their analytic Jacobian wrt (rho, theta, tx, ty).

    These are the residuals the nonlinear fit minimizes: the constraint
    residual scaled by inverse flow magnitude.
    """
    xy, flow = _cluster_arrays(cluster)
    return _residuals_and_jacobian(np.array(model.params()), xy, flow, _inverse_magnitudes(flow))


def fit_nonlinear(
    cluster,
    initial: AffineMotionModel,
    max_iters: int = 50,
    tol: float = 1e-8,
    tau: float = DEFAULT_TAU,
    truncate: bool = True,
    objective_tol: float = 1e-10,
) -> FitReport:
    """Levenberg-Marquardt refinement of the truncated least-squares objective.

    Steps are proposed from the Gauss-Newton system of the untruncated
    residuals restricted to currently-untruncated observations (falling back
    to all observations when too few remain, which happens with poor initial
    models), and accepted only when the truncated objective decreases, so
    the reported objective never increases across accepted iterations.
    Damping is multiplicative on the scaled diagonal: up 10x on rejection,
    down 10x on acceptance.
    """
    xy, flow = _cluster_arrays(cluster)
    k = xy.shape[0]
    if k < MIN_NONLINEAR:
        raise InsufficientObservations(f"nonlinear fit needs >= {MIN_NONLINEAR} observations, got {k}")
    inv_mag = _inverse_magnitudes(flow)

    params, objective, iterations, converged, nonfinite = lm_refine(
        np.ascontiguousarray(xy),
        np.ascontiguousarray(flow),
        inv_mag,
        np.array(initial.params()),
        tau,
        truncate,
        max_iters,
        tol,
        objective_tol,
        LM_LAMBDA0,
        LM_LAMBDA_UP,
        LM_LAMBDA_DOWN,
        MIN_NONLINEAR,
    )
    if nonfinite:
        raise NonFinite("non-finite residuals or Jacobian during the fit")

    model = AffineMotionModel(rho=params[0], theta=params[1], t_x=params[2], t_y=params[3])
    return FitReport(
        model=model,
        residual_sum=float(objective),
        observation_count=k,
        method="nonlinear",
        converged=bool(converged),
        lm_iterations=int(iterations),
    )
