"""Labeling energy and its minimization by expansion moves.

The energy couples three terms: truncated squared constraint residuals of
each observation under its label's model, a Potts smoothness penalty over
the spatial graph, and a per-active-label cost. Minimization sweeps
expansion moves: for each label, a binary min-cut decides which nodes adopt
it. Label costs enter the moves through auxiliary nodes (one per label that
the move could vacate, plus one when the move would newly activate its
label), so emptied labels are credited inside the cut rather than pruned
afterwards; a post-hoc pruning mode is available as a fallback.

Co-located observations share a graph node and therefore a label; move
construction and bookkeeping happen in node space, with per-node data terms
summed over the node's observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._maxflow import dinic_min_cut
from ._maxflow import expansion_move as expansion_move_kernel
from .core import AffineMotionModel, Labeling, TracePoint, Window, flow_residuals
from .core import float_repr as fr
from .errors import MissingModel
from .graph import SpatialGraph

ACCEPT_EPS = 1e-12


@dataclass(frozen=True)
class EnergyParams:
    """Weights of the labeling energy."""

    lambda_p: float = 0.5   # smoothness weight
    lambda_m: float = 30.0  # per-active-label cost
    tau_d: float = 1.0      # data-term truncation, px

    def __post_init__(self):
        for name in ("lambda_p", "lambda_m", "tau_d"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class EnergyBreakdown:
    data: float
    smoothness: float
    label_cost: float
    total: float

    @classmethod
    def build(cls, data: float, smoothness: float, label_cost: float) -> "EnergyBreakdown":
        return cls(float(data), float(smoothness), float(label_cost),
                   float(data) + float(smoothness) + float(label_cost))

    def trace_point(self, phase: str) -> TracePoint:
        return TracePoint(phase, self.data, self.smoothness, self.label_cost, self.total)


@dataclass(frozen=True)
class FlowNetwork:
    """Directed capacitated network with designated source and sink nodes."""

    node_count: int
    source: int
    sink: int
    tails: np.ndarray
    heads: np.ndarray
    caps: np.ndarray

    def __post_init__(self):
        tails = np.asarray(self.tails, dtype=np.int64)
        heads = np.asarray(self.heads, dtype=np.int64)
        caps = np.asarray(self.caps, dtype=float)
        if not (tails.shape == heads.shape == caps.shape):
            raise ValueError("arc arrays must have matching shapes")
        if tails.size and (tails.min() < 0 or tails.max() >= self.node_count
                           or heads.min() < 0 or heads.max() >= self.node_count):
            raise ValueError("arc endpoints out of range")
        if not (0 <= self.source < self.node_count and 0 <= self.sink < self.node_count):
            raise ValueError("source/sink out of range")
        if self.source == self.sink:
            raise ValueError("source and sink must differ")
        if caps.size and (not np.all(np.isfinite(caps)) or caps.min() < 0):
            raise ValueError("capacities must be finite and non-negative")
        for name, arr in (("tails", tails), ("heads", heads), ("caps", caps)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arcs(cls, node_count: int, source: int, sink: int,
                  arcs: Sequence[tuple[int, int, float]]) -> "FlowNetwork":
        if arcs:
            a = np.array([(u, v, c) for u, v, c in arcs], dtype=float)
            return cls(node_count, source, sink, a[:, 0].astype(np.int64),
                       a[:, 1].astype(np.int64), a[:, 2])
        empty = np.empty(0, dtype=np.int64)
        return cls(node_count, source, sink, empty, empty.copy(), np.empty(0))


def min_cut(net: FlowNetwork) -> tuple[float, np.ndarray]:
    """Minimum s-t cut value and the source-side node mask achieving it.

    The partition is the one with the minimal sink side (nodes that can
    still reach the sink through residual arcs), so nodes indifferent
    between the sides land on the source side. The returned value is the
    capacity of the returned cut summed in float64; it equals the max flow
    up to the 1e-12 saturation slack per arc.
    """
    m = net.tails.size
    tails = np.empty(2 * m, dtype=np.int64)
    heads = np.empty(2 * m, dtype=np.int64)
    caps = np.zeros(2 * m)
    tails[0::2] = net.tails
    heads[0::2] = net.heads
    tails[1::2] = net.heads
    heads[1::2] = net.tails
    caps[0::2] = net.caps
    _, sink_side = dinic_min_cut(net.node_count, tails, heads, caps, net.source, net.sink)
    source_side = ~sink_side
    crossing = source_side[net.tails] & sink_side[net.heads]
    value = float(net.caps[crossing].sum())
    return value, source_side


def _node_labels(assignment: np.ndarray, observation_node: np.ndarray, node_count: int) -> np.ndarray:
    """Label per graph node; the first observation at a node decides."""
    labels = np.zeros(node_count, dtype=np.int64)
    labels[observation_node[::-1]] = assignment[::-1]
    return labels


def scaled_residuals(model: AffineMotionModel, xy: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Constraint residuals scaled by inverse flow magnitude, in px.

    Dividing the raw residual n.u - |n|^2 by |n| turns it into the signed
    distance between the model's flow and the constraint line, which puts
    small and large flows on the same px scale; the truncation threshold
    tau_d is specified in px against this form.
    """
    mags = np.linalg.norm(flow, axis=1)
    safe = np.where(mags > 0, mags, 1.0)
    return flow_residuals(model, xy, flow) / safe


def energy(
    labeling: Labeling,
    models: dict[int, AffineMotionModel],
    graph: SpatialGraph,
    window: Window,
    params: EnergyParams,
) -> EnergyBreakdown:
    """Evaluate the full labeling energy from scratch."""
    assignment = labeling.assignment
    data = 0.0
    tau_sq = params.tau_d * params.tau_d
    for label in sorted(labeling.active_labels):
        if label not in models:
            raise MissingModel(f"label {label} has no model")
        mask = assignment == label
        r = scaled_residuals(models[label], window.xy[mask], window.flow[mask])
        data += float(np.minimum(r * r, tau_sq).sum())
    node_labels = _node_labels(assignment, graph.observation_node, graph.node_count)
    cut = node_labels[graph.edges[:, 0]] != node_labels[graph.edges[:, 1]] if graph.edge_count else np.empty(0, bool)
    smoothness = params.lambda_p * float(graph.weights[cut].sum()) if graph.edge_count else 0.0
    label_cost = params.lambda_m * len(labeling.active_labels)
    return EnergyBreakdown.build(data, smoothness, label_cost)


def data_term_matrix(
    window: Window,
    models_by_column: Sequence[AffineMotionModel],
    tau_d: float,
) -> np.ndarray:
    """Truncated squared scaled residual of every observation under every model."""
    n = len(window)
    d = np.empty((n, len(models_by_column)))
    tau_sq = tau_d * tau_d
    mags = np.linalg.norm(window.flow, axis=1)
    inv = 1.0 / np.where(mags > 0, mags, 1.0)
    for c, model in enumerate(models_by_column):
        r = flow_residuals(model, window.xy, window.flow) * inv
        d[:, c] = np.minimum(r * r, tau_sq)
    return d


class _MoveState:
    """Node-space bookkeeping shared by the expansion sweeps."""

    def __init__(self, window: Window, graph: SpatialGraph, params: EnergyParams,
                 columns: list[int], models: dict[int, AffineMotionModel],
                 assignment: np.ndarray):
        self.params = params
        self.columns = columns
        self.col_of = {label: c for c, label in enumerate(columns)}
        self.n_nodes = graph.node_count
        self.e0 = np.ascontiguousarray(graph.edges[:, 0], dtype=np.int64)
        self.e1 = np.ascontiguousarray(graph.edges[:, 1], dtype=np.int64)
        self.wp = np.ascontiguousarray(params.lambda_p * graph.weights)
        if not np.all(self.wp >= 0):
            raise AssertionError("pairwise terms must be submodular: Potts weights must be >= 0")
        self.obs_node = graph.observation_node
        self.obs_per_node = np.bincount(self.obs_node, minlength=self.n_nodes)

        d_obs = data_term_matrix(window, [models[label] for label in columns], params.tau_d)
        if self.obs_node.size == self.n_nodes and np.array_equal(
            np.sort(self.obs_node), np.arange(self.n_nodes)
        ):
            self.d_node = np.empty_like(d_obs)
            self.d_node[self.obs_node] = d_obs
        else:
            self.d_node = np.zeros((self.n_nodes, len(columns)))
            np.add.at(self.d_node, self.obs_node, d_obs)

        node_lab = _node_labels(assignment, self.obs_node, self.n_nodes)
        uniq = np.unique(node_lab)
        uniq_cols = np.array([self.col_of[int(l)] for l in uniq], dtype=np.int64)
        self.cur = uniq_cols[np.searchsorted(uniq, node_lab)]
        self.d_keep = np.ascontiguousarray(self.d_node[np.arange(self.n_nodes), self.cur])

    def apply_switch(self, switched: np.ndarray, a: int) -> None:
        self.cur[switched] = a
        self.d_keep[switched] = self.d_node[switched, a]

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.cur, weights=self.obs_per_node, minlength=len(self.columns))

    def resync_keep_costs(self) -> None:
        self.d_keep = np.ascontiguousarray(self.d_node[np.arange(self.n_nodes), self.cur])

    def breakdown(self) -> EnergyBreakdown:
        data = float(self.d_node[np.arange(self.n_nodes), self.cur].sum())
        if self.e0.size:
            cut = self.cur[self.e0] != self.cur[self.e1]
            smooth = float(self.wp[cut].sum())
        else:
            smooth = 0.0
        label_cost = self.params.lambda_m * int((self.label_counts() > 0).sum())
        return EnergyBreakdown.build(data, smooth, label_cost)

    def assignment(self) -> np.ndarray:
        labels = np.array(self.columns, dtype=np.int64)
        return labels[self.cur][self.obs_node].astype(np.int32)


def _expansion_move(state: _MoveState, a: int, use_label_gadgets: bool):
    """Solve one expansion move onto column ``a``.

    Returns None when the move proposes no switch, otherwise the switched
    mask plus the proposed labeling's exact (data, smoothness, label_cost)
    triple. Pairwise terms are the Kolmogorov decomposition of the Potts
    move energy (submodular since the weights are non-negative); label
    costs use the vacancy/activation auxiliary-node gadgets.
    """
    switched, new_data, new_smooth, new_active = expansion_move_kernel(
        state.cur,
        a,
        state.d_keep,
        np.ascontiguousarray(state.d_node[:, a]),
        state.e0,
        state.e1,
        state.wp,
        state.params.lambda_m,
        use_label_gadgets,
        len(state.columns),
    )
    if not switched.any():
        return None
    return switched, new_data, new_smooth, state.params.lambda_m * new_active


def _prune_sweep(state: _MoveState) -> bool:
    """Try emptying each label wholesale when that lowers the total energy."""
    lam_m = state.params.lambda_m
    if lam_m <= 0:
        return False
    accepted = False
    counts = state.label_counts()
    order = sorted(
        (c for c in range(len(state.columns)) if counts[c] > 0),
        key=lambda c: (counts[c], state.columns[c]),
    )
    for col in order:
        counts = state.label_counts()
        if counts[col] == 0 or int((counts > 0).sum()) <= 1:
            continue
        members = state.cur == col
        d_alt = state.d_node.copy()
        d_alt[:, col] = np.inf
        empty_cols = np.flatnonzero(counts == 0)
        d_alt[:, empty_cols] = np.inf
        best_alt = np.argmin(d_alt[members], axis=1)
        proposal = state.cur.copy()
        proposal[members] = best_alt
        before = state.breakdown().total
        saved = state.cur
        state.cur = proposal
        after = state.breakdown().total
        if after < before - ACCEPT_EPS:
            accepted = True
            state.resync_keep_costs()
        else:
            state.cur = saved
    return accepted


def alpha_expansion(
    labeling: Labeling,
    models: dict[int, AffineMotionModel],
    graph: SpatialGraph,
    window: Window,
    params: EnergyParams,
    order: Sequence[int],
    max_sweeps: int = 8,
    label_cost_mode: str = "delong",
    trace_out: list[TracePoint] | None = None,
) -> tuple[Labeling, EnergyBreakdown]:
    """Sweep expansion moves over ``order`` until no move improves the energy.

    Each sweep visits the pool labels in descending member count; a move is
    accepted only if the exactly recomputed total strictly decreases, which
    also resolves cut ties in favor of the incumbent labeling. Sweeping
    stops after a full pass accepts nothing or ``max_sweeps`` passes ran.
    Labels left without members are dropped from the active set.
    """
    if label_cost_mode not in ("delong", "prune"):
        raise ValueError(f"unknown label_cost_mode {label_cost_mode!r}")
    order = [int(l) for l in order]
    for label in order:
        if label not in models:
            raise MissingModel(f"label {label} has no model")
    for label in labeling.active_labels:
        if label not in models:
            raise MissingModel(f"label {label} has no model")

    columns = list(dict.fromkeys(order + sorted(labeling.active_labels)))
    state = _MoveState(window, graph, params, columns, models, labeling.assignment)
    pool = [state.col_of[l] for l in dict.fromkeys(order)]
    use_gadgets = label_cost_mode == "delong"

    current = state.breakdown()
    dirty = {c: True for c in pool}
    any_accept_ever = False

    for _sweep in range(max_sweeps):
        counts = state.label_counts()
        sweep_order = sorted(pool, key=lambda c: (-counts[c], state.columns[c]))
        accepted_any = False
        for a in sweep_order:
            if not dirty[a]:
                continue
            move = _expansion_move(state, a, use_gadgets)
            if move is None:
                dirty[a] = False
                continue
            switched, new_data, new_smooth, new_label_cost = move
            new_total = new_data + new_smooth + new_label_cost
            if new_total < current.total - ACCEPT_EPS:
                state.apply_switch(switched, a)
                current = EnergyBreakdown.build(new_data, new_smooth, new_label_cost)
                accepted_any = True
                any_accept_ever = True
                for c in pool:
                    dirty[c] = True
                dirty[a] = False
            else:
                dirty[a] = False
        if label_cost_mode == "prune":
            if _prune_sweep(state):
                accepted_any = True
                any_accept_ever = True
                for c in pool:
                    dirty[c] = True
                current = state.breakdown()
        if trace_out is not None:
            trace_out.append(current.trace_point(f"expansion_sweep_{_sweep + 1}"))
        if not accepted_any:
            break

    if any_accept_ever:
        out = Labeling.from_assignment(state.assignment())
    else:
        out = labeling
    return out, current


def write_energy_trace(path, trace: Sequence[TracePoint]) -> None:
    """Dump an optimization trace as `sweep,data,smoothness,label_cost,total` rows."""
    with open(path, "w") as f:
        f.write("sweep,data,smoothness,label_cost,total\n")
        for i, p in enumerate(trace, start=1):
            f.write(f"{i},{fr(p.data)},{fr(p.smoothness)},{fr(p.label_cost)},{fr(p.total)}\n")
