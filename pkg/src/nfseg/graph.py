"""Spatial adjacency over a window's observations via Delaunay triangulation.

Co-located observations collapse to a single node and share its adjacency.
Degenerate inputs (fewer than 3 distinct points, collinear point sets) fall
back to a path graph along the points. Co-circular quads, which pixel-lattice
inputs produce constantly, are resolved to a canonical diagonal so the edge
set is a deterministic function of the point set: of the two valid diagonals,
the one whose lexicographically smaller endpoint sorts first wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .core import Window
from .core import float_repr as fr

# Relative in-circle determinant threshold below which a quad is treated as
# potentially co-circular and re-tested in exact arithmetic.
_INCIRCLE_REL_EPS = 1e-10


@dataclass(frozen=True)
class SpatialGraph:
    """Delaunay adjacency of the deduplicated observation positions.

    ``edges`` is (m, 2) with i < j and no duplicates; ``weights`` is (m,).
    ``observation_node`` maps each window observation to its node.
    """

    node_count: int
    node_xy: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    observation_node: np.ndarray

    def __post_init__(self):
        for name in ("node_xy", "edges", "weights", "observation_node"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])


def build_graph(window: Window, weighting: str = "uniform", sigma_s: float = 8.0) -> SpatialGraph:
    """Build the Delaunay adjacency graph of a window's observations.

    ``weighting`` selects edge weights: "uniform" gives w == 1 everywhere
    (pure Potts smoothness); "exp_dist" gives exp(-dist / sigma_s).
    """
    if len(window) < 1:
        raise ValueError("cannot build a graph over an empty window")
    if weighting not in ("uniform", "exp_dist"):
        raise ValueError(f"unknown weighting {weighting!r}")

    xy = np.asarray(window.xy, dtype=float)
    # Dedup through a complex view: componentwise equality and lexicographic
    # (x, y) order match unique-by-row, at a fraction of the sort cost.
    fused = xy[:, 0] + 1j * xy[:, 1]
    uniq, observation_node = np.unique(fused, return_inverse=True)
    observation_node = observation_node.ravel().astype(np.int64)
    nodes = np.c_[uniq.real, uniq.imag]
    n = nodes.shape[0]

    if n == 1:
        edges = np.empty((0, 2), dtype=np.int64)
    elif n == 2:
        edges = np.array([[0, 1]], dtype=np.int64)
    else:
        edges = _triangulate_edges(nodes)

    if weighting == "uniform":
        weights = np.ones(edges.shape[0])
    else:
        d = np.linalg.norm(nodes[edges[:, 0]] - nodes[edges[:, 1]], axis=1)
        weights = np.exp(-d / sigma_s)

    return SpatialGraph(
        node_count=n,
        node_xy=nodes,
        edges=edges,
        weights=weights,
        observation_node=observation_node,
    )


def dump_edges_csv(path, graph: SpatialGraph) -> None:
    """Debug dump of the edge list as `i,j,w` rows."""
    with open(path, "w") as f:
        f.write("i,j,w\n")
        for (i, j), w in zip(graph.edges, graph.weights):
            f.write(f"{int(i)},{int(j)},{fr(w)}\n")


def _collinear(nodes: np.ndarray) -> bool:
    p0 = nodes[0]
    d = nodes - p0
    far = int(np.argmax(np.einsum("ij,ij->i", d, d)))
    if far == 0:
        return True
    cross = d[:, 0] * d[far, 1] - d[:, 1] * d[far, 0]
    scale = float(np.abs(d).max()) ** 2
    return bool(np.all(np.abs(cross) <= 1e-12 * scale))


def _path_edges(nodes: np.ndarray) -> np.ndarray:
    order = np.lexsort((nodes[:, 1], nodes[:, 0]))
    pairs = np.c_[order[:-1], order[1:]]
    return np.sort(pairs, axis=1).astype(np.int64)


def _triangulate_edges(nodes: np.ndarray) -> np.ndarray:
    if _collinear(nodes):
        return _path_edges(nodes)
    try:
        tri = Delaunay(nodes)
    except QhullError:
        return _path_edges(nodes)
    triangles = np.sort(tri.simplices.astype(np.int64), axis=1)
    triangles = _canonicalize_cocircular(nodes, triangles)
    n = nodes.shape[0]
    keys = np.concatenate([
        triangles[:, 0] * n + triangles[:, 1],
        triangles[:, 0] * n + triangles[:, 2],
        triangles[:, 1] * n + triangles[:, 2],
    ])
    keys = np.unique(keys)
    return np.c_[keys // n, keys % n]


def _interior_quads(triangles: np.ndarray, n_nodes: int):
    """Interior edges and the two opposite vertices of their triangle pair.

    Returns (i, j, u, v) arrays where (i, j) is the shared edge and u, v the
    remaining vertices of the two incident triangles.
    """
    t = triangles
    nt = t.shape[0]
    keys = np.concatenate([
        t[:, 0] * n_nodes + t[:, 1],
        t[:, 0] * n_nodes + t[:, 2],
        t[:, 1] * n_nodes + t[:, 2],
    ])
    tri_idx = np.concatenate([np.arange(nt)] * 3)
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    tri_idx = tri_idx[order]
    first = np.flatnonzero(keys[:-1] == keys[1:])
    i, j = keys[first] // n_nodes, keys[first] % n_nodes
    ta, tb = tri_idx[first], tri_idx[first + 1]
    u = t[ta].sum(axis=1) - i - j
    v = t[tb].sum(axis=1) - i - j
    return i, j, u, v, ta, tb


def _incircle_det(nodes: np.ndarray, a, b, c, d) -> np.ndarray:
    """Vectorized in-circle determinant of point d against triangle (a, b, c)."""
    ax = nodes[a, 0] - nodes[d, 0]
    ay = nodes[a, 1] - nodes[d, 1]
    bx = nodes[b, 0] - nodes[d, 0]
    by = nodes[b, 1] - nodes[d, 1]
    cx = nodes[c, 0] - nodes[d, 0]
    cy = nodes[c, 1] - nodes[d, 1]
    return (
        (ax * ax + ay * ay) * (bx * cy - by * cx)
        - (bx * bx + by * by) * (ax * cy - ay * cx)
        + (cx * cx + cy * cy) * (ax * by - ay * bx)
    )


def _cocircular_exact(nodes: np.ndarray, a: int, b: int, c: int, d: int) -> bool:
    f = lambda v: Fraction(float(v))
    ax, ay = f(nodes[a, 0]) - f(nodes[d, 0]), f(nodes[a, 1]) - f(nodes[d, 1])
    bx, by = f(nodes[b, 0]) - f(nodes[d, 0]), f(nodes[b, 1]) - f(nodes[d, 1])
    cx, cy = f(nodes[c, 0]) - f(nodes[d, 0]), f(nodes[c, 1]) - f(nodes[d, 1])
    det = (
        (ax * ax + ay * ay) * (bx * cy - by * cx)
        - (bx * bx + by * by) * (ax * cy - ay * cx)
        + (cx * cx + cy * cy) * (ax * by - ay * bx)
    )
    return det == 0


# Integer coordinates up to this bound keep every intermediate product of
# the in-circle determinant below 2^53, so the float evaluation is exact.
_EXACT_INT_BOUND = 4096.0


def _canonicalize_cocircular(nodes: np.ndarray, triangles: np.ndarray, max_passes: int = 8) -> np.ndarray:
    """Flip exactly co-circular quad diagonals to the canonical choice.

    Each pass detects candidate quads with vectorized predicates (exact for
    integer pixel coordinates, tolerance plus rational confirmation
    otherwise) and applies non-conflicting flips in canonical order. A flip
    replaces a diagonal by one with a strictly smaller key, so the process
    cannot cycle; real windows converge in one or two passes.
    """
    tris = triangles.copy()
    ints_exact = bool(
        np.all(nodes == np.rint(nodes)) and np.abs(nodes).max(initial=0.0) <= _EXACT_INT_BOUND
    )
    # Lexicographic rank of each node position; the canonical diagonal is
    # the one whose lower-ranked endpoint comes first.
    pos_rank = np.empty(nodes.shape[0], dtype=np.int64)
    pos_rank[np.lexsort((nodes[:, 1], nodes[:, 0]))] = np.arange(nodes.shape[0])

    for _ in range(max_passes):
        if tris.shape[0] < 2:
            break
        i, j, u, v, ta, tb = _interior_quads(tris, nodes.shape[0])
        if i.size == 0:
            break
        det = _incircle_det(nodes, i, j, u, v)
        if ints_exact:
            cocircular = det == 0.0
        else:
            span = np.maximum(
                np.abs(nodes[i] - nodes[v]).max(axis=1), np.abs(nodes[j] - nodes[v]).max(axis=1)
            )
            span = np.maximum(span, np.abs(nodes[u] - nodes[v]).max(axis=1))
            span = np.where(span == 0, 1.0, span)
            cocircular = np.abs(det) <= _INCIRCLE_REL_EPS * span**4

        key_old = np.minimum(pos_rank[i], pos_rank[j])
        key_new = np.minimum(pos_rank[u], pos_rank[v])
        prefer = cocircular & (key_new < key_old) & (u != v)
        if not prefer.any():
            break
        # The flipped pair is valid only if i and j sit strictly on opposite
        # sides of the new diagonal (u, v); exact for integer coordinates.
        duv = nodes[v] - nodes[u]
        ci = duv[:, 0] * (nodes[i, 1] - nodes[u, 1]) - duv[:, 1] * (nodes[i, 0] - nodes[u, 0])
        cj = duv[:, 0] * (nodes[j, 1] - nodes[u, 1]) - duv[:, 1] * (nodes[j, 0] - nodes[u, 0])
        prefer &= (np.sign(ci) * np.sign(cj)) < 0

        candidates = np.flatnonzero(prefer)
        if candidates.size == 0:
            break
        candidates = candidates[np.argsort(key_old[candidates], kind="stable")]
        touched = np.zeros(tris.shape[0], dtype=bool)
        flipped = False
        for k in candidates:
            a, b = int(ta[k]), int(tb[k])
            if touched[a] or touched[b]:
                continue
            ii, jj, uu, vv = int(i[k]), int(j[k]), int(u[k]), int(v[k])
            if not ints_exact and not _cocircular_exact(nodes, ii, jj, uu, vv):
                continue
            tris[a] = sorted((uu, vv, ii))
            tris[b] = sorted((uu, vv, jj))
            touched[a] = touched[b] = True
            flipped = True
        if not flipped:
            break
    return tris
