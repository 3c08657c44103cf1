"""Mesh-graph algebra: adjacency, normalized Laplacian, Chebyshev basis, coarsening."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import autodiff as ad


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeshGraph:
    num_vertices: int
    faces: np.ndarray  # (F, 3) int; empty for coarsened levels
    adjacency: np.ndarray  # (C, C) symmetric 0/1
    degree: np.ndarray  # (C,)

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "MeshGraph":
        a = np.asarray(adjacency, dtype=np.float64)
        return cls(a.shape[0], np.zeros((0, 3), dtype=np.int64), a, a.sum(axis=1))

    def is_connected(self) -> bool:
        n, _ = connected_components(csr_matrix(self.adjacency), directed=False)
        return n == 1


def build_graph(faces, num_vertices: int) -> MeshGraph:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    c = int(num_vertices)
    if faces.size and (faces.min() < 0 or faces.max() >= c):
        raise GraphError(f"face index out of range for {c} vertices")
    for f in faces:
        if len(set(f.tolist())) != 3:
            raise GraphError(f"face {f.tolist()} does not have 3 distinct vertices")
    a = np.zeros((c, c))
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a[faces[:, i], faces[:, j]] = 1.0
        a[faces[:, j], faces[:, i]] = 1.0
    g = MeshGraph(c, faces, a, a.sum(axis=1))
    if not g.is_connected():
        raise GraphError("mesh graph is disconnected")
    return g


@dataclass(frozen=True, eq=False)
class Laplacian:
    L: np.ndarray
    lambda_max: float
    L_hat: np.ndarray

    @property
    def size(self) -> int:
        return self.L.shape[0]


def power_iteration(m: np.ndarray, rtol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix via Rayleigh quotients."""
    rng = np.random.default_rng(12345)
    v = rng.standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    rho = float(v @ m @ v)
    for _ in range(max_iter):
        w = m @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ m @ v)
        if abs(new - rho) <= rtol * abs(new):
            return new
        rho = new
    return rho


def normalized_laplacian(g: MeshGraph, rtol: float = 1e-12) -> Laplacian:
    """``L = I - D^-1/2 A D^-1/2`` and its Chebyshev rescaling ``2L/lambda_max - I``.

    ``rtol`` bounds the relative change of the Rayleigh quotient at which the
    power iteration stops; the default is tighter than 1e-8 so that the
    rescaled spectrum stays inside [-1, 1] to within 1e-9.
    """
    if np.any(g.degree <= 0):
        raise GraphError("zero-degree vertex")
    dinv = 1.0 / np.sqrt(g.degree)
    lap = np.eye(g.num_vertices) - dinv[:, None] * g.adjacency * dinv[None, :]
    lap = 0.5 * (lap + lap.T)
    lmax = power_iteration(lap, rtol=rtol)
    l_hat = 2.0 * lap / lmax - np.eye(g.num_vertices)
    return Laplacian(lap, lmax, l_hat)


def chebyshev_propagate(lap: Laplacian, x, order: int) -> list[ad.Tensor]:
    """``[T_0(L^) X, ..., T_S(L^) X]`` for features ``X`` of shape ``(..., C, F)``."""
    if order < 0:
        raise ValueError("order must be >= 0")
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != lap.size:
        raise ad.ShapeError(f"features {x.shape} do not match a {lap.size}-vertex Laplacian")
    l_hat = ad.Tensor(lap.L_hat)
    basis = [x]
    if order >= 1:
        basis.append(ad.matmul(l_hat, x))
    for _ in range(2, order + 1):
        basis.append(2.0 * ad.matmul(l_hat, basis[-1]) - basis[-2])
    return basis


# ---------------------------------------------------------------------------
# coarsening


def heavy_edge_matching(adjacency: np.ndarray) -> list[list[int]]:
    """Greedy matching with uniform weights and lowest-index tie-breaking.

    Returns the clusters (each one or two fine vertices) in creation order.
    """
    c = adjacency.shape[0]
    matched = np.zeros(c, dtype=bool)
    clusters: list[list[int]] = []
    for v in range(c):
        if matched[v]:
            continue
        matched[v] = True
        nbrs = np.flatnonzero(adjacency[v] > 0)
        free = [u for u in nbrs.tolist() if not matched[u]]
        if free:
            best = max(adjacency[v, u] for u in free)
            u = min(u for u in free if adjacency[v, u] == best)
            matched[u] = True
            clusters.append([v, u])
        else:
            clusters.append([v])
    return clusters


@dataclass(frozen=True, eq=False)
class GraphHierarchy:
    graphs: list[MeshGraph]
    laplacians: list[Laplacian]
    # parent_maps[l][p] = fine vertices (at level l) merged into coarse vertex p (level l+1)
    parent_maps: list[list[list[int]]]
    _up: list[np.ndarray] = field(default_factory=list, repr=False)
    _pool: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def num_levels(self) -> int:
        return len(self.graphs)

    def sizes(self) -> list[int]:
        return [g.num_vertices for g in self.graphs]

    def assignment(self, level: int) -> np.ndarray:
        """Coarse parent index (level+1) of every vertex at ``level``."""
        out = np.empty(self.graphs[level].num_vertices, dtype=np.int64)
        for p, kids in enumerate(self.parent_maps[level]):
            out[kids] = p
        return out

    def upsample_matrix(self, level: int) -> np.ndarray:
        """``(C_{level-1}, C_level)`` copy matrix."""
        return self._up[level - 1]

    def pool_matrix(self, level: int) -> np.ndarray:
        """``(C_{level+1}, C_level)`` averaging matrix."""
        return self._pool[level]


def _transfer_matrices(parent_map, n_fine):
    n_coarse = len(parent_map)
    up = np.zeros((n_fine, n_coarse))
    pool = np.zeros((n_coarse, n_fine))
    for p, kids in enumerate(parent_map):
        up[kids, p] = 1.0
        pool[p, kids] = 1.0 / len(kids)
    return up, pool


def coarsen(g: MeshGraph, levels: int, min_vertices: int = 4) -> GraphHierarchy:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not g.is_connected():
        raise GraphError("cannot coarsen a disconnected graph")
    graphs = [g]
    laps = [normalized_laplacian(g)]
    maps: list[list[list[int]]] = []
    ups, pools = [], []
    for _ in range(levels):
        fine = graphs[-1]
        clusters = heavy_edge_matching(fine.adjacency)
        if len(clusters) < min_vertices:
            raise GraphError(
                f"coarsening would leave {len(clusters)} vertices (< {min_vertices})"
            )
        up, pool = _transfer_matrices(clusters, fine.num_vertices)
        a = up.T @ fine.adjacency @ up
        np.fill_diagonal(a, 0.0)
        coarse = MeshGraph.from_adjacency((a > 0).astype(np.float64))
        graphs.append(coarse)
        laps.append(normalized_laplacian(coarse))
        maps.append(clusters)
        ups.append(up)
        pools.append(pool)
    return GraphHierarchy(graphs, laps, maps, ups, pools)


def upsample(h: GraphHierarchy, level: int, x) -> ad.Tensor:
    """Copy level-``level`` vertex features to their children at ``level - 1``."""
    if not 1 <= level < h.num_levels:
        raise IndexError(f"upsample level {level} out of range [1, {h.num_levels - 1}]")
    return ad.matmul(ad.Tensor(h.upsample_matrix(level)), ad.as_tensor(x))


def pool(h: GraphHierarchy, level: int, x) -> ad.Tensor:
    """Average level-``level`` features over each parent's children (to ``level + 1``)."""
    if not 0 <= level < h.num_levels - 1:
        raise IndexError(f"pool level {level} out of range [0, {h.num_levels - 2}]")
    return ad.matmul(ad.Tensor(h.pool_matrix(level)), ad.as_tensor(x))


# ---------------------------------------------------------------------------
# topology files: "C F" header then F lines of 0-based vertex triples


def write_topology(path: str | Path, num_vertices: int, faces) -> None:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = [f"{num_vertices} {len(faces)}"] + [f"{a} {b} {c}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_topology(path: str | Path) -> tuple[int, np.ndarray]:
    rows = Path(path).read_text().split("\n")
    c, f = (int(t) for t in rows[0].split())
    faces = np.array([[int(t) for t in r.split()] for r in rows[1 : 1 + f]], dtype=np.int64)
    if faces.shape != (f, 3):
        raise GraphError(f"{path}: expected {f} faces, found {len(faces)}")
    return c, faces
