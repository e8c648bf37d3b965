"""Basis-support graphs and the sparsity patterns they induce.

Two interior dofs are adjacent when their nodal basis functions share an
element (supports overlap on a set of positive measure).  A connectivity
level C gives each row of a layer the columns inside the radius-C graph ball
around its dof; patterns for all layers of a network are identical.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import DofMap, Mesh

INFINITE_DISTANCE = math.inf


@dataclass(frozen=True)
class BasisGraph:
    """Undirected simple graph on the interior dofs; adjacency lists are sorted."""

    n_vertices: int
    adjacency: tuple  # tuple of sorted int64 ndarrays, self excluded

    def degree(self, v) -> int:
        return len(self.adjacency[v])

    def to_csr(self) -> sp.csr_matrix:
        indptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(a) for a in self.adjacency])
        indices = np.concatenate(self.adjacency) if self.n_vertices else np.empty(0, np.int64)
        data = np.ones(indices.size, dtype=bool)
        return sp.csr_matrix((data, indices, indptr), shape=(self.n_vertices, self.n_vertices))


@dataclass(frozen=True)
class SparsityPattern:
    """Per-row allowed columns in CSR layout.

    Graph-derived patterns (c_level >= 1) are symmetric and always allow the
    diagonal; random patterns carry c_level = 0 and guarantee only nonempty
    rows and columns.
    """

    indptr: np.ndarray
    indices: np.ndarray
    c_level: int

    def __post_init__(self):
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    @property
    def n(self) -> int:
        return self.indptr.size - 1

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row(self, i) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def row_sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_csr(self, data=None) -> sp.csr_matrix:
        if data is None:
            data = np.ones(self.nnz, dtype=bool)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def dense_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        rows = np.repeat(np.arange(self.n), self.row_sizes())
        mask[rows, self.indices] = True
        return mask

    def contains(self, other: "SparsityPattern") -> bool:
        """True if every position of `other` is allowed here."""
        if other.n != self.n:
            return False
        diff = other.to_csr(np.ones(other.nnz)) - self.to_csr(np.ones(self.nnz))
        return bool((diff.data <= 0).all())


def build_basis_graph(mesh: Mesh, dof: DofMap) -> BasisGraph:
    """Adjacency between interior dofs that share a mesh element."""
    n2d = dof.node_to_dof
    neighbors = [set() for _ in range(dof.N_h)]
    for elem in mesh.elements:
        ds = [int(n2d[v]) for v in elem if n2d[v] >= 0]
        for a in ds:
            for b in ds:
                if a != b:
                    neighbors[a].add(b)
    adjacency = tuple(np.array(sorted(s), dtype=np.int64) for s in neighbors)
    return BasisGraph(n_vertices=dof.N_h, adjacency=adjacency)


def ball(graph: BasisGraph, v: int, r: int) -> set:
    """Vertices within graph distance r of v (BFS); ball(v, 0) == {v}."""
    if r < 0:
        raise ValueError("radius must be >= 0")
    seen = {v}
    frontier = deque([(v, 0)])
    while frontier:
        u, d = frontier.popleft()
        if d == r:
            continue
        for w in graph.adjacency[u]:
            w = int(w)
            if w not in seen:
                seen.add(w)
                frontier.append((w, d + 1))
    return seen


def is_connected(graph: BasisGraph) -> bool:
    if graph.n_vertices == 0:
        return True
    return len(ball(graph, 0, graph.n_vertices)) == graph.n_vertices


def graph_distance(graph: BasisGraph, u: int, v: int):
    """Shortest-path edge count between u and v; INFINITE_DISTANCE if unreachable."""
    path = shortest_path(graph, u, v)
    return INFINITE_DISTANCE if path is None else len(path) - 1


def shortest_path(graph: BasisGraph, u: int, v: int):
    """One BFS shortest path from u to v as a vertex list, or None."""
    if u == v:
        return [u]
    parent = {u: u}
    frontier = deque([u])
    while frontier:
        a = frontier.popleft()
        for w in graph.adjacency[a]:
            w = int(w)
            if w not in parent:
                parent[w] = a
                if w == v:
                    path = [v]
                    while path[-1] != u:
                        path.append(parent[path[-1]])
                    return path[::-1]
                frontier.append(w)
    return None


def build_pattern(graph: BasisGraph, c_level: int) -> SparsityPattern:
    """Pattern whose row i allows the radius-c_level ball around i.

    Computed as the boolean c_level-th power of (adjacency + identity), which
    is a levelwise BFS over all sources at once.
    """
    if c_level < 1:
        raise ValueError("c_level must be >= 1")
    if not is_connected(graph):
        warnings.warn("basis graph is disconnected; pattern rows cannot reach "
                      "all dofs at any level", stacklevel=2)
    n = graph.n_vertices
    reach = (graph.to_csr() + sp.eye(n, dtype=bool, format="csr")).astype(bool)
    power = reach.copy()
    for _ in range(c_level - 1):
        power = (power @ reach).astype(bool)
    power.sort_indices()
    return SparsityPattern(indptr=power.indptr.astype(np.int64),
                           indices=power.indices.astype(np.int64),
                           c_level=c_level)


def sparsity_measure(pattern: SparsityPattern) -> float:
    """1 - nnz / n^2: the fraction of a dense layer's weights that are absent."""
    return 1.0 - pattern.nnz / float(pattern.n) ** 2


def full_pattern(n: int) -> SparsityPattern:
    """All positions allowed (a dense layer); c_level 0 marks it non-graph."""
    indptr = np.arange(0, n * n + 1, n, dtype=np.int64)
    indices = np.tile(np.arange(n, dtype=np.int64), n)
    return SparsityPattern(indptr=indptr, indices=indices, c_level=0)


def identity_pattern(n: int) -> SparsityPattern:
    indptr = np.arange(n + 1, dtype=np.int64)
    indices = np.arange(n, dtype=np.int64)
    return SparsityPattern(indptr=indptr, indices=indices, c_level=0)


def random_pattern(n: int, nnz: int, rng: np.random.Generator) -> SparsityPattern:
    """Uniform pattern with exactly nnz positions, no all-zero row or column.

    A random permutation seeds one position per row and per column in a single
    pass; the remaining nnz - n positions are drawn uniformly without
    replacement from the rest of the grid.
    """
    if nnz < n:
        raise ValueError(f"nnz={nnz} infeasible: nonempty rows need at least n={n}")
    if nnz > n * n:
        raise ValueError(f"nnz={nnz} exceeds n^2={n * n}")
    perm = rng.permutation(n)
    chosen = np.zeros(n * n, dtype=bool)
    chosen[np.arange(n) * n + perm] = True
    remaining = np.nonzero(~chosen)[0]
    extra = rng.choice(remaining, size=nnz - n, replace=False)
    chosen[extra] = True
    flat = np.nonzero(chosen)[0]
    rows = flat // n
    cols = flat % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return SparsityPattern(indptr=indptr.astype(np.int64),
                           indices=cols.astype(np.int64), c_level=0)


def compose_patterns(a: SparsityPattern, b: SparsityPattern) -> SparsityPattern:
    """Boolean product: positions reachable by stacking layer b after layer a."""
    prod = (a.to_csr() @ b.to_csr()).astype(bool)
    prod.sort_indices()
    return SparsityPattern(indptr=prod.indptr.astype(np.int64),
                           indices=prod.indices.astype(np.int64), c_level=0)


def save_pattern(pattern: SparsityPattern, fh) -> None:
    """Write the `pat` text block to an open text file handle."""
    fh.write(f"pat {pattern.n} {pattern.nnz} {pattern.c_level}\n")
    rows = np.repeat(np.arange(pattern.n), pattern.row_sizes())
    for i, j in zip(rows, pattern.indices):
        fh.write(f"{i} {j}\n")


def load_pattern(fh) -> SparsityPattern:
    header = fh.readline().split()
    if len(header) != 4 or header[0] != "pat":
        raise ValueError(f"bad pattern header: {header}")
    n, nnz, c_level = int(header[1]), int(header[2]), int(header[3])
    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    for p in range(nnz):
        i, j = fh.readline().split()
        rows[p], cols[p] = int(i), int(j)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    if not (np.diff(rows) >= 0).all():
        raise ValueError("pattern rows out of order")
    return SparsityPattern(indptr=indptr.astype(np.int64), indices=cols, c_level=c_level)
