"""Simplicial meshes (1D intervals, 2D triangulations) and P1 degree-of-freedom maps.

Structured meshes are generated directly; unstructured meshes are read from a
plain text format (see :func:`load_mesh`).  Homogeneous Dirichlet problems use
only interior nodes as unknowns, so the dof map carries the interior numbering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    """Invalid mesh data (bad resolution, degenerate element, malformed file)."""


@dataclass(frozen=True)
class Mesh:
    """A 1D segment mesh or 2D triangle mesh.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    nodes : ndarray, shape (n_nodes, dim)
        Node coordinates.
    elements : ndarray, shape (n_elements, dim + 1)
        Vertex indices per element, positively oriented in 2D.
    boundary_nodes : frozenset of int
        Indices of nodes on the Dirichlet boundary.
    h_max : float
        Maximum element diameter.
    shape_regularity : float
        max over elements of (diameter / inscribed-ball diameter); reported,
        not enforced.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_nodes: frozenset
    h_max: float
    shape_regularity: float
    grid_n: int | None = None  # resolution of a structured mesh, else None

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.elements.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


@dataclass(frozen=True)
class DofMap:
    """Numbering of the interior nodes (the unknowns of the Dirichlet problem).

    ``interior_nodes[k]`` is the mesh node of dof ``k``; ``node_to_dof`` is the
    inverse (-1 for boundary nodes).  For structured square meshes the
    numbering is row-major over the interior grid and ``grid_shape`` is
    ``(n - 1, n - 1)``.
    """

    interior_nodes: np.ndarray
    node_to_dof: np.ndarray
    N_h: int
    grid_shape: tuple | None = None

    def __post_init__(self):
        self.interior_nodes.setflags(write=False)
        self.node_to_dof.setflags(write=False)


def _element_geometry(dim, coords):
    """Per-element (diameter, inscribed-ball diameter, measure) for validation."""
    if dim == 1:
        length = np.abs(coords[:, 1, 0] - coords[:, 0, 0])
        return length, length, length
    e01 = np.linalg.norm(coords[:, 1] - coords[:, 0], axis=1)
    e12 = np.linalg.norm(coords[:, 2] - coords[:, 1], axis=1)
    e20 = np.linalg.norm(coords[:, 0] - coords[:, 2], axis=1)
    diam = np.maximum(e01, np.maximum(e12, e20))
    v1 = coords[:, 1] - coords[:, 0]
    v2 = coords[:, 2] - coords[:, 0]
    area = 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])
    perim = e01 + e12 + e20
    rho = 4.0 * np.abs(area) / perim  # twice the inradius
    return diam, rho, np.abs(area)


def _orient_elements(dim, nodes, elements):
    """Return elements with positive orientation; raise on degenerate ones.

    Idempotent: a second pass leaves the element tuples unchanged.
    """
    elements = np.array(elements, dtype=np.int64)
    coords = nodes[elements]
    if dim == 1:
        flip = coords[:, 1, 0] < coords[:, 0, 0]
        degenerate = coords[:, 1, 0] == coords[:, 0, 0]
    else:
        v1 = coords[:, 1] - coords[:, 0]
        v2 = coords[:, 2] - coords[:, 0]
        signed = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
        flip = signed < 0
        degenerate = signed == 0
    if degenerate.any():
        idx = int(np.nonzero(degenerate)[0][0])
        raise MeshError(f"degenerate element {idx}: zero measure")
    if flip.any():
        elements[flip] = elements[flip][:, ::-1] if dim == 1 else elements[np.nonzero(flip)[0]][:, [0, 2, 1]]
    return elements


def _validate_indices(dim, n_nodes, elements):
    bad = (elements < 0) | (elements >= n_nodes)
    if bad.any():
        idx = int(np.nonzero(bad.any(axis=1))[0][0])
        raise MeshError(f"element {idx}: node index out of range")
    for e, elem in enumerate(elements):
        if len(set(elem.tolist())) != dim + 1:
            raise MeshError(f"element {e}: repeated vertex indices")


def _validate(dim, nodes, elements, boundary):
    n_nodes = nodes.shape[0]
    in_element = np.zeros(n_nodes, dtype=bool)
    in_element[elements.ravel()] = True
    for b in sorted(boundary):
        if b < 0 or b >= n_nodes:
            raise MeshError(f"boundary node {b} out of range")
        if not in_element[b]:
            raise MeshError(f"dangling boundary node {b}: belongs to no element")


def _make_mesh(dim, nodes, elements, boundary, grid_n=None):
    nodes = np.ascontiguousarray(nodes, dtype=np.float64).reshape(-1, dim)
    elements = np.array(elements, dtype=np.int64).reshape(-1, dim + 1)
    _validate_indices(dim, nodes.shape[0], elements)
    elements = _orient_elements(dim, nodes, elements)
    _validate(dim, nodes, elements, boundary)
    diam, rho, _ = _element_geometry(dim, nodes[elements])
    return Mesh(
        dim=dim,
        nodes=nodes,
        elements=elements,
        boundary_nodes=frozenset(int(b) for b in boundary),
        h_max=float(diam.max()),
        shape_regularity=float((diam / rho).max()),
        grid_n=grid_n,
    )


def build_interval(n: int, domain=(-1.0, 1.0)) -> Mesh:
    """Uniform mesh of [a, b] with n segments; boundary nodes are the endpoints."""
    if n < 2:
        raise MeshError(f"invalid resolution n={n}: need n >= 2")
    a, b = float(domain[0]), float(domain[1])
    nodes = np.linspace(a, b, n + 1)[:, None]
    elements = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
    return _make_mesh(1, nodes, elements, {0, n}, grid_n=n)


def build_square(n: int, domain=(-1.0, 1.0)) -> Mesh:
    """Uniform n-by-n grid on [a, b]^2, each cell split into two right triangles.

    Every cell is cut along the same diagonal, the one joining grid node
    (i+1, j) to (i, j+1), so the interior adjacency of node (i, j) is
    (i±1, j), (i, j±1), (i+1, j-1), (i-1, j+1).  Node k = j*(n+1) + i.
    """
    if n < 2:
        raise MeshError(f"invalid resolution n={n}: need n >= 2")
    a, b = float(domain[0]), float(domain[1])
    ticks = np.linspace(a, b, n + 1)
    X, Y = np.meshgrid(ticks, ticks, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    idx = np.arange((n + 1) * (n + 1)).reshape(n + 1, n + 1)  # idx[j, i]
    ll = idx[:-1, :-1].ravel()
    lr = idx[:-1, 1:].ravel()
    ul = idx[1:, :-1].ravel()
    ur = idx[1:, 1:].ravel()
    lower = np.stack([ll, lr, ul], axis=1)  # triangle below the lr-ul diagonal
    upper = np.stack([lr, ur, ul], axis=1)  # triangle above it
    elements = np.concatenate([lower, upper], axis=0)

    j, i = np.divmod(np.arange((n + 1) * (n + 1)), n + 1)
    boundary = np.nonzero((i == 0) | (i == n) | (j == 0) | (j == n))[0]
    return _make_mesh(2, nodes, elements, set(boundary.tolist()), grid_n=n)


def build_dof_map(mesh: Mesh) -> DofMap:
    """Interior-node numbering.  Structured squares get the row-major grid order."""
    n_nodes = mesh.n_nodes
    is_boundary = np.zeros(n_nodes, dtype=bool)
    is_boundary[sorted(mesh.boundary_nodes)] = True
    interior = np.nonzero(~is_boundary)[0].astype(np.int64)

    grid_shape = None
    if mesh.grid_n is not None:
        n = mesh.grid_n
        if mesh.dim == 2:
            # node j*(n+1)+i for 1 <= i,j <= n-1, ordered j-major then i:
            # exactly the row-major dof k = (n-1)*(j-1) + (i-1).
            jj, ii = np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="ij")
            interior = (jj * (n + 1) + ii).ravel().astype(np.int64)
            grid_shape = (n - 1, n - 1)
        else:
            grid_shape = (n - 1,)

    node_to_dof = np.full(n_nodes, -1, dtype=np.int64)
    node_to_dof[interior] = np.arange(interior.size)
    return DofMap(interior_nodes=interior, node_to_dof=node_to_dof,
                  N_h=int(interior.size), grid_shape=grid_shape)


# ---------------------------------------------------------------------------
# Text format:
#   mesh <dim> <node_count> <element_count> <boundary_count>
#   node_count lines of <dim> reals, element_count lines of dim+1 indices,
#   then boundary_count node indices.  '#' starts a comment.
# ---------------------------------------------------------------------------

def _tokens_with_lines(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0]
        for tok in body.split():
            yield lineno, tok


def load_mesh(path) -> Mesh:
    """Read a mesh from the text format.  Orientation is normalized on load."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stream = _tokens_with_lines(text)
    lineno = 0

    def take(count, conv, what):
        nonlocal lineno
        out = []
        for _ in range(count):
            try:
                lineno, tok = next(stream)
            except StopIteration:
                raise MeshError(f"{path}: unexpected end of file while reading {what}") from None
            try:
                out.append(conv(tok))
            except ValueError:
                raise MeshError(f"{path}:{lineno}: bad token {tok!r} in {what}") from None
        return out

    magic = take(1, str, "header")[0]
    if magic != "mesh":
        raise MeshError(f"{path}:{lineno}: expected 'mesh' header, got {magic!r}")
    dim, n_nodes, n_elements, n_boundary = take(4, int, "header")
    if dim not in (1, 2):
        raise MeshError(f"{path}:{lineno}: unsupported dimension {dim}")
    nodes = np.array(take(n_nodes * dim, float, "node coordinates"), dtype=np.float64).reshape(n_nodes, dim)
    elements = np.array(take(n_elements * (dim + 1), int, "element indices"), dtype=np.int64).reshape(n_elements, dim + 1)
    boundary = take(n_boundary, int, "boundary node indices")
    try:
        return _make_mesh(dim, nodes, elements, set(boundary))
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from None


def save_mesh(mesh: Mesh, path) -> None:
    """Write the text format; load_mesh round-trips coordinates and indices exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mesh {mesh.dim} {mesh.n_nodes} {mesh.n_elements} {len(mesh.boundary_nodes)}\n")
        for row in mesh.nodes:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        for elem in mesh.elements:
            fh.write(" ".join(str(int(v)) for v in elem) + "\n")
        for b in sorted(mesh.boundary_nodes):
            fh.write(f"{b}\n")
