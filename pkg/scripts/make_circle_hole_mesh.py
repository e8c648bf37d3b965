"""One-shot generator for the committed circle-hole fixture.

Square [-1,1]^2 with a circular hole of radius 0.4: ring points on both
boundaries, a jittered interior grid, scipy Delaunay, then triangles whose
centroid falls inside the hole are dropped.  The interior point count is
trimmed so the committed mesh has exactly 851 nodes.  Run once; the fixture
under meshes/ is the artifact of record.
"""

import sys
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from femnet import mesh as fm
from femnet import sparsity as fs

TARGET_NODES = 851
HOLE_RADIUS = 0.4
SEED = 20240517


def boundary_points():
    per_side = 24
    t = np.linspace(-1.0, 1.0, per_side + 1)[:-1]
    square = np.concatenate([
        np.stack([t, np.full_like(t, -1.0)], axis=1),
        np.stack([np.full_like(t, 1.0), t], axis=1),
        np.stack([-t, np.full_like(t, 1.0)], axis=1),
        np.stack([np.full_like(t, -1.0), -t], axis=1),
    ])
    n_ring = 48
    ang = np.linspace(0.0, 2.0 * np.pi, n_ring, endpoint=False)
    ring = HOLE_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return square, ring


def interior_points(rng, count):
    side = 32
    ticks = np.linspace(-1.0, 1.0, side + 2)[1:-1]
    X, Y = np.meshgrid(ticks, ticks)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    pts += rng.uniform(-0.4, 0.4, pts.shape) * (2.0 / (side + 1))
    r = np.linalg.norm(pts, axis=1)
    keep = (r > HOLE_RADIUS + 0.045) & (np.abs(pts).max(axis=1) < 1.0 - 0.04)
    pts = pts[keep]
    if len(pts) < count:
        raise SystemExit(f"only {len(pts)} interior candidates for {count} requested")
    idx = rng.choice(len(pts), size=count, replace=False)
    return pts[idx]


def main():
    rng = np.random.default_rng(SEED)
    square, ring = boundary_points()
    n_boundary = len(square) + len(ring)
    inner = interior_points(rng, TARGET_NODES - n_boundary)
    nodes = np.concatenate([square, ring, inner])
    assert len(nodes) == TARGET_NODES, len(nodes)

    tri = Delaunay(nodes)
    centroids = nodes[tri.simplices].mean(axis=1)
    keep = np.linalg.norm(centroids, axis=1) > HOLE_RADIUS * 0.995
    elements = tri.simplices[keep]

    boundary = set(range(n_boundary))
    m = fm._make_mesh(2, nodes, elements, boundary)
    dof = fm.build_dof_map(m)
    graph = fs.build_basis_graph(m, dof)
    assert fs.is_connected(graph), "fixture must be connected"

    out = Path(__file__).resolve().parents[1] / "meshes" / "circle_hole_851.mesh"
    out.parent.mkdir(exist_ok=True)
    fm.save_mesh(m, out)
    check = fm.load_mesh(out)
    assert check.n_nodes == TARGET_NODES
    print(f"wrote {out}: nodes={check.n_nodes} elements={check.n_elements} "
          f"N_h={dof.N_h} shape_regularity={check.shape_regularity:.2f}")


if __name__ == "__main__":
    main()
