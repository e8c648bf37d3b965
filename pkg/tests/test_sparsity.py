import numpy as np
import pytest

from femnet import mesh as fm
from femnet import sparsity as fs


def grid_graph(n, domain=(0.0, 1.0)):
    m = fm.build_square(n, domain)
    dof = fm.build_dof_map(m)
    return fs.build_basis_graph(m, dof)


class TestBasisGraph:
    def test_node7_neighbors_on_5x5_grid(self):
        # 1-based node 7 sits at grid (2,2); its basis support touches
        # exactly nodes 2, 3, 6, 8, 11, 12
        g = grid_graph(6)
        nbrs = sorted(int(v) + 1 for v in g.adjacency[6])
        assert nbrs == [2, 3, 6, 8, 11, 12]

    def test_1d_path_graph(self):
        m = fm.build_interval(4, (0.0, 1.0))
        g = fs.build_basis_graph(m, fm.build_dof_map(m))
        assert [list(a) for a in g.adjacency] == [[1], [0, 2], [1]]

    def test_ordered_pair_count_at_level_one(self):
        g = grid_graph(6)
        pat = fs.build_pattern(g, 1)
        assert pat.nnz == 137

    def test_adjacency_symmetric_no_self(self):
        g = grid_graph(9)
        for v, nbrs in enumerate(g.adjacency):
            assert v not in nbrs
            for w in nbrs:
                assert v in g.adjacency[w]


class TestBall:
    def test_radius_zero(self):
        g = grid_graph(6)
        assert fs.ball(g, 13, 0) == {13}

    def test_large_radius_reaches_everything(self):
        g = grid_graph(6)
        assert fs.ball(g, 0, 99) == set(range(25))

    def test_ball_size_sums_match_table(self):
        g = grid_graph(6)
        assert sum(len(fs.ball(g, v, 4)) for v in range(25)) == 555
        assert sum(len(fs.ball(g, v, 8)) for v in range(25)) == 625

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            fs.ball(grid_graph(3), 0, -1)


class TestPattern:
    def test_rows_are_bfs_balls(self):
        # independent oracle: per-vertex BFS against the matrix-power rows
        g = grid_graph(7)
        for c in (1, 2, 3):
            pat = fs.build_pattern(g, c)
            for v in range(g.n_vertices):
                assert set(pat.row(v).tolist()) == fs.ball(g, v, c)

    @pytest.mark.parametrize("N_h,c,expected", [
        (100, 1, 622), (900, 4, 47930), (2500, 8, 463912), (10000, 1, 69202),
    ])
    def test_reference_cells(self, N_h, c, expected):
        n = int(round(N_h ** 0.5)) + 1
        pat = fs.build_pattern(grid_graph(n), c)
        assert pat.nnz == expected

    def test_monotone_in_level(self):
        g = grid_graph(8)
        prev = fs.build_pattern(g, 1)
        for c in range(2, 6):
            cur = fs.build_pattern(g, c)
            assert cur.contains(prev)
            prev = cur

    def test_saturation_at_diameter(self):
        g = grid_graph(6)
        pat = fs.build_pattern(g, 8)   # 5x5 grid has diameter 8
        assert pat.nnz == 25 * 25

    def test_composition_law(self):
        # stacking L levels of the c-pattern reaches exactly the (L c)-pattern
        g = grid_graph(16)  # N_h = 225
        p1 = fs.build_pattern(g, 1)
        p2 = fs.build_pattern(g, 2)
        p3 = fs.build_pattern(g, 3)
        c11 = fs.compose_patterns(p1, p1)
        assert np.array_equal(c11.indptr, p2.indptr)
        assert np.array_equal(c11.indices, p2.indices)
        c12 = fs.compose_patterns(p1, p2)
        assert np.array_equal(c12.indptr, p3.indptr)
        assert np.array_equal(c12.indices, p3.indices)

    def test_sparsity_measure(self):
        g = grid_graph(6)
        assert fs.sparsity_measure(fs.build_pattern(g, 1)) == pytest.approx(0.7808)
        assert fs.sparsity_measure(fs.full_pattern(25)) == 0.0

    def test_disconnected_graph_warns(self):
        adj = (np.array([1]), np.array([0]), np.array([3]), np.array([2]))
        g = fs.BasisGraph(n_vertices=4, adjacency=adj)
        with pytest.warns(UserWarning, match="disconnected"):
            fs.build_pattern(g, 2)


class TestRandomPattern:
    def test_minimal_is_permutation(self):
        pat = fs.random_pattern(3, 3, np.random.default_rng(0))
        assert pat.nnz == 3
        assert sorted(pat.indices.tolist()) == [0, 1, 2]
        assert np.array_equal(pat.row_sizes(), [1, 1, 1])

    def test_matches_requested_nnz_exactly(self):
        g = grid_graph(16)
        target = fs.build_pattern(g, 4).nnz
        pat = fs.random_pattern(225, target, np.random.default_rng(5))
        assert pat.nnz == target

    @pytest.mark.parametrize("seed", range(10))
    def test_no_empty_rows_or_columns(self, seed):
        pat = fs.random_pattern(225, 2000, np.random.default_rng(seed))
        assert (pat.row_sizes() > 0).all()
        assert len(set(pat.indices.tolist())) == 225

    def test_infeasible_nnz(self):
        with pytest.raises(ValueError, match="infeasible"):
            fs.random_pattern(5, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="exceeds"):
            fs.random_pattern(5, 26, np.random.default_rng(0))


class TestConnectivity:
    def test_square_grids_connected_up_to_64(self):
        for n in range(2, 65):
            assert fs.is_connected(grid_graph(n))

    def test_two_cliques_disconnected(self):
        adj = (np.array([1]), np.array([0]), np.array([3]), np.array([2]))
        g = fs.BasisGraph(n_vertices=4, adjacency=adj)
        assert not fs.is_connected(g)
        assert fs.graph_distance(g, 0, 3) == fs.INFINITE_DISTANCE

    def test_corner_distances(self):
        # the cell diagonal joins (i+1, j) to (i, j+1), so corners (1,5) and
        # (5,1) are linked by diagonal hops while (1,1) to (5,5) needs 8 axis
        # steps; BFS cross-checks the lattice metric
        g = grid_graph(6)
        assert fs.graph_distance(g, 20, 4) == 4
        assert fs.graph_distance(g, 0, 24) == 8

    def test_distance_zero_and_one(self):
        g = grid_graph(6)
        assert fs.graph_distance(g, 7, 7) == 0
        assert fs.graph_distance(g, 6, 7) == 1


class TestExport:
    def test_pattern_round_trip(self, tmp_path):
        import io
        g = grid_graph(5)
        pat = fs.build_pattern(g, 2)
        buf = io.StringIO()
        fs.save_pattern(pat, buf)
        buf.seek(0)
        back = fs.load_pattern(buf)
        assert np.array_equal(back.indptr, pat.indptr)
        assert np.array_equal(back.indices, pat.indices)
        assert back.c_level == pat.c_level
