import numpy as np
import pytest

from femnet import fem as fe
from femnet import mesh as fm
from femnet import network as nn
from femnet import sparsity as fs
from femnet import training as tr
from femnet import uat


def grid_setup(n=6, domain=(0.0, 1.0)):
    m = fm.build_square(n, domain)
    dof = fm.build_dof_map(m)
    graph = fs.build_basis_graph(m, dof)
    system = fe.assemble_elliptic(m, dof, fe.CoefficientSet.constant(2))
    return m, dof, graph, system


def path_graph(n):
    adj = tuple(np.array([j for j in (i - 1, i + 1) if 0 <= j < n]) for i in range(n))
    return fs.BasisGraph(n_vertices=n, adjacency=adj)


def two_components(k=3):
    # two disjoint paths of length k
    n = 2 * k
    adj = []
    for i in range(n):
        block = 0 if i < k else 1
        lo, hi = block * k, block * k + k
        adj.append(np.array([j for j in (i - 1, i + 1) if lo <= j < hi]))
    return fs.BasisGraph(n_vertices=n, adjacency=tuple(adj))


class TestCommutatorIdentity:
    def test_thousand_random_instances(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(3, 21))
            i, j, k = rng.choice(n, 3, replace=False)
            s, t = rng.standard_normal(2)
            lhs = uat.transvection_dense(n, i, j, s * t)
            rhs = (uat.transvection_dense(n, i, k, s)
                   @ uat.transvection_dense(n, k, j, t)
                   @ uat.transvection_dense(n, i, k, -s)
                   @ uat.transvection_dense(n, k, j, -t))
            worst = max(worst, np.abs(lhs - rhs).max())
        assert worst <= 1e-12


class TestFactorElementary:
    def test_identity_gives_unit_diagonal_only(self):
        factors = uat.factor_elementary(np.eye(4))
        assert len(factors) == 1
        assert factors[0].kind == "diagonal"
        np.testing.assert_array_equal(factors[0].d, np.ones(4))

    def test_diagonal_matrix_single_factor(self):
        factors = uat.factor_elementary(np.diag([2.0, 3.0]))
        assert len(factors) == 1
        np.testing.assert_array_equal(factors[0].d, [2.0, 3.0])

    @pytest.mark.parametrize("size,trials", [(25, 5), (64, 2)])
    def test_random_well_conditioned_reconstruction(self, size, trials):
        rng = np.random.default_rng(1)
        for _ in range(trials):
            while True:
                M = rng.standard_normal((size, size))
                if np.linalg.cond(M) < 1e3:
                    break
            product = uat.product_of_factors(uat.factor_elementary(M), size)
            assert np.abs(product - M).max() <= 1e-9 * np.abs(M).max()

    def test_permutation_needs_signed_swaps(self):
        P = np.roll(np.eye(4), 1, axis=0)
        product = uat.product_of_factors(uat.factor_elementary(P), 4)
        np.testing.assert_allclose(product, P, atol=1e-12)

    def test_singular_rejected(self):
        M = np.ones((3, 3))
        with pytest.raises(uat.FactorizationFailure, match="pivot"):
            uat.factor_elementary(M)


class TestExpandTransvection:
    def test_edge_pair_passthrough(self):
        g = path_graph(3)
        f = uat.ElementaryFactor.transvection(0, 1, 2.5)
        assert uat.expand_transvection(f, g) == [f]

    def test_path_graph_expansion_form(self):
        g = path_graph(3)
        chain = uat.expand_transvection(uat.ElementaryFactor.transvection(0, 2, 0.7), g)
        emitted = [(f.i, f.j, f.t) for f in chain]
        assert emitted == [(0, 1, 1.0), (1, 2, 0.7), (0, 1, -1.0), (1, 2, -0.7)]
        product = uat.product_of_factors(chain, 3)
        np.testing.assert_array_equal(product, uat.transvection_dense(3, 0, 2, 0.7))

    def test_distance_eight_corners(self):
        _, _, graph, _ = grid_setup(6)
        # same-direction corners of the 5x5 grid are 8 hops apart
        f = uat.ElementaryFactor.transvection(0, 24, 1.3)
        chain = uat.expand_transvection(f, graph)
        assert len(chain) == 3 * 2 ** 7 - 2
        assert len(chain) <= 4 ** 7
        product = uat.product_of_factors(chain, 25)
        assert np.abs(product - f.to_dense(25)).max() <= 1e-10
        for piece in chain:
            assert uat._is_edge(graph, piece.i, piece.j)

    def test_disconnected_not_expandable(self):
        g = two_components(3)
        with pytest.raises(uat.NotExpandable):
            uat.expand_transvection(uat.ElementaryFactor.transvection(0, 5, 1.0), g)


class TestGSparseFactorization:
    def test_poisson_matrix_is_single_factor(self):
        _, _, graph, system = grid_setup(6)
        fz = uat.gsparse_factorization(system.K.toarray(), graph)
        assert fz.depth == 1
        assert fz.product_checksum == 0.0

    def test_poisson_inverse_factorizes_and_verifies(self):
        _, _, graph, system = grid_setup(6)
        Minv = np.linalg.inv(system.K.toarray())
        fz = uat.gsparse_factorization(Minv, graph)
        assert fz.product_checksum <= 1e-9 * np.abs(Minv).max()
        assert all(uat.is_gsparse(F, graph) for F in fz.factors)
        for F in fz.factors:
            assert np.linalg.matrix_rank(F) == 25

    def test_disconnected_off_block_matrix_rejected(self):
        g = two_components(3)
        M = np.eye(6)
        M[0, 5] = 1.0   # couples the two components
        with pytest.raises(uat.NotExpandable):
            uat.gsparse_factorization(M, g)

    def test_block_diagonal_products_stay_block_diagonal(self):
        # the negative direction: G-sparse matrices of a 2-component graph
        # multiply into block-diagonal matrices only
        g = two_components(3)
        rng = np.random.default_rng(3)
        mask = uat._allowed_mask(g)
        P = np.eye(6)
        for _ in range(12):
            W = np.where(mask, rng.standard_normal((6, 6)), 0.0)
            P = P @ W
        assert not P[:3, 3:].any() and not P[3:, :3].any()


class TestRealizeRelu:
    def test_identity_map_exact(self):
        _, _, graph, _ = grid_setup(6)
        net = uat.realize_relu(np.eye(25), graph, 5.0)
        X = np.random.default_rng(0).uniform(-5, 5, (100, 25))
        out, _ = nn.forward(net, X)
        assert np.abs(out - X).max() <= 1e-12

    def test_poisson_solution_operator(self):
        m, dof, graph, system = grid_setup(6)
        Minv = np.linalg.inv(system.K.toarray())
        batch = tr.make_batch(tr.ForcingSampler("trig2d", np.random.default_rng(5)),
                              fe.LoadAssembler(m, dof), 100)
        radius = np.abs(batch.F).max() * 1.01
        net = uat.realize_relu(Minv, graph, radius)
        out, _ = nn.forward(net, batch.F)
        ref = fe.factorized(system.K)(batch.F.T).T
        assert np.abs(out - ref).max() <= 1e-6 * np.abs(ref).max()

    def test_layers_structurally_gsparse(self):
        _, _, graph, system = grid_setup(6)
        Minv = np.linalg.inv(system.K.toarray())
        net = uat.realize_relu(Minv, graph, 1.0)
        pattern = fs.build_pattern(graph, 1)
        mask = pattern.dense_mask()
        for layer in net.layers:
            dense = layer.to_dense()
            assert not dense[~mask].any()

    def test_depth_cap(self):
        _, _, graph, system = grid_setup(6)
        Minv = np.linalg.inv(system.K.toarray())
        with pytest.raises(uat.RealizationTooDeep):
            uat.realize_relu(Minv, graph, 1.0, max_layers=10)

    def test_preactivations_positive_on_box(self):
        _, _, graph, system = grid_setup(4)
        Minv = np.linalg.inv(system.K.toarray())
        net = uat.realize_relu(Minv, graph, 2.0)
        X = np.random.default_rng(1).uniform(-2, 2, (50, 9))
        _, cache = nn.forward(net, X)
        for P in cache.preacts[:-1]:
            assert P.min() > 0


class TestRealizeGeneral:
    def test_sigmoid_identity_block(self):
        _, _, graph, _ = grid_setup(6)
        act = uat.SmoothActivation.for_name("sigmoid", 0.0)
        net, report = uat.realize_general(np.eye(25), graph, 1.0, 1e-3, act,
                                          np.random.default_rng(0))
        X = np.random.default_rng(1).uniform(-1, 1, (500, 25))
        out, _ = nn.forward(net, X)
        assert np.abs(out - X).max() <= 1e-3

    def test_swish_block_tiny_delta(self):
        g = path_graph(8)
        act = uat.SmoothActivation.for_name("swish", 1.0)
        net, report = uat.realize_general(np.eye(8), g, 1.0, 1e-6, act,
                                          np.random.default_rng(0))
        X = np.random.default_rng(2).uniform(-1, 1, (500, 8))
        out, _ = nn.forward(net, X)
        assert np.abs(out - X).max() <= 1e-6

    def test_relu_precondition_rejected(self):
        with pytest.raises(ValueError, match="realization"):
            uat.SmoothActivation.for_name("relu", 0.0)

    def test_zero_slope_rejected(self):
        with pytest.raises(ValueError, match="zero derivative"):
            uat.SmoothActivation.for_name("swish", -1.2784645427610738)

    def test_sigmoid_on_small_solution_operator(self):
        m, dof, graph, system = grid_setup(4)
        Minv = np.linalg.inv(system.K.toarray())
        act = uat.SmoothActivation.for_name("sigmoid", 0.0)
        batch = tr.make_batch(tr.ForcingSampler("trig2d", np.random.default_rng(3)),
                              fe.LoadAssembler(m, dof), 50)
        radius = float(np.abs(batch.F).max()) * 1.01
        net, report = uat.realize_general(Minv, graph, radius, 1e-3, act,
                                          np.random.default_rng(0), samples=400)
        out, _ = nn.forward(net, batch.F)
        ref = fe.factorized(system.K)(batch.F.T).T
        assert np.abs(out - ref).max() <= 1e-3
