import json

import numpy as np
import pytest

from femnet import experiments as ex
from femnet import training as tr


class TestTable1:
    def test_all_cells_recompute_exactly(self):
        rows = list(ex.compute_table1())
        assert len(rows) == 19
        for N_h, c, nnz, measure, exp_nnz, exp_s in rows:
            assert nnz == exp_nnz
            assert measure == pytest.approx(exp_s, abs=5e-5)


class TestTableParamCounts:
    """Parameter totals in the experiment-table convention: pattern weights
    on the interior graph, biases (and dense widths) over every mesh node."""

    @pytest.mark.parametrize("n,c,dim,expected", [
        (16, 3, 2, 42_096),        # advection-diffusion-reaction, sparse
        (16, 0, 2, 502_860),       # same resolution, dense
        (32, 5, 2, 452_520),
        (32, 0, 2, 7_122_060),
        (64, 8, 1, 6_384),         # 1D Burgers, sparse
        (64, 0, 1, 25_740),
    ])
    def test_reference_rows(self, n, c, dim, expected):
        assert ex.table_param_count(n, c, dim=dim) == expected

    @pytest.mark.slow
    def test_larger_rows(self):
        assert ex.table_param_count(64, 10, dim=2) == 6_785_784
        assert ex.table_param_count(128, 10, dim=2) == 29_827_320


class TestHeaders:
    def test_code_version_is_stable_hash(self):
        a, b = ex.code_version(), ex.code_version()
        assert a == b and len(a) == 12

    def test_header_lines_echo_config(self):
        lines = ex.header_lines({"alpha": 1, "beta": "x"})
        assert lines[0].startswith("# code_version")
        assert "# alpha = 1" in lines and "# beta = x" in lines


class TestDenseCap:
    def test_estimate_and_refusal(self):
        est = ex.dense_bytes_estimate(225, 6)
        assert est == 8 * 6 * (225 * 225 + 225)
        config = tr.TrainConfig(c_level=0, layers=6, dense_param_cap=est - 1)
        with pytest.raises(ex.DenseRefusal, match=f"{est:,}"):
            ex.check_dense_cap(config, 225)
        config_ok = tr.TrainConfig(c_level=0, layers=6, dense_param_cap=est)
        ex.check_dense_cap(config_ok, 225)   # at the cap: allowed

    def test_sparse_mode_never_refused(self):
        config = tr.TrainConfig(c_level=3, dense_param_cap=1)
        ex.check_dense_cap(config, 10_000)


class TestRunArtifacts:
    def test_train_eval_round_trip(self, tmp_path):
        config = tr.TrainConfig(family="poisson2d", n=6, c_level=1, layers=2,
                                epochs=3, samples_train=16, samples_test=8,
                                seed=0, eval_interval=10)
        meta = ex.run_train(config, tmp_path / "run")
        assert meta["param_count"]["weights"] == 2 * 137
        out = ex.run_eval(tmp_path / "run", test_seed=3)
        assert out["metrics"]["zero_predictor_rel_l2"] == pytest.approx(1.0)

    def test_eval_with_refined_h1(self, tmp_path):
        config = tr.TrainConfig(family="poisson2d", n=6, c_level=1, layers=2,
                                epochs=3, samples_train=16, samples_test=8,
                                seed=0, eval_interval=10)
        ex.run_train(config, tmp_path / "run")
        out = ex.run_eval(tmp_path / "run", test_seed=3, h1_refined_samples=4)
        assert "rel_h1_semi_refined" in out["metrics"]
        assert np.isfinite(out["metrics"]["rel_h1_semi_refined"])

    def test_nondeterministic_mode_records_wallclock(self, tmp_path):
        config = tr.TrainConfig(family="poisson2d", n=6, c_level=1, layers=2,
                                epochs=3, samples_train=16, samples_test=8,
                                seed=0, eval_interval=10, deterministic=False)
        ex.run_train(config, tmp_path / "run")
        rows = [line for line in (tmp_path / "run" / "history.csv").read_text().splitlines()
                if line and not line.startswith(("#", "epoch"))]
        assert float(rows[-1].split(",")[-1]) > 0.0


class TestTrainSmoke:
    @pytest.mark.parametrize("family,n", [("helmholtz2d", 8), ("burgers1d", 16),
                                          ("poisson-unstructured", None)])
    def test_each_family_trains_end_to_end(self, family, n):
        config = tr.TrainConfig(family=family, n=n, c_level=1, layers=2, epochs=2,
                                samples_train=8, samples_test=4, seed=1,
                                eval_interval=10,
                                mesh="meshes/circle_hole_851.mesh" if n is None else None)
        state = tr.train(config)
        assert len(state.history) >= 1
        assert np.isfinite(state.history[-1][3])


class TestRefinedH1:
    def test_oracle_prediction_matches_fine_reference_scale(self):
        # feeding the coarse FEM solution itself: the refined-H1 number is the
        # coarse-vs-fine discretization gap, well below 1
        prob = tr.make_problem("poisson2d", n=8)
        batch = tr.make_batch(tr.ForcingSampler("trig2d", np.random.default_rng(2)),
                              prob.assembler, 3)
        oracle = prob.op.solve(batch)
        err = ex.refined_h1_error(prob, oracle, batch.omegas, factor=4)
        assert 0.0 < err < 0.5
