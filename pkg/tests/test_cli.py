import json
import subprocess
import sys

import pytest

from femnet import cli, experiments
from femnet.training import TrainConfig


def run_cli(*argv):
    return cli.main(list(argv))


class TestMeshCommands:
    def test_gen_and_check(self, tmp_path, capsys):
        out = tmp_path / "m.mesh"
        assert run_cli("mesh", "gen", "--kind", "square", "--n", "4",
                       "--out", str(out)) == 0
        assert run_cli("mesh", "check", str(out)) == 0
        printed = capsys.readouterr().out
        assert "N_h=9" in printed and "connected=True" in printed


class TestTable1:
    def test_exit_zero_and_all_cells(self, capsys):
        assert run_cli("table1") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 + 19
        assert all(line.endswith("ok") for line in lines[1:])


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("family = poisson2d\nn = 6\nc_level = 1\nepochs = 3\n"
                       "samples_train = 16\nsamples_test = 8\nseed = 9\n"
                       "layers = 2\n# comment line\n")
        parsed = cli.parse_config_file(cfg)
        assert parsed["family"] == "poisson2d" and parsed["epochs"] == "3"

    def test_unknown_key_lists_valid_ones(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("familly = poisson2d\n")
        with pytest.raises(SystemExit, match="valid keys"):
            cli.parse_config_file(cfg)

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 3\nfamily = poisson2d\n")

        class Args:
            config = str(cfg)
            epochs = 7
        args = Args()
        for name in ("family", "n", "mesh", "c_level", "match_c_level", "layers",
                     "activation", "lr0", "lr_min", "samples_train", "samples_test",
                     "seed", "deterministic", "batch", "nu", "eval_interval"):
            setattr(args, name, None)
        built = cli.build_train_config(args)
        assert built.epochs == 7 and built.family == "poisson2d"


class TestTrainEval:
    def test_train_writes_artifacts_and_eval_reads_them(self, tmp_path, capsys):
        out = tmp_path / "run"
        # one epoch at a vanishing rate: the checkpoint is effectively the
        # untrained network
        code = run_cli("train", "--family", "poisson2d", "--n", "6", "--c-level", "1",
                       "--layers", "6", "--epochs", "1", "--lr0", "1e-12",
                       "--samples-train", "32", "--samples-test", "16",
                       "--seed", "4", "--out", str(out))
        assert code == 0
        assert (out / "checkpoint.snet").exists()
        history = (out / "history.csv").read_text().splitlines()
        assert history[0].startswith("# code_version")
        assert any(line.startswith("epoch,loss") for line in history)
        meta = json.loads((out / "meta.json").read_text())
        assert meta["N_h"] == 25

        report = tmp_path / "eval.json"
        assert run_cli("eval", str(out), "--test-seed", "5", "--out", str(report)) == 0
        saved = json.loads(report.read_text())
        metrics = saved["metrics"]
        # untrained net: error within the sanity band around the
        # zero-predictor error
        band = metrics["rel_l2_mean"] / metrics["zero_predictor_rel_l2"]
        assert 0.5 <= band <= 2.0

    def test_deterministic_reruns_identical_files(self, tmp_path):
        args = ["train", "--family", "poisson2d", "--n", "6", "--c-level", "1",
                "--layers", "2", "--epochs", "4", "--samples-train", "16",
                "--samples-test", "8", "--seed", "11"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli(*args, "--out", str(out1)) == 0
        assert run_cli(*args, "--out", str(out2)) == 0
        assert (out1 / "history.csv").read_text() == (out2 / "history.csv").read_text()
        assert (out1 / "checkpoint.snet").read_bytes() == (out2 / "checkpoint.snet").read_bytes()

    def test_dense_memory_cap_refusal(self, tmp_path, capsys):
        code = run_cli("train", "--family", "poisson2d", "--n", "16", "--c-level", "0",
                       "--epochs", "1", "--samples-train", "8", "--samples-test", "8",
                       "--out", str(tmp_path / "r"))
        # default cap is far above this size; force the refusal via config
        assert code == 0
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text("family = poisson2d\nn = 16\nc_level = 0\nepochs = 1\n"
                       "samples_train = 8\nsamples_test = 8\n"
                       "dense_param_cap = 1000\n")
        code = run_cli("train", "--config", str(cfg), "--out", str(tmp_path / "r2"))
        assert code == 3
        assert "refused" in capsys.readouterr().err

    def test_checkpoint_bytes_quote_in_refusal(self):
        cfg = TrainConfig(family="poisson2d", n=16, c_level=0, dense_param_cap=1000)
        with pytest.raises(experiments.DenseRefusal, match="bytes"):
            experiments.check_dense_cap(cfg, 225)


class TestUatCommand:
    def test_report_content(self, tmp_path):
        out = tmp_path / "uat.json"
        assert run_cli("uat", "--n", "4", "--samples", "20", "--out", str(out)) == 0
        report = json.loads(out.read_text())
        assert report["gsparse_check"] is True
        assert report["max_rel_deviation"] <= 1e-6


class TestStabilityCommand:
    def test_csv_schema(self, tmp_path):
        out = tmp_path / "stab.csv"
        assert run_cli("stability", "--grid-ns", "8", "--c-level", "2",
                       "--trials", "50", "--out", str(out)) == 0
        lines = out.read_text().splitlines()
        headers = [l for l in lines if l.startswith("N_h,mode")]
        assert headers == ["N_h,mode,pattern,layer,spectral_norm"]
        assert any("c_s_bound" in l for l in lines)


class TestCompareRandom:
    def test_tiny_budget_end_to_end(self, tmp_path, capsys, monkeypatch):
        monkeypatch.chdir(tmp_path)
        code = run_cli("compare-random", "--family", "poisson2d", "--n", "6",
                       "--match-c-level", "1", "--epochs", "3",
                       "--samples-train", "16", "--samples-test", "8",
                       "--layers", "2", "--seed", "1", "--random-seeds", "2")
        assert code == 0
        printed = capsys.readouterr().out
        assert "ratio=" in printed
        content = (tmp_path / "compare_random.csv").read_text()
        assert content.count("random,") == 2
        assert "fem-c1" in content


class TestSweep:
    def test_tiny_grid(self, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = run_cli("sweep", "--family", "poisson2d", "--resolutions", "4,6",
                       "--c-levels", "1", "--epochs", "2", "--samples-train", "8",
                       "--samples-test", "8", "--layers", "2", "--seed", "0",
                       "--out", str(out))
        assert code == 0
        rows = (out / "sweep.csv").read_text().splitlines()
        assert any(r.startswith("n,c_level") for r in rows)
        assert (out / "poisson2d_n4_c1" / "checkpoint.snet").exists()
        assert (out / "poisson2d_n6_c1" / "checkpoint.snet").exists()


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "femnet.cli", "table1"],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0
