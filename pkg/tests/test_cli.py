import json
import subprocess
import sys

import pytest

from bayescl.cli import main


@pytest.fixture()
def tiny_env(tmp_path, monkeypatch):
    """Isolated data/output roots plus a minimal image config."""
    data = tmp_path / "data"
    runs = tmp_path / "runs"
    monkeypatch.setenv("BAYESCL_DATA_ROOT", str(data))
    monkeypatch.setenv("BAYESCL_OUTPUT_ROOT", str(runs))
    cfg = {
        "experiment": "permuted", "name": "tiny", "n_tasks": 2,
        "subsample": 300, "epochs": 2, "batch_size": 128, "hidden": [24],
        "eval_samples": 4, "train_mc": 2, "coreset": "random",
        "coreset_size": 25, "coreset_mode": "regret",
        "n_train": 1200, "n_test": 200, "seeds": [0],
    }
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(cfg))
    return tmp_path, cfg_path, runs / "tiny"


class TestRun:
    def test_writes_all_outputs(self, tiny_env):
        _, cfg_path, out_dir = tiny_env
        assert main(["run", str(cfg_path)]) == 0
        for name in ("metrics.csv", "losses.csv", "heatmap.csv", "config.json",
                     "run.json", "snapshots.npz", "coresets.csv"):
            assert (out_dir / name).exists(), name

    def test_run_json_carries_seeds_and_timings(self, tiny_env):
        _, cfg_path, out_dir = tiny_env
        main(["run", str(cfg_path)])
        info = json.loads((out_dir / "run.json").read_text())
        assert info["seeds"] == [0]
        assert info["config"]["name"] == "tiny"
        assert info["timings_seconds"]["0"] > 0
        assert info["total_seconds"] >= info["timings_seconds"]["0"]

    def test_saved_coresets_and_snapshots_load_back(self, tiny_env):
        from bayescl.continual import load_snapshots
        from bayescl.coresets import read_coreset_csv
        _, cfg_path, out_dir = tiny_env
        main(["run", str(cfg_path)])
        entries = read_coreset_csv(out_dir / "coresets.csv")
        assert [t for t, _ in entries] == [0, 1]
        assert all(len(d) == 25 for _, d in entries)
        snaps = load_snapshots(out_dir / "snapshots.npz")
        assert len(snaps) == 2
        assert all(s > 0 for snap in snaps for a in snap.values()
                   for s in a.ravel())

    def test_csv_headers(self, tiny_env):
        _, cfg_path, out_dir = tiny_env
        main(["run", str(cfg_path)])
        heads = {
            "metrics.csv": "seed,task_trained,task_eval,accuracy",
            "losses.csv": "seed,task,epoch,loss",
            "heatmap.csv": "param_index,layer,task,delta_sigma",
        }
        for name, head in heads.items():
            first = (out_dir / name).read_text().splitlines()[0]
            assert first == head, name

    def test_rerun_byte_identical_metrics(self, tiny_env):
        _, cfg_path, out_dir = tiny_env
        main(["run", str(cfg_path)])
        first = (out_dir / "metrics.csv").read_bytes()
        first_losses = (out_dir / "losses.csv").read_bytes()
        main(["run", str(cfg_path)])
        assert (out_dir / "metrics.csv").read_bytes() == first
        assert (out_dir / "losses.csv").read_bytes() == first_losses

    def test_linreg_outputs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BAYESCL_OUTPUT_ROOT", str(tmp_path / "runs"))
        cfg = {"experiment": "linreg", "name": "lr", "linreg_steps": 30,
               "linreg_n": 50, "eval_samples": 4, "seeds": [0]}
        p = tmp_path / "lr.json"
        p.write_text(json.dumps(cfg))
        assert main(["run", str(p)]) == 0
        out = tmp_path / "runs" / "lr"
        assert (out / "trajectory.csv").read_text().splitlines()[0] == \
            "config,step,mu_w,mu_b"
        assert (out / "msegrid.csv").read_text().splitlines()[0] == \
            "mu_w,mu_b,avg_mse"

    def test_config_error_exit_code(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"experiment": "time-travel"}))
        assert main(["validate", str(p)]) == 2
        assert main(["run", str(p)]) == 2

    def test_data_error_exit_code(self, tiny_env):
        root, cfg_path, _ = tiny_env
        data = root / "data"
        data.mkdir()
        (data / "train-images-idx3-ubyte").write_bytes(b"junk")
        assert main(["run", str(cfg_path)]) == 3

    def test_numerical_error_exit_code(self, tiny_env, monkeypatch):
        _, cfg_path, _ = tiny_env
        from bayescl.core_math import NumericalError
        import bayescl.cli as cli_mod

        def boom(*a, **k):
            raise NumericalError("diverged")

        monkeypatch.setattr(cli_mod, "run_continual", boom)
        assert main(["run", str(cfg_path)]) == 4


class TestReport:
    def test_renders_figures(self, tiny_env):
        _, cfg_path, out_dir = tiny_env
        main(["run", str(cfg_path)])
        assert main(["report", str(out_dir)]) == 0
        for name in ("accuracy.png", "losses.png", "heatmap.png"):
            assert (out_dir / name).stat().st_size > 1000, name

    def test_trajectory_figure(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BAYESCL_OUTPUT_ROOT", str(tmp_path / "runs"))
        cfg = {"experiment": "linreg", "name": "lr", "linreg_steps": 30,
               "linreg_n": 50, "eval_samples": 4, "seeds": [0]}
        p = tmp_path / "lr.json"
        p.write_text(json.dumps(cfg))
        main(["run", str(p)])
        out = tmp_path / "runs" / "lr"
        assert main(["report", str(out)]) == 0
        assert (out / "trajectory.png").stat().st_size > 1000

    def test_missing_dir_is_data_error(self):
        assert main(["report", "/no/such/dir"]) == 3

    def test_empty_dir_is_data_error(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 3


class TestMisc:
    def test_list_profiles(self, capsys):
        assert main(["list-profiles"]) == 0
        out = capsys.readouterr().out
        for name in ("desk-permuted", "desk-split", "linreg-wide", "paper-split"):
            assert name in out

    def test_validate_profile(self):
        assert main(["validate", "desk-permuted"]) == 0

    def test_make_data(self, tmp_path):
        root = tmp_path / "d"
        assert main(["make-data", "--root", str(root), "--n-train", "40",
                     "--n-test", "10"]) == 0
        assert (root / "train-images-idx3-ubyte").exists()

    def test_console_script_wired(self):
        out = subprocess.run([sys.executable, "-m", "bayescl.cli",
                              "list-profiles"], capture_output=True, text=True)
        assert out.returncode == 0
        assert "desk-permuted" in out.stdout
