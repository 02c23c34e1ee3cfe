import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from sdr_enhance import cli, dsp
from sdr_enhance import experiment as ex

TINY = """\
T = 200
window = 100
snr_list = [0.0]
losses = ["l2", "neg_sdr"]
seeds = [0]

[train]
max_epochs = 2
hidden_size = 8
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    ex.cmd_gen(ex.ExperimentConfig(), out, 0)
    return out


class TestConfig:
    def test_defaults(self):
        cfg = ex.ExperimentConfig()
        assert (cfg.T, cfg.window, cfg.shift, cfg.eval_G) == (600, 100, 1, 32)
        assert cfg.losses == ("l1", "l2", "neg_sdr")
        assert cfg.train.batch_size == 50 and cfg.train.max_epochs == 500

    def test_toml(self, tiny_cfg):
        cfg = ex.load_config(tiny_cfg)
        assert cfg.T == 200 and cfg.train.hidden_size == 8
        assert cfg.train.batch_size == 50

    def test_loss_and_is_alias(self):
        cfg = ex.ExperimentConfig.from_dict({"loss": "is", "is": {"frame_size": 16, "hop": 2}})
        assert cfg.losses == ("is",)
        assert cfg.loss_spec("is").spectral.frame_size == 16

    def test_round_trip(self):
        cfg = ex.ExperimentConfig(seeds=(3,), snr_list=(5.0,))
        again = ex.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    @pytest.mark.parametrize(
        "raw",
        [
            {"window": 700},
            {"losses": []},
            {"losses": ["l3"]},
            {"bogus": 1},
            {"train": {"lr": 0.1}},
            {"train": {"batch_size": 0}},
            {"sdr": {"max_delay": 0}},
        ],
    )
    def test_invalid(self, raw):
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.from_dict(raw)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ex.ConfigError):
            ex.load_config(tmp_path / "nope.toml")
        bad = tmp_path / "bad.toml"
        bad.write_text("T = [")
        with pytest.raises(ex.ConfigError):
            ex.load_config(bad)


class TestGen:
    def test_files(self, data_dir):
        clean = dsp.read_signal_csv(data_dir / "clean.csv")
        assert clean.size == 600
        for name in ("noise_train.csv", "noise_test.csv", "mixture_train_snr+10.csv", "mixture_test_snr-10.csv"):
            assert (data_dir / name).exists()
        assert json.loads((data_dir / "config.json").read_text())["seed"] == 0

    def test_measured_snr(self, data_dir):
        clean = dsp.read_signal_csv(data_dir / "clean.csv")
        for part in ("train", "test"):
            for snr in (10.0, 0.0, -10.0):
                mix = dsp.read_signal_csv(data_dir / f"mixture_{part}_{ex.snr_tag(snr)}.csv")
                assert abs(dsp.snr_db(clean, mix - clean) - snr) < 1e-9

    def test_noises_differ(self, data_dir):
        a = dsp.read_signal_csv(data_dir / "noise_train.csv")
        b = dsp.read_signal_csv(data_dir / "noise_test.csv")
        assert np.any(a != b)

    def test_rerun_bitwise(self, data_dir, tmp_path):
        again = tmp_path / "again"
        ex.cmd_gen(ex.ExperimentConfig(), again, 0)
        for f in data_dir.iterdir():
            assert f.read_bytes() == (again / f.name).read_bytes(), f.name


class TestTrainEval:
    def test_train_writes_artifacts(self, data_dir, tmp_path):
        cfg = ex.ExperimentConfig(train=ex.TrainConfig(max_epochs=1, hidden_size=8))
        res, _ = ex.cmd_train(cfg, data_dir, "l2", 10.0, tmp_path / "m")
        summary = json.loads((tmp_path / "m" / "summary.json").read_text())
        assert summary["n_windows"] == 501
        assert summary["batches_run"] == 10 == -(-451 // 50)
        assert (tmp_path / "m" / "params.csv").exists()
        assert (tmp_path / "m" / "history.csv").read_text().startswith("epoch,train_loss,val_loss\n")

    def test_neg_sdr_validation_improves(self, data_dir, tmp_path):
        cfg = ex.ExperimentConfig(train=ex.TrainConfig(max_epochs=5, hidden_size=8))
        res, _ = ex.cmd_train(cfg, data_dir, "neg_sdr", 10.0, tmp_path / "m")
        assert res.best_epoch >= 1

    def test_oracle_bypass_caps(self, data_dir):
        r = ex.cmd_eval(ex.ExperimentConfig(), None, data_dir, 10.0, bypass="oracle")
        assert r.sdr_db == 200.0

    def test_identity_bypass_near_input_snr(self, data_dir):
        r = ex.cmd_eval(ex.ExperimentConfig(), None, data_dir, 0.0, bypass="identity")
        assert abs(r.sdr_db) <= 1.5

    def test_results_header(self, data_dir, tmp_path):
        out = tmp_path / "e.csv"
        ex.cmd_eval(ex.ExperimentConfig(), None, data_dir, 0.0, bypass="identity", out_csv=out)
        text = out.read_text()
        assert text.splitlines()[0] == "loss,snr_in_db,seed,sdr_db,sir_db,runtime_s"
        assert "\r" not in text
        (row,) = ex.read_results_csv(out)
        assert row.loss == "identity"

    def test_missing_model(self, data_dir, tmp_path):
        with pytest.raises(FileNotFoundError):
            ex.cmd_eval(ex.ExperimentConfig(), tmp_path / "none", data_dir, 0.0)


class TestCurveTrace:
    def test_curve(self, tmp_path):
        out = tmp_path / "c.csv"
        rows = ex.cmd_curve(0.01, 0.99, 100, out, include=[1 / np.sqrt(2), 0.1])
        with open(out, newline="") as fh:
            table = list(csv.reader(fh))
        assert table[0] == ["gamma", "sdr_db"]
        vals = {round(float(g), 9): float(v) for g, v in table[1:]}
        assert vals[round(1 / np.sqrt(2), 9)] == 0.0
        assert vals[0.1] == pytest.approx(19.956352, abs=1e-6)
        sdrs = [v for _, v in rows]
        assert all(b < a for a, b in zip(sdrs, sdrs[1:]))

    def test_curve_plain_count(self, tmp_path):
        assert len(ex.cmd_curve(0.01, 0.99, 100, tmp_path / "c.csv")) == 100

    @pytest.mark.parametrize("lo,hi", [(0.0, 0.5), (0.5, 0.4), (0.5, 1.0)])
    def test_curve_bad_range(self, lo, hi, tmp_path):
        with pytest.raises(ex.ConfigError):
            ex.cmd_curve(lo, hi, 10, tmp_path / "c.csv")

    def test_trace_oracle(self, data_dir, tmp_path):
        out = ex.cmd_trace(ex.ExperimentConfig(), None, data_dir, 10.0, tmp_path / "t.csv", bypass="oracle")
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 600
        clean = dsp.read_signal_csv(data_dir / "clean.csv")
        assert np.array([float(r["clean"]) for r in rows]).tobytes() == clean.tobytes()
        assert [r["estimate"] for r in rows] == [r["clean"] for r in rows]


class TestSweep:
    def test_tiny_sweep(self, tiny_cfg, tmp_path):
        cfg = ex.load_config(tiny_cfg)
        res = ex.cmd_sweep(cfg, tmp_path / "s")
        assert res.ok and len(res.rows) == 2
        for name in ("results.csv", "summary.csv", "tables.md", "timings.csv", "config.json"):
            assert (tmp_path / "s" / name).exists()
        assert "Proposed" in (tmp_path / "s" / "tables.md").read_text()
        rows = ex.read_results_csv(tmp_path / "s" / "results.csv")
        assert all(r.runtime_s == 0.0 for r in rows)
        echo = ex.load_config(tmp_path / "s" / "config.json")
        assert echo == cfg

    def test_failed_run_recorded(self, tiny_cfg, tmp_path, monkeypatch):
        cfg = ex.load_config(tiny_cfg)

        def boom(*a, **k):
            raise FloatingPointError("nope")

        monkeypatch.setattr(ex, "train", boom)
        res = ex.cmd_sweep(cfg, tmp_path / "s")
        assert not res.ok and len(res.failures) == 2
        assert all(r.status == "failed" for r in res.rows)
        assert (tmp_path / "s" / "failures.json").exists()


class TestCli:
    def test_gen_train_eval_trace(self, tiny_cfg, tmp_path, capsys):
        d, m = tmp_path / "d", tmp_path / "m"
        assert cli.main(["gen", "--config", str(tiny_cfg), "--out", str(d)]) == 0
        assert cli.main(["train", "--config", str(tiny_cfg), "--data", str(d), "--loss", "neg_sdr", "--out", str(m)]) == 0
        assert cli.main(["eval", "--config", str(tiny_cfg), "--data", str(d), "--model", str(m), "--out", str(m)]) == 0
        assert (m / "eval.csv").exists()
        assert cli.main(["trace", "--config", str(tiny_cfg), "--data", str(d), "--model", str(m), "--out", str(m / "t.csv")]) == 0
        assert len((m / "t.csv").read_text().splitlines()) == 201

    def test_exit_code_missing_data(self, tmp_path, capsys):
        code = cli.main(["train", "--data", str(tmp_path / "none"), "--loss", "l2", "--out", str(tmp_path / "m")])
        assert code == 2
        assert "run `gen` first" in capsys.readouterr().err

    def test_exit_code_bad_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("window = 9999\n")
        assert cli.main(["gen", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2

    def test_exit_code_bad_curve(self, tmp_path):
        assert cli.main(["curve", "--gamma-min", "0.9", "--gamma-max", "0.1", "--out", str(tmp_path / "c.csv")]) == 2

    def test_exit_code_partial_failure(self, tiny_cfg, tmp_path, monkeypatch):
        monkeypatch.setattr(ex, "train", lambda *a, **k: (_ for _ in ()).throw(FloatingPointError("x")))
        assert cli.main(["sweep", "--config", str(tiny_cfg), "--out", str(tmp_path / "s")]) == 1

    def test_module_entry_point(self, tmp_path):
        out = tmp_path / "c.csv"
        proc = subprocess.run(
            [sys.executable, "-m", "sdr_enhance", "curve", "--steps", "5", "--out", str(out)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert len(out.read_text().splitlines()) == 6
