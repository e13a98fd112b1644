import csv
import subprocess
import sys

import pytest

from nestseg.cli import main
from nestseg.pruning import prune
from nestseg.graph import ArchitectureSpec, build, param_count

TINY = ["--depth", "3", "--base-width", "2", "--input-size", "32"]


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["gen-data", "--out", str(out), "--count", "20", "--size", "32", "--depth", "3", "--seed", "1"]) == 0
    return out / "manifest.tsv"


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("cli_train")
    argv = ["train", "--arch", "unetpp", *TINY, "--data", str(data), "--out", str(out),
            "--epochs", "2", "--lr", "3e-3", "--seed", "4"]
    assert main(argv) == 0
    return out, argv


class TestGenData:
    def test_default_count(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--size", "16", "--depth", "3"]) == 0
        assert len((tmp_path / "manifest.tsv").read_text().splitlines()) == 2 + 200

    def test_same_seed_identical(self, tmp_path):
        for name in "ab":
            main(["gen-data", "--out", str(tmp_path / name), "--count", "3", "--size", "16", "--seed", "7", "--depth", "3"])
        for f in ("manifest.tsv", "images/s0002.pgm", "masks/s0001.pgm"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    @pytest.mark.parametrize("size", ["0", "axb", "3x4x5"])
    def test_bad_size(self, tmp_path, size, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", str(tmp_path), "--size", size])
        assert exc.value.code != 0
        assert "invalid size" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained):
        out, _ = trained
        for f in ("arch.txt", "train_config.txt", "checkpoint.unpp", "metrics.csv"):
            assert (out / f).is_file()
        recs = rows(out / "metrics.csv")
        assert [(r["epoch"], r["split"]) for r in recs] == [("1", "train"), ("1", "val"), ("2", "train"), ("2", "val")]
        assert all(r["seconds"] == "0" for r in recs)
        assert ArchitectureSpec.from_file(out / "arch.txt").widths == (2, 4, 8)

    def test_rerun_byte_identical(self, trained, tmp_path):
        out, argv = trained
        again = list(argv)
        again[again.index("--out") + 1] = str(tmp_path)
        assert main(again) == 0
        for f in ("metrics.csv", "checkpoint.unpp"):
            assert (out / f).read_bytes() == (tmp_path / f).read_bytes()

    def test_unet_and_config_file(self, data, tmp_path):
        cfg = tmp_path / "train.cfg"
        cfg.write_text("# short run\nmax_epochs = 1\nlearning_rate = 0.003\nbatch_size = 4\n")
        assert main(["train", "--arch", "unet", *TINY, "--data", str(data), "--out", str(tmp_path / "o"),
                     "--config", str(cfg)]) == 0
        assert len(rows(tmp_path / "o" / "metrics.csv")) == 2
        assert "batch_size = 4" in (tmp_path / "o" / "train_config.txt").read_text()

    def test_missing_manifest(self, tmp_path, capsys):
        assert main(["train", "--arch", "unet", "--data", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)]) == 2
        assert "nope.tsv" in capsys.readouterr().err

    def test_bad_arch(self, data, tmp_path, capsys):
        assert main(["train", "--arch", "resnet", "--data", str(data), "--out", str(tmp_path)]) == 2
        assert "resnet" in capsys.readouterr().err


class TestEval:
    def test_accurate_one_row(self, trained, data, tmp_path):
        out, _ = trained
        assert main(["eval", "--arch", str(out / "arch.txt"), "--checkpoint", str(out / "checkpoint.unpp"),
                     "--data", str(data), "--out", str(tmp_path)]) == 0
        assert len(rows(tmp_path / "eval_accurate.csv")) == 1

    def test_fast_matches_pruned_report(self, trained, data, tmp_path):
        out, _ = trained
        base = ["--arch", "unetpp", *TINY, "--checkpoint", str(out / "checkpoint.unpp"), "--data", str(data)]
        assert main(["eval", *base, "--mode", "fast:1", "--out", str(tmp_path)]) == 0
        assert main(["prune-report", *base, "--warmup", "1", "--out", str(tmp_path)]) == 0
        fast = rows(tmp_path / "eval_fast1.csv")[0]
        report = rows(tmp_path / "prune_report.csv")
        assert [r["level"] for r in report] == ["1", "2"]
        assert float(fast["iou"]) == pytest.approx(float(report[0]["iou"]), abs=1e-6)
        assert float(fast["dice"]) == pytest.approx(float(report[0]["dice"]), abs=1e-6)
        g = build(ArchitectureSpec.preset("unetpp", depth=3, base_width=2, input_size=(32, 32)))
        assert [int(r["params"]) for r in report] == [param_count(prune(g, d).graph) for d in (1, 2)]

    def test_missing_head(self, trained, data, tmp_path, capsys):
        out, _ = trained
        assert main(["eval", "--arch", "unetpp", *TINY, "--checkpoint", str(out / "checkpoint.unpp"),
                     "--data", str(data), "--mode", "fast:9", "--out", str(tmp_path)]) == 2
        assert "no output head at X0,9" in capsys.readouterr().err

    def test_fingerprint_mismatch(self, trained, data, tmp_path, capsys):
        out, _ = trained
        assert main(["eval", "--arch", "unet", *TINY, "--checkpoint", str(out / "checkpoint.unpp"),
                     "--data", str(data), "--out", str(tmp_path)]) == 2
        assert "fingerprint" in capsys.readouterr().err


class TestParams:
    def test_table(self, capsys, tmp_path):
        assert main(["params", "--out", str(tmp_path)]) == 0
        text = capsys.readouterr().out
        assert text == (tmp_path / "params.csv").read_text()
        table = {r["arch"]: int(r["params"]) for r in rows(tmp_path / "params.csv")}
        assert table == {"unet": 7846081, "wide_unet": 9385846, "unetpp_nods": 9155457, "unetpp_ds": 9155556}

    def test_stable(self, capsys):
        main(["params", "--depth", "3"])
        first = capsys.readouterr().out
        main(["params", "--depth", "3"])
        assert capsys.readouterr().out == first


class TestGradcheck:
    def test_single_op_passes(self, capsys):
        assert main(["gradcheck", "--op", "conv2d", "--instances", "2"]) == 0
        out = capsys.readouterr().out
        assert "conv2d" in out and "all passed" in out

    def test_strict_tolerance_fails(self, capsys):
        assert main(["gradcheck", "--op", "sigmoid", "--tol", "1e-12", "--instances", "2"]) == 1
        assert "FAILED" in capsys.readouterr().out

    def test_unknown_op(self, capsys):
        assert main(["gradcheck", "--op", "softmax"]) == 2
        assert "softmax" in capsys.readouterr().err


def test_threads_env_validated(monkeypatch, capsys):
    monkeypatch.setenv("NESTSEG_THREADS", "zero")
    assert main(["params", "--depth", "2"]) == 2
    assert "NESTSEG_THREADS" in capsys.readouterr().err


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "nestseg.cli", "params", "--depth", "2"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("arch,params,flops\n")
