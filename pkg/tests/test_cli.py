"""The ``ucf`` command line, run in-process."""
import numpy as np
import pytest

from ucfnet import cli, kvconfig, netpbm
from ucfnet.model import NetworkConfig
from ucfnet.training import TrainConfig

SMALL = """\
input_side=16
encoder.channels=4,4
encoder.convs=1,1
encoder.rdropout=1,1
decoder.channels=4,4
decoder.convs=1,1
decoder.rdropout=0,0
iterations=2
batch_size=2
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(out):
    return dict(line.split("=", 1) for line in out.splitlines() if "=" in line and not line.startswith("#"))


@pytest.fixture
def dataset(tmp_path, capsys):
    root = tmp_path / "data"
    assert run(capsys, "synth", "--count", 3, "--side", 16, "--seed", 1, "--out", root)[0] == 0
    return root


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def dir_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynth:
    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "synth", "--count", 5, "--side", 16, "--seed", 7, "--out", tmp_path / name)
        assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")

    def test_empty(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--count", 0, "--out", tmp_path / "e")
        assert code == 0 and kv(out)["count"] == "0"
        assert (tmp_path / "e" / "manifest.csv").read_text().count("\n") == 1

    def test_small_side_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--side", 8, "--out", tmp_path / "s")
        assert code != 0 and "at least 16" in err


class TestTrain:
    @pytest.mark.parametrize(
        "variant, flags",
        [
            ("vd", ("0", "0", "1", "0")),
            ("ve", ("0", "0", "0", "1")),
            (None, ("0", "1", "1", "1")),
        ],
    )
    def test_variant_flags(self, variant, flags, dataset, small_cfg, tmp_path, capsys):
        argv = ["train", "--config", small_cfg, "--data", dataset, "--out", tmp_path / "m.ckpt"]
        if variant:
            argv += ["--variant", variant]
        code, out, _ = run(capsys, *argv)
        assert code == 0
        values = kv(out)
        keys = ("use_dropout", "use_rdropout", "use_restricted_deconv", "use_interp")
        assert tuple(values[k] for k in keys) == flags
        assert f"# variant={variant or 'ucf'}" in out
        assert (tmp_path / "m.ckpt").exists() and (tmp_path / "m.loss.csv").exists()

    def test_printed_block_reproduces(self, dataset, small_cfg, tmp_path, capsys):
        _, out, _ = run(capsys, "train", "--config", small_cfg, "--data", dataset,
                        "--out", tmp_path / "a.ckpt", "--seed", 3, "--iters", 3)
        values = kv(out)
        assert values["seed"] == "3" and values["iterations"] == "3"
        block = {k: v for k, v in values.items() if k != "final_loss"}
        block.update(out=str(tmp_path / "b.ckpt"), log=str(tmp_path / "b.csv"))
        replay = tmp_path / "replay.cfg"
        replay.write_text("".join(f"{k}={v}\n" for k, v in block.items()))
        assert run(capsys, "train", "--config", replay)[0] == 0
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.loss.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_unknown_key(self, dataset, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("learning_rate=1\n")
        code, _, err = run(capsys, "train", "--config", bad, "--data", dataset, "--out", tmp_path / "m")
        assert code != 0 and "learning_rate" in err

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--out", tmp_path / "m")
        assert code == 2 and "--data" in err


@pytest.fixture
def trained(dataset, small_cfg, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert run(capsys, "train", "--config", small_cfg, "--data", dataset, "--out", ckpt)[0] == 0
    return ckpt


class TestInfer:
    @pytest.mark.parametrize("scales", [None, "0.75,1.0,1.25"])
    def test_writes_map(self, scales, trained, dataset, tmp_path, capsys):
        argv = ["infer", "--ckpt", trained, "--image", dataset / "images" / "0000.ppm", "--out", tmp_path / "s.pgm"]
        if scales:
            argv += ["--scales", scales]
        code, out, _ = run(capsys, *argv)
        assert code == 0
        assert kv(out)["scales"] == (scales or "1.0")
        sal = netpbm.read_image(tmp_path / "s.pgm")
        assert sal.shape == (16, 16) and sal.min() >= 0 and sal.max() <= 255

    def test_bad_checkpoint(self, dataset, tmp_path, capsys):
        junk = tmp_path / "junk"
        junk.write_bytes(b"nope")
        code, _, err = run(capsys, "infer", "--ckpt", junk, "--image", dataset / "images" / "0000.ppm",
                           "--out", tmp_path / "s.pgm")
        assert code == 1 and "checkpoint" in err


class TestEval:
    def test_default_beta_and_outputs(self, dataset, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--pred", dataset / "gt", "--gt", dataset / "gt", "--out", tmp_path / "r")
        values = kv(out)
        assert code == 0 and float(values["beta2"]) == 0.3
        assert float(values["mean_fbeta"]) == 1.0 and float(values["mean_mae"]) == 0.0
        names = sorted(p.name for p in (tmp_path / "r").iterdir())
        assert names == ["per_image.csv", "pr_curve.csv", "summary.csv"]

    def test_missing_counterpart(self, dataset, tmp_path, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        for p in sorted((dataset / "gt").glob("*.pgm"))[1:]:
            (pred / p.name).write_bytes(p.read_bytes())
        code, _, err = run(capsys, "eval", "--pred", pred, "--gt", dataset / "gt", "--out", tmp_path / "r")
        assert code == 1 and "0000" in err

    def test_bad_beta(self, dataset, tmp_path, capsys):
        assert run(capsys, "eval", "--pred", dataset, "--gt", dataset, "--out", tmp_path, "--beta2", 0)[0] == 2


class TestArith:
    def test_reference_geometry(self, capsys):
        values = kv(run(capsys, "arith", "--n", 5, "--k", 3, "--s", 2, "--p", 1)[1])
        assert values["conv_out"] == "3" and values["overlap"] == "true" and values["roundtrip"] == "5"

    def test_restricted(self, capsys):
        values = kv(run(capsys, "arith", "--n", 3, "--k", 4, "--s", 2, "--p", 1)[1])
        assert values["deconv_out"] == "6" and values["overlap"] == "false"

    def test_divisible(self, capsys):
        assert kv(run(capsys, "arith", "--n", 4, "--k", 2, "--s", 2)[1])["overlap"] == "false"

    def test_invalid(self, capsys):
        assert run(capsys, "arith", "--n", 0, "--k", 3, "--s", 2)[0] == 1


class TestAnalyze:
    def _score(self, capsys, tmp_path, mode):
        code, out, _ = run(capsys, "analyze", "--mode", mode, "--k", 3, "--s", 2, "--trials", 10,
                           "--out", tmp_path / f"{mode}.csv")
        assert code == 0
        return float(kv(out)["mean_score"])

    def test_interp_below_naive(self, tmp_path, capsys):
        naive = self._score(capsys, tmp_path, "deconv_naive")
        assert naive > 0
        assert self._score(capsys, tmp_path, "interp") < naive
        assert (tmp_path / "interp.csv").read_text().count("\n") == 11

    def test_hybrid_needs_divisible_kernel(self, tmp_path, capsys):
        code, _, err = run(capsys, "analyze", "--mode", "hybrid", "--k", 3, "--s", 2, "--out", tmp_path / "h.csv")
        assert code == 1 and "multiple" in err


class TestThreads:
    def test_cap_is_reported(self, monkeypatch, capsys):
        monkeypatch.setenv("UCF_THREADS", "1")
        assert run(capsys, "arith", "--n", 5, "--k", 3, "--s", 2)[1].startswith("# threads=1")

    def test_zero_means_uncapped(self, monkeypatch, capsys):
        monkeypatch.setenv("UCF_THREADS", "0")
        assert "threads" not in run(capsys, "arith", "--n", 5, "--k", 3, "--s", 2)[1]

    def test_garbage(self, monkeypatch, capsys):
        monkeypatch.setenv("UCF_THREADS", "many")
        assert run(capsys, "arith", "--n", 5, "--k", 3, "--s", 2)[0] == 2


def test_default_config_matches_dataclasses():
    values = kvconfig.parse(cli.default_config_text())
    assert values.pop("input_mean") == "auto"
    net = NetworkConfig().to_dict()
    del net["input_mean"]
    train = TrainConfig().to_dict()
    assert values == {**net, **train}
