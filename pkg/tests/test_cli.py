import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from ultraseg import cli, zoo
from ultraseg.checkpoint import load_checkpoint, save_checkpoint


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 4-sample synthetic set and a checkpoint overfit to its training split."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--n", "4", "--seed", "7", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--model", "ultraseg-108k", "--data", str(root / "data" / "manifest.tsv"),
                     "--out", str(root / "run"), "--val-split", "train", "--epochs", "200", "--patience", "200",
                     "--lr", "3e-3", "--target-dice", "0.95"]) == 0
    return root


def strip_wall_clock(d):
    if isinstance(d, dict):
        return {k: strip_wall_clock(v) for k, v in d.items() if k != "seconds"}
    if isinstance(d, list):
        return [strip_wall_clock(v) for v in d]
    return d


class TestSynth:
    def test_outputs(self, tmp_path, capsys):
        code, out = run(capsys, "synth", "--n", 5, "--seed", 3, "--out", tmp_path / "s")
        assert code == 0 and out["samples"] == 5 and out["train"] == 4
        assert out["schema_version"] == 1 and out["command"] == "synth"
        assert len(list((tmp_path / "s" / "images").iterdir())) == 5

    def test_too_few(self, tmp_path, capsys):
        code, out = run(capsys, "synth", "--n", 1, "--out", tmp_path)
        assert code == 2 and out is None


class TestTrain:
    def test_one_epoch(self, workspace, tmp_path, capsys):
        code, out = run(capsys, "train", "--model", "ultraseg-108k", "--data", workspace / "data" / "manifest.tsv",
                        "--out", tmp_path / "r", "--epochs", 1)
        assert code == 0 and len(out["epochs"]) == 1
        assert out["val_split"] == "test" and out["train_samples"] == 3
        assert (tmp_path / "r" / "report.txt").read_text().count("\n") == 1
        load_checkpoint(tmp_path / "r" / "best.useg")
        load_checkpoint(tmp_path / "r" / "last.useg")
        assert "seconds" not in out["epochs"][0]

    def test_missing_data_flag(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--model", "ultraseg-108k", "--out", str(tmp_path)])
        assert info.value.code == 2
        assert "--data" in capsys.readouterr().err

    def test_bad_manifest(self, tmp_path, capsys):
        code, _ = run(capsys, "train", "--model", "ultraseg-108k", "--data", tmp_path / "none.tsv", "--out", tmp_path)
        assert code == 3

    def test_bad_config(self, workspace, tmp_path, capsys):
        code, _ = run(capsys, "train", "--model", "ultraseg-108k", "--data", workspace / "data" / "manifest.tsv",
                      "--out", tmp_path, "--patience", 0)
        assert code == 2

    def test_numerical_abort(self, workspace, tmp_path, capsys):
        with np.errstate(all="ignore"):
            code = cli.main(["train", "--model", "ultraseg-108k", "--data", str(workspace / "data" / "manifest.tsv"),
                             "--out", str(tmp_path), "--epochs", "3", "--lr", "1e30"])
        captured = capsys.readouterr()
        assert code == 4 and captured.out == ""
        assert "non-finite loss" in captured.err

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["flops", "--model", "ultraseg-108k", "--colour", "red"])
        assert info.value.code == 2


class TestInfer:
    def test_masks(self, workspace, tmp_path, capsys):
        src = tmp_path / "odd.png"
        Image.open(workspace / "data" / "images" / "synth_0000.png").resize((150, 90)).save(src)
        args = ["infer", "--checkpoint", workspace / "run" / "best.useg", "--input", src, "--save-prob"]
        code, out = run(capsys, *args, "--out", tmp_path / "a")
        assert code == 0
        mask = np.asarray(Image.open(out["outputs"][0]["mask"]))
        assert mask.shape == (90, 150) and set(np.unique(mask)) <= {0, 255}
        assert np.asarray(Image.open(out["outputs"][0]["probability"])).shape == (90, 150)
        run(capsys, *args, "--out", tmp_path / "b")
        assert (tmp_path / "a" / "odd_mask.png").read_bytes() == (tmp_path / "b" / "odd_mask.png").read_bytes()

    def test_threshold_above_one(self, workspace, tmp_path, capsys):
        code, out = run(capsys, "infer", "--checkpoint", workspace / "run" / "best.useg", "--input",
                        workspace / "data" / "images" / "synth_0001.png", "--out", tmp_path, "--threshold", 1.1)
        assert code == 0
        assert not np.asarray(Image.open(out["outputs"][0]["mask"])).any()

    def test_unreadable_input_cleans_up(self, workspace, tmp_path, capsys):
        good = workspace / "data" / "images" / "synth_0001.png"
        code, out = run(capsys, "infer", "--checkpoint", workspace / "run" / "best.useg",
                        "--input", good, tmp_path / "missing.png", "--out", tmp_path / "o")
        assert code == 3 and out is None
        assert list((tmp_path / "o").iterdir()) == []

    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x.useg").write_bytes(b"junk")
        code, _ = run(capsys, "infer", "--checkpoint", tmp_path / "x.useg", "--input", tmp_path / "x.useg",
                      "--out", tmp_path)
        assert code == 3


class TestEval:
    def test_overfit_checkpoint(self, workspace, capsys):
        code, out = run(capsys, "eval", "--checkpoint", workspace / "run" / "best.useg",
                        "--data", workspace / "data" / "manifest.tsv", "--split", "train")
        assert code == 0
        agg = out["aggregate"]
        assert agg["count"] == 3 and agg["mean_dice"] >= 0.95
        assert set(out["by_tag"]) == {"center"}
        assert {"id", "dice", "iou", "hd95", "tp", "fp", "fn", "tn", "tags"} <= set(out["samples"][0])

    def test_empty_split(self, workspace, tmp_path, capsys):
        manifest = (workspace / "data" / "manifest.tsv").read_text().replace("\ttest\t", "\ttrain\t")
        (workspace / "data" / "all_train.tsv").write_text(manifest)
        code, _ = run(capsys, "eval", "--checkpoint", workspace / "run" / "best.useg",
                      "--data", workspace / "data" / "all_train.tsv", "--split", "test")
        assert code == 2

    def test_missing_mask(self, workspace, tmp_path, capsys):
        data = tmp_path / "d"
        shutil.copytree(workspace / "data", data)
        (data / "masks" / "synth_0000.png").unlink()
        code, _ = run(capsys, "eval", "--checkpoint", workspace / "run" / "best.useg",
                      "--data", data / "manifest.tsv", "--split", "train")
        assert code == 3


class TestBenchAndFlops:
    def test_bench(self, capsys):
        code, out = run(capsys, "bench", "--model", "ultraseg-108k", "--iters", 10, "--warmup", 1,
                        "--input-size", "64x64")
        assert code == 0 and out["fps"] > 0 and out["input_shape"] == [1, 3, 64, 64]
        assert abs(out["fps"] - 1000 / out["latency_mean_ms"]) / out["fps"] < 0.02

    def test_bench_checkpoint(self, tmp_path, capsys):
        save_checkpoint(zoo.build("ultraseg-108k"), tmp_path / "m.useg")
        code, out = run(capsys, "bench", "--checkpoint", tmp_path / "m.useg", "--iters", 10, "--warmup", 0,
                        "--input-size", 32)
        assert code == 0 and out["model"] == "ultraseg-108k"

    def test_bench_rejects(self, capsys):
        assert run(capsys, "bench", "--model", "ultraseg-108k", "--iters", 5)[0] == 2
        assert run(capsys, "bench", "--model", "ultraseg-108k", "--threads", 0)[0] == 2
        with pytest.raises(SystemExit):
            cli.main(["bench", "--model", "ultraseg-108k", "--checkpoint", "x"])

    @pytest.mark.parametrize("variant", ["ultraseg-108k", "unet-tiny"])
    def test_flops(self, capsys, variant):
        code, out = run(capsys, "flops", "--model", variant)
        assert code == 0
        assert out["params_enumerated"] == out["params_analytic"]
        assert out["flops"] == 2 * out["macs"]
        assert sum(s["macs"] for s in out["stages"].values()) == out["macs"]

    def test_flops_ordering(self, capsys):
        small = run(capsys, "flops", "--model", "ultraseg-108k")[1]
        tiny = run(capsys, "flops", "--model", "unet-tiny")[1]
        assert small["params_enumerated"] < 300_000 and small["macs"] < tiny["macs"]

    def test_unknown_variant(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["flops", "--model", "ultraseg-1m"])
        assert info.value.code == 2


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ultraseg.cli", "synth", "--n", "1", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == "" and "error" in proc.stderr


def test_pipeline_deterministic(tmp_path, capsys):
    outputs = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "p", ignore_errors=True)
        run(capsys, "synth", "--n", 4, "--seed", 7, "--out", tmp_path / "p" / "data")
        _, train = run(capsys, "train", "--model", "ultraseg-108k", "--data", tmp_path / "p" / "data" / "manifest.tsv",
                       "--out", tmp_path / "p" / "run", "--seed", 1, "--epochs", 2, "--timing")
        _, ev = run(capsys, "eval", "--checkpoint", tmp_path / "p" / "run" / "best.useg",
                    "--data", tmp_path / "p" / "data" / "manifest.tsv")
        outputs.append(json.dumps([strip_wall_clock(train), ev], sort_keys=True))
    assert outputs[0] == outputs[1]
