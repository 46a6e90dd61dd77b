import csv

import numpy as np
import pytest

from mosaicprune.cli import main
from mosaicprune.pipeline import MosaicModel, mac_count
from mosaicprune.toydiffusion.checkpoint import load_model
from mosaicprune.trajectory import StagePlan

TINY = ["--d-model", "16", "--n-heads", "2", "--depth", "2", "--mlp-ratio", "2"]
FAST = ["--n-calib", "32", "--train-size", "128", "--steps", "5"]


def run(cmd, out, *args):
    return main([cmd, "--out-dir", str(out), *args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", out, *TINY, "--epochs", "1", "--train-size", "256", "--batch-size", "64") == 0
    return out / "model.ckpt"


@pytest.fixture(scope="module")
def mosaic_dir(tmp_path_factory, ckpt):
    out = tmp_path_factory.mktemp("prune")
    assert run("prune", out, "--checkpoint", str(ckpt), "--preset", "dit-0.30", *FAST) == 0
    return out / "mosaic"


# --- analyze ------------------------------------------------------------------------

def test_analyze_defaults(tmp_path, capsys):
    assert run("analyze", tmp_path) == 0
    plan = StagePlan.load(tmp_path / "plan.txt")
    assert 1000 > plan.dividers[0] > plan.dividers[1] > 1
    assert "stage 3" in capsys.readouterr().out
    rows = read_csv(tmp_path / "curves.csv")
    assert len(rows) == 1000
    assert (tmp_path / "curves.png").stat().st_size > 0


def test_analyze_lambda_zero_score_is_grad(tmp_path):
    assert run("analyze", tmp_path, "--lambda", "0", "--M", "0.5") == 0
    for r in read_csv(tmp_path / "curves.csv")[1:]:
        assert float(r["score"]) == float(r["grad"])


def test_analyze_flat_threshold_is_degenerate(tmp_path):
    assert run("analyze", tmp_path / "a") == 0
    code = run("analyze", tmp_path / "b", "--curve-file", str(tmp_path / "a" / "curves.csv"), "--M", "0.99999999")
    assert code == 3


def test_analyze_from_curve_file_matches(tmp_path):
    assert run("analyze", tmp_path / "a") == 0
    assert run("analyze", tmp_path / "b", "--curve-file", str(tmp_path / "a" / "curves.csv")) == 0
    assert StagePlan.load(tmp_path / "b" / "plan.txt").dividers == StagePlan.load(tmp_path / "a" / "plan.txt").dividers


def test_analyze_large_lambda_is_monotone(tmp_path):
    # the log-SNR term dominates at this weight and leaves no interior peak
    assert run("analyze", tmp_path, "--lambda", "0.01") == 3


def test_bad_config_exits_2(tmp_path):
    assert run("analyze", tmp_path, "--M", "1.5") == 2
    assert run("analyze", tmp_path, "--family", "sigmoid") == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no equals sign here\n")
    assert run("analyze", tmp_path, "--config", str(cfg)) == 2
    cfg.write_text("flavour = 3\n")
    assert run("analyze", tmp_path, "--config", str(cfg)) == 2


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# thresholds\nlambda = 0.0001\nM = 0.45\n")
    assert run("analyze", tmp_path / "a", "--config", str(cfg)) == 0
    assert run("analyze", tmp_path / "b", "--config", str(cfg), "--M", "0.7") == 0
    a = StagePlan.load(tmp_path / "a" / "plan.txt")
    b = StagePlan.load(tmp_path / "b" / "plan.txt")
    assert a.dividers[0] > b.dividers[0] and a.dividers[1] < b.dividers[1]


# --- train / prune ------------------------------------------------------------------

def test_train_outputs(ckpt):
    out = ckpt.parent
    assert load_model(ckpt).cfg.d_model == 16
    assert len(read_csv(out / "loss.csv")) > 0
    assert (out / "loss.png").exists()


def test_missing_checkpoint_exits_2(tmp_path):
    assert run("prune", tmp_path, "--checkpoint", str(tmp_path / "nope.ckpt")) == 2
    assert run("prune", tmp_path) == 2
    assert run("sample", tmp_path, "--mosaic", str(tmp_path / "nope")) == 2


def test_corrupt_checkpoint_exits_2(tmp_path, ckpt):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ckpt.read_bytes()[:-10])
    assert run("prune", tmp_path, "--checkpoint", str(bad)) == 2


def test_prune_zero_aggregate_copies_input(tmp_path, ckpt):
    assert run("prune", tmp_path, "--checkpoint", str(ckpt), "--aggregate", "0", *FAST) == 0
    for i in (1, 2, 3):
        assert (tmp_path / "mosaic" / f"stage{i}.ckpt").read_bytes() == ckpt.read_bytes()


def test_prune_preset(mosaic_dir, capsys):
    plan = StagePlan.load(mosaic_dir / "plan.txt")
    assert plan.sparsities == (0.6, 0.04, 0.1)
    traces = list((mosaic_dir.parent / "traces").glob("stage1_block0_*.csv"))
    assert len(traces) == 2


def test_prune_rerun_is_byte_identical(tmp_path, ckpt, mosaic_dir):
    assert run("prune", tmp_path, "--checkpoint", str(ckpt), "--preset", "dit-0.30", *FAST) == 0
    for name in ("plan.txt", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt"):
        assert (tmp_path / "mosaic" / name).read_bytes() == (mosaic_dir / name).read_bytes()


def test_prune_with_plan_file(tmp_path, ckpt):
    StagePlan(dividers=(700, 300), horizon=1000, sparsities=(0.5, 0.0, 0.0)).save(tmp_path / "p.txt")
    assert run("prune", tmp_path, "--checkpoint", str(ckpt), "--plan", str(tmp_path / "p.txt"), *FAST) == 0
    assert StagePlan.load(tmp_path / "mosaic" / "plan.txt").dividers == (700, 300)
    assert (tmp_path / "mosaic" / "stage2.ckpt").read_bytes() == ckpt.read_bytes()


# --- sample / eval ------------------------------------------------------------------

def test_sample_reproducible(tmp_path, mosaic_dir):
    for d in ("a", "b"):
        assert run("sample", tmp_path / d, "--mosaic", str(mosaic_dir), "--n-samples", "4", "--steps", "10") == 0
    a, b = np.load(tmp_path / "a" / "samples.npy"), np.load(tmp_path / "b" / "samples.npy")
    assert a.dtype == np.dtype("<f4") and a.shape == (4, 1, 8, 8)
    assert (tmp_path / "a" / "samples.npy").read_bytes() == (tmp_path / "b" / "samples.npy").read_bytes()
    dispatch = read_csv(tmp_path / "a" / "dispatch.csv")
    plan = StagePlan.load(mosaic_dir / "plan.txt")
    assert [int(r["stage"]) for r in dispatch] == [plan.stage_of(int(r["t"])) + 1 for r in dispatch]
    assert (tmp_path / "a" / "samples.png").exists()


def test_sample_from_plain_checkpoint(tmp_path, ckpt):
    assert run("sample", tmp_path, "--checkpoint", str(ckpt), "--n-samples", "2", "--steps", "4") == 0
    assert np.all(np.isfinite(np.load(tmp_path / "samples.npy")))


def test_eval_dense_against_itself(tmp_path, ckpt):
    assert run("eval", tmp_path, "--dense", str(ckpt), "--mosaic", str(ckpt), "--n-eval", "4", "--steps", "5") == 0
    (row,) = read_csv(tmp_path / "report.csv")
    assert float(row["divergence"]) == 0.0
    assert (tmp_path / "report.png").exists() and (tmp_path / "report.txt").read_text()


def test_eval_with_uniform_baseline(tmp_path, ckpt, mosaic_dir):
    args = ["--dense", str(ckpt), "--mosaic", str(mosaic_dir), "--n-eval", "4", "--baseline", "uniform", *FAST]
    assert run("eval", tmp_path, *args) == 0
    rows = read_csv(tmp_path / "report.csv")
    assert [r["variant"] for r in rows] == ["mosaic", "uniform"]
    mosaic = MosaicModel.load(mosaic_dir)
    assert int(rows[0]["macs"]) == mac_count(mosaic, 5)
    assert (float(rows[1]["s1"]), float(rows[1]["s2"])) == (mosaic.plan.aggregate, mosaic.plan.aggregate)
    assert int(rows[0]["dense_macs"]) == int(rows[1]["dense_macs"])
