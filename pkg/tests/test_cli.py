import hashlib
import json
import subprocess
import sys

import pytest

from stormlatent import cli
from stormlatent.train import NumericError

TRAIN_CFG = "epochs = 1\nwarmup_epochs = 0\nbase_lr = 0.002\nfeatures = 2\nhorizon = 4\nthresholds = 0.2, 1\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "data", "--seed", 7, "--sequences", 10, "--height", 32, "--width", 32, "--steps", 14) == 0
    (root / "run.cfg").write_text(TRAIN_CFG)
    assert run("train", "--out", root / "train", "--data", root / "data", "--config", root / "run.cfg", "--debug") == 0
    return root


def test_gen_data_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / d, "--seed", 7, "--sequences", 4, "--height", 32, "--width", 32) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert "train/seq_00000.lptf" in a and "manifest.json" in a


def test_manifest_hashes_every_artifact(workspace):
    out = workspace / "train"
    man = json.loads((out / "manifest.json").read_text())
    assert man["verb"] == "train" and man["seed"] == 0
    assert "epochs = 1" in man["config"]
    files = {p for p in man["artifacts"]}
    assert {"checkpoint.lptf", "checkpoint.json", "epochs.csv", "steps.csv", "run_config.txt", "schedule.csv"} <= files
    for name, digest in man["artifacts"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_truth_forecast_scores_perfectly(workspace, tmp_path):
    data = workspace / "data"
    assert run("predict", "--out", tmp_path / "p", "--data", data, "--truth", "--horizon", 9, "--split", "train") == 0
    assert (tmp_path / "p" / "manifest.json").is_file()
    cfg = workspace / "run.cfg"
    assert run("eval", "--out", tmp_path / "e", "--data", data, "--predictions", tmp_path / "p" / "forecasts",
               "--horizon", 9, "--split", "train", "--config", cfg) == 0
    rows = [r.split(",") for r in (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1:]]
    scored = [r for r in rows if r[2] != "NA"]
    assert scored, "no events in the test split"
    assert all(float(r[2]) == 1.0 and float(r[3]) == 1.0 for r in scored)


def test_eval_checkpoint_with_plots(workspace, tmp_path):
    out = tmp_path / "e"
    assert run("eval", "--out", out, "--data", workspace / "data", "--checkpoint", workspace / "train" / "checkpoint.lptf",
               "--config", workspace / "run.cfg", "--plot") == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "lead_step,threshold,POD,CSI,HSS,FBI" and len(lines) == 1 + 4 * 2 + 2
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 2 and all((out / p).stat().st_size > 0 for p in pngs)


def test_predict_checkpoint_and_attribute(workspace, tmp_path):
    ck = workspace / "train" / "checkpoint.lptf"
    assert run("predict", "--out", tmp_path / "p", "--data", workspace / "data", "--checkpoint", ck) == 0
    assert len(list((tmp_path / "p" / "forecasts").glob("*.lptf"))) == 1
    (tmp_path / "a.cfg").write_text(TRAIN_CFG + "lead_groups = 1-2,3-4\n")
    assert run("attribute", "--out", tmp_path / "a", "--data", workspace / "data", "--checkpoint", ck,
               "--config", tmp_path / "a.cfg", "--samples", 1, "--steps", 2) == 0
    lines = (tmp_path / "a" / "attribution.csv").read_text().splitlines()
    assert lines[0] == "channel_name,lead_group,mean_abs_attr,rank"
    assert len(lines) == 1 + 2 * (4 + 8 + 3)


def test_ablate_loss_suite(workspace, tmp_path):
    out = tmp_path / "abl"
    assert run("ablate", "--out", out, "--data", workspace / "data", "--config", workspace / "run.cfg",
               "--suite", "loss", "--plot") == 0
    variants = sorted(p.parent.name for p in (out / "loss").glob("*/metrics.csv"))
    assert variants == sorted(["mae", "weighted_mae", "weighted_mae_plain_ce", "wmce"])
    seeds = {json.loads((out / "loss" / v / "checkpoint.json").read_text())["train"]["seed"] for v in variants}
    assert seeds == {0}
    combined = (out / "ablation.csv").read_text().splitlines()
    assert combined[0].startswith("suite,variant,") and {r.split(",")[1] for r in combined[1:]} == set(variants)
    assert len((out / "summary.csv").read_text().splitlines()) == 5
    assert list((out / "loss").glob("*.png"))


def test_error_codes(workspace, tmp_path, capsys, monkeypatch):
    (tmp_path / "bad.cfg").write_text("epochs = abc\n")
    assert run("train", "--out", tmp_path / "t", "--data", workspace / "data", "--config", tmp_path / "bad.cfg") == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error kind=config code=2 message=") and "bad.cfg:1" in err
    assert run("eval", "--out", tmp_path / "e", "--data", tmp_path / "missing", "--checkpoint", "x.lptf") == 3
    assert "kind=data code=3" in capsys.readouterr().err

    def boom(*a, **k):
        raise NumericError("non-finite loss term: latent")

    monkeypatch.setattr(cli, "fit", boom)
    assert run("train", "--out", tmp_path / "n", "--data", workspace / "data", "--config", workspace / "run.cfg") == 4
    assert "kind=numeric code=4" in capsys.readouterr().err


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "stormlatent.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in cli.COMMANDS:
        assert verb in res.stdout
