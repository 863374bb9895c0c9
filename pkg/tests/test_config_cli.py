"""Experiment config parsing and the command-line pipeline."""

import numpy as np
import pytest

from membrane_prune import cli
from membrane_prune import net as N
from membrane_prune.config import ConfigError, parse_config, parse_keep

TINY = """
[experiment]
name = tiny
seed = 3
output_dir = {out}

[network]
map_counts = 6/4/3/8

[data]
width = 64
height = 64
curve_count = 3
train_images = 2
val_images = 1
train_per_class = 40
val_per_class = 30

[train]
base_lr = 0.01
batch_size = 16
iterations = {iterations}
log_every = 5

[prune]
plans = 4/3/2/5, 2/2/1/3
batch_count = 1
batch_size = 16
random_seeds = 2

[eval]
image_size = 32
"""


def write_config(tmp_path, out="out", iterations=10, extra=""):
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "exp.ini"
    path.write_text(TINY.format(out=out, iterations=iterations) + extra)
    return path


def test_defaults_and_overrides(tmp_path):
    cfg = parse_config("[train]\nbase_lr = 0.02  ; faster\n[prune]\nplans = N6\n", base_dir=tmp_path)
    assert cfg.train.base_lr == 0.02 and cfg.train.momentum == 0.9
    assert cfg.network.map_counts == (100, 75, 50, 200)
    assert cfg.prune.plans == ("N6",) and cfg.output_dir == tmp_path / "out"
    plan = cfg.plan("N6", "sparsity")
    assert plan.keep == (65, 60, 30, 110) and plan.strategy == "sparsity"


def test_hashes_track_sections():
    a = parse_config("[train]\nbase_lr = 0.02\n")
    b = parse_config("[train]\nbase_lr = 0.03\n")
    ha, hb = a.section_hashes(), b.section_hashes()
    assert ha["train"] != hb["train"] and ha["data"] == hb["data"]
    assert ha["experiment"] != hb["experiment"]


@pytest.mark.parametrize("text", [
    "[nosuch]\nx = 1\n",
    "[train]\nlearning_rate = 0.1\n",
    "[train]\nbase_lr = fast\n",
    "[train]\nbase_lr = -1\n",
    "[prune]\nstrategies = loss-greedy, magic\n",
    "[prune]\nplans = 500/1/1/1\n",
    "[network]\nname = N\nmap_counts = 1/1/1/1\n",
    "[eval]\nrepetitions = 1\n",
    "[data]\nsource = manifest\n",
    "not an ini file",
])
def test_malformed_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_parse_keep():
    assert parse_keep("N7") == (30, 20, 10, 10)
    assert parse_keep("1/2/3/4") == (1, 2, 3, 4)
    with pytest.raises(ConfigError):
        parse_keep("1/2")


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate", "x.ini"])
    assert info.value.code == 1
    assert cli.main(["synth", str(tmp_path / "missing.ini")]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nbogus = 1\n")
    assert cli.main(["train", str(bad)]) == 1


def test_missing_inputs_exit_2(tmp_path, capsys):
    path = write_config(tmp_path)
    assert cli.main(["train", str(path)]) == 2
    assert "synth" in capsys.readouterr().err


def test_divergence_exits_3(tmp_path):
    path = write_config(tmp_path, extra="")
    text = path.read_text().replace("base_lr = 0.01", "base_lr = 1e300")
    path.write_text(text)
    assert cli.main(["synth", str(path)]) == 0
    with np.errstate(all="ignore"):
        assert cli.main(["train", str(path)]) == 3


def test_resumed_training_matches_single_run(tmp_path):
    one = write_config(tmp_path / "a", iterations=12)
    two = write_config(tmp_path / "b", iterations=12)
    for path in (one, two):
        assert cli.main(["synth", str(path)]) == 0
    assert cli.main(["train", str(one)]) == 0
    assert cli.main(["train", str(two), "--max-steps", "7"]) == 0
    partial = N.load(tmp_path / "b" / "out" / "model" / "base.ckpt")
    assert partial.meta["iteration"] == 7 and len(partial.meta["pending_losses"]) == 2
    assert cli.main(["train", str(two), "--resume"]) == 0
    a = (tmp_path / "a" / "out" / "model")
    b = (tmp_path / "b" / "out" / "model")
    assert (a / "base.ckpt").read_bytes() == (b / "base.ckpt").read_bytes()
    assert (a / "history.csv").read_text() == (b / "history.csv").read_text()


def test_full_pipeline_writes_every_artifact(tmp_path):
    path = write_config(tmp_path)
    assert cli.main(["all", str(path)]) == 0
    out = tmp_path / "out"
    for rel in ["data/manifest.txt", "model/base.ckpt", "model/history.csv", "model/history.png",
                "prune/loss-greedy/4-3-2-5/ordering_c1.csv", "prune/sparsity/2-2-1-3/retrained.ckpt",
                "eval/networks.csv", "eval/comparison.csv", "eval/segmentation.png", "eval/prob_N.pgm",
                "report/ordering_curves.png", "report/curves_fc4.csv", "report/report.md", "report/report.csv"]:
        assert (out / rel).is_file(), rel
    comparison = (out / "eval" / "comparison.csv").read_text()
    assert "plan,A_loss-greedy,A_sparsity,deltaP_percent" in comparison
    assert comparison.startswith("# config_sha256=")
    report = (out / "report" / "report.md").read_text()
    assert "Config hashes" in report and "Greedy vs random" in report
    small = N.load(out / "prune" / "sparsity" / "2-2-1-3" / "retrained.ckpt")
    assert small.config.map_counts == (2, 2, 1, 3)


def test_external_manifest(tmp_path):
    path = write_config(tmp_path)
    assert cli.main(["synth", str(path)]) == 0
    manifest = tmp_path / "out" / "data" / "manifest.txt"
    text = path.read_text().replace("[data]", f"[data]\nsource = manifest\nmanifest = {manifest}")
    path.write_text(text)
    assert cli.main(["train", str(path)]) == 0
    manifest.write_text("a.pgm b.pgm sideways 1\n")
    assert cli.main(["train", str(path)]) == 2
