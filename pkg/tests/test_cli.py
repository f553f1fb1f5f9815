import json

import numpy as np
import pytest

from actdiff import dataset as D
from actdiff.cli import RunConfig, main, read_csv

TINY = ["--channels", "8", "--time-embed-dim", "8", "--epochs", "2", "--steps-per-epoch", "2",
        "--warmup-epochs", "1", "--decay-last-k-epochs", "1", "--decay-every", "1", "--batch-size", "8",
        "--classifier-epochs", "2", "--classifier-steps-per-epoch", "2", "--diffusion-steps", "10",
        "--num-tasks", "2", "--num-actions", "10", "--videos-per-task", "6", "--noise-draws", "2"]


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("ACTDIFF_OUTPUT_ROOT", str(tmp_path))
    return tmp_path


def _config_lines(path):
    return [line for line in open(path) if line.startswith("#")]


def test_gen_data_deterministic(out_root):
    names = ("manifest.json", "records.jsonl", "embeddings.json")
    argv = ["gen-data", "--preset", "linear", "--data-seed", "7", "--output-dir", "a"]
    assert main(argv) == 0
    first = {name: (out_root / "a/dataset" / name).read_bytes() for name in names}
    assert main(argv) == 0
    for name in names:
        assert (out_root / "a/dataset" / name).read_bytes() == first[name], name
    manifest = json.loads((out_root / "a/dataset/manifest.json").read_text())
    assert manifest["config"]["data_seed"] == 7 and manifest["seeds"]["data_seed"] == 7
    data = D.load(out_root / "a/dataset")
    assert set(data.splits) == {"train", "test"}


def test_train_eval_artifacts(out_root):
    assert main(["train", *TINY, "--output-dir", "run"]) == 0
    run = out_root / "run"
    for name in ("classifier.npz", "denoiser.npz", "noise_stats.json", "loss_log.csv", "classifier_log.csv"):
        assert (run / name).exists(), name
    log_rows = read_csv(run / "loss_log.csv")
    assert len(log_rows) == 2 and set(log_rows[0]) == {"epoch", "lr", "loss"}
    assert any("train_seed" in line for line in _config_lines(run / "loss_log.csv"))
    stats = json.loads((run / "noise_stats.json").read_text())
    assert stats["config"]["mask_mode"] == "MultiAdd" and stats["noise_stats"]["horizon"] == 3

    assert main(["eval", *TINY, "--output-dir", "run"]) == 0
    lines = (run / "plans.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert "config" in header and "seeds" in header
    rec = json.loads(lines[1])
    assert set(rec) == {"predicted_task", "plan", "gt_plan"} and len(rec["plan"]) == 3
    report = json.loads((run / "report.json").read_text())["report"]
    assert report["sr"] <= report["macc"] and report["n_samples"] == len(lines) - 1


def test_config_file_and_flag_precedence(out_root, tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"data_seed": 3, "preset": "scattered", "horizon": 4}))
    assert main(["gen-data", "--config", str(cfg_file), "--data-seed", "5", "--output-dir", "p"]) == 0
    manifest = json.loads((out_root / "p/dataset/manifest.json").read_text())
    assert manifest["config"]["data_seed"] == 5
    assert manifest["config"]["preset"] == "scattered" and manifest["dims"]["T"] == 4


def test_unknown_config_key_rejected(out_root, tmp_path, capsys):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["gen-data", "--config", str(cfg_file)]) == 2
    err = capsys.readouterr().err.strip()
    assert "learning_rate" in err and len(err.splitlines()) == 1


@pytest.mark.parametrize("argv", [
    ["train", "--mask-mode", "TripleAdd"],
    ["train", "--epochs", "many"],
    ["train", "--attention-enabled", "maybe"],
    ["train", "--warmup-epochs", "70"],
    ["train", "--not-a-flag", "1"],
    ["gen-data", "--config", "/nonexistent/cfg.json"],
    ["frobnicate"],
])
def test_config_errors_exit_2(out_root, argv):
    assert main(argv) == 2


def test_missing_inputs_exit_3(out_root, capsys):
    assert main(["eval", "--output-dir", "nothing-here"]) == 3
    assert main(["train", "--dataset", str(out_root / "missing")]) == 3
    assert "data error" in capsys.readouterr().err


def test_corrupt_dataset_exit_3(out_root):
    assert main(["gen-data", "--output-dir", "c"]) == 0
    path = out_root / "c/dataset/records.jsonl"
    lines = path.read_text().splitlines()
    rec = json.loads(lines[4])
    rec["actions"][1] = 99
    lines[4] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    assert main(["train", *TINY[:-8], "--dataset", str(out_root / "c/dataset")]) == 3


def test_nan_exit_4(out_root, monkeypatch):
    from actdiff import planner
    from actdiff.training import NumericError

    def boom(*a, **k):
        raise NumericError("loss became non-finite")

    monkeypatch.setattr(planner, "train_denoiser", boom)
    assert main(["train", *TINY, "--output-dir", "nan"]) == 4


def test_analyze_noise_outputs(out_root):
    assert main(["analyze-noise", "--output-dir", "noise", "--noise-draws", "3", "--histogram-bins", "20"]) == 0
    out = out_root / "noise"
    rows = read_csv(out / "noise_summary.csv")
    multi = [float(r["sigma"]) for r in rows if r["mode"] == "MultiAdd"]
    assert len(multi) == 3 and multi[0] < multi[1] < multi[2]
    hist = read_csv(out / "hist_MultiAdd_t1.csv")
    assert set(hist[0]) == {"bin_left", "bin_right", "count"} and len(hist) == 20
    assert sum(int(r["count"]) for r in hist) == int(rows[3]["count"])
    assert (out / "hist_NoMask_t3.csv").exists()


def test_ablate_grid(out_root):
    assert main(["ablate", *TINY, "--output-dir", "abl", "--horizons", "3,4"]) == 0
    rows = read_csv(out_root / "abl/ablation.csv")
    assert len(rows) == 12
    for T in ("3", "4"):
        grid = {(r["mask_mode"], r["attention"]) for r in rows if r["horizon"] == T}
        assert grid == {(m, a) for m in ("MultiAdd", "SingleAdd", "NoMask") for a in ("True", "False")}
    deltas = json.loads((out_root / "abl/ablation_deltas.json").read_text())["deltas"]
    assert len(deltas) == 10


def test_run_config_schema():
    cfg = RunConfig.from_mapping({"channels": "16,32", "attention_enabled": "false", "peak_lr": "1e-3"})
    assert cfg.channels == [16, 32] and cfg.attention_enabled is False and cfg.peak_lr == 1e-3
    assert cfg.training_config().peak_lr == 1e-3
    with pytest.raises(ValueError):
        RunConfig.from_mapping({"horizon": 2.5})


def test_output_root_only_for_relative(tmp_path, monkeypatch):
    monkeypatch.setenv("ACTDIFF_OUTPUT_ROOT", str(tmp_path / "root"))
    assert RunConfig(output_dir="x").output_path() == tmp_path / "root/x"
    assert RunConfig(output_dir=str(tmp_path / "abs")).output_path() == tmp_path / "abs"
