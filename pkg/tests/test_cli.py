import numpy as np
import pytest

from aucalib.cli import main
from aucalib.harness import write_predictions_csv
from aucalib.metrics import PredictionSet, build_report

TINY_ARGS = [
    "--set", "synth.participants=6", "--set", "synth.frames=20",
    "--set", "synth.size=16", "--set", "synth.n_au=3", "--set", "synth.seed=5",
    "--set", "epochs=1", "--set", "batch_size=16", "--set", "folds=2",
    "--set", "seed=11",
    "--set", "backbone.stages=4,8", "--set", "backbone.blocks=1,1",
    "--set", "backbone.hidden=8",
]


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1


def test_unknown_flag_is_usage_error(capsys):
    assert main(["xval", "--bogus"]) == 1
    assert "unrecognized" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(capsys):
    assert main(["xval", "--set", "not_a_key=1"]) == 1


def test_malformed_set_is_usage_error(capsys):
    assert main(["xval", "--set", "epochs"]) == 1
    assert "KEY=VALUE" in capsys.readouterr().err


def test_missing_manifest_is_data_error(capsys):
    assert main(["xval", "--set", "manifest=/no/such/file.csv"]) == 2


def test_too_many_folds_is_data_error(tmp_path, capsys):
    rc = main(["xval", "--out", str(tmp_path)] + TINY_ARGS + ["--set", "folds=50"])
    assert rc == 2
    assert "participants" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "COMMAND" in capsys.readouterr().out


def test_synth_writes_dataset(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "d")] + TINY_ARGS)
    assert rc == 0
    assert (tmp_path / "d" / "manifest.csv").exists()
    assert (tmp_path / "d" / "images.csnt").exists()
    out = capsys.readouterr().out
    assert "6 participants" in out


def test_xval_writes_report_and_figures(tmp_path, capsys):
    rc = main(["xval", "--out", str(tmp_path / "r"),
               "--set", "modes=ncg,ofc_csn:stage2"] + TINY_ARGS)
    assert rc == 0
    assert (tmp_path / "r" / "report.csv").exists()
    assert (tmp_path / "r" / "report.json").exists()
    assert list((tmp_path / "r").glob("fig_*.png"))
    head = capsys.readouterr().out.splitlines()[0]
    assert head == "method,metric,au_01,au_02,au_03,Average"


def test_train_saves_checkpoints(tmp_path):
    rc = main(["train", "--out", str(tmp_path / "t"),
               "--set", "modes=ncg,ofc_csn:output"] + TINY_ARGS)
    assert rc == 0
    names = {p.name for p in (tmp_path / "t").glob("*.csnt")}
    assert {"checkpoint_plain.csnt", "checkpoint_csn_output.csnt"} <= names
    assert (tmp_path / "t" / "train_log.json").exists()


def test_ablate_needs_two_merges(capsys):
    assert main(["ablate", "--merges", "fc"] + TINY_ARGS) == 1
    assert main(["ablate", "--merges", "fc,warp"] + TINY_ARGS) == 1


def test_config_file_plus_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\nsynth.participants = 6\nsynth.frames = 20\n"
                   "synth.size = 16\nsynth.n_au = 3\nfolds = 2\n"
                   "backbone.stages = 4,8\nbackbone.blocks = 1,1\n"
                   "backbone.hidden = 8\nmodes = ncg\nbatch_size = 16\n",
                   encoding="utf-8")
    rc = main(["xval", "--config", str(cfg), "--out", str(tmp_path / "o"),
               "--seed", "3"])
    assert rc == 0
    import json
    payload = json.loads((tmp_path / "o" / "report.json").read_text())
    assert payload["seed"] == 3


def _write_scores(path, task="intensity"):
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 6, size=(12, 2))
    preds = labels + rng.normal(0, 0.2, size=(12, 2))
    pset = PredictionSet(task, ("01", "02"),
                         np.array(["a"] * 6 + ["b"] * 6, dtype=object),
                         np.arange(12, dtype=np.int64), labels, preds)
    write_predictions_csv(path, pset)
    return pset


def test_score_matches_library_metrics(tmp_path, capsys):
    path = tmp_path / "preds.csv"
    pset = _write_scores(path)
    assert main(["score", "--pred", str(path)]) == 0
    out = capsys.readouterr().out
    report = build_report([pset])
    mae_line = next(ln for ln in out.splitlines() if ln.startswith("mae"))
    assert f"avg {report.average['mae']:.4f}" in mae_line


def test_score_missing_file_is_data_error(tmp_path):
    assert main(["score", "--pred", str(tmp_path / "none.csv")]) == 2


def test_score_detection_uses_decision_rule(tmp_path, capsys):
    path = tmp_path / "preds.csv"
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 6, size=(12, 1))
    scores = np.where(labels >= 2, 0.9, 0.1) + rng.normal(0, 0.01, size=(12, 1))
    pset = PredictionSet("detection", ("01",),
                         np.array(["a"] * 6 + ["b"] * 6, dtype=object),
                         np.arange(12, dtype=np.int64), labels, scores)
    write_predictions_csv(path, pset)
    rc = main(["score", "--pred", str(path), "--set", "task=detection"])
    assert rc == 0
    out = capsys.readouterr().out
    acc_line = next(ln for ln in out.splitlines() if ln.startswith("accuracy"))
    assert "avg 1.0000" in acc_line


@pytest.mark.slow
def test_gradcheck_cli_passes(capsys):
    assert main(["gradcheck", "--graphs", "plain"]) == 0
    out = capsys.readouterr().out
    assert "max rel err" in out
    assert out.strip().endswith("< 1e-04")


def test_gradcheck_rejects_unknown_graph(capsys):
    assert main(["gradcheck", "--graphs", "warp"]) == 1
