import json
from dataclasses import replace

import numpy as np
import pytest

from aucalib import backbone as B
from aucalib.config import config_from_mapping
from aucalib.data import read_container, reference_record
from aucalib.harness import (
    MODEL_PLAIN,
    _load_split,
    derive_seed,
    format_report_csv,
    load_predictions_csv,
    model_key,
    run_ablation,
    run_crossval,
    train_full,
    train_model,
    write_predictions_csv,
)
from aucalib.losses import compute_weights, count_intensities
from aucalib.metrics import PredictionSet
from aucalib.siamese import PredictionMode, predict
from aucalib.tensor import Tensor

TINY = {
    "synth.participants": "6", "synth.frames": "20", "synth.size": "16",
    "synth.n_au": "3", "synth.seed": "5",
    "epochs": "1", "batch_size": "16", "folds": "2", "seed": "11",
    "modes": "ncg,ofc_bs,ofc_csn:stage2",
    "backbone.stages": "4,8", "backbone.blocks": "1,1", "backbone.hidden": "8",
}


def tiny_config(out, **extra):
    return config_from_mapping({**TINY, "out": str(out), **extra})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("xval")
    return run_crossval(tiny_config(out))


def test_model_key_shares_plain_checkpoint():
    assert model_key(PredictionMode.parse("ncg")) == MODEL_PLAIN
    assert model_key(PredictionMode.parse("ofc_bs")) == MODEL_PLAIN
    assert model_key(PredictionMode.parse("ofc_csn:stage2")) == "csn:stage2"
    assert model_key(PredictionMode.parse("ofc_csn:output")) == "csn:output"


def test_derive_seed_separates_streams():
    base = derive_seed(11, 0, "plain").generate_state(4)
    assert np.array_equal(base, derive_seed(11, 0, "plain").generate_state(4))
    for other in (derive_seed(11, 1, "plain"), derive_seed(12, 0, "plain"),
                  derive_seed(11, 0, "csn:fc"), derive_seed(11, 0, "plain", 1)):
        assert not np.array_equal(base, other.generate_state(4))


def test_fold_protocol_proofs(tiny_run):
    frames_per_pid = int(TINY["synth.frames"])
    for fr in tiny_run.fold_results:
        assert fr.proof["train_val_participant_overlap"] == []
        assert fr.proof["val_frames_in_train"] == 0
        assert fr.proof["excluded_reference_frames"] == len(fr.val_participants)
        assert fr.proof["n_val_scored_frames"] == (
            len(fr.val_participants) * (frames_per_pid - 1))


def test_reference_frames_never_scored(tiny_run):
    manifest = tiny_run.manifest
    for fr in tiny_run.fold_results:
        for pset in fr.prediction_sets.values():
            for pid in fr.val_participants:
                ref = reference_record(manifest, pid)
                rows = pset.frames[pset.participants == pid]
                assert ref.frame not in rows
                assert len(rows) == int(TINY["synth.frames"]) - 1


def test_every_mode_scored_on_same_rows(tiny_run):
    for fr in tiny_run.fold_results:
        sets = list(fr.prediction_sets.values())
        assert set(fr.prediction_sets) == {"ncg", "ofc_bs", "ofc_csn:stage2"}
        for pset in sets[1:]:
            assert np.array_equal(pset.participants, sets[0].participants)
            assert np.array_equal(pset.frames, sets[0].frames)
            assert np.array_equal(pset.labels, sets[0].labels)


def test_mode_list_does_not_perturb_shared_model(tiny_run, tmp_path):
    solo = run_crossval(tiny_config(tmp_path / "solo", modes="ncg"), write=False)
    for fr_solo, fr_full in zip(solo.fold_results, tiny_run.fold_results):
        assert np.array_equal(fr_solo.prediction_sets["ncg"].preds,
                              fr_full.prediction_sets["ncg"].preds)


def test_reports_are_byte_identical_across_runs(tiny_run, tmp_path):
    again = run_crossval(tiny_config(tmp_path / "again"))
    assert tiny_run.csv_path.read_bytes() == again.csv_path.read_bytes()


def test_report_csv_layout(tiny_run):
    lines = tiny_run.csv_path.read_text().splitlines()
    assert lines[0] == "method,metric,au_01,au_02,au_03,Average"
    body = [ln.split(",") for ln in lines[1:]]
    assert len(body) == 3 * 3  # three modes, three intensity metrics
    assert {row[0] for row in body} == {"ncg", "ofc_bs", "ofc_csn:stage2"}
    for row in body:
        assert len(row) == 6
        float(row[-1])


def test_report_json_provenance(tiny_run):
    payload = json.loads(tiny_run.json_path.read_text())
    assert payload["config_digest"] == tiny_run.config.digest()
    assert payload["seed"] == tiny_run.config.seed
    summary = payload["protocol_summary"]
    assert summary["total_participant_overlap"] == 0
    assert summary["total_val_frames_in_train"] == 0
    assert summary["total_excluded_reference_frames"] == sum(
        len(fr.val_participants) for fr in tiny_run.fold_results)
    for fold in payload["folds"]:
        assert set(fold["training"]) == {"plain", "csn:stage2"}
        assert "reg" in fold["weights"]


def test_figures_written(tiny_run):
    names = {p.name for p in tiny_run.figure_paths}
    assert {"fig_icc_across.png", "fig_icc_within.png", "fig_mae.png",
            "fig_training.png"} <= names
    for p in tiny_run.figure_paths:
        assert p.stat().st_size > 0


def test_prediction_csvs_written_per_mode(tiny_run):
    out = tiny_run.out_dir
    for name in ("predictions_ncg.csv", "predictions_ofc_bs.csv",
                 "predictions_ofc_csn_stage2.csv"):
        assert (out / name).is_file()
    back = load_predictions_csv(out / "predictions_ncg.csv", "intensity")
    pooled = PredictionSet.concatenate(
        [fr.prediction_sets["ncg"] for fr in tiny_run.fold_results])
    order = np.lexsort((pooled.frames, pooled.participants.astype(str)))
    assert np.array_equal(back.labels, pooled.labels[order])
    assert np.allclose(back.preds, pooled.preds[order], atol=1e-9)


def test_training_is_deterministic(tiny_run):
    manifest = tiny_run.manifest
    cfg = tiny_run.config
    spec = cfg.backbone_spec(n_au=3, height=16, width=16)
    pids = tiny_run.fold_results[0].train_participants
    data = _load_split(manifest, pids)
    weights = compute_weights(count_intensities(data.labels, spec.n_au))
    s1, log1 = train_model(manifest, spec, weights, data, MODEL_PLAIN, cfg, fold=0)
    s2, log2 = train_model(manifest, spec, weights, data, MODEL_PLAIN, cfg, fold=0)
    s3, _ = train_model(manifest, spec, weights, data, MODEL_PLAIN, cfg, fold=1)
    for name in s1.tensors:
        assert np.array_equal(s1.tensors[name].data, s2.tensors[name].data)
    assert log1.epoch_losses == log2.epoch_losses
    assert any(not np.array_equal(s1.tensors[n].data, s3.tensors[n].data)
               for n in s1.tensors)


def test_loss_decreases_with_workable_lr(tiny_run):
    manifest = tiny_run.manifest
    cfg = tiny_config(tiny_run.out_dir, epochs="3")
    cfg = replace(cfg, optim=replace(cfg.optim, lr_last=1e-2, lr_rest=3e-3))
    spec = cfg.backbone_spec(n_au=3, height=16, width=16)
    pids = tiny_run.fold_results[0].train_participants
    data = _load_split(manifest, pids)
    weights = compute_weights(count_intensities(data.labels, spec.n_au))
    _, log = train_model(manifest, spec, weights, data, "csn:stage2", cfg, fold=0)
    assert log.epoch_losses[-1] < log.initial_loss


def test_split_pairs_rows_with_participant_reference(tiny_run):
    manifest = tiny_run.manifest
    pids = tiny_run.fold_results[0].train_participants
    data = _load_split(manifest, pids)
    records = [r for pid in pids for r in manifest.records_for(pid)]
    for i in (0, len(records) // 2, len(records) - 1):
        ref = reference_record(manifest, records[i].participant)
        assert np.array_equal(data.ref_images[i], manifest.load_image(ref))


def test_train_full_checkpoints_round_trip(tiny_run, tmp_path):
    cfg = tiny_config(tmp_path / "ckpt", modes="ncg")
    stores, logs, out = train_full(cfg, fold=0)
    path = out / "checkpoint_plain.csnt"
    assert path.exists()
    loaded = read_container(path)
    spec = cfg.backbone_spec(n_au=3, height=16, width=16)
    fresh = B.init_backbone(spec, seed=0)
    fresh.load_state(loaded)
    for name, t in stores[MODEL_PLAIN].tensors.items():
        assert np.array_equal(loaded[name],
                              t.data.astype(np.float32).astype(np.float64))
    x = Tensor(tiny_run.manifest.load_batch(tiny_run.manifest.records[:4]))
    mode = PredictionMode.parse("ncg")
    a = predict(stores[MODEL_PLAIN], spec, mode, x)
    b = predict(fresh, spec, mode, x)
    assert np.allclose(a, b, atol=1e-4)


def test_ablation_needs_two_merges(tmp_path):
    cfg = tiny_config(tmp_path / "abl")
    with pytest.raises(ValueError, match="at least 2"):
        run_ablation(cfg, ["fc"], write=False)


def test_ablation_reports_one_entry_per_merge(tmp_path):
    cfg = tiny_config(tmp_path / "abl2", epochs="1")
    result = run_ablation(cfg, ["stage1", "output"], out_dir=tmp_path / "abl2")
    assert set(result.reports) == {"ofc_csn:stage1", "ofc_csn:output"}
    assert any(p.name == "fig_ablation.png" for p in result.figure_paths)


def test_predictions_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 6, size=(8, 2))
    pset = PredictionSet("intensity", ("01", "07"),
                         np.array(["a"] * 4 + ["b"] * 4, dtype=object),
                         np.arange(8, dtype=np.int64), labels,
                         rng.normal(size=(8, 2)))
    path = tmp_path / "preds.csv"
    write_predictions_csv(path, pset)
    back = load_predictions_csv(path, "intensity")
    assert back.au_names == ("01", "07")
    assert np.array_equal(back.labels, pset.labels)
    assert np.allclose(back.preds, pset.preds, atol=1e-9)
    assert list(back.participants) == list(pset.participants)


def test_predictions_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("wrong,header\n", encoding="utf-8")
    with pytest.raises(ValueError, match="expected header"):
        load_predictions_csv(path, "intensity")
    path.write_text("participant,frame,au,label,prediction\n"
                    "a,0,01,2,0.5\na,0,01,2,0.6\n", encoding="utf-8")
    with pytest.raises(ValueError, match="duplicate"):
        load_predictions_csv(path, "intensity")
    path.write_text("participant,frame,au,label,prediction\n"
                    "a,0,01,2,0.5\na,1,01,2,0.5\na,1,02,2,0.5\n", encoding="utf-8")
    with pytest.raises(ValueError, match="missing"):
        load_predictions_csv(path, "intensity")


def test_format_report_csv_matches_file(tiny_run):
    rendered = format_report_csv(tiny_run.config, tiny_run.reports)
    assert rendered == tiny_run.csv_path.read_text()
