"""Experiment orchestration: training, cross-validation, ablation, reports.

A run resolves its dataset (manifest on disk or generated synthetic),
builds participant-exclusive folds, trains the checkpoints each
requested prediction mode needs, scores validation frames, and writes a
CSV report (rows are methods), a JSON report with full provenance, and
figures next to them. Reports are deterministic: identical config and
seed reproduce identical bytes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backbone as B
from .config import ExperimentConfig
from .data import (
    DatasetManifest,
    FrameRecord,
    FoldSpec,
    generate_synthetic,
    load_manifest,
    make_folds,
    reference_record,
    write_container,
)
from .losses import WeightTables, batch_loss, compute_weights, count_intensities
from .metrics import (
    DETECTION_METRICS,
    INTENSITY_METRICS,
    MetricReport,
    PredictionSet,
    build_report,
)
from .optimizer import Adam
from .siamese import (
    NCG,
    OFC_BS,
    OFC_CSN,
    MergePoint,
    PredictionMode,
    detection_decisions,
    forward_csn,
    predict,
)
from .tensor import Tensor, no_grad

MODEL_PLAIN = "plain"


def model_key(mode: PredictionMode) -> str:
    """Checkpoint identity: ncg and ofc_bs share the plain backbone."""
    if mode.kind in (NCG, OFC_BS):
        return MODEL_PLAIN
    return f"csn:{mode.merge.label()}"


def derive_seed(base: int, fold: int, key: str, epoch: int = 0) -> np.random.SeedSequence:
    """Stable stream per (seed, fold, model, epoch); mode list plays no part."""
    return np.random.SeedSequence([base, fold, zlib.crc32(key.encode()), epoch])


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


@dataclass
class TrainLog:
    model: str
    fold: int
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return {"model": self.model, "fold": self.fold,
                "initial_loss": self.initial_loss,
                "epoch_losses": self.epoch_losses}


@dataclass
class FoldData:
    """Preloaded arrays for one fold's training split."""

    images: np.ndarray          # (N, 1, H, W)
    labels: np.ndarray          # (N, n_au)
    ref_images: np.ndarray      # (N, 1, H, W) participant reference per row

    @property
    def n(self) -> int:
        return len(self.labels)


def _load_split(manifest: DatasetManifest, pids: list[str]) -> FoldData:
    records: list[FrameRecord] = []
    for pid in pids:
        records.extend(manifest.records_for(pid))
    if not records:
        raise ValueError("empty training split")
    images = manifest.load_batch(records)
    labels = manifest.label_matrix(records)
    refs = {pid: manifest.load_image(reference_record(manifest, pid)) for pid in pids}
    ref_images = np.stack([refs[r.participant] for r in records], axis=0)
    return FoldData(images=images, labels=labels, ref_images=ref_images)


def _mean_loss(store: B.ParamStore, spec: B.BackboneSpec, data: FoldData,
               weights: WeightTables, key: str, config: ExperimentConfig) -> float:
    total, seen = 0.0, 0
    with no_grad():
        for lo in range(0, data.n, config.batch_size):
            hi = min(lo + config.batch_size, data.n)
            out = _forward_for_key(store, spec, data, slice(lo, hi), key, config)
            loss = batch_loss(config.task, data.labels[lo:hi], out, weights)
            total += loss.item() * (hi - lo)
            seen += hi - lo
    return total / seen


def _forward_for_key(store: B.ParamStore, spec: B.BackboneSpec, data: FoldData,
                     rows, key: str, config: ExperimentConfig) -> B.HeadOutputs:
    x = Tensor(data.images[rows])
    if key == MODEL_PLAIN:
        return B.forward(store, spec, x)
    merge = MergePoint.parse(key.split(":", 1)[1])
    return forward_csn(store, spec, x, Tensor(data.ref_images[rows]), merge,
                       fc_after_hidden=config.fc_after_hidden)


def train_model(manifest: DatasetManifest, spec: B.BackboneSpec,
                weights: WeightTables, data: FoldData, key: str,
                config: ExperimentConfig, fold: int) -> tuple[B.ParamStore, TrainLog]:
    """Train one checkpoint; deterministic given (config, seed, fold, key)."""
    store = B.init_backbone(spec, _seed_int(derive_seed(config.seed, fold, key)))
    opt = Adam(store, config.optim)
    log = TrainLog(model=key, fold=fold,
                   initial_loss=_mean_loss(store, spec, data, weights, key, config))
    for epoch in range(config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, fold, key, epoch + 1))
        order = rng.permutation(data.n)
        total, seen = 0.0, 0
        for lo in range(0, data.n, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            out = _forward_for_key(store, spec, data, rows, key, config)
            loss = batch_loss(config.task, data.labels[rows], out, weights)
            store.zero_grads()
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            seen += len(rows)
        log.epoch_losses.append(total / seen)
    return store, log


@dataclass
class FoldResult:
    fold: int
    train_participants: list[str]
    val_participants: list[str]
    weights: WeightTables
    prediction_sets: dict[str, PredictionSet]
    logs: dict[str, TrainLog]
    proof: dict

    def to_jsonable(self) -> dict:
        return {"fold": self.fold,
                "train_participants": self.train_participants,
                "val_participants": self.val_participants,
                "weights": self.weights.to_jsonable(),
                "training": {k: v.to_jsonable() for k, v in self.logs.items()},
                "protocol": self.proof}


def run_fold(manifest: DatasetManifest, spec: B.BackboneSpec,
             config: ExperimentConfig, fold_spec: FoldSpec, fold: int) -> FoldResult:
    """Train the needed checkpoints on one fold and score its validation split."""
    train_pids, val_pids = fold_spec.split(fold)
    overlap = sorted(set(train_pids) & set(val_pids))
    data = _load_split(manifest, train_pids)
    weights = compute_weights(count_intensities(data.labels, spec.n_au))

    modes = config.prediction_modes()
    keys = []
    for m in modes:
        k = model_key(m)
        if k not in keys:
            keys.append(k)
    logs: dict[str, TrainLog] = {}
    trained: dict[str, B.ParamStore] = {}
    for key in keys:
        trained[key], logs[key] = train_model(manifest, spec, weights, data,
                                              key, config, fold)

    train_frame_keys = set()
    for pid in train_pids:
        for r in manifest.records_for(pid):
            train_frame_keys.add((r.participant, r.frame))

    rows_p: list[str] = []
    rows_f: list[int] = []
    rows_labels: list[tuple[int, ...]] = []
    preds_by_mode: dict[str, list[np.ndarray]] = {m.label(): [] for m in modes}
    excluded_refs = 0
    val_frames_in_train = 0
    for pid in val_pids:
        records = manifest.records_for(pid)
        ref = reference_record(manifest, pid)
        scored = [r for r in records if r.frame != ref.frame]
        excluded_refs += 1
        val_frames_in_train += sum((r.participant, r.frame) in train_frame_keys
                                   for r in records)
        if not scored:
            continue
        frames = Tensor(manifest.load_batch(scored))
        ref_img = Tensor(manifest.load_image(ref)[None])
        for mode in modes:
            est = predict(trained[model_key(mode)], spec, mode, frames,
                          reference=ref_img, fc_after_hidden=config.fc_after_hidden,
                          clamp=config.clamp)
            preds_by_mode[mode.label()].append(est)
        rows_p.extend(r.participant for r in scored)
        rows_f.extend(r.frame for r in scored)
        rows_labels.extend(r.intensities for r in scored)

    labels_arr = np.array(rows_labels, dtype=np.int64)
    sets = {label: PredictionSet(config.task, manifest.au_names,
                                 np.array(rows_p, dtype=object),
                                 np.array(rows_f, dtype=np.int64),
                                 labels_arr, np.concatenate(chunks, axis=0))
            for label, chunks in preds_by_mode.items()}
    proof = {
        "train_val_participant_overlap": overlap,
        "n_train_frames": int(data.n),
        "n_val_scored_frames": int(labels_arr.shape[0]),
        "excluded_reference_frames": int(excluded_refs),
        "val_frames_in_train": int(val_frames_in_train),
    }
    return FoldResult(fold=fold, train_participants=train_pids,
                      val_participants=val_pids, weights=weights,
                      prediction_sets=sets, logs=logs, proof=proof)


def decision_rule(mode: PredictionMode, delta: float):
    return lambda scores: detection_decisions(scores, mode, delta=delta)


@dataclass
class CrossvalResult:
    config: ExperimentConfig
    manifest: DatasetManifest
    fold_results: list[FoldResult]
    reports: dict[str, MetricReport]
    out_dir: Path | None = None
    csv_path: Path | None = None
    json_path: Path | None = None
    prediction_paths: list[Path] = field(default_factory=list)
    figure_paths: list[Path] = field(default_factory=list)


def resolve_dataset(config: ExperimentConfig, out_dir: Path | None) -> DatasetManifest:
    if config.manifest:
        return load_manifest(config.manifest)
    target = (out_dir or Path(config.out)) / "dataset"
    return generate_synthetic(config.synth, target).manifest


def run_crossval(config: ExperimentConfig, out_dir: str | Path | None = None,
                 write: bool = True) -> CrossvalResult:
    config.validate()
    out = Path(out_dir) if out_dir is not None else Path(config.out)
    manifest = resolve_dataset(config, out)
    probe = manifest.load_image(manifest.records[0])
    spec = config.backbone_spec(n_au=len(manifest.au_names),
                                height=probe.shape[1], width=probe.shape[2],
                                in_channels=probe.shape[0])
    fold_spec = make_folds(manifest, config.folds, config.seed)
    fold_results = [run_fold(manifest, spec, config, fold_spec, f)
                    for f in range(config.folds)]

    reports: dict[str, MetricReport] = {}
    for mode in config.prediction_modes():
        label = mode.label()
        sets = [fr.prediction_sets[label] for fr in fold_results]
        decide = decision_rule(mode, config.delta) if config.task == B.TASK_DETECTION else None
        reports[label] = build_report(sets, decide=decide)

    result = CrossvalResult(config=config, manifest=manifest,
                            fold_results=fold_results, reports=reports)
    if write:
        result.out_dir = out
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = out / "report.csv"
        result.json_path = out / "report.json"
        result.csv_path.write_text(format_report_csv(config, reports), encoding="utf-8")
        result.json_path.write_text(format_report_json(config, manifest, fold_results,
                                                       reports), encoding="utf-8")
        for mode in config.prediction_modes():
            label = mode.label()
            pooled = PredictionSet.concatenate(
                [fr.prediction_sets[label] for fr in fold_results])
            path = out / f"predictions_{label.replace(':', '_')}.csv"
            write_predictions_csv(path, pooled)
            result.prediction_paths.append(path)
        from .plots import crossval_figures
        result.figure_paths = crossval_figures(reports, fold_results, out)
    return result


def run_ablation(config: ExperimentConfig, merges: list[str],
                 out_dir: str | Path | None = None, write: bool = True) -> CrossvalResult:
    """One cross-validation per merge point, shared seed and folds."""
    if len(merges) < 2:
        raise ValueError("ablation needs at least 2 merge points")
    modes = tuple(f"{OFC_CSN}:{m}" for m in merges)
    cfg = replace(config, modes=modes)
    result = run_crossval(cfg, out_dir=out_dir, write=write)
    if write and result.out_dir is not None:
        from .plots import ablation_figure
        fig = ablation_figure(result.reports, result.out_dir)
        if fig is not None:
            result.figure_paths.append(fig)
    return result


def train_full(config: ExperimentConfig, out_dir: str | Path | None = None,
               fold: int = 0) -> tuple[dict[str, B.ParamStore], list[TrainLog], Path]:
    """Train every needed checkpoint on one fold's split and save them."""
    config.validate()
    out = Path(out_dir) if out_dir is not None else Path(config.out)
    manifest = resolve_dataset(config, out)
    probe = manifest.load_image(manifest.records[0])
    spec = config.backbone_spec(n_au=len(manifest.au_names),
                                height=probe.shape[1], width=probe.shape[2],
                                in_channels=probe.shape[0])
    fold_spec = make_folds(manifest, config.folds, config.seed)
    train_pids, _ = fold_spec.split(fold)
    data = _load_split(manifest, train_pids)
    weights = compute_weights(count_intensities(data.labels, spec.n_au))
    out.mkdir(parents=True, exist_ok=True)
    stores: dict[str, B.ParamStore] = {}
    logs: list[TrainLog] = []
    for mode in config.prediction_modes():
        key = model_key(mode)
        if key in stores:
            continue
        store, log = train_model(manifest, spec, weights, data, key, config, fold)
        stores[key] = store
        logs.append(log)
        ckpt = out / f"checkpoint_{key.replace(':', '_')}.csnt"
        write_container(ckpt, store.state())
    return stores, logs, out


# -- prediction CSV (long format) ------------------------------------------

PREDICTIONS_HEADER = ("participant", "frame", "au", "label", "prediction")


def write_predictions_csv(path: str | Path, pset: PredictionSet) -> None:
    lines = [",".join(PREDICTIONS_HEADER)]
    for i in range(len(pset.frames)):
        for j, au in enumerate(pset.au_names):
            lines.append(",".join([
                str(pset.participants[i]), str(int(pset.frames[i])), au,
                str(int(pset.labels[i, j])), f"{pset.preds[i, j]:.9f}"]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_predictions_csv(path: str | Path, task: str) -> PredictionSet:
    """Pivot participant,frame,au,label,prediction rows into a PredictionSet."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split(",")) != PREDICTIONS_HEADER:
        raise ValueError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
    au_names: list[str] = []
    cells: dict[tuple[str, int], dict[str, tuple[int, float]]] = {}
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 5 fields, got {len(parts)}")
        pid, frame_s, au, label_s, pred_s = (p.strip() for p in parts)
        try:
            frame, label, pred = int(frame_s), int(label_s), float(pred_s)
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
        if au not in au_names:
            au_names.append(au)
        slot = cells.setdefault((pid, frame), {})
        if au in slot:
            raise ValueError(f"{path}:{n}: duplicate row for {pid}/{frame}/{au}")
        slot[au] = (label, pred)
    keys = sorted(cells, key=lambda k: (k[0], k[1]))
    labels = np.zeros((len(keys), len(au_names)), dtype=np.int64)
    preds = np.zeros((len(keys), len(au_names)), dtype=np.float64)
    for i, key in enumerate(keys):
        row = cells[key]
        missing = [au for au in au_names if au not in row]
        if missing:
            raise ValueError(f"{path}: frame {key} missing aus {missing}")
        for j, au in enumerate(au_names):
            labels[i, j], preds[i, j] = row[au]
    return PredictionSet(task, tuple(au_names),
                         np.array([k[0] for k in keys], dtype=object),
                         np.array([k[1] for k in keys], dtype=np.int64),
                         labels, preds)


# -- report serialization --------------------------------------------------

def _metric_order(task: str) -> tuple[str, ...]:
    return INTENSITY_METRICS if task == B.TASK_INTENSITY else DETECTION_METRICS


def format_report_csv(config: ExperimentConfig, reports: dict[str, MetricReport]) -> str:
    """Rows are methods (one per metric); columns are AUs plus Average."""
    first = next(iter(reports.values()))
    header = ["method", "metric"] + [f"au_{n}" for n in first.au_names] + ["Average"]
    lines = [",".join(header)]
    for label in reports:
        rep = reports[label]
        for metric in _metric_order(rep.task):
            cells = [f"{v:.6f}" for v in rep.per_au[metric]]
            cells.append(f"{rep.average[metric]:.6f}")
            lines.append(",".join([label, metric] + cells))
    return "\n".join(lines) + "\n"


def format_report_json(config: ExperimentConfig, manifest: DatasetManifest,
                       fold_results: list[FoldResult],
                       reports: dict[str, MetricReport]) -> str:
    payload = {
        "config": config.to_flat(),
        "config_digest": config.digest(),
        "seed": config.seed,
        "task": config.task,
        "au_names": list(manifest.au_names),
        "dataset_note": manifest.note,
        "folds": [fr.to_jsonable() for fr in fold_results],
        "reports": {label: rep.to_jsonable() for label, rep in reports.items()},
        "protocol_summary": {
            "total_participant_overlap": sum(
                len(fr.proof["train_val_participant_overlap"]) for fr in fold_results),
            "total_val_frames_in_train": sum(
                fr.proof["val_frames_in_train"] for fr in fold_results),
            "total_excluded_reference_frames": sum(
                fr.proof["excluded_reference_frames"] for fr in fold_results),
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
