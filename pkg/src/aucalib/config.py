"""Experiment configuration: flat dotted-key files plus CLI overrides.

The file format is one `key = value` per line, `#` comments, blank lines
ignored. Keys are dotted paths (`backbone.stages`, `optim.lr_last`).
Values from the command line override file values; unknown keys are
rejected so typos fail loudly instead of silently using a default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneSpec, StageSpec, TASK_DETECTION, TASK_INTENSITY
from .data import SynthConfig
from .optimizer import AdamConfig
from .siamese import PredictionMode


class ConfigError(ValueError):
    """Bad configuration file or override."""


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str = ""                 # empty means "generate synthetic data"
    task: str = TASK_INTENSITY
    modes: tuple[str, ...] = ("ncg", "ofc_bs", "ofc_csn:stage4")
    epochs: int = 3
    batch_size: int = 64
    seed: int = 42
    folds: int = 3
    out: str = "runs/out"
    stages: tuple[int, ...] = (8, 16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    hidden: int = 64
    fc_after_hidden: bool = False
    clamp: bool = False
    delta: float = 0.0                 # ofc_bs detection decision margin
    synth: SynthConfig = field(default_factory=SynthConfig)
    optim: AdamConfig = field(default_factory=AdamConfig)

    def validate(self) -> None:
        if not self.modes:
            raise ConfigError("at least one prediction mode is required")
        for m in self.modes:
            try:
                PredictionMode.parse(m)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.task not in (TASK_INTENSITY, TASK_DETECTION):
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.stages) != len(self.blocks):
            raise ConfigError("stages and blocks lists must have equal length")
        if len(self.stages) < 2:
            raise ConfigError("need at least 2 stages")
        try:
            self.synth.validate()
            self.optim.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def prediction_modes(self) -> list[PredictionMode]:
        return [PredictionMode.parse(m) for m in self.modes]

    def backbone_spec(self, n_au: int, height: int, width: int,
                      in_channels: int = 1) -> BackboneSpec:
        return BackboneSpec(
            in_channels=in_channels, height=height, width=width,
            stages=tuple(StageSpec(c, b) for c, b in zip(self.stages, self.blocks)),
            hidden=self.hidden, n_au=n_au, task=self.task)

    def to_flat(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name, value in (
            ("manifest", self.manifest), ("task", self.task),
            ("modes", ",".join(self.modes)), ("epochs", self.epochs),
            ("batch_size", self.batch_size), ("seed", self.seed),
            ("folds", self.folds), ("out", self.out),
            ("backbone.stages", ",".join(map(str, self.stages))),
            ("backbone.blocks", ",".join(map(str, self.blocks))),
            ("backbone.hidden", self.hidden),
            ("fc_after_hidden", self.fc_after_hidden),
            ("clamp", self.clamp), ("delta", self.delta),
        ):
            out[name] = str(value)
        for f in fields(SynthConfig):
            out[f"synth.{f.name}"] = str(getattr(self.synth, f.name))
        for f in fields(AdamConfig):
            out[f"optim.{f.name}"] = str(getattr(self.optim, f.name))
        return out

    def digest(self) -> str:
        canon = "\n".join(f"{k}={v}" for k, v in sorted(self.to_flat().items()))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _parse_int_tuple(v: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in v.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {v!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source} line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        values[key.strip()] = raw.strip()
    return values


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), p.name))
    if overrides:
        values.update(overrides)
    return config_from_mapping(values)


def config_from_mapping(values: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    synth_kwargs: dict = {}
    optim_kwargs: dict = {}
    plain: dict = {}

    synth_fields = {f.name: f.type for f in fields(SynthConfig)}
    optim_fields = {f.name: f.type for f in fields(AdamConfig)}

    def convert(raw: str, like) -> object:
        if isinstance(like, bool):
            return _parse_bool(raw)
        if isinstance(like, int):
            try:
                return int(raw)
            except ValueError as exc:
                raise ConfigError(f"expected an integer, got {raw!r}") from exc
        if isinstance(like, float):
            try:
                return float(raw)
            except ValueError as exc:
                raise ConfigError(f"expected a number, got {raw!r}") from exc
        return raw

    for key, raw in values.items():
        if key.startswith("synth."):
            name = key[len("synth."):]
            if name not in synth_fields:
                raise ConfigError(f"unknown config key {key!r}")
            synth_kwargs[name] = convert(raw, getattr(cfg.synth, name))
        elif key.startswith("optim."):
            name = key[len("optim."):]
            if name not in optim_fields:
                raise ConfigError(f"unknown config key {key!r}")
            optim_kwargs[name] = convert(raw, getattr(cfg.optim, name))
        elif key == "backbone.stages":
            plain["stages"] = _parse_int_tuple(raw)
        elif key == "backbone.blocks":
            plain["blocks"] = _parse_int_tuple(raw)
        elif key == "backbone.hidden":
            plain["hidden"] = convert(raw, 0)
        elif key == "modes":
            plain["modes"] = tuple(m.strip() for m in raw.split(",") if m.strip())
        elif key in ("manifest", "task", "out"):
            plain[key] = raw
        elif key in ("epochs", "batch_size", "seed", "folds"):
            plain[key] = convert(raw, 0)
        elif key in ("fc_after_hidden", "clamp"):
            plain[key] = _parse_bool(raw)
        elif key == "delta":
            plain[key] = convert(raw, 0.0)
        else:
            raise ConfigError(f"unknown config key {key!r}")

    if synth_kwargs:
        plain["synth"] = replace(cfg.synth, **synth_kwargs)
    if optim_kwargs:
        plain["optim"] = replace(cfg.optim, **optim_kwargs)
    built = replace(cfg, **plain)
    built.validate()
    return built
