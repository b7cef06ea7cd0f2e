"""Staged convolutional backbone with a pooled two-affine head.

Desk-scale stand-in for a large face network: every stage opens with a
stride-2 3x3 convolution (halving the spatial extent) followed by
identity-skip residual blocks, then global average pooling feeds a
hidden affine and a final affine that lays out the task outputs. No
batch normalization, so forwards are deterministic and cheap to
finite-difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError, conv2d, global_avg_pool, matmul, narrow, relu, reshape

ORD_LEVELS = 5  # thresholds j = 1..5 for the event y >= j

TASK_INTENSITY = "intensity"
TASK_DETECTION = "detection"


@dataclass(frozen=True)
class StageSpec:
    channels: int
    blocks: int = 1

    def validate(self) -> None:
        if self.channels < 1:
            raise ValueError("stage channels must be >= 1")
        if self.blocks < 1:
            raise ValueError("stage blocks must be >= 1")


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture description; the default mirrors a 4-stage layout on 32x32 input."""

    in_channels: int = 1
    height: int = 32
    width: int = 32
    stages: tuple[StageSpec, ...] = (
        StageSpec(8), StageSpec(16), StageSpec(32), StageSpec(64))
    hidden: int = 64
    n_au: int = 12
    task: str = TASK_INTENSITY

    def validate(self) -> None:
        if len(self.stages) < 2:
            raise ValueError("need at least 2 stages")
        for s in self.stages:
            s.validate()
        if self.n_au < 1:
            raise ValueError("n_au must be >= 1")
        if self.task not in (TASK_INTENSITY, TASK_DETECTION):
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.in_channels, self.height, self.width) < 1:
            raise ValueError("input dims must be >= 1")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def out_dim(self) -> int:
        if self.task == TASK_INTENSITY:
            return self.n_au * (1 + ORD_LEVELS)
        return self.n_au

    def stage_input_channels(self, k: int) -> int:
        """Channels of the feature map entering stage k (0-based)."""
        return self.in_channels if k == 0 else self.stages[k - 1].channels


@dataclass
class HeadOutputs:
    """Raw network outputs; logits are pre-sigmoid, reg values unactivated."""

    reg: Tensor | None = None          # (B, n)
    ord_logits: Tensor | None = None   # (B, n, 5), column j-1 is the event y >= j
    det_logits: Tensor | None = None   # (B, n)

    def __sub__(self, other: "HeadOutputs") -> "HeadOutputs":
        def diff(a, b):
            return None if a is None else a - b
        return HeadOutputs(reg=diff(self.reg, other.reg),
                           ord_logits=diff(self.ord_logits, other.ord_logits),
                           det_logits=diff(self.det_logits, other.det_logits))


LAST_LAYER_PREFIX = "head.fc2."


@dataclass
class ParamStore:
    """Named trainable tensors in a fixed order, split into two groups.

    The "last_layer" group is the final affine producing the outputs;
    everything else is "rest". Optimizers key their learning rates off
    this partition.
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def group_of(self, name: str) -> str:
        return "last_layer" if name.startswith(LAST_LAYER_PREFIX) else "rest"

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {"last_layer": [], "rest": []}
        for name in self.tensors:
            out[self.group_of(name)].append(name)
        return out

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, t in self.tensors.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: stored {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()

    def clone(self) -> "ParamStore":
        fresh = ParamStore()
        for name, t in self.tensors.items():
            fresh.tensors[name] = Tensor(t.data, requires_grad=t.requires_grad)
        return fresh


def _kaiming_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))


def _kaiming_fc(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init_backbone(spec: BackboneSpec, seed: int) -> ParamStore:
    """Deterministic fan-in-scaled init; biases start at zero."""
    spec.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def par(name: str, arr: np.ndarray) -> None:
        store.tensors[name] = Tensor(arr, requires_grad=True)

    cin = spec.in_channels
    for i, stage in enumerate(spec.stages):
        par(f"stage{i}.entry.w", _kaiming_conv(rng, stage.channels, cin, 3))
        par(f"stage{i}.entry.b", np.zeros(stage.channels))
        for j in range(stage.blocks):
            par(f"stage{i}.block{j}.w", _kaiming_conv(rng, stage.channels, stage.channels, 3))
            par(f"stage{i}.block{j}.b", np.zeros(stage.channels))
        cin = stage.channels
    par("head.fc1.w", _kaiming_fc(rng, cin, spec.hidden))
    par("head.fc1.b", np.zeros(spec.hidden))
    par("head.fc2.w", _kaiming_fc(rng, spec.hidden, spec.out_dim))
    par("head.fc2.b", np.zeros(spec.out_dim))
    return store


def forward_stages(store: ParamStore, spec: BackboneSpec, x: Tensor,
                   from_stage: int = 0, to_stage: int | None = None) -> Tensor:
    """Run stages [from_stage, to_stage); composing splits is bitwise exact."""
    S = spec.n_stages
    if to_stage is None:
        to_stage = S
    if not (0 <= from_stage <= to_stage <= S):
        raise ValueError(f"stage range [{from_stage}, {to_stage}) outside [0, {S}]")
    if x.data.ndim != 4:
        raise ShapeError("expected a (B, C, H, W) batch")
    if x.shape[1] != spec.stage_input_channels(from_stage):
        raise ShapeError(
            f"stage {from_stage} expects {spec.stage_input_channels(from_stage)} "
            f"channels, got {x.shape[1]}")
    h = x
    for i in range(from_stage, to_stage):
        stage = spec.stages[i]
        h = relu(conv2d(h, store[f"stage{i}.entry.w"], store[f"stage{i}.entry.b"],
                        stride=2, padding=1))
        for j in range(stage.blocks):
            h = h + relu(conv2d(h, store[f"stage{i}.block{j}.w"],
                                store[f"stage{i}.block{j}.b"], stride=1, padding=1))
    return h


def pooled_features(store: ParamStore, spec: BackboneSpec, features: Tensor) -> Tensor:
    """(B, C, H, W) final-stage features -> (B, C) pooled vector."""
    if features.data.ndim != 4 or features.shape[1] != spec.stages[-1].channels:
        raise ShapeError(f"expected final-stage features, got shape {features.shape}")
    return global_avg_pool(features)


def head_from_pooled(store: ParamStore, spec: BackboneSpec, pooled: Tensor,
                     skip_hidden: bool = False) -> HeadOutputs:
    """Affine stack on pooled features.

    skip_hidden feeds the input straight into the final affine; used by
    the merge variant that differences hidden activations.
    """
    if skip_hidden:
        h = pooled
    else:
        h = relu(matmul(pooled, store["head.fc1.w"]) + store["head.fc1.b"])
    out = matmul(h, store["head.fc2.w"]) + store["head.fc2.b"]
    return split_outputs(spec, out)


def hidden_features(store: ParamStore, spec: BackboneSpec, pooled: Tensor) -> Tensor:
    return relu(matmul(pooled, store["head.fc1.w"]) + store["head.fc1.b"])


def split_outputs(spec: BackboneSpec, out: Tensor) -> HeadOutputs:
    """Slice the final affine's (B, out_dim) rows into the task layout."""
    n = spec.n_au
    if out.shape[1] != spec.out_dim:
        raise ShapeError(f"head produced {out.shape[1]} values, expected {spec.out_dim}")
    if spec.task == TASK_DETECTION:
        return HeadOutputs(det_logits=out)
    reg = narrow(out, 1, 0, n)
    ord_flat = narrow(out, 1, n, n * ORD_LEVELS)
    ord_logits = reshape(ord_flat, (out.shape[0], n, ORD_LEVELS))
    return HeadOutputs(reg=reg, ord_logits=ord_logits)


def forward_head(store: ParamStore, spec: BackboneSpec, features: Tensor) -> HeadOutputs:
    return head_from_pooled(store, spec, pooled_features(store, spec, features))


def forward(store: ParamStore, spec: BackboneSpec, x: Tensor) -> HeadOutputs:
    return forward_head(store, spec, forward_stages(store, spec, x))
