"""Adam with two learning-rate groups and weight decay.

The final affine layer trains at a higher rate than the body, mirroring
a fine-tuning protocol. Weight decay defaults to the classic form
(lambda * theta added to the gradient before the moment updates); the
decoupled variant is available behind a flag for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ParamStore


@dataclass
class AdamConfig:
    lr_last: float = 1e-4
    lr_rest: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decoupled: bool = False

    def validate(self) -> None:
        if self.lr_last <= 0 or self.lr_rest <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("bad eps or weight decay")


@dataclass
class Adam:
    store: ParamStore
    config: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        self.config.validate()
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.store.items()}

    def lr_for(self, name: str) -> float:
        group = self.store.group_of(name)
        return self.config.lr_last if group == "last_layer" else self.config.lr_rest

    def step(self) -> None:
        """One update from the gradients currently stored on the parameters."""
        missing = [name for name, p in self.store.items() if p.grad is None]
        if len(missing) == len(self.m):
            raise ValueError("step with no gradients at all")
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(f"{name}: grad shape {p.grad.shape} != {p.data.shape}")
            g = p.grad
            if c.weight_decay and not c.decoupled:
                g = g + c.weight_decay * p.data
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            lr = self.lr_for(name)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + c.eps)
            if c.weight_decay and c.decoupled:
                p.data = p.data - lr * c.weight_decay * p.data

    def zero_grad(self) -> None:
        self.store.zero_grads()

    # -- resumable state -------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array([float(self.t)])}
        for name in self.m:
            out[f"adam/m/{name}"] = self.m[name]
            out[f"adam/v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["adam/t"][0])
        for name in self.m:
            m = np.asarray(tensors[f"adam/m/{name}"])
            v = np.asarray(tensors[f"adam/v/{name}"])
            if m.shape != self.m[name].shape or v.shape != self.v[name].shape:
                raise ValueError(f"{name}: moment shape mismatch")
            self.m[name] = m.copy()
            self.v[name] = v.copy()
