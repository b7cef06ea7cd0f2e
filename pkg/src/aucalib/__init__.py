"""One-frame-calibrated facial action unit recognition, end to end on the desk.

Everything runs on plain numpy: a small autodiff tensor, a staged
convolutional backbone, siamese calibration heads, imbalance-weighted
losses, agreement metrics, participant-exclusive cross-validation, and a
CLI that writes delimited reports with matplotlib figures next to them.
"""

from .tensor import Tensor, ShapeError, NonFiniteError, no_grad, grad_check

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "no_grad", "grad_check",
    "ExperimentConfig", "load_config", "run_crossval", "run_ablation",
]

__version__ = "0.1.0"


def __getattr__(name):
    # deferred: config/harness pull in matplotlib-adjacent modules
    if name in ("ExperimentConfig", "load_config"):
        from . import config
        return getattr(config, name)
    if name in ("run_crossval", "run_ablation"):
        from . import harness
        return getattr(harness, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
