"""End-to-end calibration: train a GP variant on a dump, correct test confidences.

The calibrated confidence for a test record with raw confidence s and
posterior residual (mean r, variance v) is Normal(s + r, v); the mean is
clamped into [0, 1] for metric evaluation while the unclamped value is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gp
from .dumps import (
    CalibrationSample,
    FeatureDump,
    Standardizer,
    build_samples,
    standardize_samples,
)
from .kernels import KernelSpec, SampleArrays

METHODS = ("single_gp", "sal_ml", "sal_hl")
_METHOD_VARIANT = {
    "single_gp": "single_sum",
    "sal_ml": "multilayer_additive",
    "sal_hl": "hierarchical_layer",
}


@dataclass(frozen=True)
class CalibratorConfig:
    """Which GP to train and on what inputs."""

    method: str
    layers: tuple[int, ...]
    pooling: str = "avg"
    base: str = "matern25"
    iters: int = 2000
    learning_rate: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.layers:
            raise ValueError("layer selection is empty")
        if self.method == "single_gp" and len(self.layers) != 1:
            raise ValueError("single_gp takes exactly one layer")
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")

    @property
    def variant(self) -> str:
        return _METHOD_VARIANT[self.method]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "layers": list(self.layers),
            "pooling": self.pooling,
            "base": self.base,
            "iters": self.iters,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratorConfig":
        return cls(
            method=d["method"],
            layers=tuple(int(l) for l in d["layers"]),
            pooling=d["pooling"],
            base=d.get("base", "matern25"),
            iters=int(d["iters"]),
            learning_rate=float(d["learning_rate"]),
            seed=int(d["seed"]),
        )


def train_calibrator(train_dump: FeatureDump, cfg: CalibratorConfig) -> gp.GPModel:
    """Build samples for the selected layers, standardize features on the
    training split, and fit the GP variant the method implies."""
    raw = build_samples(train_dump, cfg.pooling, cfg.layers)
    features = np.stack([s.features for s in raw])
    standardizer = Standardizer.fit(features)
    samples = standardize_samples(raw, standardizer)
    spec = KernelSpec(
        base=cfg.base,
        variant=cfg.variant,
        layer_count=len(cfg.layers),
        layers=tuple(sorted(cfg.layers)),
    )
    # samples enter fit already standardized; the stored map re-standardizes
    # raw query features at prediction time
    return gp.fit(
        samples,
        spec,
        iters=cfg.iters,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        standardizer=standardizer,
        config=cfg.to_dict(),
    )


@dataclass(frozen=True)
class CalibratedConfidence:
    """Calibrated confidence distribution for one test record."""

    raw: float
    mean: float          # raw + posterior residual mean, unclamped
    mean_clamped: float  # clipped into [0, 1] for metric evaluation
    variance: float
    correctness: int

    @property
    def was_clamped(self) -> bool:
        return self.mean != self.mean_clamped


def parse_mode(mode: str) -> tuple[str, int | None]:
    if mode == "global":
        return "global", None
    if mode.startswith("local:"):
        try:
            return "local", int(mode.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad local mode {mode!r}; expected local:<layer>") from None
    raise ValueError(f"mode must be 'global' or 'local:<layer>', got {mode!r}")


def _model_config(model: gp.GPModel) -> CalibratorConfig:
    if not model.config or "method" not in model.config:
        raise ValueError("model carries no calibrator config; train it via train_calibrator")
    return CalibratorConfig.from_dict(model.config)


def calibrate(model: gp.GPModel, test_dump: FeatureDump, mode: str = "global") -> list[CalibratedConfidence]:
    """Correct every test record's confidence with the GP posterior.

    Global mode on SAL variants queries the layer-agnostic kernel (reserved
    layer index -1) at each selected layer's features and pools the per-layer
    posteriors as an equal-weight mixture; single_gp uses its one layer
    directly. Local mode predicts at one chosen layer's features.
    """
    kind, local_layer = parse_mode(mode)
    cfg = _model_config(model)
    samples = build_samples(test_dump, cfg.pooling, cfg.layers)
    n = test_dump.n
    layers = tuple(sorted(cfg.layers))

    # build_samples emits layer-major groups of n records each
    groups = {l: samples[i * n : (i + 1) * n] for i, l in enumerate(layers)}

    if kind == "local":
        if local_layer not in groups:
            raise ValueError(
                f"local layer {local_layer} not in the model's layer selection {layers}"
            )
        pred = gp.predict_local_batch(model, groups[local_layer])
        mean, variance = pred.mean, pred.variance
    elif cfg.method == "single_gp":
        pred = gp.predict_local_batch(model, groups[layers[0]])
        mean, variance = pred.mean, pred.variance
    else:
        # equal-weight mixture of the per-layer global posteriors
        means = np.empty((len(layers), n))
        second = np.empty((len(layers), n))
        for i, l in enumerate(layers):
            arr = SampleArrays.from_samples(groups[l])
            pred = gp.predict_global_batch(model, arr.features, arr.confidence)
            means[i] = pred.mean
            second[i] = pred.variance + pred.mean**2
        mean = means.mean(axis=0)
        variance = np.maximum(second.mean(axis=0) - mean**2, 0.0)

    confidence = test_dump.softmax.max(axis=1)
    correctness = (test_dump.labels == test_dump.predictions).astype(int)
    out = []
    for i in range(n):
        raw = float(confidence[i])
        m = raw + float(mean[i])
        out.append(
            CalibratedConfidence(
                raw=raw,
                mean=m,
                mean_clamped=min(max(m, 0.0), 1.0),
                variance=float(variance[i]),
                correctness=int(correctness[i]),
            )
        )
    return out


def calibrated_pairs(calibrated: list[CalibratedConfidence]) -> np.ndarray:
    """(confidence, correctness) pairs using the clamped calibrated means."""
    return np.array([(c.mean_clamped, c.correctness) for c in calibrated])


def uncalibrated_pairs(dump: FeatureDump) -> np.ndarray:
    """(confidence, correctness) pairs straight from the dump's softmax."""
    conf = dump.softmax.max(axis=1)
    corr = (dump.labels == dump.predictions).astype(float)
    return np.column_stack([conf, corr])


def clamp_count(calibrated: list[CalibratedConfidence]) -> int:
    return sum(1 for c in calibrated if c.was_clamped)
