"""Deterministic synthetic classifier dumps with controllable miscalibration.

Features are class-conditional Gaussians per layer, with deeper layers more
separable (the source of single-layer calibration instability). Logits come
from a fixed affine map of the deepest layer's pattern — the isotropic-
Gaussian discriminant, so with zero bias and zero label noise the softmax is
the exact class posterior and the dump is well calibrated. Overconfidence is
injected by inflating the winning logit; accuracy is degraded by flipping
labels. Identical specs produce byte-identical dumps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dumps import FeatureDump, LayerTensor, write_dump

_CHANNEL_NOISE = 0.35
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for one generated train/test dump pair."""

    n_train: int = 300
    n_test: int = 1000
    k_classes: int = 10
    layer_dims: tuple[int, ...] = (8, 12, 16, 20, 24)
    overconfidence_bias: float = 0.0
    label_noise: float = 0.0
    seed: int = 0
    channels: int = 3  # 1 keeps layers 2-d (the no-pooling path)

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("split sizes must be positive")
        if self.k_classes < 2:
            raise ValueError("need at least two classes")
        if not self.layer_dims or any(d < 1 for d in self.layer_dims):
            raise ValueError("layer_dims must be positive")
        if self.overconfidence_bias < 0:
            raise ValueError("overconfidence_bias must be >= 0")
        if not (0 <= self.label_noise < 1):
            raise ValueError("label_noise must be in [0, 1)")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))


def _population(spec: SyntheticSpec, rng: np.random.Generator):
    """Class means per layer plus the hidden overconfidence direction.

    Deeper layers are more separable, and the per-sample amount of logit
    inflation is driven by a fixed direction in the deepest layer's feature
    space: only late layers can see what makes a sample overconfident, which
    is what makes single-layer calibration quality depend on layer choice.
    """
    means = []
    for depth, dim in enumerate(spec.layer_dims):
        # pairwise class-mean distance ~ target, growing with depth
        target = 1.0 + 0.75 * depth
        scale = target / np.sqrt(2.0 * dim)
        means.append(scale * rng.standard_normal((spec.k_classes, dim)))
    direction = rng.standard_normal(spec.layer_dims[-1])
    direction /= np.linalg.norm(direction)
    return means, direction


def _make_split(
    split: str,
    n: int,
    spec: SyntheticSpec,
    means: list[np.ndarray],
    direction: np.ndarray,
    rng: np.random.Generator,
) -> FeatureDump:
    k = spec.k_classes
    truth = rng.integers(0, k, size=n)

    patterns = []
    for m in means:
        patterns.append(m[truth] + rng.standard_normal((n, m.shape[1])))

    # exact posterior discriminant for unit-variance Gaussians around the
    # deepest layer's class means: x . mu_c - |mu_c|^2 / 2
    deep = patterns[-1]
    m_deep = means[-1]
    logits = deep @ m_deep.T - 0.5 * np.sum(m_deep * m_deep, axis=1)[None, :]

    labels = truth.copy()
    flip = rng.random(n) < spec.label_noise
    offsets = rng.integers(1, k, size=n)
    labels[flip] = (truth[flip] + offsets[flip]) % k

    # per-sample inflation in (0, 2 * bias) with mean ~ bias; the amount is
    # driven by a fixed direction in the deepest layer's feature space, so
    # layer choice matters for single-layer calibration
    gate = 2.0 / (1.0 + np.exp(-deep @ direction))
    winner = logits.argmax(axis=1)
    logits[np.arange(n), winner] += spec.overconfidence_bias * gate

    shifted = logits - logits.max(axis=1, keepdims=True)
    softmax = np.exp(shifted)
    softmax /= softmax.sum(axis=1, keepdims=True)

    # round-trip through f32 first so stored predictions match the stored
    # softmax argmax bit-for-bit
    softmax32 = softmax.astype(_F32).astype(np.float64)
    predictions = softmax32.argmax(axis=1)

    layers = []
    for i, x in enumerate(patterns):
        if spec.channels == 1:
            values = x
        else:
            noise = _CHANNEL_NOISE * rng.standard_normal((n, spec.channels, 1, x.shape[1]))
            values = x[:, None, None, :] + noise
        layers.append(LayerTensor(i + 1, values))

    return FeatureDump(
        split=split,
        layers=layers,
        softmax=softmax32,
        labels=labels.astype(np.int64),
        predictions=predictions.astype(np.int64),
        logits=logits,
    )


def generate(spec: SyntheticSpec, out: str | Path) -> tuple[FeatureDump, FeatureDump]:
    """Write <out>/train and <out>/test dumps and return both in memory."""
    rng = np.random.default_rng(spec.seed)
    means, direction = _population(spec, rng)
    train = _make_split("train", spec.n_train, spec, means, direction, rng)
    test = _make_split("test", spec.n_test, spec, means, direction, rng)
    root = Path(out)
    write_dump(train, root / "train")
    write_dump(test, root / "test")
    return train, test
