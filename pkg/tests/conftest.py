"""Shared builders and independent oracles for the test suite.

The oracle implementations here deliberately avoid the production kernel and
solver code paths: kernels are evaluated with scalar math formulas and the GP
posterior with dense inverse/determinant calls, so agreement is evidence, not
tautology.
"""

import math

import numpy as np
import pytest

from layergp.dumps import CalibrationSample, FeatureDump, LayerTensor
from layergp.kernels import KernelSpec, default_hyperparams


def make_sample(features, confidence, layer_index=1, correctness=1):
    features = np.asarray(features, dtype=float)
    return CalibrationSample(
        features=features,
        confidence=float(confidence),
        layer_index=int(layer_index),
        correctness=int(correctness),
        residual=float(correctness) - float(confidence),
    )


def random_samples(rng, n, width, layers, cover_layers=False):
    """Random calibration samples; cover_layers forces every layer to appear."""
    picks = list(rng.choice(layers, size=n))
    if cover_layers:
        for i, l in enumerate(layers):
            picks[i % n] = l
    return [
        make_sample(
            rng.standard_normal(width),
            rng.uniform(0.3, 0.99),
            picks[i],
            int(rng.integers(0, 2)),
        )
        for i in range(n)
    ]


def random_hp(rng, spec):
    hp = default_hyperparams(spec)
    hp.feat_variance = float(rng.uniform(0.5, 2.0))
    hp.feat_lengthscale = float(rng.uniform(0.5, 2.0))
    hp.conf_variance = float(rng.uniform(0.5, 2.0))
    hp.conf_lengthscale = float(rng.uniform(0.3, 1.5))
    hp.layer_feat_variance = float(rng.uniform(0.5, 2.0))
    hp.layer_feat_lengthscale = float(rng.uniform(0.5, 2.0))
    hp.layer_conf_variance = float(rng.uniform(0.5, 2.0))
    hp.layer_conf_lengthscale = float(rng.uniform(0.3, 1.5))
    hp.global_weight = float(rng.uniform(0.5, 2.0))
    if spec.variant == "multilayer_additive":
        hp.layer_variances = rng.uniform(0.5, 2.0, spec.layer_count)
    if spec.variant == "icm_full":
        hp.icm_factor = rng.standard_normal((spec.layer_count, spec.icm_rank))
        hp.icm_diag = rng.uniform(0.5, 2.0, spec.layer_count)
    hp.noise = float(rng.uniform(0.05, 0.3))
    return hp


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def oracle_rho(r2, lengthscale, kind):
    if kind == "rbf":
        return math.exp(-r2 / (2.0 * lengthscale * lengthscale))
    r = math.sqrt(r2)
    t = math.sqrt(5.0) * r / lengthscale
    return (1.0 + t + t * t / 3.0) * math.exp(-t)


def oracle_base_sum(a, b, fv, fl, cv, cl, kind):
    r2f = float(np.sum((a.features - b.features) ** 2))
    r2c = (a.confidence - b.confidence) ** 2
    return fv * oracle_rho(r2f, fl, kind) + cv * oracle_rho(r2c, cl, kind)


def oracle_kernel(a, b, spec, hp):
    base = oracle_base_sum(
        a, b, hp.feat_variance, hp.feat_lengthscale, hp.conf_variance, hp.conf_lengthscale, spec.base
    )
    if spec.variant == "single_sum":
        return base
    if spec.variant == "hierarchical_layer":
        if a.layer_index == b.layer_index:
            base += oracle_base_sum(
                a,
                b,
                hp.layer_feat_variance,
                hp.layer_feat_lengthscale,
                hp.layer_conf_variance,
                hp.layer_conf_lengthscale,
                spec.base,
            )
        return base
    pa = spec.layers.index(a.layer_index)
    pb = spec.layers.index(b.layer_index)
    if spec.variant == "multilayer_additive":
        weight = hp.global_weight + (hp.layer_variances[pa] if pa == pb else 0.0)
        return weight * base
    b_matrix = hp.icm_factor @ hp.icm_factor.T + np.diag(hp.icm_diag)
    return base * b_matrix[pa, pb]


def oracle_global_cross(samples, query, spec, hp):
    """Cross-covariance of the layer-free query: global part only."""
    vals = np.array(
        [
            oracle_base_sum(
                s, query, hp.feat_variance, hp.feat_lengthscale,
                hp.conf_variance, hp.conf_lengthscale, spec.base,
            )
            for s in samples
        ]
    )
    if spec.variant == "multilayer_additive":
        return hp.global_weight * vals
    return vals


class DenseOracle:
    """Brute-force GP: loop-assembled kernel, numpy inverse and determinant."""

    def __init__(self, samples, spec, hp, jitter):
        self.samples = samples
        self.spec = spec
        self.hp = hp
        n = len(samples)
        k = np.array([[oracle_kernel(a, b, spec, hp) for b in samples] for a in samples])
        self.a_matrix = k + (hp.noise + jitter) * np.eye(n)
        self.a_inv = np.linalg.inv(self.a_matrix)
        self.y = np.array([s.residual for s in samples])

    def lml(self):
        n = len(self.samples)
        _, logdet = np.linalg.slogdet(self.a_matrix)
        return (
            -0.5 * n * math.log(2.0 * math.pi)
            - 0.5 * logdet
            - 0.5 * float(self.y @ self.a_inv @ self.y)
        )

    def predict_local(self, query):
        ks = np.array([oracle_kernel(s, query, self.spec, self.hp) for s in self.samples])
        mean = float(ks @ self.a_inv @ self.y)
        var = oracle_kernel(query, query, self.spec, self.hp) - float(ks @ self.a_inv @ ks)
        return mean, max(var, 0.0)

    def predict_global(self, query):
        ks = oracle_global_cross(self.samples, query, self.spec, self.hp)
        if self.spec.variant == "multilayer_additive":
            prior = self.hp.global_weight * (self.hp.feat_variance + self.hp.conf_variance)
        else:
            prior = self.hp.feat_variance + self.hp.conf_variance
        mean = float(ks @ self.a_inv @ self.y)
        var = prior - float(ks @ self.a_inv @ ks)
        return mean, max(var, 0.0)


# ---------------------------------------------------------------------------
# dump builders
# ---------------------------------------------------------------------------


def build_dump(rng, n=6, k=3, layer_shapes=((2,), (3, 2, 2)), split="train"):
    """Valid in-memory dump; layer_shapes entries are (D,) or (C, H, W)."""
    logits = rng.standard_normal((n, k)) * 2.0
    shifted = logits - logits.max(axis=1, keepdims=True)
    softmax = np.exp(shifted)
    softmax /= softmax.sum(axis=1, keepdims=True)
    predictions = softmax.argmax(axis=1)
    labels = predictions.copy()
    flip = rng.random(n) < 0.4
    labels[flip] = (labels[flip] + 1) % k
    layers = []
    for i, shape in enumerate(layer_shapes):
        layers.append(LayerTensor(i + 1, rng.standard_normal((n, *shape))))
    return FeatureDump(
        split=split,
        layers=layers,
        softmax=softmax,
        labels=labels.astype(np.int64),
        predictions=predictions.astype(np.int64),
        logits=logits,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
