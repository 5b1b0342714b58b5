"""Exact GP regression on calibration residuals.

Hyperparameters are fitted by first-order ascent of the log marginal
likelihood with per-parameter adaptive step scaling (moment tracking) in the
unconstrained coordinates from `kernels`. The fitted model keeps the Cholesky
factor of the regularized kernel matrix and the dual weights, so prediction
is two triangular solves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotri

from .dumps import CalibrationSample, Standardizer
from .kernels import (
    HyperParams,
    KernelSpec,
    SampleArrays,
    build_workspace,
    cross_matrix,
    default_hyperparams,
    global_cross_vector,
    global_prior_variance,
    matrix_and_cache,
    matrix_from_workspace,
    pack_hyperparams,
    parameter_names,
    self_kernel,
    trace_gradients,
    unpack_hyperparams,
)

JITTER_LADDER = (1e-6, 1e-5, 1e-4)

_LOG_2PI = float(np.log(2.0 * np.pi))


class GPFitError(Exception):
    """Raised when factorization or the objective breaks down during fitting."""


@dataclass(frozen=True)
class PosteriorPrediction:
    """Posterior residual distribution at one query point."""

    mean: float
    variance: float
    kind: str


def _chol_with_jitter(k_matrix: np.ndarray, noise: float) -> tuple[np.ndarray, float]:
    """Cholesky of K + (noise + jitter) I, escalating jitter before failing."""
    n = k_matrix.shape[0]
    regularized = k_matrix.copy()
    step = np.lib.stride_tricks.as_strided(  # writable diagonal view
        regularized, shape=(n,), strides=((n + 1) * regularized.itemsize,)
    )
    previous = 0.0
    for jitter in JITTER_LADDER:
        step += noise + jitter - previous
        previous = noise + jitter
        try:
            return np.linalg.cholesky(regularized), jitter
        except np.linalg.LinAlgError:
            continue
    raise GPFitError(
        f"Cholesky factorization failed at jitter {JITTER_LADDER[-1]:g}; "
        "hyperparameters are ill-conditioned"
    )


def _lml_from_factor(chol: np.ndarray, dual: np.ndarray, y: np.ndarray) -> float:
    n = y.shape[0]
    log_det_half = float(np.sum(np.log(np.diag(chol))))
    return -0.5 * n * _LOG_2PI - log_det_half - 0.5 * float(y @ dual)


def log_marginal_likelihood(
    samples: list[CalibrationSample], spec: KernelSpec, hp: HyperParams
) -> float:
    """-(n/2) log 2pi - 1/2 log|K + noise I| - 1/2 y^T (K + noise I)^{-1} y.

    Computed via Cholesky (log-det as twice the sum of log diagonal entries);
    the factorization jitter is part of the regularized matrix.
    """
    arrays = SampleArrays.from_samples(samples)
    ws = build_workspace(arrays, None, spec)
    k_matrix = matrix_from_workspace(ws, hp)
    chol, _ = _chol_with_jitter(k_matrix, hp.noise)
    dual = cho_solve((chol, True), arrays.residual, check_finite=False)
    return _lml_from_factor(chol, dual, arrays.residual)


def _spd_inverse_from_chol(chol: np.ndarray) -> np.ndarray:
    """Full inverse of A from its lower Cholesky factor (LAPACK dpotri).

    The upper triangle of a numpy Cholesky factor is zero, and dpotri with
    lower=1 only writes the lower triangle, so mirroring is a plain add.
    """
    inv, info = dpotri(chol, lower=1)
    if info != 0:
        raise GPFitError(f"dpotri failed with info={info}")
    return inv + inv.T - np.diag(np.diag(inv))


def _lml_and_grad(ws, y, hp: HyperParams) -> tuple[float, np.ndarray]:
    """Objective and gradient w.r.t. the unconstrained parameter vector.

    Uses the trace identity d lml / d theta = 1/2 tr((aa^T - A^{-1}) dK/dtheta)
    with a the dual vector and A the regularized kernel matrix; the traces are
    evaluated against cached kernel pieces without materializing dK.
    """
    k_matrix, cache = matrix_and_cache(ws, hp, want_grads=True)
    chol, _ = _chol_with_jitter(k_matrix, hp.noise)
    dual = cho_solve((chol, True), y, check_finite=False)
    value = _lml_from_factor(chol, dual, y)

    w = np.outer(dual, dual) - _spd_inverse_from_chol(chol)
    grad = np.empty(len(parameter_names(ws.spec, include_noise=True)))
    grad[:-1] = trace_gradients(ws, hp, cache, w)
    # d(A)/d(log noise) = noise * I
    grad[-1] = 0.5 * hp.noise * float(np.trace(w))
    return value, grad


def log_marginal_likelihood_gradient(
    samples: list[CalibrationSample], spec: KernelSpec, hp: HyperParams
) -> dict[str, float]:
    """Gradient of the log marginal likelihood per unconstrained parameter."""
    arrays = SampleArrays.from_samples(samples)
    ws = build_workspace(arrays, None, spec)
    _, grad = _lml_and_grad(ws, arrays.residual, hp)
    return dict(zip(parameter_names(spec, include_noise=True), grad))


def median_heuristic_init(arrays: SampleArrays, spec: KernelSpec) -> HyperParams:
    """Default initialization: unit variances, median pairwise distances as
    lengthscales, noise 0.1."""
    n = arrays.features.shape[0]
    take = np.unique(np.linspace(0, n - 1, min(n, 512)).astype(int))
    feats = arrays.features[take]
    confs = arrays.confidence[take]
    iu = np.triu_indices(len(take), k=1)
    if iu[0].size:
        feat_d = np.sqrt(np.maximum(_pair_sq(feats), 0.0))[iu]
        conf_d = np.abs(confs[:, None] - confs[None, :])[iu]
        feat_med = float(np.median(feat_d))
        conf_med = float(np.median(conf_d))
    else:
        feat_med = conf_med = 0.0
    hp = default_hyperparams(spec)
    hp.feat_lengthscale = feat_med if feat_med > 1e-8 else 1.0
    hp.conf_lengthscale = max(conf_med, 1e-4) if conf_med > 1e-8 else 1.0
    hp.layer_feat_lengthscale = hp.feat_lengthscale
    hp.layer_conf_lengthscale = hp.conf_lengthscale
    return hp


def _pair_sq(a: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(axis=1)
    return sq[:, None] + sq[None, :] - 2.0 * (a @ a.T)


@dataclass
class GPModel:
    """Fitted GP state: training samples, optimized kernel, Cholesky factor, duals.

    `samples` are stored in the space the kernel saw (standardizer already
    applied); queries are standardized on entry.
    """

    spec: KernelSpec
    hp: HyperParams
    samples: list[CalibrationSample]
    arrays: SampleArrays
    chol: np.ndarray
    dual: np.ndarray
    standardizer: Standardizer
    training_log: list[float]
    jitter: float
    config: dict | None = None

    @property
    def feature_width(self) -> int:
        return self.arrays.features.shape[1]

    @property
    def training_layers(self) -> set[int]:
        return set(int(l) for l in self.arrays.layer_index)

    def final_lml(self) -> float:
        return self.training_log[-1]

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write a self-describing JSON archive; bytes are run-independent."""
        payload = {
            "format": "layergp-model",
            "version": 1,
            "kernel_spec": self.spec.to_dict(),
            "hyperparams": self.hp.to_dict(),
            "standardizer": self.standardizer.to_dict(),
            "training_log": list(self.training_log),
            "jitter": self.jitter,
            "config": self.config,
            "samples": {
                "features": self.arrays.features.tolist(),
                "confidence": self.arrays.confidence.tolist(),
                "layer_index": self.arrays.layer_index.tolist(),
                "correctness": self.arrays.correctness.tolist(),
                "residual": self.arrays.residual.tolist(),
            },
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "GPModel":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "layergp-model":
            raise ValueError(f"{path}: not a layergp model file")
        if payload.get("version") != 1:
            raise ValueError(f"{path}: unsupported model version {payload.get('version')!r}")
        spec = KernelSpec.from_dict(payload["kernel_spec"])
        hp = HyperParams.from_dict(payload["hyperparams"])
        s = payload["samples"]
        samples = [
            CalibrationSample(
                features=np.asarray(f, dtype=float),
                confidence=float(c),
                layer_index=int(l),
                correctness=int(corr),
                residual=float(r),
            )
            for f, c, l, corr, r in zip(
                s["features"], s["confidence"], s["layer_index"], s["correctness"], s["residual"]
            )
        ]
        arrays = SampleArrays.from_samples(samples)
        ws = build_workspace(arrays, None, spec)
        k_matrix = matrix_from_workspace(ws, hp)
        chol, jitter = _chol_with_jitter(k_matrix, hp.noise)
        dual = cho_solve((chol, True), arrays.residual, check_finite=False)
        return cls(
            spec=spec,
            hp=hp,
            samples=samples,
            arrays=arrays,
            chol=chol,
            dual=dual,
            standardizer=Standardizer.from_dict(payload["standardizer"]),
            training_log=[float(v) for v in payload["training_log"]],
            jitter=float(payload["jitter"]),
            config=payload.get("config"),
        )


def fit(
    samples: list[CalibrationSample],
    spec: KernelSpec,
    init_hp: HyperParams | None = None,
    *,
    iters: int = 2000,
    learning_rate: float = 5e-3,
    seed: int = 0,
    standardizer: Standardizer | None = None,
    config: dict | None = None,
) -> GPModel:
    """Maximize the log marginal likelihood for a fixed iteration budget.

    Best-so-far parameters are retained, so the reported objective never ends
    below its initial value; training_log holds the best value seen at each
    iteration (entry 0 is the starting point). The optimizer itself is
    deterministic; `seed` is recorded for provenance.
    """
    if len(samples) < 2:
        raise ValueError("fit requires at least 2 samples")
    arrays = SampleArrays.from_samples(samples)
    ws = build_workspace(arrays, None, spec)
    y = arrays.residual

    hp0 = init_hp.copy() if init_hp is not None else median_heuristic_init(arrays, spec)
    theta = pack_hyperparams(hp0, spec)

    value, grad = _lml_and_grad(ws, y, hp0)
    if not np.isfinite(value):
        raise GPFitError("non-finite log marginal likelihood at iteration 0")
    best_value, best_theta = value, theta.copy()
    training_log = [best_value]

    # Adam ascent on the unconstrained parameter vector.
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, iters + 1):
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        theta = theta + learning_rate * m_hat / (np.sqrt(v_hat) + eps)

        hp_t = unpack_hyperparams(theta, spec)
        try:
            value, grad = _lml_and_grad(ws, y, hp_t)
        except GPFitError as exc:
            raise GPFitError(f"iteration {t}: {exc}") from None
        if not np.isfinite(value):
            raise GPFitError(f"non-finite log marginal likelihood at iteration {t}")
        if value > best_value:
            best_value, best_theta = value, theta.copy()
        training_log.append(best_value)

    hp_best = unpack_hyperparams(best_theta, spec) if iters > 0 else hp0
    k_matrix = matrix_from_workspace(ws, hp_best)
    chol, jitter = _chol_with_jitter(k_matrix, hp_best.noise)
    dual = cho_solve((chol, True), y, check_finite=False)
    meta = dict(config) if config else {}
    meta.setdefault("opt", {"iters": iters, "learning_rate": learning_rate, "seed": seed})
    return GPModel(
        spec=spec,
        hp=hp_best,
        samples=samples,
        arrays=arrays,
        chol=chol,
        dual=dual,
        standardizer=standardizer if standardizer is not None else Standardizer.identity(
            arrays.features.shape[1]
        ),
        training_log=training_log,
        jitter=jitter,
        config=meta,
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


@dataclass
class BatchPrediction:
    """Vectorized posterior over a query batch, with the clamp diagnostic."""

    mean: np.ndarray
    variance: np.ndarray
    variance_clamped: int
    kind: str

    def __getitem__(self, i: int) -> PosteriorPrediction:
        return PosteriorPrediction(float(self.mean[i]), float(self.variance[i]), self.kind)


def _solve_posterior(model: GPModel, cross: np.ndarray, prior: np.ndarray, kind: str):
    mean = cross.T @ model.dual
    tmp = cho_solve((model.chol, True), cross, check_finite=False)
    quad = np.sum(cross * tmp, axis=0)
    variance = prior - quad
    clamped = int(np.sum(variance < 0.0))
    np.clip(variance, 0.0, None, out=variance)
    return BatchPrediction(mean=mean, variance=variance, variance_clamped=clamped, kind=kind)


def predict_local_batch(model: GPModel, queries: list[CalibrationSample]) -> BatchPrediction:
    """Posterior at query points carrying their own layer indices.

    mean = k_*^T (K + noise I)^{-1} y; variance = k(x_*, x_*) - k_*^T (...)^{-1} k_*,
    clamped at zero. Observation noise is not added (epistemic-only variance).
    """
    q_arrays = SampleArrays.from_samples(queries)
    if q_arrays.features.shape[1] != model.feature_width:
        raise ValueError(
            f"query width {q_arrays.features.shape[1]} does not match "
            f"training width {model.feature_width}"
        )
    if model.spec.variant != "single_sum":
        train_layers = model.training_layers
        for l in np.unique(q_arrays.layer_index):
            if int(l) not in train_layers:
                raise ValueError(
                    f"query layer index {int(l)} absent from training layers "
                    f"{sorted(train_layers)}"
                )
    q_std = SampleArrays(
        features=model.standardizer.transform(q_arrays.features),
        confidence=q_arrays.confidence,
        layer_index=q_arrays.layer_index,
        residual=q_arrays.residual,
        correctness=q_arrays.correctness,
    )
    cross = cross_matrix(model.arrays, q_std, model.spec, model.hp)
    prior = np.array(
        [self_kernel(model.spec, model.hp, int(l)) for l in q_std.layer_index], dtype=float
    )
    return _solve_posterior(model, cross, prior, "local")


def predict_local(model: GPModel, query: CalibrationSample) -> PosteriorPrediction:
    return predict_local_batch(model, [query])[0]


def global_cross_covariance(
    model: GPModel, features: np.ndarray, confidence: np.ndarray | float
) -> np.ndarray:
    """Cross-covariance of the training set against layer-agnostic queries.

    Evaluates the kernel at the reserved query layer index -1 (absent from
    training): every same-layer term vanishes, so the result depends only on
    the layer-agnostic hyperparameters.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    confidence = np.atleast_1d(np.asarray(confidence, dtype=float))
    if features.shape[1] != model.feature_width:
        raise ValueError(
            f"query width {features.shape[1]} does not match training width {model.feature_width}"
        )
    return global_cross_vector(
        model.arrays,
        model.standardizer.transform(features),
        confidence,
        model.spec,
        model.hp,
    )


def predict_global_batch(
    model: GPModel, features: np.ndarray, confidence: np.ndarray
) -> BatchPrediction:
    """Layer-agnostic posterior: only the shared kernel component carries
    covariance, and the variance keeps the pure layer-free prior term."""
    cross = global_cross_covariance(model, features, confidence)
    prior = np.full(cross.shape[1], global_prior_variance(model.spec, model.hp))
    return _solve_posterior(model, cross, prior, "global")


def predict_global(
    model: GPModel, query_features: np.ndarray, query_confidence: float
) -> PosteriorPrediction:
    return predict_global_batch(
        model, np.atleast_2d(query_features), np.array([query_confidence])
    )[0]
