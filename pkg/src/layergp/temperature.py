"""Temperature scaling fitted by NLL minimization with the analytic gradient.

The per-sample loss is L(T) = -z_y / T + log sum_j exp(z_j / T) and its
temperature gradient is dL/dT = (z_y - E_{p(T)}[z]) / T^2 with E_{p(T)}[z]
the expected logit under the scaled softmax. On an all-correct, high-margin
fitting split this gradient stays positive, so the optimizer keeps shrinking
T; a configurable floor keeps the arithmetic finite while preserving that
failure mode.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import PROB_EPS

T_MIN = 0.01
T_MAX = 100.0


@dataclass
class TemperatureModel:
    temperature: float
    trace: list[tuple[float, float]] = field(default_factory=list)


def _check_logits_labels(logits: np.ndarray, labels: np.ndarray):
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2:
        raise ValueError("logits must be an N x K matrix")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    if labels.shape != (logits.shape[0],):
        raise ValueError("labels length must match logits rows")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("labels must lie in [0, K)")
    return logits, labels


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax of logits / T; preserves every row's argmax."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def nll_and_grad(logits: np.ndarray, labels: np.ndarray, temperature: float) -> tuple[float, float]:
    """Mean L(T) over samples and its analytic derivative d mean L / dT."""
    logits, labels = _check_logits_labels(logits, labels)
    z = logits / temperature
    z_shift = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z_shift).sum(axis=1)) + z.max(axis=1)
    z_true = z[np.arange(len(labels)), labels]
    nll = float(np.mean(log_norm - z_true))

    probs = apply_temperature(logits, temperature)
    expected_logit = np.sum(probs * logits, axis=1)
    true_logit = logits[np.arange(len(labels)), labels]
    grad = float(np.mean(true_logit - expected_logit) / (temperature * temperature))
    return nll, grad


def fit_temperature(
    logits: np.ndarray,
    labels: np.ndarray,
    init_t: float = 1.0,
    iters: int = 500,
    lr: float = 0.05,
    t_min: float = T_MIN,
    t_max: float = T_MAX,
) -> TemperatureModel:
    """Minimize mean L(T) by adaptive first-order descent on log T.

    log T is clamped into [log t_min, log t_max] after every step; the
    returned temperature is the best-NLL iterate, and trace records the
    visited (T, NLL) pairs.
    """
    logits, labels = _check_logits_labels(logits, labels)
    if not (0 < t_min <= init_t <= t_max):
        raise ValueError("need 0 < t_min <= init_t <= t_max")

    u = math.log(init_t)
    lo, hi = math.log(t_min), math.log(t_max)
    nll, grad_t = nll_and_grad(logits, labels, init_t)
    trace = [(init_t, nll)]
    best_t, best_nll = init_t, nll

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    for t in range(1, iters + 1):
        grad_u = math.exp(u) * grad_t  # chain rule onto log T
        m = beta1 * m + (1.0 - beta1) * grad_u
        v = beta2 * v + (1.0 - beta2) * grad_u * grad_u
        u -= lr * (m / (1.0 - beta1**t)) / (math.sqrt(v / (1.0 - beta2**t)) + eps)
        u = min(max(u, lo), hi)
        temp = math.exp(u)
        nll, grad_t = nll_and_grad(logits, labels, temp)
        trace.append((temp, nll))
        if nll < best_nll:
            best_t, best_nll = temp, nll
    return TemperatureModel(temperature=best_t, trace=trace)


def logits_from_softmax(softmax: np.ndarray) -> np.ndarray:
    """Recover logits as log softmax when a dump carries no logits file.

    Valid only up to a per-row constant, which L(T) cancels only at T = 1,
    so fits starting elsewhere are approximate; a warning is emitted.
    """
    warnings.warn(
        "recovering logits as log(softmax): correct only up to a per-row "
        "constant, which temperature scaling does not cancel at T != 1",
        stacklevel=2,
    )
    return np.log(np.clip(np.asarray(softmax, dtype=float), PROB_EPS, 1.0))
