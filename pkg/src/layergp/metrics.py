"""Calibration metrics over (confidence, correctness) pairs.

Reliability binning uses M equal-width, right-inclusive bins ((m-1)/M, m/M];
a confidence of exactly 0 lands in bin 1. ECE is the count-weighted mean
absolute gap between per-bin accuracy and per-bin mean confidence, MCE the
maximum gap over realized (nonempty) bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_EPS = 1e-7


@dataclass(frozen=True)
class BinStat:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass
class ReliabilityDiagram:
    bin_count: int
    bins: list[BinStat]
    overall_accuracy: float
    overall_confidence: float

    @property
    def n(self) -> int:
        return sum(b.count for b in self.bins)

    def table_rows(self) -> list[tuple[float, float, int, float, float]]:
        """(bin_lo, bin_hi, count, confidence, accuracy) rows for export."""
        return [(b.lo, b.hi, b.count, b.mean_confidence, b.accuracy) for b in self.bins]


def _as_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=float)
    if arr.size == 0:
        return np.empty(0), np.empty(0)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected a sequence of (confidence, correctness) pairs")
    return arr[:, 0], arr[:, 1]


def reliability(pairs, bin_count: int) -> ReliabilityDiagram:
    """Bin (confidence, correctness) pairs into a reliability diagram."""
    conf, corr = _as_pairs(pairs)
    if conf.size == 0:
        raise ValueError("reliability requires at least one pair")
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")

    edges = np.arange(bin_count + 1) / bin_count
    # side='left' makes bins right-inclusive; exact 0 is pushed up into bin 1
    idx = np.searchsorted(edges, conf, side="left")
    idx = np.clip(idx, 1, bin_count)

    bins = []
    for m in range(1, bin_count + 1):
        mask = idx == m
        count = int(mask.sum())
        if count:
            bins.append(
                BinStat(
                    lo=float(edges[m - 1]),
                    hi=float(edges[m]),
                    count=count,
                    mean_confidence=float(conf[mask].mean()),
                    accuracy=float(corr[mask].mean()),
                )
            )
        else:
            bins.append(BinStat(float(edges[m - 1]), float(edges[m]), 0, 0.0, 0.0))
    return ReliabilityDiagram(
        bin_count=bin_count,
        bins=bins,
        overall_accuracy=float(corr.mean()),
        overall_confidence=float(conf.mean()),
    )


def ece(diagram: ReliabilityDiagram) -> float:
    """Count-weighted mean |accuracy - confidence| over bins; empty bins add 0."""
    n = diagram.n
    if n == 0:
        return 0.0
    total = 0.0
    for b in diagram.bins:
        if b.count:
            total += b.count * abs(b.accuracy - b.mean_confidence)
    return total / n


def mce(diagram: ReliabilityDiagram) -> float:
    """Worst |accuracy - confidence| over realized bins; empty bins are skipped."""
    gaps = [abs(b.accuracy - b.mean_confidence) for b in diagram.bins if b.count]
    return max(gaps) if gaps else 0.0


def nll_binary(pairs) -> float:
    """Mean negative log-likelihood of the correctness indicator under the
    confidence, with probabilities clipped to [eps, 1 - eps]."""
    conf, corr = _as_pairs(pairs)
    p = np.clip(conf, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(corr * np.log(p) + (1.0 - corr) * np.log(1.0 - p)))


def brier_binary(pairs) -> float:
    """Mean squared gap between confidence and the correctness indicator."""
    conf, corr = _as_pairs(pairs)
    return float(np.mean((conf - corr) ** 2))


def nll_multiclass(softmax: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log of the true-class probability from the full softmax."""
    p = np.clip(softmax[np.arange(len(labels)), labels], PROB_EPS, 1.0)
    return float(-np.mean(np.log(p)))


def brier_multiclass(softmax: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared distance between the softmax row and the one-hot label."""
    onehot = np.zeros_like(softmax)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(np.mean(np.sum((softmax - onehot) ** 2, axis=1)))


@dataclass
class MetricsReport:
    """Scalar calibration metrics for one method on one split."""

    ece: float
    mce: float
    nll: float
    brier: float
    bin_count: int
    clamp_count: int
    n: int

    def to_record(self) -> str:
        """Flat key/value text record, one field per line."""
        lines = [
            f"ece\t{self.ece!r}",
            f"mce\t{self.mce!r}",
            f"nll\t{self.nll!r}",
            f"brier\t{self.brier!r}",
            f"bin_count\t{self.bin_count}",
            f"clamp_count\t{self.clamp_count}",
            f"n\t{self.n}",
        ]
        return "\n".join(lines) + "\n"


def report_from_pairs(pairs, bin_count: int = 15, clamp_count: int = 0) -> MetricsReport:
    """ECE/MCE/NLL/Brier over top-1 (confidence, correctness) pairs."""
    diagram = reliability(pairs, bin_count)
    return MetricsReport(
        ece=ece(diagram),
        mce=mce(diagram),
        nll=nll_binary(pairs),
        brier=brier_binary(pairs),
        bin_count=bin_count,
        clamp_count=clamp_count,
        n=diagram.n,
    )
