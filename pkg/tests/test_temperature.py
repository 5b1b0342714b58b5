"""Temperature scaling: analytic gradient, fitting, and the perfect-validation
pathology."""

import numpy as np
import pytest

from layergp.metrics import report_from_pairs
from layergp.temperature import (
    T_MIN,
    apply_temperature,
    fit_temperature,
    logits_from_softmax,
    nll_and_grad,
)


def overconfident_set(rng, n=400, k=5, inflate=3.0, noise=0.3):
    """Correct-class logit inflated on a label set with random flips."""
    logits = rng.standard_normal((n, k))
    labels = rng.integers(0, k, n)
    logits[np.arange(n), labels] += 2.0
    logits[np.arange(n), labels] *= inflate
    flip = rng.random(n) < noise
    labels[flip] = (labels[flip] + 1 + rng.integers(0, k - 1, flip.sum())) % k
    return logits, labels


def perfect_margin_set(rng, n=200, k=5, margin=6.0):
    """Every label correct with a wide logit margin.

    The margin keeps margin / t_min below the exp underflow point, so the
    loss gradient stays a positive nonzero all the way down to the floor.
    """
    logits = rng.standard_normal((n, k)) * 0.1
    labels = rng.integers(0, k, n)
    logits[np.arange(n), labels] += margin
    return logits, labels


class TestGradient:
    @pytest.mark.parametrize("temperature", [0.5, 1.0, 2.0])
    def test_matches_central_differences(self, rng, temperature):
        logits, labels = overconfident_set(rng)
        _, grad = nll_and_grad(logits, labels, temperature)
        h = 1e-6 * temperature
        up, _ = nll_and_grad(logits, labels, temperature + h)[0], None
        down = nll_and_grad(logits, labels, temperature - h)[0]
        fd = (up - down) / (2 * h)
        assert abs(fd - grad) / max(abs(fd), abs(grad)) < 1e-6

    def test_positive_gradient_on_perfect_set(self, rng):
        # z_y maximal everywhere -> z_y - E[z] > 0 -> dL/dT > 0
        logits, labels = perfect_margin_set(rng)
        for temperature in (0.5, 1.0, 2.0):
            _, grad = nll_and_grad(logits, labels, temperature)
            assert grad > 0

    def test_rejects_bad_inputs(self, rng):
        logits, labels = overconfident_set(rng, n=10)
        bad = logits.copy()
        bad[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            nll_and_grad(bad, labels, 1.0)
        with pytest.raises(ValueError, match="labels"):
            nll_and_grad(logits, labels + 100, 1.0)


class TestApply:
    def test_t1_is_plain_softmax(self, rng):
        logits, _ = overconfident_set(rng, n=20)
        out = apply_temperature(logits, 1.0)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(out, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    def test_large_t_approaches_uniform(self, rng):
        logits = rng.standard_normal((20, 4))
        out = apply_temperature(logits, 1e6)
        np.testing.assert_allclose(out, 0.25, atol=1e-6)

    def test_argmax_invariant_for_all_t(self, rng):
        logits, _ = overconfident_set(rng, n=50)
        want = logits.argmax(axis=1)
        for temperature in (0.01, 0.3, 1.0, 7.0, 100.0):
            got = apply_temperature(logits, temperature).argmax(axis=1)
            np.testing.assert_array_equal(got, want)

    def test_rejects_nonpositive_t(self, rng):
        logits, _ = overconfident_set(rng, n=5)
        with pytest.raises(ValueError):
            apply_temperature(logits, 0.0)


class TestFit:
    def test_overconfident_set_fits_t_above_one(self, rng):
        logits, labels = overconfident_set(rng)
        tm = fit_temperature(logits, labels, init_t=1.0, iters=400, lr=0.05)
        assert tm.temperature > 1.0
        nll_start = tm.trace[0][1]
        nll_end = nll_and_grad(logits, labels, tm.temperature)[0]
        assert nll_end < nll_start

    def test_final_nll_never_above_initial(self, rng):
        for seed in range(3):
            logits, labels = overconfident_set(np.random.default_rng(seed))
            tm = fit_temperature(logits, labels, init_t=2.0, iters=50, lr=0.2)
            assert nll_and_grad(logits, labels, tm.temperature)[0] <= tm.trace[0][1]

    def test_perfect_validation_pathology(self, rng):
        # all-correct, high-margin: the optimizer keeps reducing T until the
        # floor; the trace is monotone decreasing
        logits, labels = perfect_margin_set(rng)
        tm = fit_temperature(logits, labels, init_t=1.0, iters=500, lr=0.05)
        temps = [t for t, _ in tm.trace]
        assert all(b <= a for a, b in zip(temps, temps[1:]))
        assert tm.temperature == pytest.approx(T_MIN, rel=1e-9)

    def test_pathology_does_not_improve_heldout_ece(self, rng):
        logits, labels = perfect_margin_set(rng)
        tm = fit_temperature(logits, labels, init_t=1.0, iters=500, lr=0.05)
        # held-out imperfect split: moderate confidence, 80% accuracy
        test_logits, test_labels = overconfident_set(rng, n=500, inflate=1.0, noise=0.2)
        preds = test_logits.argmax(axis=1)
        corr = (preds == test_labels).astype(float)
        before = apply_temperature(test_logits, 1.0).max(axis=1)
        after = apply_temperature(test_logits, tm.temperature).max(axis=1)
        ece_before = report_from_pairs(np.column_stack([before, corr])).ece
        ece_after = report_from_pairs(np.column_stack([after, corr])).ece
        assert ece_after >= ece_before

    def test_bad_bounds(self, rng):
        logits, labels = overconfident_set(rng, n=10)
        with pytest.raises(ValueError):
            fit_temperature(logits, labels, init_t=0.001)


def test_logits_from_softmax_warns(rng):
    sm = apply_temperature(rng.standard_normal((5, 3)), 1.0)
    with pytest.warns(UserWarning, match="per-row constant"):
        back = logits_from_softmax(sm)
    np.testing.assert_allclose(
        apply_temperature(back, 1.0), sm, atol=1e-6
    )
