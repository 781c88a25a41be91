import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otafl.aggregation import (
    CONTROL,
    MODEL,
    RecoveredAverage,
    analytic_mse,
    mmse_shrink,
    recover_control,
    recover_fading,
    recover_model,
    residual_noise_factor,
)
from otafl.channel import FadeDraw, mac_transmit
from otafl.priors import AggregatedPrior


def quadrature_conditional_mean(y, prior_mean, prior_var, noise_var):
    """Independent oracle: E[T | T + W = y] by numerical integration."""
    width = 10 * np.sqrt(prior_var + noise_var)
    t = np.linspace(prior_mean - width, prior_mean + width, 200_001)
    log_post = -0.5 * (t - prior_mean) ** 2 / prior_var - 0.5 * (y - t) ** 2 / noise_var
    w = np.exp(log_post - log_post.max())
    return np.trapezoid(t * w, t) / np.trapezoid(w, t)


class TestRecovery:
    def test_zero_input_returns_previous(self):
        prev = np.array([1.0, -2.0])
        rec = recover_model(np.zeros(2), 4, 2.0, prev, noise_var=0.5)
        np.testing.assert_array_equal(rec.value, prev)
        assert rec.effective_noise_var == pytest.approx(0.5 / (16 * 2.0))

    def test_noiseless_pipeline_inverts_precoding(self):
        # precode-and-superpose then recover == previous model + mean update
        rng = np.random.default_rng(0)
        n, d, alpha = 5, 8, 3.7
        updates = [rng.normal(size=d) for _ in range(n)]
        prev = rng.normal(size=d)
        y = mac_transmit(
            [np.sqrt(alpha) * u for u in updates],
            FadeDraw(np.ones(n), np.zeros(n)),
            0.0,
            rng,
        )
        rec = recover_model(y, n, alpha, prev, noise_var=0.0)
        np.testing.assert_allclose(rec.value, prev + np.mean(updates, axis=0), atol=1e-12)

    def test_model_noise_variance_monte_carlo(self):
        # sigma_w^2 = 1, N = 10, alpha = 4: variance of the recovery error is
        # 1 / 400 per coordinate
        rng = np.random.default_rng(1)
        d = 100_000
        y = mac_transmit([np.zeros(d)], FadeDraw([1.0], [0.0]), 1.0, rng)
        rec = recover_model(y, 10, 4.0, np.zeros(d), noise_var=1.0)
        target = 1.0 / 400.0
        se = target * np.sqrt(2.0 / d)
        assert abs(rec.value.var() - target) <= 3 * se
        assert rec.effective_noise_var == pytest.approx(target)

    def test_control_recovery(self):
        rec = recover_control(np.zeros(3), 5, 2.0, noise_var=0.0)
        np.testing.assert_array_equal(rec.value, np.zeros(3))
        rng = np.random.default_rng(2)
        n, d, beta = 4, 6, 9.0
        controls = [rng.normal(size=d) for _ in range(n)]
        z = mac_transmit(
            [np.sqrt(beta) * c for c in controls], FadeDraw(np.ones(n), np.zeros(n)), 0.0, rng
        )
        rec = recover_control(z, n, beta, noise_var=0.0)
        np.testing.assert_allclose(rec.value, np.mean(controls, axis=0), atol=1e-12)

    def test_recovery_unbiased(self):
        rng = np.random.default_rng(3)
        n, d, alpha = 3, 50_000, 2.0
        updates = [rng.normal(size=d) for _ in range(n)]
        y = mac_transmit(
            [np.sqrt(alpha) * u for u in updates], FadeDraw(np.ones(n), np.zeros(n)), 1.0, rng
        )
        rec = recover_model(y, n, alpha, np.zeros(d), noise_var=1.0)
        err = rec.value - np.mean(updates, axis=0)
        se = err.std(ddof=1) / np.sqrt(d)
        assert abs(err.mean()) <= 3 * se

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError):
            recover_model(np.zeros(2), 2, 0.0, np.zeros(2), 0.1)


class TestMmseShrink:
    def test_zero_noise_is_identity(self):
        value = np.array([0.1, -7.0, 2.5])
        rec = RecoveredAverage(value, MODEL, 0.0)
        out = mmse_shrink(rec, AggregatedPrior(3.0, 1.0))
        np.testing.assert_array_equal(out, value)

    def test_zero_prior_var_returns_prior_mean(self):
        rec = RecoveredAverage(np.arange(4.0), MODEL, 0.5)
        out = mmse_shrink(rec, AggregatedPrior(2.0, 0.0))
        np.testing.assert_array_equal(out, np.full(4, 2.0))

    def test_double_zero_corner_is_identity(self):
        value = np.array([9.0])
        out = mmse_shrink(RecoveredAverage(value, MODEL, 0.0), AggregatedPrior(0.0, 0.0))
        np.testing.assert_array_equal(out, value)

    def test_control_kind_uses_control_prior(self):
        rec = RecoveredAverage(np.array([1.0]), CONTROL, 1.0)
        prior = AggregatedPrior(model_mean=50.0, model_var=1e9, control_mean=0.0, control_var=1.0)
        out = mmse_shrink(rec, prior)
        assert out[0] == pytest.approx(0.5)

    def test_matches_quadrature_oracle(self):
        # scalar pipeline: theta_i ~ N(mu_i, s_i^2), superpose precoded values,
        # recover, shrink; compare with numerically integrated E[T | y]
        rng = np.random.default_rng(4)
        mus = np.array([0.5, -1.0, 2.0])
        sig2 = np.array([0.4, 1.1, 0.7])
        n, alpha, noise_var = 3, 2.0, 0.8
        thetas = rng.normal(mus, np.sqrt(sig2))
        y = mac_transmit(
            [np.sqrt(alpha) * np.array([t]) for t in thetas],
            FadeDraw(np.ones(n), np.zeros(n)),
            noise_var,
            rng,
        )
        rec = recover_model(y, n, alpha, np.zeros(1), noise_var=noise_var)
        prior = AggregatedPrior(mus.mean(), sig2.sum() / n**2)
        got = mmse_shrink(rec, prior)[0]
        oracle = quadrature_conditional_mean(
            rec.value[0], prior.model_mean, prior.model_var, rec.effective_noise_var
        )
        assert got == pytest.approx(oracle, abs=1e-6)

    @given(
        st.floats(-5, 5),
        st.floats(0, 10),
        st.floats(0, 10),
        st.floats(-20, 20),
    )
    @settings(max_examples=100, deadline=None)
    def test_kappa_bounds(self, mean, var, noise, x):
        rec = RecoveredAverage(np.array([x]), MODEL, noise)
        out = mmse_shrink(rec, AggregatedPrior(mean, var))[0]
        lo, hi = min(mean, x), max(mean, x)
        assert lo - 1e-9 <= out <= hi + 1e-9


class TestAnalyticMse:
    def test_zero_noise(self):
        assert analytic_mse(AggregatedPrior(0.0, 1.0), 4, 2.0, 0.0) == 0.0

    def test_zero_prior_var(self):
        assert analytic_mse(AggregatedPrior(0.0, 0.0), 4, 2.0, 1.0) == 0.0

    def test_wide_prior_limit_is_plain_average_variance(self):
        got = analytic_mse(AggregatedPrior(0.0, 1e12), 5, 2.0, 1.0)
        assert got == pytest.approx(1.0 / (25 * 2.0), rel=1e-6)

    def test_monte_carlo_scalar(self):
        # N=2, alpha=1, sigma_w^2=1, sum sigma_i^2 = 2: MSE = 1/6
        rng = np.random.default_rng(5)
        n, alpha, noise_var = 2, 1.0, 1.0
        sig2 = np.array([1.0, 1.0])
        prior = AggregatedPrior(0.0, sig2.sum() / n**2)
        trials = 1_000_000
        thetas = rng.normal(0.0, 1.0, size=(trials, n))
        truth = thetas.mean(axis=1)
        w = rng.normal(0.0, np.sqrt(noise_var / (n * n * alpha)), size=trials)
        rec = RecoveredAverage(truth + w, MODEL, noise_var / (n * n * alpha))
        est = mmse_shrink(rec, prior)
        sq = (est - truth) ** 2
        se = sq.std(ddof=1) / np.sqrt(trials)
        expected = analytic_mse(prior, n, alpha, noise_var)
        assert expected == pytest.approx(1.0 / 6.0)
        assert abs(sq.mean() - expected) <= 3 * se

    def test_bias_variance_decomposition(self):
        rng = np.random.default_rng(6)
        n, alpha, noise_var = 3, 2.0, 0.5
        prior = AggregatedPrior(1.0, 0.4)
        trials = 200_000
        truth = rng.normal(1.0, np.sqrt(prior.model_var), size=trials)
        w = rng.normal(0.0, np.sqrt(noise_var / (n * n * alpha)), size=trials)
        rec = RecoveredAverage(truth + w, MODEL, noise_var / (n * n * alpha))
        err = mmse_shrink(rec, prior) - truth
        decomposed = err.var(ddof=1) + err.mean() ** 2
        se = (err**2).std(ddof=1) / np.sqrt(trials)
        assert abs(decomposed - analytic_mse(prior, n, alpha, noise_var)) <= 3 * se

    def test_mmse_dominates_plain_average(self):
        rng = np.random.default_rng(7)
        for n, alpha, noise_var, prior_var in [(2, 0.5, 1.0, 0.3), (10, 2.0, 0.1, 1.0)]:
            env = noise_var / (n * n * alpha)
            trials = 100_000
            truth = rng.normal(0.0, np.sqrt(prior_var), size=trials)
            w = rng.normal(0.0, np.sqrt(env), size=trials)
            prior = AggregatedPrior(0.0, prior_var)
            shrunk = mmse_shrink(RecoveredAverage(truth + w, MODEL, env), prior)
            gain = w**2 - (shrunk - truth) ** 2
            se = gain.std(ddof=1) / np.sqrt(trials)
            assert gain.mean() > 3 * se

    def test_residual_factor_below_noise_var(self):
        for noise in (0.1, 1.0, 5.0):
            assert residual_noise_factor(0.7, 4, 1.3, noise) <= noise


class TestRecoverFading:
    def test_full_participation_reduction_bit_exact(self):
        rng = np.random.default_rng(8)
        y = rng.normal(size=6)
        z = rng.normal(size=6)
        prev = rng.normal(size=6)
        fm, fc = recover_fading(y, z, 4, 1.0, 1.0, 2.0, 3.0, prev, noise_var=0.3)
        m = recover_model(y, 4, 2.0, prev, noise_var=0.3)
        c = recover_control(z, 4, 3.0, noise_var=0.3)
        np.testing.assert_array_equal(fm.value, m.value)
        np.testing.assert_array_equal(fc.value, c.value)
        assert fm.effective_noise_var == m.effective_noise_var
        assert fc.effective_noise_var == c.effective_noise_var

    def test_noiseless_partial_mean(self):
        rng = np.random.default_rng(9)
        d, alpha, h_min = 7, 2.0, 0.6
        updates = [rng.normal(size=d) for _ in range(3)]
        # participants transmit sqrt(alpha) * h_min * update after inversion
        y = sum(np.sqrt(alpha) * h_min * u for u in updates)
        fm, _ = recover_fading(
            y, np.zeros(d), 3, h_min, h_min, alpha, alpha, np.zeros(d), noise_var=0.0
        )
        np.testing.assert_allclose(fm.value, np.mean(updates, axis=0), atol=1e-12)

    def test_noise_amplification_monte_carlo(self):
        # |S| = N/2 and h_min = 0.5 amplify the noise variance 16x relative to
        # full participation at h_min = 1
        rng = np.random.default_rng(10)
        d, n, alpha = 100_000, 8, 1.0
        noise = rng.normal(size=d)
        base = recover_model(noise, n, alpha, np.zeros(d), noise_var=1.0)
        fad, _ = recover_fading(
            noise, np.zeros(d), n // 2, 0.5, 0.5, alpha, alpha, np.zeros(d), noise_var=1.0
        )
        ratio = fad.value.var() / base.value.var()
        np.testing.assert_allclose(ratio, 16.0, rtol=3 * np.sqrt(2.0 / d) * 2)
        assert fad.effective_noise_var == pytest.approx(16 * base.effective_noise_var)

    def test_empty_participants_error(self):
        with pytest.raises(ValueError):
            recover_fading(
                np.zeros(2), np.zeros(2), 0, 0.5, 0.5, 1.0, 1.0, np.zeros(2), 0.1
            )
