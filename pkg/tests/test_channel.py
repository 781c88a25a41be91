import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otafl.channel import (
    ChannelConfig,
    FadeDraw,
    audit_power,
    draw_fading,
    mac_transmit,
    snr_to_noise,
    truncated_inversion_precode,
)


def unit_fades(n):
    return FadeDraw(np.ones(n), np.zeros(n))


class TestChannelConfig:
    def test_requires_exactly_one_noise_spec(self):
        with pytest.raises(ValueError):
            ChannelConfig(noise_var=0.1, snr_db=10.0)
        with pytest.raises(ValueError):
            ChannelConfig()
        assert ChannelConfig(snr_db=10.0).resolved_noise_var() == pytest.approx(0.1)

    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            ChannelConfig(noise_var=0.0, h_min=0.0)
        with pytest.raises(ValueError):
            ChannelConfig(noise_var=0.0, rho_min=1.5)

    def test_fading_param_validation(self):
        with pytest.raises(ValueError):
            ChannelConfig(noise_var=0.0, fading="rayleigh")
        with pytest.raises(ValueError):
            ChannelConfig(noise_var=0.0, fading="uniform", fading_params=(2.0, 1.0))


class TestMacTransmit:
    def test_noiseless_unit_sum(self):
        v1, v2 = np.arange(4.0), np.ones(4)
        rng = np.random.default_rng(0)
        out = mac_transmit([v1, v2], unit_fades(2), 0.0, rng)
        np.testing.assert_array_equal(out, v1 + v2)

    def test_fade_linearity(self):
        v = np.array([1.0, -2.0])
        out = mac_transmit([v, v], FadeDraw([2.0, 3.0], [0.0, 0.0]), 0.0, np.random.default_rng(0))
        np.testing.assert_allclose(out, 5 * v, rtol=1e-12)

    def test_superposition_linearity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=5)
        y = rng.normal(size=5)
        lhs = mac_transmit([2 * x, 3 * y], unit_fades(2), 0.0, rng)
        rhs = 2 * mac_transmit([x], unit_fades(1), 0.0, rng) + 3 * mac_transmit(
            [y], unit_fades(1), 0.0, rng
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_pure_noise_variance(self):
        # 1e5 coordinate draws of zero-input output ~ N(0, 1)
        rng = np.random.default_rng(2)
        d = 100_000
        out = mac_transmit([np.zeros(d)], unit_fades(1), 1.0, rng)
        var = out.var()
        se = np.sqrt(2.0 / d)  # SE of the sample variance of N(0,1)
        assert abs(var - 1.0) <= 3 * se
        assert abs(out.mean()) <= 3 / np.sqrt(d)

    def test_noise_independence_across_rounds(self):
        rng = np.random.default_rng(3)
        d = 10_000
        a = mac_transmit([np.zeros(d)], unit_fades(1), 1.0, rng)
        b = mac_transmit([np.zeros(d)], unit_fades(1), 1.0, rng)
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) <= 3 / np.sqrt(d)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mac_transmit([np.zeros(3), np.zeros(4)], unit_fades(2), 0.0, np.random.default_rng(0))


class TestDrawFading:
    def test_unit_family(self):
        cfg = ChannelConfig(noise_var=0.0)
        draw = draw_fading(cfg, 5, np.random.default_rng(0))
        np.testing.assert_array_equal(draw.magnitudes, np.ones(5))
        np.testing.assert_array_equal(draw.phases, np.zeros(5))

    def test_rayleigh_mean(self):
        cfg = ChannelConfig(noise_var=0.0, fading="rayleigh", fading_params=(1.0,))
        draw = draw_fading(cfg, 100_000, np.random.default_rng(1))
        expected = np.sqrt(np.pi / 2)
        se = draw.magnitudes.std(ddof=1) / np.sqrt(len(draw))
        assert abs(draw.magnitudes.mean() - expected) <= 3 * se

    def test_uniform_bounds_and_phase_range(self):
        cfg = ChannelConfig(noise_var=0.0, fading="uniform", fading_params=(0.5, 1.5))
        draw = draw_fading(cfg, 10_000, np.random.default_rng(2))
        assert draw.magnitudes.min() >= 0.5 and draw.magnitudes.max() <= 1.5
        assert draw.phases.min() >= -np.pi and draw.phases.max() <= np.pi

    def test_same_seed_identical(self):
        cfg = ChannelConfig(noise_var=0.0, fading="rayleigh", fading_params=(2.0,))
        a = draw_fading(cfg, 50, np.random.default_rng(7))
        b = draw_fading(cfg, 50, np.random.default_rng(7))
        np.testing.assert_array_equal(a.magnitudes, b.magnitudes)


class TestTruncatedInversion:
    def test_boundary_is_silent(self):
        assert truncated_inversion_precode(np.ones(3), 1.0, 0.0, 1.0, 1.0) is None
        assert truncated_inversion_precode(np.ones(3), 0.3, 0.0, 0.5, 1.0) is None

    def test_plugin_value(self):
        out = truncated_inversion_precode(np.ones(2), 1.0, 0.0, 0.5, 1.0)
        np.testing.assert_allclose(out, 0.5 * np.ones(2))

    def test_norm_never_amplified_beyond_sqrt_amp(self):
        update = np.array([3.0, 4.0])
        for h in np.linspace(0.61, 5.0, 50):
            out = truncated_inversion_precode(update, h, 0.3, 0.6, 2.0)
            assert np.linalg.norm(out) <= np.sqrt(2.0) * np.linalg.norm(update) + 1e-12


class TestAuditAndSnr:
    def test_audit_values(self):
        assert audit_power(np.zeros(4), 1.0) == 0.0
        assert audit_power(np.array([1.0, 0.0]), 1.0) == 1.0

    @given(st.floats(-20, 30), st.floats(0.01, 100))
    @settings(max_examples=50, deadline=None)
    def test_snr_definition(self, snr_db, power):
        assert snr_to_noise(snr_db, power) == pytest.approx(power / 10 ** (snr_db / 10))

    def test_snr_examples(self):
        assert snr_to_noise(0.0, 1.0) == pytest.approx(1.0)
        assert snr_to_noise(10.0, 1.0) == pytest.approx(0.1)
        assert snr_to_noise(10.0, 5.0) == pytest.approx(0.5)
