"""
Unit tests for the water/fat signal model and echo subsets.
"""

import math

import numpy as np
import pytest

from dxs_core.signal_model import (
    AcquisitionConfig,
    EchoSeries,
    EchoSubset,
    FatFractionMap,
    FatSpectrum,
    VoxelModel,
    benchmark_echo_configurations,
    clamp_ff,
    fat_modulation,
    normalize_input,
    reference_echo_subset,
    synthesize_echo,
    synthesize_series,
    to_channels,
    validate_echo_subset,
    water_fat_from_ff,
)
from dxs_graph.errors import EchoSubsetError, NonFiniteError, ShapeError


@pytest.mark.unit
class TestAcquisition:
    """Tests for the echo train configuration."""

    def test_default_echo_times(self, acquisition):
        """Five echoes starting at 1.37 ms, 0.95 ms apart."""
        np.testing.assert_allclose(acquisition.times, 1.37e-3 + 0.95e-3 * np.arange(5))

    def test_polarity_alternates(self, acquisition):
        """Odd echoes carry -theta, even echoes +theta."""
        assert [acquisition.polarity(n) for n in range(1, 6)] == [-1, 1, -1, 1, -1]

    def test_odd_echo_spacing(self, acquisition):
        """Odd echoes are spaced 1.9 ms apart."""
        assert acquisition.effective_spacing((1, 3, 5)) == pytest.approx(1.9e-3)

    def test_rejects_unknown_key(self):
        """extra='forbid' rejects unknown keys."""
        with pytest.raises(ValueError):
            AcquisitionConfig(field_strength=3.0)

    def test_rejects_non_increasing_times(self):
        """Echo times must increase strictly."""
        with pytest.raises(ValueError):
            AcquisitionConfig(n_echoes=3, echo_times=[1e-3, 1e-3, 2e-3])


@pytest.mark.unit
class TestFatSpectrum:
    """Tests for fat spectrum presets."""

    def test_default_sums_to_one(self, spectrum):
        """Six peaks with amplitudes summing to one."""
        assert spectrum.n_peaks == 6
        assert math.fsum(spectrum.amplitudes) == pytest.approx(1.0)

    def test_modulation_at_zero_is_one(self, spectrum, acquisition):
        """a(0) = sum of amplitudes = 1."""
        assert fat_modulation(spectrum, 0.0, acquisition) == pytest.approx(1.0 + 0j)

    def test_three_peak_preset(self):
        """Pairwise merge keeps total amplitude."""
        merged = FatSpectrum.preset("three_peak")
        assert merged.n_peaks == 3
        assert math.fsum(merged.amplitudes) == pytest.approx(1.0)

    def test_unknown_preset(self):
        """Unknown preset names are rejected."""
        with pytest.raises(ValueError):
            FatSpectrum.preset("seven_peak")

    def test_amplitudes_must_sum_to_one(self):
        """Unnormalized spectra are rejected."""
        with pytest.raises(ValueError):
            FatSpectrum(amplitudes=[0.5, 0.4], shifts_ppm=[-3.4, -2.6])

    def test_negative_time_rejected(self, spectrum, acquisition):
        """Echo times before excitation are invalid."""
        with pytest.raises(ValueError):
            fat_modulation(spectrum, -1e-3, acquisition)


@pytest.mark.unit
class TestSynthesis:
    """Tests for the forward model."""

    def test_pure_water_at_rest(self, spectrum, acquisition):
        """W=1, F=0 with no phase, field, decay or polarity error gives S_n = 1."""
        for n in range(1, 6):
            assert synthesize_echo(VoxelModel(1.0, 0.0), n, spectrum, acquisition) == pytest.approx(1.0 + 0j)

    def test_global_phase_rotates_all_echoes(self, spectrum, acquisition):
        """phi0 multiplies every echo by e^{i phi0}."""
        base = synthesize_echo(VoxelModel(0.6, 0.4), 2, spectrum, acquisition)
        rotated = synthesize_echo(VoxelModel(0.6, 0.4, phase0=0.7), 2, spectrum, acquisition)
        assert rotated == pytest.approx(base * np.exp(0.7j))

    def test_decay_reduces_magnitude(self, spectrum, acquisition):
        """R2* > 0 reduces |S_n| by exp(-R2* t_n)."""
        t = acquisition.echo_times[2]
        clean = abs(synthesize_echo(VoxelModel(1.0, 0.0), 3, spectrum, acquisition))
        decayed = abs(synthesize_echo(VoxelModel(1.0, 0.0, r2s=50.0), 3, spectrum, acquisition))
        assert decayed == pytest.approx(clean * math.exp(-50.0 * t))

    def test_polarity_sign(self, spectrum, acquisition):
        """theta enters as (-1)^n theta."""
        theta = 0.1j
        s1 = synthesize_echo(VoxelModel(1.0, 0.0, theta=theta), 1, spectrum, acquisition)
        s2 = synthesize_echo(VoxelModel(1.0, 0.0, theta=theta), 2, spectrum, acquisition)
        assert np.angle(s1) == pytest.approx(-0.1)
        assert np.angle(s2) == pytest.approx(0.1)

    def test_echo_index_out_of_range(self, spectrum, acquisition):
        """Echo 0 and echo N+1 do not exist."""
        with pytest.raises(IndexError):
            synthesize_echo(VoxelModel(1.0, 0.0), 0, spectrum, acquisition)
        with pytest.raises(IndexError):
            synthesize_echo(VoxelModel(1.0, 0.0), 6, spectrum, acquisition)

    def test_series_matches_voxel_model(self, spectrum, acquisition):
        """The vectorized model agrees with synthesize_echo voxel by voxel."""
        water = np.array([[0.9, 0.2]])
        fat = np.array([[0.1, 0.8]])
        series = synthesize_series(water, fat, spectrum, acquisition, phase0=0.3, field=120.0, r2s=30.0,
                                   theta=0.05j)
        assert series.data.shape == (5, 1, 2)
        for n in range(1, 6):
            voxel = VoxelModel(0.2, 0.8, phase0=0.3, omega=120.0, r2s=30.0, theta=0.05j)
            assert series.data[n - 1, 0, 1] == pytest.approx(synthesize_echo(voxel, n, spectrum, acquisition))

    def test_negative_amplitude_rejected(self):
        """Water, fat and R2* must be non-negative."""
        with pytest.raises(ValueError):
            VoxelModel(-0.1, 0.5)


@pytest.mark.unit
class TestEchoSubsets:
    """Tests for echo subset parsing and validation."""

    def test_parse_and_indices(self):
        """family:count expands to 1-based indices."""
        assert EchoSubset.parse("all:5").indices == (1, 2, 3, 4, 5)
        assert EchoSubset.parse("odd:3").indices == (1, 3, 5)
        assert EchoSubset.parse("even:2").indices == (2, 4)

    def test_parse_rejects_garbage(self):
        """Missing colon or non-integer count raise EchoSubsetError."""
        with pytest.raises(EchoSubsetError):
            EchoSubset.parse("odd")
        with pytest.raises(EchoSubsetError):
            EchoSubset.parse("odd:three")

    def test_validate_against_echo_count(self):
        """odd:3 needs five echoes."""
        with pytest.raises(EchoSubsetError):
            EchoSubset("odd", 3).validate(4)

    @pytest.mark.parametrize("indices,label", [
        ((1,), "all:1"),
        ((1, 2, 3), "all:3"),
        ((1, 3), "odd:2"),
        ((2, 4), "even:2"),
    ])
    def test_validate_legal_lists(self, indices, label):
        """Legal index lists map to their family label."""
        assert validate_echo_subset(indices, 5).label == label

    @pytest.mark.parametrize("indices", [(2, 3), (1, 4), (3, 5), (), (0, 1), (1, 2, 3, 4, 5, 6)])
    def test_validate_illegal_lists(self, indices):
        """Gaps, wrong starts, empty lists and out-of-range indices are rejected."""
        with pytest.raises(EchoSubsetError):
            validate_echo_subset(indices, 5)

    def test_reference_subset_is_all_odd(self):
        """The reference uses every odd echo."""
        assert reference_echo_subset(5).indices == (1, 3, 5)

    def test_benchmark_configurations(self):
        """Five echoes give 5 + 3 + 2 legal subsets."""
        labels = [s.label for s in benchmark_echo_configurations(5)]
        assert len(labels) == 10
        assert "odd:3" in labels and "even:2" in labels


@pytest.mark.unit
class TestFatFraction:
    """Tests for FF maps and water/fat recovery."""

    def test_clamp(self):
        """Values outside [0, 1] are clamped."""
        ff = clamp_ff([-0.2, 0.3, 1.4])
        np.testing.assert_array_equal(ff.values, [0.0, 0.3, 1.0])

    def test_clamp_rejects_nan(self):
        """NaN input raises NonFiniteError."""
        with pytest.raises(NonFiniteError):
            clamp_ff([0.1, np.nan])

    def test_map_range_invariant(self):
        """FatFractionMap refuses values above one."""
        with pytest.raises(ValueError):
            FatFractionMap(np.array([1.5]))

    def test_water_fat_from_true_ff(self, spectrum, acquisition):
        """With the true FF and no decay, W and F are recovered exactly."""
        water = np.array([[0.7, 0.0, 0.4]])
        fat = np.array([[0.3, 1.0, 0.4]])
        series = synthesize_series(water, fat, spectrum, acquisition, phase0=1.1, field=80.0)
        ff = fat / (water + fat)
        images = water_fat_from_ff(series, ff, spectrum, EchoSubset("all", 5))
        np.testing.assert_allclose(images.water, water, atol=1e-12)
        np.testing.assert_allclose(images.fat, fat, atol=1e-12)
        assert images.flagged_count == 0

    def test_water_fat_shape_mismatch(self, spectrum, acquisition):
        """FF map extents must match the echo images."""
        series = synthesize_series(np.ones((2, 2)), np.zeros((2, 2)), spectrum, acquisition)
        with pytest.raises(ShapeError):
            water_fat_from_ff(series, np.zeros((3, 2)), spectrum, (1, 2))


@pytest.mark.unit
class TestNetworkInput:
    """Tests for normalization and channel layout."""

    def test_normalize_scales_largest_component_to_one(self, acquisition):
        """The largest |re| or |im| becomes exactly 1 and the divisor is recorded."""
        data = np.zeros((5, 2, 2), dtype=np.complex128)
        data[0, 0, 0] = 3.0 - 8.0j
        data[2, 1, 1] = 4.0 + 1.0j
        normalized = normalize_input(EchoSeries(data, acquisition))
        assert normalized.scale == 8.0
        assert max(np.abs(normalized.data.real).max(), np.abs(normalized.data.imag).max()) == 1.0

    def test_normalize_all_zero(self, acquisition):
        """An all-zero scan is returned unchanged."""
        normalized = normalize_input(EchoSeries(np.zeros((5, 2, 2)), acquisition))
        assert normalized.scale == 1.0
        assert not normalized.data.any()

    def test_channel_interleaving(self, acquisition):
        """Channels are (re_1, im_1, re_3, im_3, ...) for odd:2."""
        data = np.zeros((5, 1, 1), dtype=np.complex128)
        for n in range(5):
            data[n] = (n + 1) + 10j * (n + 1)
        channels = to_channels(EchoSeries(data, acquisition), EchoSubset("odd", 2), dtype=np.float64)
        np.testing.assert_array_equal(channels.data[:, 0, 0], [1.0, 10.0, 3.0, 30.0])

    def test_channels_need_single_slice(self, acquisition):
        """Volumes must be split into slices first."""
        with pytest.raises(ShapeError):
            to_channels(EchoSeries(np.zeros((5, 2, 2, 2)), acquisition), (1,))

    def test_series_rank_check(self, acquisition):
        """Echo count must match the acquisition."""
        with pytest.raises(ShapeError):
            EchoSeries(np.zeros((4, 2, 2)), acquisition)
