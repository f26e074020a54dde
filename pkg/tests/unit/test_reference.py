"""
Unit tests for the reference water/fat separation.
"""

import json
import math

import numpy as np
import pytest

from dxs_core.phantom import generate_dataset
from dxs_core.reference import (
    FLAG_BACKGROUND,
    ReferenceConfig,
    VarproBasis,
    field_candidates,
    foreground_mae,
    resolve_field_map,
    residual_curve,
    run_reference,
    separate,
    varpro_residual,
)
from dxs_core.signal_model import EchoSeries, VoxelModel, synthesize_echo, synthesize_series
from dxs_graph.errors import EmptyMaskError, RankDeficientBasisError, ShapeError


def odd_echo_vector(voxel, spectrum, acquisition):
    return np.array([synthesize_echo(voxel, n, spectrum, acquisition) for n in (1, 3, 5)])


def ambiguity_period(acquisition):
    return 2.0 * math.pi / acquisition.effective_spacing((1, 3, 5))


@pytest.mark.unit
class TestVarpro:
    """Tests for the projected residual."""

    def test_zero_at_true_field(self, spectrum, acquisition):
        """A noiseless voxel lies in the model subspace at its own field."""
        s = odd_echo_vector(VoxelModel(0.7, 0.3, phase0=0.4, omega=150.0), spectrum, acquisition)
        assert varpro_residual(s, 150.0, acquisition, spectrum) < 1e-18

    def test_positive_away_from_true_field(self, spectrum, acquisition):
        """A wrong field leaves a residual."""
        s = odd_echo_vector(VoxelModel(0.7, 0.3, omega=150.0), spectrum, acquisition)
        assert varpro_residual(s, 150.0 + 400.0, acquisition, spectrum) > 1e-6

    def test_periodic_in_field(self, spectrum, acquisition):
        """Shifting the field by one ambiguity period leaves the residual unchanged."""
        s = odd_echo_vector(VoxelModel(0.5, 0.5, omega=80.0), spectrum, acquisition)
        period = ambiguity_period(acquisition)
        r = varpro_residual(s, 500.0, acquisition, spectrum)
        assert varpro_residual(s, 500.0 + period, acquisition, spectrum) == pytest.approx(r, rel=1e-8, abs=1e-15)

    def test_sample_count_must_match_subset(self, spectrum, acquisition):
        """Five samples for the three-echo default subset is a shape error."""
        with pytest.raises(ShapeError):
            varpro_residual(np.ones(5), 0.0, acquisition, spectrum)

    def test_single_echo_is_rank_deficient(self, spectrum, acquisition):
        """One echo cannot separate water from fat."""
        with pytest.raises(RankDeficientBasisError):
            VarproBasis(acquisition, spectrum, (1,))

    def test_grid_spans_one_period(self, spectrum, acquisition):
        """Grid starts at -P/2 with step P/size."""
        basis = VarproBasis.for_subset(acquisition, spectrum, (1, 3, 5))
        grid = basis.grid(64)
        assert grid[0] == pytest.approx(-basis.period / 2.0)
        assert grid[1] - grid[0] == pytest.approx(basis.period / 64)


@pytest.mark.unit
class TestFieldCandidates:
    """Tests for local-minimum detection."""

    def test_sorted_minima(self):
        """Both local minima are found, best first; symmetric neighbours need no refinement."""
        curve = np.array([5, 4, 3, 2, 1, 2, 3, 4, 5, 4, 3, 0.5, 3, 4, 5, 5], dtype=float)
        omegas = np.arange(16, dtype=float) * 10.0
        candidates = field_candidates(curve, omegas)
        assert [c.omega for c in candidates] == [110.0, 40.0]
        assert [c.residual for c in candidates] == [0.5, 1.0]

    def test_max_candidates(self):
        """The list is truncated to max_candidates."""
        curve = np.array([5, 4, 3, 2, 1, 2, 3, 4, 5, 4, 3, 0.5, 3, 4, 5, 5], dtype=float)
        candidates = field_candidates(curve, np.arange(16, dtype=float), max_candidates=1)
        assert len(candidates) == 1
        assert candidates[0].omega == 11.0

    def test_constant_curve(self):
        """A flat curve yields one candidate at the first sample."""
        candidates = field_candidates(np.full(8, 2.0), np.linspace(-4.0, 3.0, 8))
        assert len(candidates) == 1
        assert candidates[0].omega == -4.0

    def test_non_finite_curve(self):
        """NaN residuals are rejected."""
        with pytest.raises(ValueError):
            field_candidates(np.array([1.0, np.nan, 2.0]), np.arange(3.0))

    def test_water_only_voxel(self, spectrum, acquisition):
        """The best candidate is within a tenth of a grid step of the true field."""
        s = odd_echo_vector(VoxelModel(1.0, 0.0, phase0=-0.6, omega=300.0), spectrum, acquisition)
        omegas, curve = residual_curve(s, acquisition, spectrum)
        best = field_candidates(curve, omegas)[0]
        period = ambiguity_period(acquisition)
        offset = (best.omega - 300.0 + period / 2.0) % period - period / 2.0
        assert abs(offset) < period / 64 * 0.1


@pytest.mark.unit
class TestResolveFieldMap:
    """Tests for coarse-to-fine candidate resolution."""

    def test_uniform_curves(self):
        """Identical per-voxel curves give a constant field at their minimum."""
        period = 2.0 * math.pi
        omegas = -math.pi + np.arange(32) * period / 32
        curves = np.broadcast_to(1.0 - np.cos(omegas - 1.0), (8, 8, 32)).copy()
        mask = np.ones((8, 8), dtype=bool)
        field = resolve_field_map(curves, mask, omegas, period)
        np.testing.assert_allclose(field.omega, 1.0, atol=0.02)
        assert not field.flags.any()
        assert field.converged

    def test_background_flags(self):
        """Voxels outside the mask carry FLAG_BACKGROUND and a zero field."""
        period = 2.0 * math.pi
        omegas = -math.pi + np.arange(16) * period / 16
        curves = np.broadcast_to(1.0 - np.cos(omegas), (4, 4, 16)).copy()
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True
        field = resolve_field_map(curves, mask, omegas, period, levels=1)
        assert (field.flags[~mask] == FLAG_BACKGROUND).all()
        assert not field.omega[~mask].any()

    def test_empty_mask(self):
        """Nothing to resolve: all background."""
        omegas = np.arange(8.0)
        field = resolve_field_map(np.ones((2, 2, 8)), np.zeros((2, 2)), omegas, 8.0)
        assert (field.flags == FLAG_BACKGROUND).all()

    def test_mask_shape(self):
        """Mask extents must match the curves."""
        with pytest.raises(ShapeError):
            resolve_field_map(np.ones((2, 2, 8)), np.ones((3, 2)), np.arange(8.0), 8.0)


@pytest.mark.unit
class TestSeparate:
    """Tests for full separation of noiseless slices."""

    def _slice(self, spectrum, acquisition, water, fat, phase0=0.3, field=250.0):
        return synthesize_series(water, fat, spectrum, acquisition, phase0=phase0, field=field)

    def test_pure_water(self, spectrum, acquisition):
        """Water-only foreground gives FF = 0 within 1e-6."""
        echoes = self._slice(spectrum, acquisition, np.ones((16, 16)), np.zeros((16, 16)))
        result = separate(echoes, spectrum=spectrum)
        assert result.ff.values.shape == (16, 16)
        assert np.abs(result.ff.values).max() < 1e-6

    def test_mixed_fat_fraction(self, spectrum, acquisition):
        """Two FF regions under one smooth field are recovered within half a point."""
        ff = np.where(np.arange(16)[None, :] < 8, 0.1, 0.45) * np.ones((16, 1))
        echoes = self._slice(spectrum, acquisition, 1.0 - ff, ff, field=-420.0)
        result = separate(echoes, spectrum=spectrum)
        assert np.abs(result.ff.values - ff).mean() < 0.005

    def test_global_phase_invariance(self, spectrum, acquisition):
        """Rotating every echo by the same phase leaves FF unchanged."""
        ff = np.full((8, 8), 0.3)
        echoes = self._slice(spectrum, acquisition, 1.0 - ff, ff)
        rotated = EchoSeries(echoes.data * np.exp(0.9j), acquisition)
        a = separate(echoes, spectrum=spectrum)
        b = separate(rotated, spectrum=spectrum)
        np.testing.assert_allclose(a.ff.values, b.ff.values, atol=1e-8)

    def test_scale_invariance(self, spectrum, acquisition):
        """Scaling the signal scales W and F but not FF."""
        ff = np.full((8, 8), 0.2)
        echoes = self._slice(spectrum, acquisition, 1.0 - ff, ff)
        scaled = EchoSeries(echoes.data * 3.0, acquisition)
        a = separate(echoes, spectrum=spectrum)
        b = separate(scaled, spectrum=spectrum)
        np.testing.assert_allclose(a.ff.values, b.ff.values, atol=1e-8)
        np.testing.assert_allclose(b.water, 3.0 * a.water, rtol=1e-8)

    def test_background_outside_object(self, spectrum, acquisition):
        """Zero-signal voxels are flagged and get FF = 0."""
        water = np.zeros((16, 16))
        water[4:12, 4:12] = 0.8
        fat = np.zeros((16, 16))
        fat[4:12, 4:12] = 0.2
        result = separate(self._slice(spectrum, acquisition, water, fat), spectrum=spectrum)
        assert result.background_count == 16 * 16 - 64
        assert not result.ff.values[:4].any()
        assert result.ff.values[8, 8] == pytest.approx(0.2, abs=1e-4)

    def test_volume_input(self, spectrum, acquisition):
        """[N, Z, H, W] input returns [Z, H, W] maps."""
        water = np.full((2, 8, 8), 0.9)
        fat = np.full((2, 8, 8), 0.1)
        echoes = synthesize_series(water, fat, spectrum, acquisition, field=100.0)
        result = separate(echoes, spectrum=spectrum)
        assert result.ff.values.shape == (2, 8, 8)
        np.testing.assert_allclose(result.ff.values, 0.1, atol=1e-4)

    def test_mask_shape_mismatch(self, spectrum, acquisition):
        """An explicit mask must match the image extents."""
        echoes = self._slice(spectrum, acquisition, np.ones((4, 4)), np.zeros((4, 4)))
        with pytest.raises(ShapeError):
            separate(echoes, mask=np.ones((4, 5), dtype=bool), spectrum=spectrum)

    def test_foreground_mae_needs_voxels(self, spectrum, acquisition):
        """An empty evaluation mask is an error."""
        echoes = self._slice(spectrum, acquisition, np.ones((4, 4)), np.zeros((4, 4)))
        result = separate(echoes, spectrum=spectrum)
        with pytest.raises(EmptyMaskError):
            foreground_mae(result, np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))

    def test_config_rejects_unknown_keys(self):
        """ReferenceConfig forbids extra fields."""
        with pytest.raises(ValueError):
            ReferenceConfig(lambda_=2.0)


@pytest.mark.unit
class TestRunReference:
    """Tests for the dataset driver."""

    def test_writes_maps_and_summary(self, small_phantom_config, tmp_path):
        """Every subject gets reference maps; summary.json aggregates the MAEs."""
        cfg = small_phantom_config.model_copy(update={"r2s_range": (0.0, 0.0)})
        dataset_dir = tmp_path / "dataset"
        manifest = generate_dataset(2, 3, cfg, dataset_dir)
        out_dir = tmp_path / "reference"
        summary = run_reference(dataset_dir, out_dir)

        assert [s["subject_id"] for s in summary["subjects"]] == manifest.subject_ids
        assert summary["subjects"][0]["echoes"] == [1, 3, 5]
        assert summary["mean_ff_mae"] == pytest.approx(np.mean([s["ff_mae"] for s in summary["subjects"]]))
        assert summary["mean_ff_mae"] < 0.02
        for subject_id in manifest.subject_ids:
            assert (out_dir / subject_id / "ff.dxt").is_file()
            assert (out_dir / subject_id / "flags.dxt").is_file()
        stored = json.loads((out_dir / "summary.json").read_text())
        assert stored["method"] == summary["method"]

    def test_custom_dispatch(self, tiny_dataset, tmp_path):
        """A dispatcher replaces in-process separation."""
        dataset_dir, manifest = tiny_dataset
        calls = []

        def dispatch(subject_id):
            calls.append(subject_id)
            return {"subject_id": subject_id, "ff_mae": 0.01}

        summary = run_reference(dataset_dir, tmp_path / "ref", dispatch=dispatch, workers=1)
        assert calls == manifest.subject_ids
        assert summary["max_ff_mae"] == pytest.approx(0.01)
