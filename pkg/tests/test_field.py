"""Voxel data model: beam parameters, channels, joining, statistics,
kerma conversion, and dataset splitting."""

import json
import math

import numpy as np
import pytest

from srf import spectra
from srf.errors import (AllZeroFluence, DimensionMismatch, EmptyDataset,
                        InvalidField, InvalidSpectrum, NonUnitDirection,
                        TooFewFiles)
from srf.field import (BeamParams, ConeBeam, DatasetStats, FieldChannel,
                       KermaCoefficients, RadiationField, RectBeam,
                       beam_shape_from_json, compute_stats, dynamic_range_db,
                       fluence_histogram, gini, kerma_grid, split_dataset,
                       to_kerma, voxel_centers_phys, voxel_centers_unit)
from srf.synth import gen_spectrum


def unit_spectrum():
    return gen_spectrum(100.0, 2.5, 0.0)


def make_beam(direction=(0.0, 0.0, 1.0), distance=1.0):
    return BeamParams(np.asarray(direction, dtype=float), distance,
                      unit_spectrum(), ConeBeam(10.0))


# --- BeamParams -------------------------------------------------------------


def test_beam_params_requires_unit_direction():
    with pytest.raises(NonUnitDirection):
        BeamParams(np.array([1.0, 1.0, 0.0]), 1.0, unit_spectrum(),
                   ConeBeam(10.0))


def test_beam_params_requires_positive_distance():
    with pytest.raises(InvalidField):
        make_beam(distance=0.0)


def test_beam_params_validates_spectrum():
    with pytest.raises(InvalidSpectrum):
        BeamParams(np.array([0.0, 0.0, 1.0]), 1.0, np.ones(32), ConeBeam(10.0))
    bad = unit_spectrum().copy()
    bad[3] = -0.1
    with pytest.raises(InvalidSpectrum):
        BeamParams(np.array([0.0, 0.0, 1.0]), 1.0, bad, ConeBeam(10.0))


def test_beam_params_from_angles_is_unit():
    b = BeamParams.from_angles(0.3, 1.1, 0.8, unit_spectrum(), RectBeam(0.4, 0.3))
    assert np.linalg.norm(b.direction) == pytest.approx(1.0, abs=1e-12)
    assert b.direction[2] == pytest.approx(math.cos(1.1))


def test_beam_params_json_round_trip():
    b = make_beam(direction=(0.0, 1.0, 0.0), distance=0.6)
    again = BeamParams.from_json(json.loads(json.dumps(b.to_json())))
    np.testing.assert_allclose(again.direction, b.direction, atol=1e-15)
    assert again.tube_distance == b.tube_distance
    np.testing.assert_allclose(again.tube_spectrum, b.tube_spectrum, atol=1e-15)
    assert isinstance(again.beam_shape, ConeBeam)
    assert again.beam_shape.opening_angle_deg == 10.0


def test_beam_shape_json_round_trip():
    rect = beam_shape_from_json(RectBeam(0.4, 0.3).to_json())
    assert isinstance(rect, RectBeam)
    assert (rect.width_m, rect.height_m) == (0.4, 0.3)
    cone = beam_shape_from_json(ConeBeam(7.5).to_json())
    assert isinstance(cone, ConeBeam)


def test_beam_arrays_are_immutable():
    b = make_beam()
    with pytest.raises(ValueError):
        b.tube_spectrum[0] = 1.0


# --- FieldChannel / RadiationField ------------------------------------------


def channel_for(dims, fill=1.0):
    flu = np.full(dims, fill, dtype=np.float64)
    spec = np.zeros(dims + (32,))
    spec[..., 4] = 1.0
    return FieldChannel(flu, spec, np.zeros(dims))


def test_channel_stores_float32():
    ch = channel_for((2, 2, 2))
    assert ch.fluence.dtype == np.float32
    assert ch.spectra.dtype == np.float32
    assert ch.rel_error.dtype == np.float32


def test_channel_rejects_non_unit_spectra():
    flu = np.ones((2, 2, 2))
    spec = np.full((2, 2, 2, 32), 0.5)
    with pytest.raises(InvalidSpectrum):
        FieldChannel(flu, spec, np.zeros((2, 2, 2)))


def test_channel_allows_zero_spectrum_at_zero_fluence():
    flu = np.zeros((2, 2, 2))
    flu[0, 0, 0] = 1.0
    spec = np.zeros((2, 2, 2, 32))
    spec[0, 0, 0, 7] = 1.0
    FieldChannel(flu, spec, np.zeros((2, 2, 2)))   # must not raise


def test_field_rejects_mismatched_channel_dims():
    with pytest.raises(DimensionMismatch):
        RadiationField((2, 2, 2), (0.1, 0.1, 0.1),
                       {"beam": channel_for((3, 2, 2))},
                       np.zeros((2, 2, 2), dtype=bool), make_beam())


def test_joined_weights_spectra_by_fluence():
    dims = (2, 2, 2)
    flu_a = np.zeros(dims); flu_a[0, 0, 0] = 3.0
    spec_a = np.zeros(dims + (32,)); spec_a[..., 0] = 1.0
    flu_b = np.zeros(dims); flu_b[0, 0, 0] = 1.0
    spec_b = np.zeros(dims + (32,)); spec_b[..., 1] = 1.0
    f = RadiationField(dims, (0.1,) * 3,
                       {"beam": FieldChannel(flu_a, spec_a, np.zeros(dims)),
                        "scatter": FieldChannel(flu_b, spec_b, np.zeros(dims))},
                       np.zeros(dims, dtype=bool), make_beam())
    flu, spec = f.joined()
    assert flu[0, 0, 0] == pytest.approx(4.0)
    assert spec[0, 0, 0, 0] == pytest.approx(0.75)
    assert spec[0, 0, 0, 1] == pytest.approx(0.25)
    # Zero-fluence voxels fall back to a uniform histogram.
    np.testing.assert_allclose(spec[1, 1, 1], 1.0 / 32.0)
    np.testing.assert_allclose(spec.sum(axis=-1), 1.0, atol=1e-12)


def test_channel_lookup_errors():
    f = RadiationField((2, 2, 2), (0.1,) * 3, {"beam": channel_for((2, 2, 2))},
                       np.zeros((2, 2, 2), dtype=bool), make_beam())
    assert f.channel("beam") is f.channels["beam"]
    with pytest.raises(InvalidField):
        f.channel("scatter")


# --- voxel centers -----------------------------------------------------------


def test_voxel_centers_unit_layout():
    c = voxel_centers_unit((2, 3, 4))
    assert c.shape == (24, 3)
    np.testing.assert_allclose(c[0], [0.25, 1.0 / 6.0, 0.125])
    # C-order: the last axis (z) advances fastest.
    np.testing.assert_allclose(c[1] - c[0], [0.0, 0.0, 0.25])
    grid = c[:, 2].reshape(2, 3, 4)
    np.testing.assert_allclose(grid[0, 0], [0.125, 0.375, 0.625, 0.875])


def test_voxel_centers_phys_centered_on_isocenter():
    c = voxel_centers_phys((4, 4, 4), (0.25, 0.25, 0.25))
    np.testing.assert_allclose(c.mean(axis=0), 0.0, atol=1e-15)
    assert c[:, 0].max() == pytest.approx(0.375)


# --- statistics --------------------------------------------------------------


def test_gini_frozen_values():
    assert gini(np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx(0.25)
    assert gini(np.array([0.0, 0.0, 1.0, 1.0])) == pytest.approx(0.5)
    assert gini(np.full(10, 3.7)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(AllZeroFluence):
        gini(np.zeros(5))


def test_dynamic_range_ignores_zeros():
    assert dynamic_range_db(np.array([0.0, 1e-3, 10.0])) == pytest.approx(40.0)
    with pytest.raises(AllZeroFluence):
        dynamic_range_db(np.zeros(3))


def test_compute_stats_fields(small_field):
    stats = compute_stats([small_field])
    assert isinstance(stats, DatasetStats)
    assert stats.n_fields == 1
    assert stats.n_voxels == 512
    assert stats.mean_angle_deg == pytest.approx(180.0)   # direction -z
    assert stats.std_distance_m == 0.0
    assert stats.dr_db > 0.0
    assert 0.0 < stats.gini < 1.0
    payload = stats.to_json()
    assert set(payload) == set(DatasetStats.__dataclass_fields__)


def test_compute_stats_channel_selector(small_field):
    both = compute_stats([small_field], channels="both")
    beam = compute_stats([small_field], channels="beam")
    scatter = compute_stats([small_field], channels="scatter")
    assert beam.n_fields == scatter.n_fields == 1
    assert both.dr_db >= max(beam.dr_db, scatter.dr_db) - 1e-9
    with pytest.raises(EmptyDataset):
        compute_stats([])
    with pytest.raises(InvalidField):
        compute_stats([small_field], channels="primary")


def test_fluence_histogram_counts(small_field):
    h = fluence_histogram(small_field, bins=20)
    assert h.counts.sum() == 2 * 512         # both channels pooled
    assert h.bin_edges.shape == (21,)
    assert h.bin_edges[0] == 0.0 and h.bin_edges[-1] == 1.0
    cut = fluence_histogram(small_field, lower_cut=0.5, bins=10)
    assert cut.counts.sum() <= h.counts.sum()
    assert cut.bin_edges[0] == 0.5


# --- kerma --------------------------------------------------------------------


def test_kerma_grid_hand_value():
    flu = np.zeros((2, 2, 2))
    flu[0, 0, 0] = 2.0
    spec = np.zeros((2, 2, 2, 32))
    spec[..., 0] = 1.0
    k = kerma_grid(flu, spec, KermaCoefficients.unit())
    e0 = spectra.bin_midpoints(32)[0]
    assert k[0, 0, 0] == pytest.approx(2.0 * e0)
    assert k[1, 1, 1] == 0.0


def test_kerma_grid_shape_check():
    with pytest.raises(DimensionMismatch):
        kerma_grid(np.ones((2, 2, 2)), np.ones((2, 2, 2, 31)) / 31,
                   KermaCoefficients.unit())


def test_kerma_coefficients_validation():
    with pytest.raises(DimensionMismatch):
        KermaCoefficients(np.ones(31))
    with pytest.raises(InvalidField):
        KermaCoefficients(np.zeros(32))
    assert KermaCoefficients.bundled_air().values.shape == (32,)
    assert np.all(KermaCoefficients.bundled_air().values > 0.0)


def test_kerma_coefficients_from_text(tmp_path):
    path = tmp_path / "coeffs.txt"
    table = np.column_stack([spectra.bin_midpoints(32), np.ones(32)])
    np.savetxt(path, table)
    np.testing.assert_allclose(KermaCoefficients.from_text(path).values, 1.0)


def test_to_kerma_sums_channels(small_field):
    coeffs = KermaCoefficients.bundled_air()
    total = to_kerma(small_field, coeffs)
    parts = (to_kerma(small_field, coeffs, channels="beam")
             + to_kerma(small_field, coeffs, channels="scatter"))
    np.testing.assert_allclose(total, parts, rtol=1e-12)
    assert total.max() > 0.0


# --- split -------------------------------------------------------------------


def test_split_sizes_and_disjointness():
    paths = [f"f{i:03d}.srf" for i in range(20)]
    train, val, test = split_dataset(paths, seed=7)
    assert len(val) == len(test) == 3
    assert len(train) == 14
    assert set(train) | set(val) | set(test) == set(paths)
    assert not (set(train) & set(val)) and not (set(val) & set(test))


def test_split_is_order_independent_and_seeded():
    paths = [f"f{i:03d}.srf" for i in range(10)]
    a = split_dataset(paths, seed=3)
    b = split_dataset(list(reversed(paths)), seed=3)
    assert a == b
    c = split_dataset(paths, seed=4)
    assert a != c


def test_split_minimum_counts():
    train, val, test = split_dataset(["a", "b", "c"], seed=0)
    assert len(train) == len(val) == len(test) == 1
    with pytest.raises(TooFewFiles):
        split_dataset(["a", "b"], seed=0)
