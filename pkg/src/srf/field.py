"""Voxel radiation-field data model, dataset statistics, kerma conversion.

A `RadiationField` is a voxel grid centered on the isocenter holding one
`FieldChannel` per named channel (by convention ``beam`` for the direct
beam and ``scatter`` for the scattered field), a boolean geometry
occupancy grid, and the `BeamParams` that produced it.  Per-voxel arrays
are stored float32, exactly as serialized, so container round-trips are
bit identical; numerical work upcasts to float64.

All types are immutable after construction (arrays are marked read-only)
and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import spectra
from .errors import (AllZeroFluence, DimensionMismatch, EmptyDataset,
                     InvalidField, InvalidSpectrum, NonUnitDirection,
                     TooFewFiles)

SPECTRUM_SUM_TOL = 1e-6
DIRECTION_TOL = 1e-9


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ConeBeam:
    """Cone beam; `opening_angle_deg` is the full opening angle."""
    opening_angle_deg: float

    def to_json(self) -> dict:
        return {"type": "cone", "opening_angle_deg": self.opening_angle_deg}


@dataclass(frozen=True)
class RectBeam:
    """Rectangular (pyramid) beam collimated to width x height at the
    isocenter plane, in meters."""
    width_m: float
    height_m: float

    def to_json(self) -> dict:
        return {"type": "rect", "width_m": self.width_m, "height_m": self.height_m}


def beam_shape_from_json(obj: dict):
    kind = obj.get("type")
    if kind == "cone":
        return ConeBeam(float(obj["opening_angle_deg"]))
    if kind == "rect":
        return RectBeam(float(obj["width_m"]), float(obj["height_m"]))
    raise InvalidField(f"unknown beam shape {kind!r}")


@dataclass(frozen=True)
class BeamParams:
    """X-ray tube setup: unit beam direction (tube -> isocenter), tube
    distance from the isocenter (m), raw tube output spectrum (150 bins of
    1 keV), and the beam collimation shape."""

    direction: np.ndarray
    tube_distance: float
    tube_spectrum: np.ndarray
    beam_shape: ConeBeam | RectBeam

    def __post_init__(self):
        direction = _frozen(self.direction, np.float64)
        spectrum = _frozen(self.tube_spectrum, np.float64)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "tube_spectrum", spectrum)
        if direction.shape != (3,):
            raise DimensionMismatch("direction must be a 3-vector")
        if abs(float(np.linalg.norm(direction)) - 1.0) > DIRECTION_TOL:
            raise NonUnitDirection(
                f"direction norm {np.linalg.norm(direction)!r} not 1 +/- {DIRECTION_TOL}")
        if spectrum.shape != (spectra.TUBE_BINS,):
            raise InvalidSpectrum(
                f"tube spectrum must have {spectra.TUBE_BINS} bins, got {spectrum.shape}")
        if np.any(spectrum < 0.0):
            raise InvalidSpectrum("tube spectrum bins must be non-negative")
        if self.tube_distance <= 0.0:
            raise InvalidField("tube_distance must be positive")

    @staticmethod
    def from_angles(phi: float, theta: float, tube_distance: float,
                    tube_spectrum: np.ndarray,
                    beam_shape: ConeBeam | RectBeam) -> "BeamParams":
        """Build from spherical angles (radians): phi azimuth, theta polar."""
        d = np.array([math.sin(theta) * math.cos(phi),
                      math.sin(theta) * math.sin(phi),
                      math.cos(theta)])
        d /= np.linalg.norm(d)
        return BeamParams(d, tube_distance, tube_spectrum, beam_shape)

    def to_json(self) -> dict:
        return {"direction": self.direction.tolist(),
                "tube_distance": float(self.tube_distance),
                "beam_shape": self.beam_shape.to_json(),
                "tube_spectrum": self.tube_spectrum.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "BeamParams":
        return BeamParams(np.array(obj["direction"], dtype=np.float64),
                          float(obj["tube_distance"]),
                          np.array(obj["tube_spectrum"], dtype=np.float64),
                          beam_shape_from_json(obj["beam_shape"]))


@dataclass(frozen=True)
class FieldChannel:
    """Per-voxel fluence (photons per primary per volume), 32-bin spectrum
    histograms, and relative statistical error."""

    fluence: np.ndarray     # (nx, ny, nz) float32, >= 0
    spectra: np.ndarray     # (nx, ny, nz, 32) float32, rows sum to 1 where fluence > 0
    rel_error: np.ndarray   # (nx, ny, nz) float32, >= 0

    def __post_init__(self):
        object.__setattr__(self, "fluence", _frozen(self.fluence, np.float32))
        object.__setattr__(self, "spectra", _frozen(self.spectra, np.float32))
        object.__setattr__(self, "rel_error", _frozen(self.rel_error, np.float32))
        if self.fluence.ndim != 3:
            raise DimensionMismatch("fluence must be a 3D grid")
        dims = self.fluence.shape
        if self.spectra.shape != dims + (spectra.FIELD_BINS,):
            raise DimensionMismatch(
                f"spectra shape {self.spectra.shape} does not match grid {dims}")
        if self.rel_error.shape != dims:
            raise DimensionMismatch(
                f"rel_error shape {self.rel_error.shape} does not match grid {dims}")
        if np.any(self.fluence < 0.0):
            raise InvalidField("fluence must be non-negative")
        if np.any(self.rel_error < 0.0):
            raise InvalidField("rel_error must be non-negative")
        if np.any(self.spectra < 0.0):
            raise InvalidSpectrum("voxel spectra must be non-negative")
        sums = self.spectra.astype(np.float64).sum(axis=-1)
        active = self.fluence > 0.0
        if np.any(np.abs(sums[active] - 1.0) > SPECTRUM_SUM_TOL):
            worst = float(np.abs(sums[active] - 1.0).max())
            raise InvalidSpectrum(
                f"active-voxel spectra must sum to 1 +/- {SPECTRUM_SUM_TOL} "
                f"(worst deviation {worst:.3e})")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.fluence.shape


@dataclass(frozen=True)
class RadiationField:
    """Voxel grid of radiation channels plus geometry and beam metadata."""

    dims: tuple[int, int, int]
    voxel_extent: tuple[float, float, float]   # meters per voxel, per axis
    channels: dict[str, FieldChannel]
    geometry: np.ndarray                       # (nx, ny, nz) bool occupancy
    meta: BeamParams

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        extent = tuple(float(e) for e in self.voxel_extent)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_extent", extent)
        object.__setattr__(self, "channels", dict(self.channels))
        object.__setattr__(self, "geometry", _frozen(self.geometry, np.bool_))
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise DimensionMismatch(f"dims must be three positive counts, got {dims}")
        if len(extent) != 3 or any(e <= 0.0 for e in extent):
            raise InvalidField(f"voxel extent must be positive, got {extent}")
        if not self.channels:
            raise InvalidField("field needs at least one channel")
        for name, ch in self.channels.items():
            if ch.dims != dims:
                raise DimensionMismatch(
                    f"channel {name!r} dims {ch.dims} do not match field dims {dims}")
        if self.geometry.shape != dims:
            raise DimensionMismatch(
                f"geometry dims {self.geometry.shape} do not match field dims {dims}")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def channel(self, name: str) -> FieldChannel:
        try:
            return self.channels[name]
        except KeyError:
            raise InvalidField(f"field has no channel {name!r}") from None

    def joined(self) -> tuple[np.ndarray, np.ndarray]:
        """Sum channels into one float64 (fluence, spectra) pair.

        The joined spectrum is the fluence-weighted mixture of the channel
        spectra; voxels with zero total fluence get a uniform histogram so
        downstream losses stay defined.
        """
        flu = np.zeros(self.dims, dtype=np.float64)
        spec_mass = np.zeros(self.dims + (spectra.FIELD_BINS,), dtype=np.float64)
        for ch in self.channels.values():
            f = ch.fluence.astype(np.float64)
            flu += f
            spec_mass += f[..., None] * ch.spectra.astype(np.float64)
        spec = np.full_like(spec_mass, 1.0 / spectra.FIELD_BINS)
        active = flu > 0.0
        spec[active] = spec_mass[active] / flu[active, None]
        return flu, spec


def voxel_centers_unit(dims: tuple[int, int, int]) -> np.ndarray:
    """Voxel centers in the normalized unit cube, shape (N, 3).

    Rows enumerate the grid in C order of (nx, ny, nz), so `values.reshape(dims)`
    with numpy defaults maps row i back to its voxel.
    """
    nx, ny, nz = dims
    gx = (np.arange(nx) + 0.5) / nx
    gy = (np.arange(ny) + 0.5) / ny
    gz = (np.arange(nz) + 0.5) / nz
    xx, yy, zz = np.meshgrid(gx, gy, gz, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def voxel_centers_phys(dims: tuple[int, int, int],
                       voxel_extent: tuple[float, float, float]) -> np.ndarray:
    """Voxel centers in meters, grid centered on the isocenter; (N, 3)."""
    unit = voxel_centers_unit(dims)
    span = np.asarray(dims, dtype=np.float64) * np.asarray(voxel_extent, dtype=np.float64)
    return (unit - 0.5) * span


@dataclass(frozen=True)
class Histogram:
    """Fluence histogram: `bin_edges` has one more entry than `counts`."""
    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bin_edges", _frozen(self.bin_edges, np.float64))
        object.__setattr__(self, "counts", _frozen(self.counts, np.int64))


@dataclass(frozen=True)
class DatasetStats:
    """Whole-dataset statistics: dynamic range (dB), Gini coefficient of
    the pooled voxel fluences, and mean +/- std of per-field tube spectrum
    mean/peak energy, tube distance, and beam polar angle."""

    dr_db: float
    gini: float
    mean_energy_kev: float
    std_energy_kev: float
    peak_energy_kev: float
    std_peak_energy_kev: float
    mean_distance_m: float
    std_distance_m: float
    mean_angle_deg: float
    std_angle_deg: float
    n_fields: int
    n_voxels: int

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


_CHANNEL_CHOICES = ("both", "beam", "scatter")


def _selected_fluences(f: RadiationField, channels: str) -> list[np.ndarray]:
    if channels == "both":
        names = list(f.channels)
    elif channels in f.channels:
        names = [channels]
    else:
        raise InvalidField(f"channel selector must be one of {_CHANNEL_CHOICES}")
    return [f.channels[n].fluence.astype(np.float64) for n in names]


def gini(values: np.ndarray) -> float:
    """Gini coefficient over non-negative values (0 = perfectly uniform)."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.size
    mu = x.mean()
    if n == 0 or mu == 0.0:
        raise AllZeroFluence("Gini undefined on an all-zero or empty set")
    i = np.arange(1, n + 1, dtype=np.float64)
    return float(np.sum(x * (2.0 * i - n - 1.0)) / (n * n * mu))


def dynamic_range_db(values: np.ndarray) -> float:
    """10*log10(max/min) over the strictly positive entries."""
    x = np.asarray(values, dtype=np.float64).ravel()
    pos = x[x > 0.0]
    if pos.size == 0:
        raise AllZeroFluence("dynamic range undefined without positive fluences")
    return float(10.0 * np.log10(pos.max() / pos.min()))


def compute_stats(fields, channels: str = "both") -> DatasetStats:
    """Pool voxel fluences of the selected channels across `fields` and
    evaluate DR_dB / Gini plus per-field beam parameter statistics."""
    fields = list(fields)
    if not fields:
        raise EmptyDataset("compute_stats needs at least one field")
    pooled = np.concatenate(
        [arr.ravel() for f in fields for arr in _selected_fluences(f, channels)])
    stats_pairs = {}
    mean_e = [spectra.mean_energy(f.meta.tube_spectrum) for f in fields]
    peak_e = [spectra.peak_energy(f.meta.tube_spectrum) for f in fields]
    dist = [f.meta.tube_distance for f in fields]
    angle = [math.degrees(math.acos(np.clip(f.meta.direction[2], -1.0, 1.0)))
             for f in fields]
    for key, vals in (("energy_kev", mean_e), ("peak_energy_kev", peak_e),
                      ("distance_m", dist), ("angle_deg", angle)):
        arr = np.asarray(vals, dtype=np.float64)
        stats_pairs[key] = (float(arr.mean()), float(arr.std()))
    return DatasetStats(
        dr_db=dynamic_range_db(pooled),
        gini=gini(pooled),
        mean_energy_kev=stats_pairs["energy_kev"][0],
        std_energy_kev=stats_pairs["energy_kev"][1],
        peak_energy_kev=stats_pairs["peak_energy_kev"][0],
        std_peak_energy_kev=stats_pairs["peak_energy_kev"][1],
        mean_distance_m=stats_pairs["distance_m"][0],
        std_distance_m=stats_pairs["distance_m"][1],
        mean_angle_deg=stats_pairs["angle_deg"][0],
        std_angle_deg=stats_pairs["angle_deg"][1],
        n_fields=len(fields),
        n_voxels=sum(f.n_voxels for f in fields),
    )


def fluence_histogram(f: RadiationField, channels: str = "both",
                      lower_cut: float = 0.0, bins: int = 50) -> Histogram:
    """Histogram of max-normalized voxel fluences over [lower_cut, 1].

    Voxels below the cut are dropped, so the counts sum to the number of
    voxels whose normalized fluence is >= lower_cut.
    """
    if bins < 1:
        raise InvalidField("bins must be >= 1")
    if not 0.0 <= lower_cut <= 1.0:
        raise InvalidField("lower_cut must lie in [0, 1]")
    vals = np.concatenate([a.ravel() for a in _selected_fluences(f, channels)])
    peak = vals.max() if vals.size else 0.0
    if peak <= 0.0:
        raise AllZeroFluence("histogram undefined without positive fluence")
    norm = vals / peak
    edges = np.linspace(lower_cut, 1.0, bins + 1)
    counts, _ = np.histogram(norm[norm >= lower_cut], bins=edges)
    return Histogram(edges, counts)


@dataclass(frozen=True)
class KermaCoefficients:
    """Mass energy-absorption coefficients for air, one per spectrum-bin
    midpoint (cm^2/g).  Kerma values are used only in ratios, so the
    absolute scale is irrelevant to every reported metric."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        if self.values.shape != (spectra.FIELD_BINS,):
            raise DimensionMismatch(
                f"need {spectra.FIELD_BINS} coefficients, got {self.values.shape}")
        if np.any(self.values <= 0.0):
            raise InvalidField("kerma coefficients must be positive")

    @staticmethod
    def unit() -> "KermaCoefficients":
        return KermaCoefficients(np.ones(spectra.FIELD_BINS))

    @staticmethod
    def bundled_air() -> "KermaCoefficients":
        _, vals = spectra.load_table("kerma_air.txt")
        return KermaCoefficients(vals)

    @staticmethod
    def from_text(path) -> "KermaCoefficients":
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
        return KermaCoefficients(arr[:, -1])


def kerma_grid(fluence: np.ndarray, spec: np.ndarray,
               coeffs: KermaCoefficients) -> np.ndarray:
    """K[v] = fluence[v] * sum_i spec_i[v] * E_mid,i * coeff_i (float64)."""
    fluence = np.asarray(fluence, dtype=np.float64)
    spec = np.asarray(spec, dtype=np.float64)
    if spec.shape != fluence.shape + (spectra.FIELD_BINS,):
        raise DimensionMismatch(
            f"spectra shape {spec.shape} does not match fluence {fluence.shape}")
    weights = spectra.bin_midpoints(spectra.FIELD_BINS) * coeffs.values
    return fluence * (spec @ weights)


def to_kerma(f: RadiationField, coeffs: KermaCoefficients,
             channels: str = "both") -> np.ndarray:
    """Per-voxel air kerma grid for the selected channels (summed)."""
    out = np.zeros(f.dims, dtype=np.float64)
    names = list(f.channels) if channels == "both" else [channels]
    for name in names:
        ch = f.channel(name)
        out += kerma_grid(ch.fluence, ch.spectra, coeffs)
    return out


def split_dataset(paths, seed: int) -> tuple[list, list, list]:
    """Deterministic 70/15/15 split of `paths` into (train, val, test).

    Validation and test each get max(1, floor(0.15 n)) entries; the
    remainder goes to train.  The shuffle depends only on the set of paths
    and the seed, not on input order.
    """
    items = sorted(str(p) for p in paths)
    n = len(items)
    if n < 3:
        raise TooFewFiles(f"need at least 3 paths to split, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [items[i] for i in order]
    n_val = max(1, int(math.floor(0.15 * n)))
    n_test = n_val
    test = shuffled[:n_test]
    val = shuffled[n_test:n_test + n_val]
    train = shuffled[n_test + n_val:]
    return train, val, test
