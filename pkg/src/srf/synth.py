"""Analytic generator of plausible radiation fields and tube spectra.

Stands in for Monte-Carlo ground truth at desk scale.  The model is
deliberately simple but captures the structure the estimators must learn:

* tube spectrum: Kramers-shaped bremsstrahlung (kvp - E)/E hardened by
  Al/Cu filtration with coarse tabulated attenuation, cut off above kvp;
* beam channel: inverse-square fluence inside the collimation frustum,
  attenuated along the chord through a water-equivalent cylinder phantom
  at the isocenter, carrying the tube spectrum resampled to 32 bins.
  Voxels straddling the collimation boundary receive the fraction of
  their volume inside the beam (partial-volume supersampling), matching
  the volume-averaged semantics of Monte-Carlo voxel tallies;
* scatter channel: exp(-r/lambda)/r^2 decay around the beam-phantom
  intersection centroid, everywhere positive, with spectra softened
  (tilted toward low energies) proportionally to r.  Its amplitude is
  1e-3 of the entry beam fluence, scaled by the tube spectrum's mean
  energy so spectrally distinct setups produce distinct scatter levels.

Everything is a pure function of (params, config): identical inputs give
bit-identical fields.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import spectra
from .container import write_field
from .errors import (BeamMissesVolume, InvalidConfig, InvalidSpectrum,
                     IoFailure, NonPositiveKvp)
from .field import (BeamParams, ConeBeam, FieldChannel, RadiationField,
                    RectBeam, voxel_centers_phys)

SCATTER_S0_FRAC = 1e-3
SCATTER_ENERGY_REF_KEV = 60.0
SCATTER_SOFTEN_PER_M = 2.0
REL_ERROR_FLOOR = 0.01


@dataclass(frozen=True)
class GeneratorConfig:
    """Grid geometry plus the sampled beam-parameter ranges and phantom."""

    dims: tuple[int, int, int] = (16, 16, 16)
    voxel_extent: tuple[float, float, float] = (0.0625, 0.0625, 0.0625)
    beam_kind: str = "cone"                    # "cone" | "rect"
    opening_angle_deg: float = 10.0
    rect_width_m: float = 0.4
    rect_height_m: float = 0.3
    kvp_range: tuple[float, float] = (100.0, 100.0)
    t_al_range_mm: tuple[float, float] = (2.5, 2.5)
    t_cu_range_mm: tuple[float, float] = (0.0, 0.0)
    anode_range_deg: tuple[float, float] = (8.0, 12.0)
    d_tube_range_m: tuple[float, float] = (1.0, 1.0)
    phantom_radius_m: float = 0.15
    phantom_height_m: float = 0.6
    scatter_lambda_m: float = 0.5
    edge_supersample: int = 4    # k^3 sub-points per voxel; 1 = point sampling
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise InvalidConfig(f"dims must be >= 2 per axis, got {self.dims}")
        if any(e <= 0 for e in self.voxel_extent):
            raise InvalidConfig("voxel extent must be positive")
        if self.edge_supersample < 1:
            raise InvalidConfig("edge_supersample must be >= 1")
        if self.beam_kind not in ("cone", "rect"):
            raise InvalidConfig(f"beam_kind must be cone or rect, got {self.beam_kind!r}")
        for name in ("kvp_range", "t_al_range_mm", "t_cu_range_mm",
                     "anode_range_deg", "d_tube_range_m"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} lower bound {lo} exceeds upper {hi}")

    # Presets mirroring the three dataset regimes: fixed spectrum (cone),
    # varying spectrum (cone), and varying spectrum + distance (rect).

    @staticmethod
    def ds01(dims=(16, 16, 16), extent=None, seed=0) -> "GeneratorConfig":
        return GeneratorConfig(dims=dims, voxel_extent=_extent(dims, extent), seed=seed)

    @staticmethod
    def ds02(dims=(16, 16, 16), extent=None, seed=0) -> "GeneratorConfig":
        return GeneratorConfig(dims=dims, voxel_extent=_extent(dims, extent),
                               kvp_range=(40.0, 125.0), t_al_range_mm=(2.5, 7.5),
                               t_cu_range_mm=(0.0, 0.9), seed=seed)

    @staticmethod
    def ds03(dims=(16, 16, 16), extent=None, seed=0) -> "GeneratorConfig":
        return GeneratorConfig(dims=dims, voxel_extent=_extent(dims, extent),
                               beam_kind="rect",
                               kvp_range=(40.0, 125.0), t_al_range_mm=(2.5, 7.5),
                               t_cu_range_mm=(0.0, 0.9),
                               d_tube_range_m=(0.35, 0.75), seed=seed)


def _extent(dims, extent) -> tuple[float, float, float]:
    # Default: a 1 m cube regardless of resolution.
    if extent is None:
        return tuple(1.0 / d for d in dims)
    if np.isscalar(extent):
        return (float(extent),) * 3
    return tuple(float(e) for e in extent)


_MU_TABLES = {}


def _mu(material: str, e_kev: np.ndarray) -> np.ndarray:
    if material not in _MU_TABLES:
        _MU_TABLES[material] = spectra.load_table(f"attenuation_{material}.txt")
    e_tab, mu_tab = _MU_TABLES[material]
    return spectra.loglog_interp(e_kev, e_tab, mu_tab)


def gen_spectrum(kvp: float, t_al: float, t_cu: float) -> np.ndarray:
    """Parametric 150-bin tube spectrum, unit sum, zero above kvp."""
    if kvp <= 0.0:
        raise NonPositiveKvp(f"kvp must be positive, got {kvp}")
    if t_al < 0.0 or t_cu < 0.0:
        raise InvalidConfig("filtration thicknesses must be non-negative")
    if not 40.0 <= kvp <= 125.0:
        warnings.warn(f"kvp {kvp} outside the calibrated [40, 125] range",
                      stacklevel=2)
    e = spectra.bin_midpoints(spectra.TUBE_BINS)
    intensity = np.clip(kvp - e, 0.0, None) / e
    atten = np.exp(-_mu("al", e) * 0.1 * t_al - _mu("cu", e) * 0.1 * t_cu)
    s = intensity * atten
    total = s.sum()
    if total <= 0.0:
        raise InvalidSpectrum(f"no emission below kvp={kvp} after filtration")
    return s / total


def _beam_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Orthonormal transverse axes for the rectangular frustum.
    ref = np.array([0.0, 0.0, 1.0])
    if abs(direction @ ref) > 0.999:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(direction, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


def _segment_cylinder_chord(start: np.ndarray, ends: np.ndarray,
                            radius: float, half_height: float) -> np.ndarray:
    """Length of each segment start->ends[i] inside the z-axis cylinder."""
    delta = ends - start
    a = delta[:, 0] ** 2 + delta[:, 1] ** 2
    b = 2.0 * (start[0] * delta[:, 0] + start[1] * delta[:, 1])
    c = start[0] ** 2 + start[1] ** 2 - radius ** 2
    lo = np.zeros(len(ends))
    hi = np.ones(len(ends))
    radial = a > 1e-30
    disc = b[radial] ** 2 - 4.0 * a[radial] * c
    ok = disc > 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    s1 = np.where(ok, (-b[radial] - sq) / (2.0 * a[radial]), np.inf)
    s2 = np.where(ok, (-b[radial] + sq) / (2.0 * a[radial]), -np.inf)
    lo_r = np.zeros(radial.sum())
    hi_r = np.ones(radial.sum())
    lo_r = np.maximum(lo_r, s1)
    hi_r = np.minimum(hi_r, s2)
    lo[radial] = lo_r
    hi[radial] = hi_r
    if c >= 0.0:
        # start outside the infinite cylinder: purely axial segments miss it
        hi[~radial] = 0.0
    # clip by the z slab
    dz = delta[:, 2]
    moving = np.abs(dz) > 1e-30
    z_lo = (-half_height - start[2]) / np.where(moving, dz, 1.0)
    z_hi = (half_height - start[2]) / np.where(moving, dz, 1.0)
    z1 = np.minimum(z_lo, z_hi)
    z2 = np.maximum(z_lo, z_hi)
    lo = np.where(moving, np.maximum(lo, z1), lo)
    hi = np.where(moving, np.minimum(hi, z2), hi)
    if abs(start[2]) > half_height:
        hi = np.where(moving, hi, 0.0)
    frac = np.clip(hi - lo, 0.0, None)
    return frac * np.linalg.norm(delta, axis=1)


def _axis_box_hit(tube: np.ndarray, direction: np.ndarray,
                  half_span: np.ndarray) -> bool:
    t_lo, t_hi = 0.0, np.inf
    for k in range(3):
        if abs(direction[k]) < 1e-12:
            if abs(tube[k]) > half_span[k]:
                return False
            continue
        a = (-half_span[k] - tube[k]) / direction[k]
        b = (half_span[k] - tube[k]) / direction[k]
        t_lo = max(t_lo, min(a, b))
        t_hi = min(t_hi, max(a, b))
    return t_hi >= t_lo


def _require_axis_hit(tube: np.ndarray, direction: np.ndarray,
                      half_span: np.ndarray):
    if not _axis_box_hit(tube, direction, half_span):
        raise BeamMissesVolume("beam axis does not intersect the voxel volume")


def _inside_beam(params: BeamParams, points: np.ndarray) -> np.ndarray:
    """Boolean mask: which points lie inside the collimation frustum."""
    tube = -params.direction * params.tube_distance
    rel = points - tube
    along = rel @ params.direction
    inside = along > 0.0
    shape = params.beam_shape
    if isinstance(shape, ConeBeam):
        d = np.linalg.norm(rel, axis=1)
        half = np.radians(shape.opening_angle_deg / 2.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            inside &= along / np.maximum(d, 1e-30) >= np.cos(half)
    else:
        u, w = _beam_basis(params.direction)
        scale = params.tube_distance / np.where(inside, along, np.inf)
        plane = tube + rel * scale[:, None]
        inside &= np.abs(plane @ u) <= shape.width_m / 2.0
        inside &= np.abs(plane @ w) <= shape.height_m / 2.0
    return inside


def _beam_coverage(params: BeamParams, centers: np.ndarray,
                   extent: np.ndarray, k: int) -> np.ndarray:
    """Fraction of each voxel's volume inside the beam, estimated on a
    k^3 sub-grid; k = 1 reduces to point sampling at the centers."""
    if k == 1:
        return _inside_beam(params, centers).astype(np.float64)
    offsets = ((np.arange(k) + 0.5) / k - 0.5)
    coverage = np.zeros(len(centers))
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                pts = centers + np.array([ox, oy, oz]) * extent
                coverage += _inside_beam(params, pts)
    return coverage / k ** 3


def gen_field(params: BeamParams, cfg: GeneratorConfig) -> RadiationField:
    """Deterministic analytic field for one beam setup."""
    dims = cfg.dims
    span = np.asarray(dims, dtype=np.float64) * np.asarray(cfg.voxel_extent)
    centers = voxel_centers_phys(dims, cfg.voxel_extent)
    tube = -params.direction * params.tube_distance
    _require_axis_hit(tube, params.direction, span / 2.0)

    r0 = float(max(cfg.voxel_extent))
    e32 = spectra.bin_midpoints(spectra.FIELD_BINS)
    tube_total = params.tube_spectrum.sum()
    if tube_total <= 0.0:
        raise InvalidSpectrum("tube spectrum carries no mass")
    s32 = spectra.resample_histogram(params.tube_spectrum / tube_total,
                                     spectra.FIELD_BINS)
    s32 /= s32.sum()

    d = np.linalg.norm(centers - tube, axis=1)
    coverage = _beam_coverage(params, centers, np.asarray(cfg.voxel_extent),
                              cfg.edge_supersample)

    mu_w = _mu("water", e32)
    flu_beam = np.zeros(len(centers))
    idx = np.flatnonzero(coverage > 0.0)
    if idx.size:
        chord_m = _segment_cylinder_chord(tube, centers[idx],
                                          cfg.phantom_radius_m,
                                          cfg.phantom_height_m / 2.0)
        atten = np.exp(-mu_w[None, :] * (chord_m[:, None] * 100.0)) @ s32
        flu_beam[idx] = coverage[idx] * atten / np.maximum(d[idx], r0) ** 2
    entry = flu_beam.max() if idx.size else 1.0 / params.tube_distance ** 2

    # scatter source at the midpoint of the beam axis chord through the phantom
    probe = tube + params.direction * (
        params.tube_distance + 2.0 * max(span.max(), cfg.phantom_height_m))
    lo, hi = _chord_interval(tube, probe, cfg.phantom_radius_m,
                             cfg.phantom_height_m / 2.0)
    if hi > lo:
        centroid = tube + (probe - tube) * ((lo + hi) / 2.0)
    else:
        centroid = np.zeros(3)

    mean_e = float(s32 @ e32)
    s0 = SCATTER_S0_FRAC * entry * (mean_e / SCATTER_ENERGY_REF_KEV)
    r = np.linalg.norm(centers - centroid, axis=1)
    flu_scatter = s0 * np.exp(-r / cfg.scatter_lambda_m) / np.maximum(r, r0) ** 2

    spec_beam = np.zeros((len(centers), spectra.FIELD_BINS))
    spec_beam[idx] = s32
    tilt = np.exp(-SCATTER_SOFTEN_PER_M * r[:, None] * (e32[None, :] / spectra.E_MAX_KEV))
    spec_scatter = s32[None, :] * tilt
    spec_scatter /= spec_scatter.sum(axis=1, keepdims=True)

    rel_beam = np.zeros(len(centers))
    rel_beam[idx] = np.minimum(1.0, REL_ERROR_FLOOR * np.sqrt(entry / flu_beam[idx]))
    rel_scatter = np.minimum(
        1.0, REL_ERROR_FLOOR * np.sqrt(flu_scatter.max() / flu_scatter))

    geometry = ((centers[:, 0] ** 2 + centers[:, 1] ** 2
                 <= cfg.phantom_radius_m ** 2)
                & (np.abs(centers[:, 2]) <= cfg.phantom_height_m / 2.0))

    def grid(a):
        return a.reshape(dims)

    def grid4(a):
        return a.reshape(dims + (spectra.FIELD_BINS,))

    channels = {
        "beam": FieldChannel(grid(flu_beam), grid4(spec_beam), grid(rel_beam)),
        "scatter": FieldChannel(grid(flu_scatter), grid4(spec_scatter),
                                grid(rel_scatter)),
    }
    return RadiationField(dims, cfg.voxel_extent, channels,
                          grid(geometry), params)


def _chord_interval(start: np.ndarray, end: np.ndarray, radius: float,
                    half_height: float) -> tuple[float, float]:
    delta = end - start
    a = delta[0] ** 2 + delta[1] ** 2
    lo, hi = 0.0, 1.0
    if a > 1e-30:
        b = 2.0 * (start[0] * delta[0] + start[1] * delta[1])
        c = start[0] ** 2 + start[1] ** 2 - radius ** 2
        disc = b * b - 4.0 * a * c
        if disc <= 0.0:
            return 0.0, 0.0
        sq = disc ** 0.5
        lo = max(lo, (-b - sq) / (2.0 * a))
        hi = min(hi, (-b + sq) / (2.0 * a))
    elif start[0] ** 2 + start[1] ** 2 >= radius ** 2:
        return 0.0, 0.0
    if abs(delta[2]) > 1e-30:
        z1 = (-half_height - start[2]) / delta[2]
        z2 = (half_height - start[2]) / delta[2]
        lo = max(lo, min(z1, z2))
        hi = min(hi, max(z1, z2))
    elif abs(start[2]) > half_height:
        return 0.0, 0.0
    return (lo, hi) if hi > lo else (0.0, 0.0)


def _sample_params(rng: np.random.Generator, cfg: GeneratorConfig):
    phi = rng.uniform(0.0, 2.0 * np.pi)
    cos_theta = rng.uniform(-1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    d_tube = rng.uniform(*cfg.d_tube_range_m)
    kvp = rng.uniform(*cfg.kvp_range)
    t_al = rng.uniform(*cfg.t_al_range_mm)
    t_cu = rng.uniform(*cfg.t_cu_range_mm)
    rng.uniform(*cfg.anode_range_deg)  # anode angle: sampled for parity, unused
    if cfg.beam_kind == "cone":
        shape = ConeBeam(cfg.opening_angle_deg)
    else:
        shape = RectBeam(cfg.rect_width_m, cfg.rect_height_m)
    beam = BeamParams.from_angles(phi, theta, d_tube,
                                  gen_spectrum(kvp, t_al, t_cu), shape)
    return beam, {"kvp": kvp, "t_al": t_al, "t_cu": t_cu}


def gen_dataset(cfg: GeneratorConfig, count: int, out_dir) -> list[Path]:
    """Write `count` sampled fields as SRF1 files plus a manifest.json."""
    if count < 1:
        raise InvalidConfig(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    paths = []
    manifest = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            beam, extras = _sample_params(rng, cfg)
            field = gen_field(beam, cfg)
            path = out_dir / f"field_{i:04d}.srf"
            write_field(field, path)
            paths.append(path)
            manifest.append({
                "file": path.name,
                "direction": beam.direction.tolist(),
                "tube_distance": beam.tube_distance,
                "kvp": extras["kvp"],
                "t_al": extras["t_al"],
                "t_cu": extras["t_cu"],
                "beam_shape": beam.beam_shape.to_json(),
                "seed": cfg.seed,
            })
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"could not write dataset to {out_dir}: {exc}") from exc
    return paths
