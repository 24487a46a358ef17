"""Spectrum bin conventions and histogram utilities shared across modules.

All spectra live on uniform energy grids spanning [0, E_MAX] keV: tube
output spectra use 150 bins of 1 keV, per-voxel spectra use 32 bins of
150/32 keV.  Resampling between grids is mass conserving (area overlap),
so a rebinned histogram keeps its total and a delta bin spills into at
most the two output bins it overlaps.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import LengthMismatch

E_MAX_KEV = 150.0
TUBE_BINS = 150
FIELD_BINS = 32


def bin_midpoints(n_bins: int, e_max: float = E_MAX_KEV) -> np.ndarray:
    """Midpoint energies (keV) of `n_bins` uniform bins over [0, e_max]."""
    width = e_max / n_bins
    return (np.arange(n_bins) + 0.5) * width


@lru_cache(maxsize=None)
def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    # M[j, i] = fraction of input bin i's mass landing in output bin j.
    edges_in = np.linspace(0.0, 1.0, n_in + 1)
    edges_out = np.linspace(0.0, 1.0, n_out + 1)
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    m = overlap * n_in
    m.flags.writeable = False
    return m

def resample_histogram(values: np.ndarray, n_out: int) -> np.ndarray:
    """Rebin histogram masses onto `n_out` uniform bins over the same range.

    Works on a single histogram (n_in,) or a batch (..., n_in).  Total mass
    is preserved exactly up to floating point.
    """
    values = np.asarray(values, dtype=np.float64)
    n_in = values.shape[-1]
    if n_in < 1 or n_out < 1:
        raise LengthMismatch("histograms need at least one bin")
    return values @ _overlap_matrix(n_in, n_out).T


def mean_energy(spectrum: np.ndarray, e_max: float = E_MAX_KEV) -> float:
    """Mass-weighted mean bin energy (keV) of a histogram."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    total = spectrum.sum()
    if total <= 0.0:
        return 0.0
    return float(spectrum @ bin_midpoints(spectrum.shape[-1], e_max) / total)


def peak_energy(spectrum: np.ndarray, e_max: float = E_MAX_KEV) -> float:
    """Midpoint energy (keV) of the most populated bin."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    return float(bin_midpoints(spectrum.shape[-1], e_max)[int(np.argmax(spectrum))])


def load_table(name: str) -> tuple[np.ndarray, np.ndarray]:
    """Load a bundled two-column data table -> (energy_kev, value)."""
    text = resources.files("srf.data").joinpath(name).read_text()
    rows = [line.split() for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 0], arr[:, 1]


def loglog_interp(e_query, e_table: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Log-log interpolation of a positive table, clamped at the edges."""
    e_query = np.asarray(e_query, dtype=np.float64)
    out = np.interp(np.log(np.maximum(e_query, 1e-12)),
                    np.log(e_table), np.log(values))
    return np.exp(out)
