"""Parameter-free input encodings: Fourier features and real spherical
harmonics.

Both accept a plain ndarray (returning an ndarray) or a `Tensor`
(returning a graph-connected `Tensor`), for single vectors or batches.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidConfig, NonUnitDirection
from . import autograd as ag
from .autograd import Tensor

UNIT_TOL = 1e-6


def _as_batch(x):
    """-> (tensor (B, d), was_tensor, was_single)"""
    was_tensor = isinstance(x, Tensor)
    t = x if was_tensor else Tensor(np.asarray(x, dtype=np.float64))
    single = t.ndim == 1
    if single:
        t = ag.reshape(t, (1, t.shape[0]))
    return t, was_tensor, single


def _unwrap(out: Tensor, was_tensor: bool, single: bool):
    if single:
        out = ag.reshape(out, (out.shape[1],))
    return out if was_tensor else out.data


def fourier_encode(x, L: int):
    """Frequency encoding with raw append.

    Per coordinate: [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x),
    cos(2^(L-1) pi x)], then the raw coordinates; d inputs -> d(2L + 1)
    outputs.
    """
    if L < 1:
        raise InvalidConfig(f"fourier_encode needs L >= 1, got {L}")
    t, was_tensor, single = _as_batch(x)
    parts = []
    for f in range(L):
        scaled = ag.mul(t, float(2 ** f) * math.pi)
        parts.append(ag.sin(scaled))
        parts.append(ag.cos(scaled))
    parts.append(t)
    return _unwrap(ag.concat(parts, axis=-1), was_tensor, single)


def _sh_norm(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4.0 * math.pi)
                     * math.factorial(l - m) / math.factorial(l + m))


def _sh_basis(x: Tensor, y: Tensor, z: Tensor, l_max: int) -> list[Tensor]:
    """Real SH values for degrees l = 0..l_max-1, each m = -l..l, as
    polynomials in the Cartesian components (Condon-Shortley phase folded
    into the associated Legendre start values)."""
    # p[(l, m)] holds P_l^m(cos theta) / sin^m theta, a polynomial in z;
    # the diagonal entries are plain constants.
    p: dict[tuple[int, int], Tensor | float] = {(0, 0): 1.0}
    for m in range(1, l_max):
        p[(m, m)] = -(2.0 * m - 1.0) * p[(m - 1, m - 1)]
    for m in range(0, l_max - 1):
        p[(m + 1, m)] = ag.mul(z, (2.0 * m + 1.0) * p[(m, m)])
    for m in range(0, l_max):
        for l in range(m + 2, l_max):
            a = ag.mul(z, (2.0 * l - 1.0)) * p[(l - 1, m)]
            prev = p[(l - 2, m)]
            b = ag.mul(prev, l + m - 1.0) if isinstance(prev, Tensor) \
                else Tensor(np.full_like(z.data, (l + m - 1.0) * prev))
            p[(l, m)] = (a - b) * (1.0 / (l - m))
    # azimuthal parts: A_m = cos(m phi) sin^m, B_m = sin(m phi) sin^m
    cos_m: list[Tensor] = [Tensor(np.ones_like(x.data))]
    sin_m: list[Tensor] = [Tensor(np.zeros_like(x.data))]
    for m in range(1, l_max):
        cos_m.append(x * cos_m[m - 1] - y * sin_m[m - 1])
        sin_m.append(x * sin_m[m - 1] + y * cos_m[m - 1])
    out = []
    sqrt2 = math.sqrt(2.0)
    for l in range(l_max):
        for m in range(-l, l + 1):
            am = abs(m)
            plm = p[(l, am)]
            if not isinstance(plm, Tensor):
                plm = Tensor(np.full_like(z.data, plm))
            k = _sh_norm(l, am)
            if m == 0:
                out.append(ag.mul(plm, k))
            elif m > 0:
                out.append(ag.mul(cos_m[am] * plm, sqrt2 * k))
            else:
                out.append(ag.mul(sin_m[am] * plm, sqrt2 * k))
    return out


def sh_encode(direction, l_max: int):
    """Real spherical-harmonics encoding of unit directions with the raw
    direction appended: l_max degrees -> l_max^2 + 3 outputs."""
    if l_max < 1:
        raise InvalidConfig(f"sh_encode needs l_max >= 1, got {l_max}")
    t, was_tensor, single = _as_batch(direction)
    if t.shape[-1] != 3:
        raise NonUnitDirection(f"directions must be 3-vectors, got {t.shape}")
    norms = np.linalg.norm(t.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        worst = float(np.abs(norms - 1.0).max())
        raise NonUnitDirection(
            f"directions must be unit length +/- {UNIT_TOL} (worst {worst:.2e})")
    x = ag.getitem(t, (slice(None), 0))
    y = ag.getitem(t, (slice(None), 1))
    z = ag.getitem(t, (slice(None), 2))
    cols = _sh_basis(x, y, z, l_max) + [x, y, z]
    stacked = ag.concat([ag.reshape(c, (c.shape[0], 1)) for c in cols], axis=-1)
    return _unwrap(stacked, was_tensor, single)
