"""Training losses and the validation metric suite.

Losses operate in normalized training space and are differentiable: they
are written against the autodiff ops, so passing `Tensor` inputs yields a
graph-connected scalar while plain arrays yield a float.  Metrics operate
on denormalized (kerma) grids and are plain numpy.

Metric conventions:

* `smape_acc` = 1 - mean(|P - T| / (|P| + |T|)) over a voxel selection
  determined by the ground-truth maximum (Top(x%): t > max (1 - x/100);
  Scatter: 0.005 max <= t < 0.05 max).  Voxels with t = p = 0 count as
  perfect.
* `ssim3d` uses a 7^3 uniform window, sample (n-1) covariance
  normalization, constants C1 = (0.01 R)^2, C2 = (0.03 R)^2 with R the
  ground-truth data range, and averages valid windows only.
* `gpr` evaluates gamma(x) = min over voxel centers r with ||r - x|| <=
  delta_d of sqrt((||r - x||/delta_d)^2 + ((P(x) - T(r))/delta_dose)^2),
  delta_dose expressed as a fraction of max(T); a voxel passes when
  gamma <= 1.  Boundary voxels use the clipped neighborhood.
* `spec_acc` pools intersection over union of per-voxel spectra across
  all voxels (a per-voxel mean is available via `pooled=False`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import (AllZeroFluence, CriterionSmallerThanVoxel,
                     DimensionMismatch, EmptySelection, GridTooSmall,
                     InvalidConfig, LengthMismatch)
from .field import KermaCoefficients, RadiationField, kerma_grid
from .nn import autograd as ag
from .nn.autograd import Tensor

SSIM_WINDOW = 7


# --- differentiable losses ---------------------------------------------------


def _pair(t, p):
    t_t = ag.as_tensor(t)
    p_t = ag.as_tensor(p)
    if t_t.shape != p_t.shape:
        raise DimensionMismatch(f"shapes differ: {t_t.shape} vs {p_t.shape}")
    return t_t, p_t, not (isinstance(t, Tensor) or isinstance(p, Tensor))


def _ssim_window_means(x: Tensor, y: Tensor, c1: float, c2: float) -> Tensor:
    np_win = float(SSIM_WINDOW ** 3)
    cov_norm = np_win / (np_win - 1.0)
    ux = ag.box_mean3(x, SSIM_WINDOW)
    uy = ag.box_mean3(y, SSIM_WINDOW)
    uxx = ag.box_mean3(x * x, SSIM_WINDOW)
    uyy = ag.box_mean3(y * y, SSIM_WINDOW)
    uxy = ag.box_mean3(x * y, SSIM_WINDOW)
    vx = ag.mul(uxx - ux * ux, cov_norm)
    vy = ag.mul(uyy - uy * uy, cov_norm)
    vxy = ag.mul(uxy - ux * uy, cov_norm)
    num = (ag.mul(ux * uy, 2.0) + c1) * (ag.mul(vxy, 2.0) + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return ag.mean(num / den)


def ssim_similarity(t, p):
    """Differentiable 3D SSIM; `t` is the reference for the data range."""
    t_t, p_t, plain = _pair(t, p)
    if t_t.ndim != 3:
        raise DimensionMismatch("ssim expects 3D grids")
    if min(t_t.shape) < SSIM_WINDOW:
        raise GridTooSmall(
            f"grid {t_t.shape} smaller than the {SSIM_WINDOW}^3 window")
    r = float(t_t.data.max() - t_t.data.min())
    if r <= 0.0:
        r = 1.0
    out = _ssim_window_means(t_t, p_t, (0.01 * r) ** 2, (0.03 * r) ** 2)
    return out.item() if plain else out


def loss_fluence(t, p):
    """(L1 + L2 + (1 - SSIM)) / 3 on normalized fluence grids."""
    t_t, p_t, plain = _pair(t, p)
    diff = t_t - p_t
    l1 = ag.mean(diff.abs())
    l2 = ag.mean(diff * diff)
    ssim = ssim_similarity(t_t, p_t)
    out = ag.mul(l1 + l2 + (1.0 - ssim), 1.0 / 3.0)
    return out.item() if plain else out


def wasserstein(t, p):
    """Mean absolute difference of cumulative sums, (1/n) sum_i |...|.

    Accepts single histograms (n,) or batches (..., n); batches average
    over the leading axes.
    """
    t_t = ag.as_tensor(t)
    p_t = ag.as_tensor(p)
    if t_t.shape[-1:] != p_t.shape[-1:] or t_t.shape != p_t.shape:
        raise LengthMismatch(f"histogram shapes differ: {t_t.shape} vs {p_t.shape}")
    plain = not (isinstance(t, Tensor) or isinstance(p, Tensor))
    out = ag.mean((ag.cumsum(p_t, axis=-1) - ag.cumsum(t_t, axis=-1)).abs())
    return out.item() if plain else out


def loss_spectrum(t, p):
    """0.3 L1 + 0.7 Wasserstein over spectrum histograms."""
    t_t = ag.as_tensor(t)
    p_t = ag.as_tensor(p)
    if t_t.shape != p_t.shape:
        raise LengthMismatch(f"histogram shapes differ: {t_t.shape} vs {p_t.shape}")
    plain = not (isinstance(t, Tensor) or isinstance(p, Tensor))
    l1 = ag.mean((t_t - p_t).abs())
    out = ag.mul(l1, 0.3) + ag.mul(wasserstein(t_t, p_t), 0.7)
    return out.item() if plain else out


# --- numpy metrics --------------------------------------------------------


def ssim3d(t: np.ndarray, p: np.ndarray) -> float:
    """3D SSIM over valid sliding windows (fast path for evaluation)."""
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if t.shape != p.shape:
        raise DimensionMismatch(f"shapes differ: {t.shape} vs {p.shape}")
    if t.ndim != 3:
        raise DimensionMismatch("ssim3d expects 3D grids")
    if min(t.shape) < SSIM_WINDOW:
        raise GridTooSmall(f"grid {t.shape} smaller than the {SSIM_WINDOW}^3 window")
    r = float(t.max() - t.min())
    if r <= 0.0:
        r = 1.0
    c1, c2 = (0.01 * r) ** 2, (0.03 * r) ** 2
    np_win = float(SSIM_WINDOW ** 3)
    cov_norm = np_win / (np_win - 1.0)

    def f(a):
        return uniform_filter(a, size=SSIM_WINDOW, mode="constant")

    pad = SSIM_WINDOW // 2
    crop = (slice(pad, s - pad) for s in t.shape)
    crop = tuple(crop)
    ux, uy = f(t)[crop], f(p)[crop]
    uxx, uyy, uxy = f(t * t)[crop], f(p * p)[crop], f(t * p)[crop]
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class Top:
    """Voxels whose true value exceeds max * (1 - pct/100)."""
    pct: float = 90.0


@dataclass(frozen=True)
class Scatter:
    """Voxels with 0.005 max <= t < 0.05 max (the low-dose scatter band)."""


def _select(t: np.ndarray, selector) -> np.ndarray:
    peak = float(t.max())
    if peak <= 0.0:
        raise AllZeroFluence("selector thresholds undefined on an all-zero field")
    if isinstance(selector, Top):
        mask = t > peak * (1.0 - selector.pct / 100.0)
    elif isinstance(selector, Scatter):
        mask = (t >= 0.005 * peak) & (t < 0.05 * peak)
    else:
        raise InvalidConfig(f"unknown selector {selector!r}")
    if not mask.any():
        raise EmptySelection(f"selector {selector!r} matched no voxels")
    return mask


def smape_acc(t: np.ndarray, p: np.ndarray, selector) -> float:
    """1 - SMAPE/2 over the selected voxels (selection from the truth)."""
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if t.shape != p.shape:
        raise DimensionMismatch(f"shapes differ: {t.shape} vs {p.shape}")
    mask = _select(t, selector)
    ts, ps = t[mask], p[mask]
    denom = np.abs(ts) + np.abs(ps)
    err = np.zeros_like(ts)
    nonzero = denom > 0.0
    err[nonzero] = np.abs(ps - ts)[nonzero] / denom[nonzero]
    return float(1.0 - err.mean())


@dataclass(frozen=True)
class GammaCriterion:
    """Gamma-evaluation tolerances: spatial (cm) and dose (fraction of the
    ground-truth maximum)."""
    delta_d_cm: float
    delta_dose: float

    def __post_init__(self):
        if self.delta_d_cm <= 0.0 or self.delta_dose <= 0.0:
            raise InvalidConfig("gamma criteria must be strictly positive")


# Table-2 pairing of the criteria; the prose pairing (3%/4cm, 10%/6cm) is
# available by constructing GammaCriterion directly.
CRITERIA_DEFAULT = (GammaCriterion(6.0, 0.03), GammaCriterion(4.0, 0.10))


def gpr(t: np.ndarray, p: np.ndarray, voxel_extent,
        criterion: GammaCriterion) -> float:
    """Gamma pass rate: fraction of voxels with gamma(x) <= 1."""
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if t.shape != p.shape:
        raise DimensionMismatch(f"shapes differ: {t.shape} vs {p.shape}")
    extent = np.broadcast_to(np.asarray(voxel_extent, dtype=np.float64), (3,))
    delta_d = criterion.delta_d_cm / 100.0
    if delta_d < float(extent.max()):
        raise CriterionSmallerThanVoxel(
            f"delta_d {delta_d} m below the voxel extent {extent.max()} m")
    t_max = float(t.max())
    if t_max <= 0.0:
        raise AllZeroFluence("gamma dose tolerance undefined on an all-zero field")
    delta_dose = criterion.delta_dose * t_max

    dims = t.shape
    reach = [min(int(np.floor(delta_d / e)), n - 1)
             for e, n in zip(extent, dims)]
    gamma2 = np.full(t.shape, np.inf)
    for dx in range(-reach[0], reach[0] + 1):
        for dy in range(-reach[1], reach[1] + 1):
            for dz in range(-reach[2], reach[2] + 1):
                dist = np.sqrt((dx * extent[0]) ** 2 + (dy * extent[1]) ** 2
                               + (dz * extent[2]) ** 2)
                if dist > delta_d:
                    continue
                dist_term = (dist / delta_d) ** 2
                src = []
                dst = []
                for off, n in zip((dx, dy, dz), dims):
                    dst.append(slice(max(0, -off), min(n, n - off)))
                    src.append(slice(max(0, off), min(n, n + off)))
                src, dst = tuple(src), tuple(dst)
                cand = dist_term + ((p[dst] - t[src]) / delta_dose) ** 2
                np.minimum(gamma2[dst], cand, out=gamma2[dst])
    return float(np.mean(gamma2 <= 1.0))


def spec_acc(t_spectra: np.ndarray, p_spectra: np.ndarray,
             pooled: bool = True) -> float:
    """Intersection-over-union of per-voxel spectra."""
    t = np.asarray(t_spectra, dtype=np.float64)
    p = np.asarray(p_spectra, dtype=np.float64)
    if t.shape != p.shape:
        raise DimensionMismatch(f"shapes differ: {t.shape} vs {p.shape}")
    inter = np.minimum(t, p)
    union = t + p - inter
    if pooled:
        total = union.sum()
        return float(inter.sum() / total) if total > 0.0 else 1.0
    inter_v = inter.sum(axis=-1)
    union_v = union.sum(axis=-1)
    ratio = np.where(union_v > 0.0, inter_v / np.where(union_v > 0.0, union_v, 1.0), 1.0)
    return float(ratio.mean())


# --- reporting ----------------------------------------------------------------

METRIC_NAMES = ("smape_acc_90", "smape_acc_scatter", "ssim",
                "gpr_3pct_6cm", "gpr_10pct_4cm", "spec_acc")


@dataclass(frozen=True)
class MetricReport:
    smape_acc_90: float
    smape_acc_scatter: float
    ssim: float
    gpr_3pct_6cm: float
    gpr_10pct_4cm: float
    spec_acc: float
    per_field: tuple = dc_field(default_factory=tuple)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in METRIC_NAMES}
        out["per_field"] = [dict(row) for row in self.per_field]
        return out

    @staticmethod
    def from_json(obj: dict) -> "MetricReport":
        return MetricReport(
            **{k: obj[k] for k in METRIC_NAMES},
            per_field=tuple(dict(row) for row in obj.get("per_field", [])))

    def to_table(self) -> str:
        headers = ["field"] + list(METRIC_NAMES)
        rows = []
        for row in self.per_field:
            rows.append([str(row.get("field", "?"))]
                        + [f"{row[k]:.4f}" for k in METRIC_NAMES])
        rows.append(["MEAN"] + [f"{getattr(self, k):.4f}" for k in METRIC_NAMES])
        widths = [max(len(h), *(len(r[i]) for r in rows))
                  for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
        return "\n".join(lines)


def compare_fields(truth: RadiationField, pred_fluence: np.ndarray,
                   pred_spectra: np.ndarray, coeffs: KermaCoefficients,
                   criteria=CRITERIA_DEFAULT) -> dict:
    """All six metric columns for one (truth, prediction) pair.

    Predictions are a denormalized joined fluence grid and per-voxel
    spectra; truth channels are joined the same way before conversion to
    kerma.
    """
    t_flu, t_spec = truth.joined()
    t_kerma = kerma_grid(t_flu, t_spec, coeffs)
    p_kerma = kerma_grid(np.asarray(pred_fluence, dtype=np.float64),
                         np.asarray(pred_spectra, dtype=np.float64), coeffs)
    extent = truth.voxel_extent
    return {
        "smape_acc_90": smape_acc(t_kerma, p_kerma, Top(90.0)),
        "smape_acc_scatter": smape_acc(t_kerma, p_kerma, Scatter()),
        "ssim": ssim3d(t_kerma, p_kerma),
        "gpr_3pct_6cm": gpr(t_kerma, p_kerma, extent, criteria[0]),
        "gpr_10pct_4cm": gpr(t_kerma, p_kerma, extent, criteria[1]),
        "spec_acc": spec_acc(t_spec, pred_spectra),
    }


def aggregate_reports(rows: list[dict]) -> MetricReport:
    """Unweighted mean over per-field metric rows."""
    if not rows:
        raise EmptySelection("no per-field metrics to aggregate")
    means = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    return MetricReport(per_field=tuple(rows), **means)


def report_to_json_str(report: MetricReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)


def report_from_json_str(text: str) -> MetricReport:
    return MetricReport.from_json(json.loads(text))
