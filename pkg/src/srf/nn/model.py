"""The FCNN model family: SRBF, SPERF, and PBRF variants.

Topology (all variants): a per-field global conditioning vector is built
from the beam inputs (spherical-harmonics direction encoding, optionally
an encoded tube spectrum and an encoded tube distance) and passed through
a one-hidden-layer MLP of model width.  Per-voxel locations are Fourier
encoded and flow through MLP Block 1, a fusion site conditioning on the
global vector, MLP Block 2, a second fusion site, plus a residual skip
from Block 1's output.  Two heads project the fused features to a scalar
normalized fluence (sigmoid or gradient-conserving clamp, matching the
configured normalizer's range) and a 32-bin spectrum (softplus followed
by histogram normalization).  Hidden activations are SiLU throughout.

Variants differ only in the global inputs: SRBF uses direction alone,
SPERF adds the encoded tube spectrum, PBRF adds both the spectrum and a
16-wide mini-MLP encoding of the tube distance.
"""

from __future__ import annotations

import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .. import spectra
from ..errors import (InvalidConfig, NegativeBin, NonFiniteParameters,
                      WidthMismatch)
from ..field import BeamParams, voxel_centers_unit
from ..normalize import KINDS as NORMALIZER_KINDS, Normalizer
from . import autograd as ag
from .autograd import Tensor
from .encoders import fourier_encode, sh_encode

VARIANTS = ("srbf", "sperf", "pbrf")
FUSIONS = ("concat", "film", "resfilm", "gmu")
SPEC_RESAMPLED_BINS = 64
DIST_MLP_WIDTH = 16
DIST_RANGE_M = (0.35, 0.75)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "srbf"
    width: int = 192
    depth: int = 3                      # hidden layers per MLP block
    L: int = 10                         # Fourier frequency count
    l_max: int = 4                      # SH degree count
    spec_dim: int = 32                  # encoded tube-spectrum width
    fusion: str = "film"
    normalizer: str = "max01"
    alpha: float | None = None          # maxlog strength
    jitter: bool = False                # training-time location jitter

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if self.fusion not in FUSIONS:
            raise InvalidConfig(f"fusion must be one of {FUSIONS}")
        if self.normalizer not in NORMALIZER_KINDS:
            raise InvalidConfig(f"normalizer must be one of {NORMALIZER_KINDS}")
        for name in ("width", "depth", "L", "l_max", "spec_dim"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.normalizer == "maxlog" and (self.alpha is None or self.alpha <= 0):
            raise InvalidConfig("maxlog normalizer needs alpha > 0")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        known = set(ModelConfig.__dataclass_fields__)
        return ModelConfig(**{k: v for k, v in obj.items() if k in known})


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, init: str = "xavier"):
        if init == "xavier":
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
        else:   # "zero": identity-style starts for FiLM branches
            w = np.zeros((n_in, n_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.w)
        return out if self.b is None else out + self.b

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, n: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(n), requires_grad=True)
        self.bias = Tensor(np.zeros(n), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ag.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ag.mean(centered * centered, axis=-1, keepdims=True)
        return centered / ag.sqrt(var + self.eps) * self.gain + self.bias

    def named(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


def _check_width(h: Tensor, width: int):
    if h.shape[-1] != width:
        raise WidthMismatch(f"features have width {h.shape[-1]}, expected {width}")


class ConcatFusion:
    """[h; g] projected back to model width."""

    def __init__(self, width: int, rng):
        self.proj = Linear(2 * width, width, rng)
        self.width = width

    def __call__(self, h: Tensor, g: Tensor) -> Tensor:
        _check_width(h, self.width)
        return self.proj(ag.concat([h, g], axis=-1))

    def named(self, prefix: str):
        yield from self.proj.named(f"{prefix}.proj")


class FiLMFusion:
    """gamma(g) * h + beta(g); initialized to the identity modulation."""

    def __init__(self, width: int, rng, residual: bool = False):
        self.gamma = Linear(width, width, rng, init="zero")
        self.beta = Linear(width, width, rng, init="zero")
        self.residual = residual
        if not residual:
            self.gamma.b = Tensor(np.ones(width), requires_grad=True)
        self.width = width

    def __call__(self, h: Tensor, g: Tensor) -> Tensor:
        _check_width(h, self.width)
        film = self.gamma(g) * h + self.beta(g)
        return h + film if self.residual else film

    def named(self, prefix: str):
        yield from self.gamma.named(f"{prefix}.gamma")
        yield from self.beta.named(f"{prefix}.beta")


class GMUFusion:
    """z * tanh(Wh h) + (1 - z) * tanh(Wg g), z = sigmoid(Wz [h; g])."""

    def __init__(self, width: int, rng):
        self.wh = Linear(width, width, rng, bias=False)
        self.wg = Linear(width, width, rng, bias=False)
        self.wz = Linear(2 * width, width, rng, bias=False)
        self.width = width

    def __call__(self, h: Tensor, g: Tensor) -> Tensor:
        _check_width(h, self.width)
        z = ag.sigmoid(self.wz(ag.concat([h, g], axis=-1)))
        return z * ag.tanh(self.wh(h)) + (1.0 - z) * ag.tanh(self.wg(g))

    def named(self, prefix: str):
        yield from self.wh.named(f"{prefix}.wh")
        yield from self.wg.named(f"{prefix}.wg")
        yield from self.wz.named(f"{prefix}.wz")


def make_fusion(kind: str, width: int, rng):
    if kind == "concat":
        return ConcatFusion(width, rng)
    if kind == "film":
        return FiLMFusion(width, rng)
    if kind == "resfilm":
        return FiLMFusion(width, rng, residual=True)
    if kind == "gmu":
        return GMUFusion(width, rng)
    raise InvalidConfig(f"unknown fusion kind {kind!r}")


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        w = config.width
        self.spec_encoder = None
        self.dist_encoder = None
        global_in = config.l_max ** 2 + 3
        if config.variant in ("sperf", "pbrf"):
            self.spec_encoder = (
                Linear(SPEC_RESAMPLED_BINS, 32, rng),
                LayerNorm(32),
                Linear(32, config.spec_dim, rng),
            )
            global_in += config.spec_dim
        if config.variant == "pbrf":
            self.dist_encoder = (
                Linear(1, DIST_MLP_WIDTH, rng),
                Linear(DIST_MLP_WIDTH, DIST_MLP_WIDTH, rng),
            )
            global_in += DIST_MLP_WIDTH
        self.global_block = (Linear(global_in, w, rng), Linear(w, w, rng))
        loc_in = 3 * (2 * config.L + 1)
        self.block1 = [Linear(loc_in, w, rng)]
        self.block1 += [Linear(w, w, rng) for _ in range(config.depth - 1)]
        self.fusion1 = make_fusion(config.fusion, w, rng)
        self.block2 = [Linear(w, w, rng) for _ in range(config.depth)]
        self.fusion2 = make_fusion(config.fusion, w, rng)
        self.head_fluence = Linear(w, 1, rng)
        self.head_spectrum = Linear(w, spectra.FIELD_BINS, rng)
        self._params = OrderedDict(self._named_params())

    # --- parameter registry ------------------------------------------------

    def _named_params(self):
        if self.spec_encoder is not None:
            lin1, ln, lin2 = self.spec_encoder
            yield from lin1.named("spec_enc.lin1")
            yield from ln.named("spec_enc.ln")
            yield from lin2.named("spec_enc.lin2")
        if self.dist_encoder is not None:
            yield from self.dist_encoder[0].named("dist_enc.lin1")
            yield from self.dist_encoder[1].named("dist_enc.lin2")
        yield from self.global_block[0].named("global.lin1")
        yield from self.global_block[1].named("global.lin2")
        for i, lin in enumerate(self.block1):
            yield from lin.named(f"block1.lin{i + 1}")
        yield from self.fusion1.named("fusion1")
        for i, lin in enumerate(self.block2):
            yield from lin.named(f"block2.lin{i + 1}")
        yield from self.fusion2.named("fusion2")
        yield from self.head_fluence.named("head.fluence")
        yield from self.head_spectrum.named("head.spectrum")

    def parameters(self) -> OrderedDict:
        return self._params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self._params.values())

    def set_parameters(self, arrays: dict):
        for name, tensor in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise InvalidConfig(
                    f"parameter {name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.copy()
            tensor.grad = None

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def _check_finite(self):
        for name, p in self._params.items():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteParameters(f"parameter {name} is not finite")

    # --- beam-input encoders -------------------------------------------------

    def _encode_spectra(self, tube_spectra: np.ndarray) -> Tensor:
        spec = np.asarray(tube_spectra, dtype=np.float64)
        if np.any(spec < 0.0):
            raise NegativeBin("tube spectrum bins must be non-negative")
        if spec.shape[-1] != spectra.TUBE_BINS:
            raise InvalidConfig(
                f"tube spectra need {spectra.TUBE_BINS} bins, got {spec.shape}")
        totals = spec.sum(axis=-1, keepdims=True)
        if np.any(totals <= 0.0):
            raise NegativeBin("tube spectrum carries no mass")
        resampled = spectra.resample_histogram(spec / totals, SPEC_RESAMPLED_BINS)
        lin1, ln, lin2 = self.spec_encoder
        return lin2(ag.silu(ln(lin1(Tensor(resampled)))))

    def _encode_distances(self, distances: np.ndarray) -> Tensor:
        d = np.asarray(distances, dtype=np.float64).reshape(-1, 1)
        lo, hi = DIST_RANGE_M
        scaled = (d - lo) / (hi - lo)
        if np.any(scaled < 0.0) or np.any(scaled > 1.0):
            warnings.warn(f"tube distance outside configured range {DIST_RANGE_M}",
                          stacklevel=3)
        lin1, lin2 = self.dist_encoder
        return lin2(ag.silu(lin1(Tensor(scaled))))

    def global_features(self, beams: list[BeamParams]) -> Tensor:
        """One conditioning row per beam: (F, width)."""
        dirs = np.stack([b.direction for b in beams])
        parts = [Tensor(sh_encode(dirs, self.config.l_max))]
        if self.spec_encoder is not None:
            parts.append(self._encode_spectra(
                np.stack([b.tube_spectrum for b in beams])))
        if self.dist_encoder is not None:
            parts.append(self._encode_distances(
                np.array([b.tube_distance for b in beams])))
        g_in = ag.concat(parts, axis=-1)
        lin1, lin2 = self.global_block
        return lin2(ag.silu(lin1(g_in)))

    # --- forward ---------------------------------------------------------------

    def forward(self, locations, beams: list[BeamParams],
                field_idx: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """locations (B, 3) in the unit cube; field_idx maps each row to a
        beam.  Returns (fluence_norm (B,), spectrum (B, 32))."""
        self._check_finite()
        g = self.global_features(beams)
        if field_idx is None:
            if len(beams) != 1:
                raise InvalidConfig("field_idx required with multiple beams")
            field_idx = np.zeros(
                locations.shape[0] if hasattr(locations, "shape") else 1, dtype=np.intp)
        gv = ag.getitem(g, np.asarray(field_idx, dtype=np.intp))

        h = fourier_encode(locations if isinstance(locations, Tensor)
                           else Tensor(np.asarray(locations, dtype=np.float64)),
                           self.config.L)
        for lin in self.block1:
            h = ag.silu(lin(h))
        h1 = h
        h = self.fusion1(h1, gv)
        for lin in self.block2:
            h = ag.silu(lin(h))
        h = self.fusion2(h, gv)
        h = h + h1

        flu = ag.reshape(self.head_fluence(h), (h.shape[0],))
        if self.config.normalizer == "maxsym":
            flu = ag.clamp_gc(flu, -1.0, 1.0)
        else:
            flu = ag.sigmoid(flu)
        spec = ag.norm_hist(ag.softplus(self.head_spectrum(h)))
        return flu, spec

    def forward_single(self, location, beam: BeamParams) -> tuple[float, np.ndarray]:
        loc = np.asarray(location, dtype=np.float64).reshape(1, 3)
        with ag.no_grad():
            flu, spec = self.forward(loc, [beam])
        return float(flu.data[0]), spec.data[0].copy()


@dataclass(frozen=True)
class InferResult:
    """A fully inferred voxel grid plus wall-clock timing statistics."""
    fluence: np.ndarray          # denormalized, (nx, ny, nz)
    fluence_norm: np.ndarray     # raw head output in normalized space
    spectra: np.ndarray          # (nx, ny, nz, 32)
    duration_ms_mean: float
    duration_ms_std: float
    runs: int

    def timing_line(self) -> str:
        return f"{self.duration_ms_mean:.2f} ms ± {self.duration_ms_std:.2f} ms"


def infer_field(model: Model, beam: BeamParams, dims: tuple[int, int, int],
                batch: int = 8192, normalizer: Normalizer | None = None,
                repeats: int = 1) -> InferResult:
    """Evaluate the model at every voxel center of a `dims` grid.

    The result is independent of `batch` (bitwise: every row goes through
    the same matrix-product path regardless of chunking).  Fluence is
    denormalized with `normalizer`; by default a unit-maximum normalizer
    of the model's configured kind, i.e. the field's relative topology.
    Timing covers the full grid per repeat.
    """
    if normalizer is None:
        normalizer = Normalizer(model.config.normalizer, alpha=model.config.alpha)
    if not normalizer.fitted:
        normalizer = normalizer.fit(np.array([1.0]))
    locs = voxel_centers_unit(dims)
    n = locs.shape[0]
    durations = []
    flu_parts: list[np.ndarray] = []
    spec_parts: list[np.ndarray] = []
    for _ in range(max(1, repeats)):
        flu_parts.clear()
        spec_parts.clear()
        t0 = time.perf_counter()
        with ag.no_grad():
            for start in range(0, n, batch):
                f, s = model.forward(locs[start:start + batch], [beam])
                flu_parts.append(f.data)
                spec_parts.append(s.data)
        durations.append((time.perf_counter() - t0) * 1e3)
    flu_norm = np.concatenate(flu_parts).reshape(dims)
    spec = np.concatenate(spec_parts).reshape(dims + (spectra.FIELD_BINS,))
    times = np.asarray(durations)
    return InferResult(
        fluence=normalizer.denormalize(flu_norm),
        fluence_norm=flu_norm,
        spectra=spec,
        duration_ms_mean=float(times.mean()),
        duration_ms_std=float(times.std()),
        runs=len(durations),
    )


def encode_spectrum(tube_spectrum: np.ndarray, model: Model) -> np.ndarray:
    """Encoded tube spectrum feature vector (spec_dim,)."""
    if model.spec_encoder is None:
        raise InvalidConfig(f"variant {model.config.variant!r} has no spectrum encoder")
    spec = np.asarray(tube_spectrum, dtype=np.float64)
    single = spec.ndim == 1
    with ag.no_grad():
        out = model._encode_spectra(spec[None, :] if single else spec)
    return out.data[0].copy() if single else out.data.copy()


def encode_distance(d, model: Model) -> np.ndarray:
    """Encoded tube distance feature vector (16,)."""
    if model.dist_encoder is None:
        raise InvalidConfig(f"variant {model.config.variant!r} has no distance encoder")
    arr = np.asarray(d, dtype=np.float64)
    single = arr.ndim == 0
    with ag.no_grad():
        out = model._encode_distances(arr.reshape(-1))
    return out.data[0].copy() if single else out.data.copy()
