"""Model family: configuration, parameter bookkeeping, forward-pass
invariants, fusion initialization, and SRFM checkpoints."""

import json
import struct
import zlib

import numpy as np
import pytest

import srf.nn.autograd as ag
from srf.errors import (BadMagic, CheckpointMismatch, ChecksumMismatch,
                        InvalidConfig, MissingNormalizer, NegativeBin,
                        NonFiniteParameters, TruncatedFile,
                        VersionUnsupported, WidthMismatch)
from srf.nn import (Model, ModelConfig, encode_distance, encode_spectrum,
                    infer_field, load_checkpoint, save_checkpoint)
from srf.nn.autograd import Tensor
from srf.nn.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from srf.nn.model import (DIST_MLP_WIDTH, SPEC_RESAMPLED_BINS, FiLMFusion,
                          GMUFusion)
from srf.normalize import Normalizer


def tiny_config(**kw):
    base = dict(width=24, depth=2, L=3, l_max=2, spec_dim=8)
    base.update(kw)
    return ModelConfig(**base)


# --- configuration -----------------------------------------------------------


def test_config_validation():
    with pytest.raises(InvalidConfig):
        ModelConfig(variant="mlp")
    with pytest.raises(InvalidConfig):
        ModelConfig(fusion="attention")
    with pytest.raises(InvalidConfig):
        ModelConfig(width=0)
    with pytest.raises(InvalidConfig):
        ModelConfig(normalizer="maxlog")          # needs alpha
    ModelConfig(normalizer="maxlog", alpha=100.0)  # fine


def test_config_json_round_trip():
    cfg = tiny_config(variant="pbrf", fusion="gmu", normalizer="maxlog",
                      alpha=31.0, jitter=True)
    again = ModelConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg


# --- parameter counting -------------------------------------------------------


def expected_n_params(cfg: ModelConfig) -> int:
    """Independent re-derivation of the parameter count."""
    w = cfg.width
    loc_in = 3 * (2 * cfg.L + 1)
    g_in = cfg.l_max ** 2 + 3

    def linear(n_in, n_out, bias=True):
        return n_in * n_out + (n_out if bias else 0)

    total = 0
    if cfg.variant in ("sperf", "pbrf"):
        total += linear(SPEC_RESAMPLED_BINS, 32) + 2 * 32 + linear(32, cfg.spec_dim)
        g_in += cfg.spec_dim
    if cfg.variant == "pbrf":
        total += linear(1, DIST_MLP_WIDTH) + linear(DIST_MLP_WIDTH, DIST_MLP_WIDTH)
        g_in += DIST_MLP_WIDTH
    total += linear(g_in, w) + linear(w, w)               # global block
    total += linear(loc_in, w) + (cfg.depth - 1) * linear(w, w)   # block 1
    total += cfg.depth * linear(w, w)                     # block 2
    if cfg.fusion == "concat":
        fusion = linear(2 * w, w)
    elif cfg.fusion in ("film", "resfilm"):
        fusion = 2 * linear(w, w)
    else:                                                 # gmu
        fusion = 2 * w * w + 2 * w * w
    total += 2 * fusion
    total += linear(w, 1) + linear(w, 32)                 # heads
    return total


@pytest.mark.parametrize("variant", ["srbf", "sperf", "pbrf"])
@pytest.mark.parametrize("fusion", ["concat", "film", "resfilm", "gmu"])
def test_parameter_count_matches_formula(variant, fusion):
    cfg = tiny_config(variant=variant, fusion=fusion)
    assert Model(cfg, seed=0).n_params == expected_n_params(cfg)


def test_seeded_construction_is_deterministic():
    a = Model(tiny_config(), seed=5).parameters()
    b = Model(tiny_config(), seed=5).parameters()
    c = Model(tiny_config(), seed=6).parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


# --- forward ------------------------------------------------------------------


def test_forward_shapes_and_ranges(small_beam, rng):
    model = Model(tiny_config(), seed=1)
    locs = rng.uniform(0.0, 1.0, (17, 3))
    flu, spec = model.forward(locs, [small_beam])
    assert flu.shape == (17,)
    assert spec.shape == (17, 32)
    assert np.all(flu.data > 0.0) and np.all(flu.data < 1.0)
    assert np.all(spec.data > 0.0)
    np.testing.assert_allclose(spec.data.sum(axis=-1), 1.0, rtol=1e-12)


def test_forward_maxsym_uses_symmetric_range(small_beam, rng):
    model = Model(tiny_config(normalizer="maxsym"), seed=1)
    flu, _ = model.forward(rng.uniform(0.0, 1.0, (9, 3)), [small_beam])
    assert np.all(flu.data >= -1.0) and np.all(flu.data <= 1.0)


def test_forward_is_batch_invariant_bitwise(small_beam, rng):
    model = Model(tiny_config(variant="sperf"), seed=2)
    locs = rng.uniform(0.0, 1.0, (6, 3))
    flu_all, spec_all = model.forward(locs, [small_beam])
    for i in range(6):
        flu_one, spec_one = model.forward(locs[i:i + 1], [small_beam])
        assert np.array_equal(flu_one.data[0], flu_all.data[i])
        assert np.array_equal(spec_one.data[0], spec_all.data[i])


def test_forward_single_matches_batch(small_beam):
    model = Model(tiny_config(), seed=3)
    loc = np.array([0.3, 0.6, 0.2])
    flu, spec = model.forward_single(loc, small_beam)
    flu_b, spec_b = model.forward(loc[None, :], [small_beam])
    assert flu == flu_b.data[0]
    np.testing.assert_array_equal(spec, spec_b.data[0])


def test_field_idx_routes_conditioning(small_beam, rng):
    import dataclasses
    other = dataclasses.replace(
        small_beam, direction=np.array([0.0, 1.0, 0.0]))
    model = Model(tiny_config(), seed=4)
    locs = rng.uniform(0.0, 1.0, (4, 3))
    idx = np.array([0, 1, 0, 1])
    flu, _ = model.forward(locs, [small_beam, other], field_idx=idx)
    flu_a, _ = model.forward(locs[[0, 2]], [small_beam])
    flu_b, _ = model.forward(locs[[1, 3]], [other])
    np.testing.assert_array_equal(flu.data[[0, 2]], flu_a.data)
    np.testing.assert_array_equal(flu.data[[1, 3]], flu_b.data)


def test_non_finite_parameters_rejected(small_beam):
    model = Model(tiny_config(), seed=0)
    bad = {k: v.data.copy() for k, v in model.parameters().items()}
    key = next(iter(bad))
    bad[key][0] = np.nan
    model.set_parameters(bad)
    with pytest.raises(NonFiniteParameters):
        model.forward(np.full((1, 3), 0.5), [small_beam])


def test_spectrum_encoder_rejects_negative_bins():
    model = Model(tiny_config(variant="sperf"), seed=0)
    spec = np.ones(150)
    spec[3] = -1.0
    with pytest.raises(NegativeBin):
        model._encode_spectra(spec[None, :])


def test_encoder_accessors_respect_variant(small_beam):
    srbf = Model(tiny_config(), seed=0)
    with pytest.raises(InvalidConfig):
        encode_spectrum(small_beam.tube_spectrum, srbf)
    with pytest.raises(InvalidConfig):
        encode_distance(0.5, srbf)
    sperf = Model(tiny_config(variant="sperf"), seed=0)
    vec = encode_spectrum(small_beam.tube_spectrum, sperf)
    assert vec.shape == (8,)
    pbrf = Model(tiny_config(variant="pbrf"), seed=0)
    assert encode_distance(0.5, pbrf).shape == (DIST_MLP_WIDTH,)


def test_distance_outside_range_warns():
    pbrf = Model(tiny_config(variant="pbrf"), seed=0)
    with pytest.warns(UserWarning):
        encode_distance(5.0, pbrf)


# --- fusion initialization ----------------------------------------------------


def test_film_starts_as_identity(rng):
    h = Tensor(rng.standard_normal((5, 24)))
    g = Tensor(rng.standard_normal((5, 24)))
    film = FiLMFusion(24, np.random.default_rng(0))
    np.testing.assert_array_equal(film(h, g).data, h.data)
    res = FiLMFusion(24, np.random.default_rng(0), residual=True)
    np.testing.assert_array_equal(res(h, g).data, h.data)
    gmu = GMUFusion(24, np.random.default_rng(0))
    assert not np.array_equal(gmu(h, g).data, h.data)


def test_fusion_width_mismatch(rng):
    film = FiLMFusion(24, np.random.default_rng(0))
    with pytest.raises(WidthMismatch):
        film(Tensor(np.zeros((2, 16))), Tensor(np.zeros((2, 24))))


def test_set_parameters_shape_check():
    model = Model(tiny_config(), seed=0)
    arrays = {k: v.data.copy() for k, v in model.parameters().items()}
    key = next(iter(arrays))
    arrays[key] = np.zeros((2, 2))
    with pytest.raises(InvalidConfig):
        model.set_parameters(arrays)


# --- whole-model gradients -----------------------------------------------------


def test_model_loss_gradients_match_finite_differences(small_beam, rng):
    from conftest import fd_check
    model = Model(tiny_config(width=10, depth=1, L=2, l_max=2), seed=7)
    locs = rng.uniform(0.2, 0.8, (5, 3))
    params = list(model.parameters().values())

    def build():
        flu, spec = model.forward(locs, [small_beam])
        return ag.sum_(flu) + ag.sum_(spec * Tensor(np.linspace(0.0, 1.0, 32)))

    fd_check(build, params, rng, max_checks=4)


# --- inference ------------------------------------------------------------------


def test_infer_field_shapes_and_batch_independence(small_beam):
    model = Model(tiny_config(), seed=8)
    a = infer_field(model, small_beam, (4, 5, 6), batch=7)
    b = infer_field(model, small_beam, (4, 5, 6), batch=120)
    assert a.fluence.shape == (4, 5, 6)
    assert a.spectra.shape == (4, 5, 6, 32)
    # BLAS picks different gemm kernels for different batch heights, so
    # chunked inference matches unchunked only to ULP level, not bitwise.
    np.testing.assert_allclose(a.fluence, b.fluence, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a.spectra, b.spectra, rtol=1e-12, atol=1e-14)
    # Determinism: repeating the same chunking is bitwise identical.
    again = infer_field(model, small_beam, (4, 5, 6), batch=7)
    np.testing.assert_array_equal(a.fluence, again.fluence)
    np.testing.assert_array_equal(a.spectra, again.spectra)
    assert a.duration_ms_mean > 0.0


def test_infer_field_denormalizes(small_beam):
    model = Model(tiny_config(), seed=8)
    rel = infer_field(model, small_beam, (3, 3, 3))
    norm = Normalizer.max_norm01().fit(np.array([50.0]))
    scaled = infer_field(model, small_beam, (3, 3, 3), normalizer=norm)
    np.testing.assert_allclose(scaled.fluence, rel.fluence * 50.0, rtol=1e-12)
    np.testing.assert_array_equal(scaled.fluence_norm, rel.fluence_norm)


def test_timing_line_format(small_beam):
    model = Model(tiny_config(), seed=8)
    line = infer_field(model, small_beam, (3, 3, 3), repeats=3).timing_line()
    assert " ms ± " in line and line.endswith(" ms")


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_identical():
    model = Model(tiny_config(variant="pbrf", fusion="gmu",
                              normalizer="maxlog", alpha=12.5), seed=9)
    blob = checkpoint_to_bytes(model)
    again = checkpoint_from_bytes(blob)
    assert again.config == model.config
    # Storage is float32, so loaded values equal the originals rounded to f32.
    for k, p in model.parameters().items():
        expected = p.data.astype(np.float32).astype(np.float64)
        assert np.array_equal(again.parameters()[k].data, expected)
    assert checkpoint_to_bytes(again) == blob


def test_checkpoint_file_round_trip(tmp_path):
    model = Model(tiny_config(), seed=10)
    path = save_checkpoint(model, tmp_path / "model.srfm")
    again = load_checkpoint(path)
    assert again.config == model.config
    for k, p in model.parameters().items():
        expected = p.data.astype(np.float32).astype(np.float64)
        assert np.array_equal(again.parameters()[k].data, expected)


def test_checkpoint_corruption_errors():
    model = Model(tiny_config(), seed=11)
    blob = bytearray(checkpoint_to_bytes(model))
    bad_magic = bytearray(blob); bad_magic[:4] = b"NOPE"
    with pytest.raises(BadMagic):
        checkpoint_from_bytes(bytes(bad_magic))
    bad_version = bytearray(blob); struct.pack_into("<I", bad_version, 4, 7)
    with pytest.raises(VersionUnsupported):
        checkpoint_from_bytes(bytes(bad_version))
    with pytest.raises(TruncatedFile):
        checkpoint_from_bytes(bytes(blob[:-5]))
    flipped = bytearray(blob); flipped[-40] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        checkpoint_from_bytes(bytes(flipped))


def _rewrite_header(blob: bytes, mutate) -> bytes:
    (header_len,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    mutate(header)
    new_header = json.dumps(header, sort_keys=True).encode("utf-8")
    body = (blob[:8] + struct.pack("<I", len(new_header)) + new_header
            + blob[12 + header_len:-4])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_checkpoint_missing_normalizer():
    model = Model(tiny_config(), seed=12)

    def drop_normalizer(header):
        del header["config"]["normalizer"]

    blob = _rewrite_header(checkpoint_to_bytes(model), drop_normalizer)
    with pytest.raises(MissingNormalizer):
        checkpoint_from_bytes(blob)


def test_checkpoint_param_mismatch():
    model = Model(tiny_config(), seed=13)

    def swap_shape(header):
        header["params"][0]["shape"] = [1, 1]

    blob = _rewrite_header(checkpoint_to_bytes(model), swap_shape)
    with pytest.raises(CheckpointMismatch):
        checkpoint_from_bytes(blob)
