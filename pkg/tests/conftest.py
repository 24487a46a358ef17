"""Shared fixtures and the finite-difference gradient checker."""

from __future__ import annotations

import numpy as np
import pytest

from srf.field import BeamParams, ConeBeam
from srf.synth import GeneratorConfig, gen_field, gen_spectrum


def fd_check(build, params, rng, eps=1e-6, rtol=1e-4, atol=1e-7,
             max_checks=25):
    """Compare autodiff gradients of the scalar `build()` against central
    differences for every tensor in `params`.

    `build` must recompute the graph from the tensors' current `.data`
    each call.  A subset of entries per tensor is probed (seeded).
    Returns the worst absolute-difference-over-tolerance ratio seen.
    """
    for p in params:
        p.grad = None
    build().backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.ravel()
        gflat = g.ravel()
        n = flat.size
        idx = (np.arange(n) if n <= max_checks
               else rng.choice(n, size=max_checks, replace=False))
        for i in idx:
            old = flat[i]
            step = eps * max(1.0, abs(old))
            flat[i] = old + step
            f_plus = build().item()
            flat[i] = old - step
            f_minus = build().item()
            flat[i] = old
            fd = (f_plus - f_minus) / (2.0 * step)
            tol = rtol * max(abs(fd), abs(gflat[i])) + atol
            diff = abs(fd - gflat[i])
            worst = max(worst, diff / tol)
            assert diff <= tol, (
                f"gradient mismatch at flat index {i}: autodiff {gflat[i]!r} "
                f"vs finite difference {fd!r}")
    return worst


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def small_cfg():
    """8^3 grid over a 32 cm cube; voxels are 4 cm, below both gamma
    distance criteria."""
    return GeneratorConfig.ds01(dims=(8, 8, 8), extent=0.04, seed=3)


@pytest.fixture(scope="session")
def small_field(small_cfg):
    beam = BeamParams(
        direction=np.array([0.0, 0.0, -1.0]),
        tube_distance=1.0,
        tube_spectrum=gen_spectrum(100.0, 2.5, 0.0),
        beam_shape=ConeBeam(10.0))
    return gen_field(beam, small_cfg)


@pytest.fixture(scope="session")
def small_beam(small_field):
    return small_field.meta
