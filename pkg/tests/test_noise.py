import io

import numpy as np
import pytest

from fracnull.errors import InvalidInputError, ResourceLimitError
from fracnull.grid import Grid
from fracnull.noise import (
    NoiseSeed,
    dump_paths,
    fbm_covariance,
    kernel_sampler_covariance,
    load_paths,
    paths_from_normals,
    sample_fbm_cholesky,
    sample_fbm_kernel,
)


def test_seed_validation():
    with pytest.raises(InvalidInputError):
        NoiseSeed(-1)
    with pytest.raises(InvalidInputError):
        NoiseSeed(2**64)
    with pytest.raises(InvalidInputError):
        NoiseSeed(3, stream_id=-2)
    assert NoiseSeed.coerce(5) == NoiseSeed(5)


def test_generators_are_addressable():
    s = NoiseSeed(11)
    a = s.generator(3, 1).standard_normal(4)
    b = s.generator(3, 1).standard_normal(4)
    c = s.generator(4, 1).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_covariance_formula():
    assert fbm_covariance(0.5, 0.3, 0.7) == pytest.approx(0.3)
    assert fbm_covariance(0.75, 1.0, 1.0) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        fbm_covariance(0.5, -1.0, 1.0)


@pytest.mark.parametrize("beta", [0.25, 0.5, 0.75])
def test_kernel_sampler_matches_fbm_covariance(beta):
    g = Grid(1.0, 64)
    C = kernel_sampler_covariance(beta, g)
    t = g.nodes
    exact = fbm_covariance(beta, t[:, None], t[None, :])
    k = C.shape[0]
    assert np.max(np.abs(C - exact[-k:, -k:])) < 2e-3


def test_batches_reproduce_single_call():
    g = Grid(1.0, 128)
    full = sample_fbm_kernel(0.3, g, 2, 10, seed=7)
    head = sample_fbm_kernel(0.3, g, 2, 4, seed=7)
    tail = sample_fbm_kernel(0.3, g, 2, 6, seed=7, path_offset=4)
    joined = np.concatenate([head.paths, tail.paths])
    assert np.array_equal(full.paths, joined)
    assert np.all(full.paths[..., 0] == 0.0)


def test_paths_are_linear_in_normals():
    g = Grid(1.0, 64)
    rng = np.random.default_rng(0)
    n1 = rng.standard_normal((3, 1, 2 * 64 + 2))
    n2 = rng.standard_normal(n1.shape)
    lhs = paths_from_normals(0.7, g, n1 + n2)
    rhs = paths_from_normals(0.7, g, n1) + paths_from_normals(0.7, g, n2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_white_increments_only_for_kernel_method():
    g = Grid(1.0, 64)
    ps = sample_fbm_kernel(0.5, g, 1, 2, seed=1)
    assert ps.white_increments.shape == (2, 1, 64)
    ch = sample_fbm_cholesky(0.5, g, 1, 2, seed=1)
    assert ch.paths.shape == (2, 1, 65)
    with pytest.raises(InvalidInputError):
        ch.white_increments


def test_brownian_case_is_cumulative_white_noise():
    g = Grid(1.0, 64)
    ps = sample_fbm_kernel(0.5, g, 1, 3, seed=2)
    cum = np.cumsum(ps.white_increments, axis=-1)
    assert np.allclose(ps.paths[..., 1:], cum, atol=1e-12)


def test_resource_cap():
    with pytest.raises(ResourceLimitError):
        sample_fbm_kernel(0.5, Grid(1.0, 64), 10, 1000, seed=0, max_elements=1000)


def test_dump_roundtrip():
    a = np.arange(24, dtype=float).reshape(2, 3, 4) / 7
    buf = io.BytesIO()
    dump_paths(a, buf)
    buf.seek(0)
    assert np.array_equal(load_paths(buf), a)
    with pytest.raises(InvalidInputError):
        load_paths(io.BytesIO(b"XXXX\x00\x00\x00\x00"))
