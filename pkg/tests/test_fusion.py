from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperwalker.errors import ContractViolation, CorruptionError, DegenerateVectorError, FormatError
from hyperwalker.fusion import FusionParameters, film_backward, film_forward, fuse, layer_norm

from conftest import unit


def reference_fuse(z_img, z_ehr, p):
    """Straight-line re-implementation used as an oracle."""
    h = np.tanh(z_ehr @ p.W1 + p.b1)
    gamma = h @ p.W_gamma + p.b_gamma
    beta = h @ p.W_beta + p.b_beta
    x = (1 + gamma) * z_img + beta
    xc = x - x.mean()
    y = xc / np.sqrt(np.mean(xc ** 2) + 1e-5)
    return y / np.linalg.norm(y)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b)))


def test_identity_init_shapes_and_zero_heads():
    p = FusionParameters.identity(8, 5, seed=1)
    assert p.W1.shape == (8, 5) and p.W_gamma.shape == (5, 8) and p.W_beta.shape == (5, 8)
    for name in ("W_gamma", "b_gamma", "W_beta", "b_beta"):
        assert not np.any(getattr(p, name))
    assert np.all(np.abs(p.W1) <= 1 / np.sqrt(8))


def test_forward_matches_reference(rng):
    p = FusionParameters.random(6, 4, seed=3)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    np.testing.assert_allclose(fuse(a, b, p), reference_fuse(a, b, p), atol=1e-12)


def test_identity_output_ignores_ehr(rng):
    p = FusionParameters.identity(16, 32, seed=0)
    z = unit(rng, 16)
    want = layer_norm(z)[0]
    want = want / np.linalg.norm(want)
    for _ in range(20):
        np.testing.assert_allclose(fuse(z, rng.standard_normal(16), p), want, atol=1e-12)


@given(st.integers(0, 10_000))
def test_output_is_unit_length(seed):
    rng = np.random.default_rng(seed)
    p = FusionParameters.random(5, 3, seed=seed)
    out = fuse(rng.standard_normal(5), rng.standard_normal(5), p)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)


def test_constant_image_vector_is_degenerate():
    p = FusionParameters.identity(4, 3)
    with pytest.raises(DegenerateVectorError):
        fuse(np.ones(4), np.ones(4), p)


def test_shape_and_finiteness_checks():
    p = FusionParameters.identity(4, 3)
    with pytest.raises(ContractViolation):
        fuse(np.ones(5), np.ones(4), p)
    with pytest.raises(ContractViolation):
        fuse(np.array([1.0, np.inf, 0, 0]), np.ones(4), p)


def test_backward_rejects_foreign_cache(rng):
    p, q = FusionParameters.random(4, 3, seed=0), FusionParameters.random(4, 3, seed=1)
    _, cache = film_forward(rng.standard_normal(4), rng.standard_normal(4), p)
    with pytest.raises(ContractViolation):
        film_backward(cache, np.ones(4), q)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    p = FusionParameters.random(8, 6, seed=seed)
    a, b, u = rng.standard_normal(8), rng.standard_normal(8), rng.standard_normal(8)
    _, cache = film_forward(a, b, p)
    g = film_backward(cache, u, p)
    h = 1e-4

    def f():
        return float(u @ fuse(a, b, p))

    for name, arr in p.arrays().items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        assert rel_err(getattr(g, name), num) < 1e-4, name
    for name, x in (("z_img", a), ("z_ehr", b)):
        num = np.zeros(8)
        for i in range(8):
            old = x[i]
            x[i] = old + h
            fp = f()
            x[i] = old - h
            fm = f()
            x[i] = old
            num[i] = (fp - fm) / (2 * h)
        assert rel_err(getattr(g, name), num) < 1e-4, name


def test_zero_heads_give_zero_hidden_gradient(rng):
    p = FusionParameters.identity(8, 4, seed=0)
    _, cache = film_forward(unit(rng, 8), unit(rng, 8), p)
    g = film_backward(cache, rng.standard_normal(8), p)
    assert not np.any(g.W1) and not np.any(g.b1)
    assert np.any(g.W_gamma) and np.any(g.b_beta)


def test_checkpoint_round_trip_is_byte_identical():
    p = FusionParameters.identity(8, 4, seed=2)
    data = p.to_bytes()
    assert data[:4] == b"HWFP"
    back = FusionParameters.from_bytes(data)
    assert back.to_bytes() == data
    for k, v in p.arrays().items():
        assert np.array_equal(back.arrays()[k], v)


def test_checkpoint_corruption_and_foreign_magic():
    data = bytearray(FusionParameters.identity(4, 3).to_bytes())
    data[30] ^= 1
    with pytest.raises(CorruptionError):
        FusionParameters.from_bytes(bytes(data))
    with pytest.raises(FormatError):
        FusionParameters.from_bytes(b"HWIX" + bytes(data[4:]))


def test_copy_is_deep():
    p = FusionParameters.identity(4, 3)
    q = p.copy()
    q.W1[0, 0] += 1
    assert p.W1[0, 0] != q.W1[0, 0]
