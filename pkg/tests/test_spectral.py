import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cad.errors import ConfigError, ShapeError
from cad.spectral import (
    ComplexPlane,
    HfcConfig,
    build_adapter_input,
    center_mask,
    dft1,
    dft2,
    extract_hfc,
    fftshift,
    hfc_visual,
    idft2,
    ifftshift,
)


def naive_dft2(x):
    """Direct double sum, O(N^2) per bin."""
    h, w = x.shape
    out = np.zeros((h, w), complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for y in range(h):
                for z in range(w):
                    acc += x[y, z] * np.exp(-2j * np.pi * (u * y / h + v * z / w))
            out[u, v] = acc
    return out


def naive_hfc(x, tau):
    h, w = x.shape
    spec = naive_dft2(x)
    for u in range(h):
        for v in range(w):
            su, sv = (u + h // 2) % h, (v + w // 2) % w  # index after shifting
            if abs(su - h // 2) <= int(tau * h / 2) and abs(sv - w // 2) <= int(tau * w / 2):
                spec[u, v] = 0
    return np.conj(naive_dft2(np.conj(spec))).real / (h * w)


@pytest.mark.parametrize("n", [8, 16])
def test_dft2_matches_naive_oracle(n):
    x = np.random.default_rng(n).normal(size=(n, n))
    assert np.max(np.abs(dft2(x).to_complex() - naive_dft2(x))) < 1e-9


@pytest.mark.parametrize("n", [8, 16])
def test_hfc_matches_naive_oracle(n):
    x = np.random.default_rng(100 + n).normal(size=(n, n))
    assert np.max(np.abs(extract_hfc(x, HfcConfig(0.25)) - naive_hfc(x, 0.25))) < 1e-9


@pytest.mark.parametrize("shape", [(6, 10), (5, 7), (12, 8)])
def test_non_power_of_two_uses_direct_dft(shape):
    x = np.random.default_rng(1).normal(size=shape)
    assert np.max(np.abs(dft2(x).to_complex() - naive_dft2(x))) < 1e-9
    back, resid = idft2(dft2(x))
    assert np.max(np.abs(back - x)) < 1e-12 and resid < 1e-12


def test_roundtrip_64():
    x = np.random.default_rng(2).uniform(size=(64, 64))
    back, resid = idft2(dft2(x))
    assert np.max(np.abs(back - x)) < 1e-9
    assert resid < 1e-9


def test_constant_image_is_dc_only():
    spec = dft2(np.full((8, 8), 3.0)).to_complex()
    assert spec[0, 0] == pytest.approx(3.0 * 64)
    spec[0, 0] = 0
    assert np.max(np.abs(spec)) < 1e-12


def test_cosine_has_two_conjugate_bins():
    u0 = 3
    x = np.tile(np.cos(2 * np.pi * u0 * np.arange(8) / 8), (8, 1))
    spec = dft2(x).to_complex()
    naive = naive_dft2(x)
    assert np.max(np.abs(spec - naive)) < 1e-9
    big = np.argwhere(np.abs(spec) > 1e-6)
    assert sorted(map(tuple, big)) == [(0, u0), (0, 8 - u0)]
    assert spec[0, u0] == pytest.approx(np.conj(spec[0, 8 - u0]))


def test_dft1_against_matrix_dft():
    x = np.random.default_rng(3).normal(size=(4, 32))
    k = np.arange(32)
    direct = x @ np.exp(-2j * np.pi * np.outer(k, k) / 32)
    assert np.max(np.abs(dft1(x) - direct)) < 1e-10


def test_fftshift_examples():
    p = np.zeros((4, 4))
    p[0, 0] = 1
    s = fftshift(ComplexPlane(p, np.zeros_like(p)))
    assert s.re[2, 2] == 1 and s.re.sum() == 1
    q = np.zeros((3, 3))
    q[0, 0] = 1
    assert fftshift(ComplexPlane(q, np.zeros_like(q))).re[1, 1] == 1
    z = np.random.default_rng(4).normal(size=(5, 5))
    plane = ComplexPlane(z, -z)
    back = ifftshift(fftshift(plane))
    assert np.array_equal(back.re, z) and np.array_equal(back.im, -z)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9))
def test_shift_pair_is_inverse_for_any_extent(h, w):
    z = np.arange(h * w, dtype=float).reshape(h, w)
    plane = ComplexPlane(z, z + 1)
    assert np.array_equal(ifftshift(fftshift(plane)).re, z)
    assert np.array_equal(fftshift(ifftshift(plane)).im, z + 1)


def test_complex_plane_validation():
    with pytest.raises(ShapeError):
        ComplexPlane(np.zeros((2, 2)), np.zeros((2, 3)))


def test_center_mask_half_widths():
    m = center_mask(16, 16, 0.25)
    assert m.sum() == 5 * 5
    assert m[8, 8] and m[6, 10] and not m[5, 8]
    assert center_mask(8, 8, 0.0).sum() == 1


def test_hfc_of_constant_is_zero():
    for tau in (0.0, 0.1, 0.25, 0.9):
        assert np.max(np.abs(extract_hfc(np.full((16, 16), 0.7), tau))) < 1e-9


def test_tau_zero_removes_mean():
    x = np.random.default_rng(5).uniform(size=(12, 16))
    np.testing.assert_allclose(extract_hfc(x, 0.0), x - x.mean(), atol=1e-12)


def test_checkerboard_survives():
    yy, xx = np.mgrid[0:16, 0:16]
    board = (-1.0) ** (yy + xx)
    assert np.max(np.abs(extract_hfc(board, 0.25) - board)) < 1e-9


def test_hfc_removes_low_frequency():
    xx = np.arange(32) / 32
    smooth = np.tile(np.sin(2 * np.pi * xx), (32, 1))
    assert np.max(np.abs(extract_hfc(smooth, 0.25))) < 1e-9


def test_hfc_stack_matches_planewise():
    x = np.random.default_rng(6).uniform(size=(2, 3, 8, 8))
    stacked = extract_hfc(x, 0.25)
    for i in range(2):
        for c in range(3):
            np.testing.assert_allclose(stacked[i, c], extract_hfc(x[i, c], 0.25), atol=1e-14)


def test_config_errors():
    for bad in (1.0, 1.5, -0.1):
        with pytest.raises(ConfigError):
            HfcConfig(bad)
    with pytest.raises(ValueError):
        extract_hfc(np.array([[np.nan, 0.0], [0.0, 0.0]]))


def test_adapter_input_stack():
    img = np.random.default_rng(7).uniform(size=(2, 3, 16, 16)).astype(np.float32)
    t = build_adapter_input(img)
    assert t.shape == (2, 6, 16, 16) and not t.requires_grad and t.dtype == np.float32
    np.testing.assert_array_equal(t.data[:, :3], img)
    np.testing.assert_allclose(t.data[:, 3:], extract_hfc(img.astype(np.float64)), atol=1e-6)
    with pytest.raises(ShapeError):
        build_adapter_input(np.zeros((2, 1, 8, 8)))


def test_hfc_visual_stretch():
    v = hfc_visual(np.stack([np.linspace(-1, 1, 16).reshape(4, 4), np.zeros((4, 4))]))
    assert v.dtype == np.uint8 and v[0].min() == 0 and v[0].max() == 255 and v[1].max() == 0
