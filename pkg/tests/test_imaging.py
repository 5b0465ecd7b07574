import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from energyrecon.imaging import (BayerMosaic, GaussianDownsample, GaussianNoise, Identity,
                                 LaplaceNoise, MixtureNoise, PoissonNoise, SaltPepperNoise,
                                 ShapeMismatchError, crop, load_image, make_noise, pad_reflect,
                                 psnr, rgb_to_y, save_image)


def _adjoint_gap(op, shape, rng):
    u = rng.normal(size=shape)
    v = rng.normal(size=op.out_shape(shape))
    lhs = np.sum(op.apply(u) * v)
    rhs = np.sum(u * op.adjoint(v))
    return abs(lhs - rhs) / max(abs(lhs), 1e-12)


def test_identity_returns_input():
    x = np.random.default_rng(0).random((1, 5, 7))
    assert np.array_equal(Identity().apply(x), x)


def test_downsample_shape():
    assert GaussianDownsample(3, 2.0).apply(np.ones((1, 12, 12))).shape == (1, 4, 4)


def test_downsample_rejects_bad_shape():
    with pytest.raises(ShapeMismatchError):
        GaussianDownsample(2).apply(np.ones((1, 7, 8)))


@pytest.mark.parametrize("op,shape", [
    (Identity(), (1, 8, 8)),
    (GaussianDownsample(2, 1.0), (1, 8, 8)),
    (GaussianDownsample(3, 2.0), (3, 12, 15)),
    (BayerMosaic("RGGB"), (3, 8, 8)),
    (BayerMosaic("GBRG"), (3, 6, 10)),
])
def test_adjointness(op, shape):
    rng = np.random.default_rng(1)
    assert max(_adjoint_gap(op, shape, rng) for _ in range(100)) < 1e-10


def test_bayer_init_exact_on_constant_color():
    img = np.ones((3, 8, 8)) * np.array([0.2, 0.5, 0.7])[:, None, None]
    op = BayerMosaic()
    rec = op.init(op.apply(img))
    assert np.allclose(rec[:, 2:-2, 2:-2], img[:, 2:-2, 2:-2])


def test_sisr_init_is_scaled_adjoint():
    op = GaussianDownsample(2, 1.0)
    z = np.random.default_rng(2).random((1, 4, 4))
    assert np.allclose(op.init(z), 4 * op.adjoint(z))


def test_gaussian_zero_sigma_is_identity():
    y = np.random.default_rng(0).random((1, 8, 8))
    assert np.array_equal(GaussianNoise(0.0, seed=1).corrupt(y), y)


def test_gaussian_std_monte_carlo():
    y = np.zeros((1, 1000, 1000))
    z = GaussianNoise(25 / 255, seed=3).corrupt(y)
    assert abs(z.std() / (25 / 255) - 1) < 0.01


def test_laplace_std_monte_carlo():
    z = LaplaceNoise(25 / 255, seed=4).corrupt(np.zeros((1, 1000, 1000)))
    assert abs(z.std() / (25 / 255) - 1) < 0.01


def test_salt_pepper_count_and_values():
    y = np.full((1, 40, 25), 0.5)
    z = SaltPepperNoise(0.5, seed=5).corrupt(y)
    changed = z != y
    assert 400 <= changed.sum() <= 600
    assert set(np.unique(z[changed])) <= {0.0, 1.0}


def test_poisson_mean():
    y = np.full((1, 500, 500), 0.5)
    z = PoissonNoise(4.0, seed=6).corrupt(y)
    assert abs(z.mean() - 0.5) < 0.01
    assert np.allclose(z * 4, np.round(z * 4))


def test_mixture_expected_psnr():
    # expected MSE: 0.1 * (25/255)^2 / 3 + 0.2 / 255^2 + 0.7 * 0.1 / 255^2
    y = np.full((1, 512, 512), 0.5)
    z = MixtureNoise(seed=7).corrupt(y)
    assert abs(psnr(z, y) - 34.90) < 0.1


def test_noise_parameter_errors():
    with pytest.raises(ValueError):
        GaussianNoise(-1.0)
    with pytest.raises(ValueError):
        SaltPepperNoise(1.5)


@pytest.mark.parametrize("kind,params", [("gaussian", {"sigma": 0.1}), ("laplace", {"sigma": 0.1}),
                                         ("salt-pepper", {"fraction": 0.3}), ("poisson", {}),
                                         ("mixture", {})])
def test_seeded_noise_is_bit_identical(kind, params):
    y = np.random.default_rng(0).random((1, 16, 16))
    a = make_noise(kind, seed=11, **params).corrupt(y)
    b = make_noise(kind, seed=11, **params).corrupt(y)
    assert np.array_equal(a, b)


def test_psnr_examples():
    x = np.random.default_rng(0).random((1, 8, 8))
    assert psnr(x, x) == float("inf")
    assert psnr(x + 0.1, x) == pytest.approx(20.0)
    y = np.random.default_rng(1).random((1, 8, 8))
    assert psnr(x, y) == pytest.approx(10 * np.log10(1 / np.mean((x - y) ** 2)))


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        psnr(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.001, 0.3), st.floats(0.001, 0.3))
def test_psnr_symmetric_and_decreasing(a, b):
    x = np.random.default_rng(0).random((1, 6, 6))
    assert psnr(x, x + a) == pytest.approx(psnr(x + a, x))
    if abs(a - b) > 1e-6:
        assert (psnr(x + a, x) > psnr(x + b, x)) == (a < b)


def test_psnr_y_channel_and_border():
    rng = np.random.default_rng(2)
    x, y = rng.random((3, 10, 10)), rng.random((3, 10, 10))
    ref = 10 * np.log10(1 / np.mean((rgb_to_y(x) - rgb_to_y(y))[:, 2:-2, 2:-2] ** 2))
    assert psnr(x, y, y_channel=True, border=2) == pytest.approx(ref)


def test_pad_reflect_row_example():
    row = np.array([[[1.0, 2.0, 3.0]] * 3])
    assert np.array_equal(pad_reflect(row, 1)[0, 1], [2.0, 1.0, 2.0, 3.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.data())
def test_pad_crop_roundtrip(h, w, data):
    m = data.draw(st.integers(0, min(h, w) - 1))
    img = np.random.default_rng(h * 13 + w).random((2, h, w))
    assert np.array_equal(crop(pad_reflect(img, m), m), img)


def test_pad_margin_too_large():
    with pytest.raises(ValueError):
        pad_reflect(np.zeros((1, 4, 4)), 4)


@pytest.mark.parametrize("channels,bits,suffix", [(1, 8, ".png"), (3, 8, ".png"), (1, 16, ".png"),
                                                  (1, 8, ".pgm"), (3, 16, ".ppm")])
def test_image_roundtrip(tmp_path, channels, bits, suffix):
    maxval = 2 ** bits - 1
    rng = np.random.default_rng(channels + bits)
    img = rng.integers(0, maxval + 1, size=(channels, 9, 7)) / maxval
    path = tmp_path / f"img{suffix}"
    save_image(img, path, bit_depth=bits)
    assert np.array_equal(load_image(path), img)


def test_npy_roundtrip_keeps_out_of_range_values(tmp_path):
    img = np.random.default_rng(0).normal(size=(1, 5, 5))
    save_image(img, tmp_path / "a.npy")
    assert np.array_equal(load_image(tmp_path / "a.npy"), img)


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ValueError):
        load_image(bad)
