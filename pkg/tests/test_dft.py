import numpy as np
import pytest

from ocad.numerics import dft2d, dft2d_magnitude


def naive_dft2d(image):
    """O(N^4) reference transform."""
    h, w = image.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0.0 + 0.0j
            for r in range(h):
                for c in range(w):
                    acc += image[r, c] * np.exp(
                        -2j * np.pi * (u * r / h + v * c / w))
            out[u, v] = acc
    return out


def test_constant_image_is_dc_only():
    c = 3.0
    mag = dft2d_magnitude(np.full((8, 8), c))
    assert mag[0, 0] == pytest.approx(64 * c)
    rest = mag.copy()
    rest[0, 0] = 0.0
    assert np.all(np.abs(rest) < 1e-9)


def test_zero_image_gives_zero_spectrum():
    assert np.all(dft2d_magnitude(np.zeros((16, 8))) == 0.0)


def test_pure_horizontal_cosine_concentrates_at_its_frequency():
    h, w, k = 8, 16, 3
    x = np.cos(2 * np.pi * k * np.arange(w) / w)
    image = np.tile(x, (h, 1))
    mag = dft2d_magnitude(image)
    ref = np.abs(naive_dft2d(image))
    assert np.max(np.abs(mag - ref)) < 1e-8
    mask = np.zeros((h, w), dtype=bool)
    mask[0, k] = mask[0, w - k] = True
    assert np.all(mag[mask] > 1.0)
    assert np.all(mag[~mask] < 1e-9)


@pytest.mark.parametrize("h", [1, 2, 4, 8, 16])
@pytest.mark.parametrize("w", [1, 2, 4, 8, 16])
def test_matches_naive_dft_on_all_power_of_two_sizes(h, w):
    rng = np.random.default_rng(h * 100 + w)
    image = rng.normal(size=(h, w))
    assert np.max(np.abs(dft2d(image) - naive_dft2d(image))) < 1e-8


def test_parseval_on_random_64x64():
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = rng.normal(size=(64, 64))
        f = dft2d(x)
        lhs = np.sum(np.abs(f) ** 2)
        rhs = 64 * 64 * np.sum(x * x)
        assert abs(lhs - rhs) / rhs < 1e-10


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError, match="powers of two"):
        dft2d_magnitude(np.zeros((6, 8)))
    with pytest.raises(ValueError, match="powers of two"):
        dft2d_magnitude(np.zeros((8, 12)))
