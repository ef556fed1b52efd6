"""Radix-2 discrete Fourier transform for power-of-two images.

Unnormalized forward convention (DC at index (0,0)), so Parseval reads
sum |F|^2 = H * W * sum |x|^2.
"""

from __future__ import annotations

import numpy as np


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse_permutation(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=int)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_rows(a):
    """Iterative radix-2 FFT along the last axis of a 2-D complex array."""
    a = np.asarray(a, dtype=np.complex128)
    m, n = a.shape
    if not _is_pow2(n):
        raise ValueError(f"length {n} is not a power of two")
    if n == 1:
        return a.copy()
    a = a[:, _bit_reverse_permutation(n)]
    size = 2
    while size <= n:
        half = size // 2
        w = np.exp(-2j * np.pi * np.arange(half) / size)
        b = a.reshape(m, n // size, size)
        even = b[:, :, :half]
        odd = b[:, :, half:] * w
        nxt = np.empty_like(b)
        nxt[:, :, :half] = even + odd
        nxt[:, :, half:] = even - odd
        a = nxt.reshape(m, n)
        size *= 2
    return a


def dft2d(image):
    """2-D DFT of a real or complex H x W image; H, W must be powers of two."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected 2-D image, got shape {image.shape}")
    h, w = image.shape
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"dimensions {h}x{w} must be powers of two")
    spec = fft_rows(image.astype(np.complex128))
    spec = fft_rows(spec.T).T
    return spec


def dft2d_magnitude(image):
    """Spectral magnitudes of the 2-D DFT, DC at (0,0)."""
    return np.abs(dft2d(image))
