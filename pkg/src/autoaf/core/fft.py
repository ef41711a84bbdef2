"""Iterative radix-2 FFT over the last axis of an array.

Forward transform is unnormalized; the inverse carries the 1/N factor.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


class FFTSizeError(ValueError):
    """Raised when a transform length is not a positive power of two."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=64)
def _plan(n: int):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    twiddles = []
    size = 2
    while size <= n:
        half = size // 2
        twiddles.append(np.exp(-2j * np.pi * np.arange(half) / size))
        size *= 2
    return rev, tuple(twiddles)


def _transform(x: np.ndarray, inverse: bool) -> np.ndarray:
    x = np.asarray(x)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise FFTSizeError(f"FFT length must be a power of two, got {n}")
    rev, twiddles = _plan(n)
    lead = x.shape[:-1]
    a = x.astype(np.complex128, copy=False)[..., rev].reshape(-1, n)
    size = 2
    for tw in twiddles:
        half = size // 2
        if inverse:
            tw = tw.conj()
        a = a.reshape(a.shape[0], n // size, 2, half)
        even = a[:, :, 0, :]
        odd = a[:, :, 1, :] * tw
        a = np.concatenate((even + odd, even - odd), axis=-1)
        size *= 2
    a = a.reshape(lead + (n,))
    if inverse:
        a = a / n
    return a


def fft(x: np.ndarray) -> np.ndarray:
    """Unnormalized DFT along the last axis."""
    return _transform(x, inverse=False)


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft` (includes the 1/N scaling)."""
    return _transform(x, inverse=True)


def naive_dft(x: np.ndarray) -> np.ndarray:
    """O(N^2) reference DFT, used as a test oracle."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    out = np.zeros_like(x)
    for j in range(n):
        out[..., j] = np.sum(x * np.exp(-2j * np.pi * j * k / n), axis=-1)
    return out
