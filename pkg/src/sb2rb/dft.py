"""Unitary DFT conventions shared by every module.

Channels carry delay ``tau`` as ``exp(-j 2 pi f tau)`` along frequency, so the
frequency -> delay map is the unitary *inverse* DFT (a tap at delay bin k lands
at index k) and delay -> frequency is the unitary forward DFT.
"""
import numpy as np


def to_delay(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.fft.ifft(x, axis=axis, norm="ortho")


def to_freq(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.fft.fft(x, axis=axis, norm="ortho")


def freq_matrix(n: int) -> np.ndarray:
    """Matrix ``F`` with ``x @ F == to_freq(x)`` for row vectors ``x`` of length n."""
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)
