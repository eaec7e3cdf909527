"""Spectrum derivation for the audio modality.

An :class:`AudioClip` is turned into a magnitude :class:`Spectrum` with a
short-time Fourier transform. The O(n^2) :func:`dft_magnitude` is kept as
the reference definition; :func:`fft_magnitude` and :func:`stft` use
``numpy.fft`` and must agree with it to 1e-9 per bin.

Defaults: 512-sample frames, hop 256, periodic Hann window, natural-log
compression with ``eps = 1e-6``. No mel warping is applied.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .errors import DataError, UsageError

DEFAULT_FRAME_LEN = 512
DEFAULT_HOP = 256
DEFAULT_WINDOW = "hann"
DEFAULT_EPS = 1e-6


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform in [-1, 1] plus its sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError("audio clip must be a non-empty 1-D signal")
        if not np.isfinite(samples).all():
            raise DataError("audio clip contains NaN or Inf")
        if np.abs(samples).max() > 1.0 + 1e-6:
            raise DataError("audio samples must lie in [-1, 1]")
        if int(self.sample_rate_hz) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class Spectrum:
    """Magnitude matrix of shape (frame_len // 2 + 1, n_frames)."""

    mags: np.ndarray
    frame_len: int
    hop: int
    log_compressed: bool

    @property
    def n_bins(self) -> int:
        return int(self.mags.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.mags.shape[1])


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, ``w[k] = 0.5 * (1 - cos(2*pi*k/n))``."""
    if n < 2:
        raise UsageError(f"window length must be at least 2, got {n}")
    return get_window("hann", n, fftbins=True).astype(np.float64)


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        return hann_window(n)
    if kind == "rect":
        return np.ones(n, dtype=np.float64)
    raise UsageError(f"unknown window {kind!r}; expected 'hann' or 'rect'")


def dft_magnitude(frame: np.ndarray) -> np.ndarray:
    """Magnitudes of bins 0..n/2 evaluated straight from the DFT sum."""
    x = np.asarray(frame, dtype=np.float64)
    n = x.size
    if n < 2:
        raise UsageError(f"frame length must be at least 2, got {n}")
    j = np.arange(n // 2 + 1)[:, None]
    k = np.arange(n)[None, :]
    # reduce j*k mod n first so the angle stays exact for large frames
    angle = -2.0 * np.pi * ((j * k) % n) / n
    basis = np.cos(angle) + 1j * np.sin(angle)
    return np.abs(basis @ x)


def fft_magnitude(frame: np.ndarray) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    if not _is_power_of_two(x.size) or x.size < 2:
        raise UsageError(f"fft frame length must be a power of two, got {x.size}")
    return np.abs(np.fft.rfft(x))


def frame_count(n_samples: int, frame_len: int, hop: int) -> int:
    return (n_samples - frame_len) // hop + 1


def stft(
    clip: Union[AudioClip, np.ndarray],
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    window: str = DEFAULT_WINDOW,
    log_compress: bool = True,
    eps: float = DEFAULT_EPS,
) -> Spectrum:
    """Short-time Fourier transform magnitudes, one column per frame.

    Column ``t`` holds ``fft_magnitude(window * samples[t*hop : t*hop + frame_len])``;
    with ``log_compress`` every entry becomes ``ln(m + eps)``.
    """
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if not _is_power_of_two(frame_len) or frame_len < 2:
        raise UsageError(f"frame_len must be a power of two, got {frame_len}")
    if not 1 <= hop <= frame_len:
        raise UsageError(f"hop must satisfy 1 <= hop <= frame_len, got {hop}")
    if samples.size < frame_len:
        raise DataError(
            f"clip has {samples.size} samples, shorter than frame_len {frame_len}"
        )
    if log_compress and eps <= 0:
        raise UsageError(f"eps must be positive, got {eps}")
    frames = sliding_window_view(samples, frame_len)[::hop]
    mags = np.abs(np.fft.rfft(frames * _window(window, frame_len), axis=1)).T
    if log_compress:
        mags = np.log(mags + eps)
    return Spectrum(
        mags=np.ascontiguousarray(mags),
        frame_len=frame_len,
        hop=hop,
        log_compressed=log_compress,
    )
