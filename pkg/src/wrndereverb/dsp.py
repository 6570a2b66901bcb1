"""Signal-processing primitives shared by the front-end, augmentation and metrics.

Everything here is a pure function over numpy arrays, computed in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.signal

SAMPLE_RATE = 16000


class ConfigurationError(ValueError):
    """Raised when DSP parameters describe an impossible configuration."""


class DegenerateFrameError(ValueError):
    """Raised for frames with no energy; callers are expected to skip them."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FilterbankMatrix:
    weights: np.ndarray  # (n_filters, n_bins)
    band_edges: np.ndarray  # (n_filters, 3): lower, center, upper in Hz

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hamming_window(n: int) -> np.ndarray:
    """Symmetric Hamming window; ``[1.0]`` for ``n == 1``."""
    if n < 1:
        raise ValueError("window length must be >= 1")
    if n == 1:
        return np.ones(1)
    i = np.arange(n)
    w = 0.54 - 0.46 * np.cos(2.0 * np.pi * i / (n - 1))
    # enforce exact symmetry against cos roundoff
    half = n // 2
    w[n - half:] = w[:half][::-1]
    return w


def rfft(frame) -> np.ndarray:
    """Unnormalized forward real FFT, bins 0..N/2."""
    frame = np.asarray(frame, dtype=np.float64)
    if not _is_pow2(frame.shape[-1]):
        raise ConfigurationError(f"FFT size {frame.shape[-1]} is not a power of two")
    return np.fft.rfft(frame, axis=-1)


def n_frames(n_samples: int, hop: int) -> int:
    return 1 + (n_samples - 1) // hop


def frame_signal(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    """Centered frames (T, window_len) with reflection padding of window_len//2."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    if hop <= 0:
        raise ConfigurationError("hop must be positive")
    pad = window_len // 2
    mode = "reflect" if x.size > 1 else "edge"
    padded = np.pad(x, (pad, window_len - 1 - pad + hop), mode=mode)
    T = n_frames(x.size, hop)
    view = np.lib.stride_tricks.sliding_window_view(padded, window_len)
    return view[: (T - 1) * hop + 1 : hop]


def stft(signal, window_len: int, hop: int, fft_size: int) -> np.ndarray:
    """Complex spectra of shape (T, fft_size//2 + 1).

    Frame ``t`` is centered on sample ``t * hop``; T depends only on the signal
    length and hop.
    """
    x = signal.samples if isinstance(signal, AudioSignal) else signal
    if window_len > fft_size:
        raise ConfigurationError("window longer than FFT size")
    if not _is_pow2(fft_size):
        raise ConfigurationError(f"FFT size {fft_size} is not a power of two")
    frames = frame_signal(x, window_len, hop) * hamming_window(window_len)
    return np.fft.rfft(frames, n=fft_size, axis=-1)


def istft(spectra, window_len: int, hop: int, fft_size: int, target_len: int,
          sample_rate: int = SAMPLE_RATE) -> AudioSignal:
    """Weighted overlap-add inverse of :func:`stft`."""
    spectra = np.atleast_2d(np.asarray(spectra))
    if spectra.shape[1] != fft_size // 2 + 1:
        raise ValueError(
            f"spectra have {spectra.shape[1]} bins, expected {fft_size // 2 + 1}")
    T = spectra.shape[0]
    w = hamming_window(window_len)
    frames = np.fft.irfft(spectra, n=fft_size, axis=-1)[:, :window_len] * w
    pad = window_len // 2
    total = (T - 1) * hop + window_len
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for t in range(T):
        s = t * hop
        out[s:s + window_len] += frames[t]
        norm[s:s + window_len] += w2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out = out[pad:]
    if out.size >= target_len:
        out = out[:target_len]
    else:
        out = np.pad(out, (0, target_len - out.size))
    return AudioSignal(out, sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, fft_size: int, sample_rate: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float | None = None) -> FilterbankMatrix:
    """Triangular filters with peak 1, centers uniform on the mel scale."""
    if f_max is None:
        f_max = sample_rate / 2
    if n_filters < 1:
        raise ConfigurationError("n_filters must be >= 1")
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ConfigurationError("need 0 <= f_min < f_max <= sample_rate/2")
    n_bins = fft_size // 2 + 1
    if n_filters > n_bins:
        raise ConfigurationError(f"{n_filters} filters but only {n_bins} bins")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2))
    freqs = np.arange(n_bins) * sample_rate / fft_size
    lo, ce, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    up = (freqs - lo) / (ce - lo)
    down = (hi - freqs) / (hi - ce)
    weights = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(
            f"filters {empty.tolist()} cover no FFT bin; use fewer filters or a larger FFT")
    return FilterbankMatrix(weights, np.stack([edges_hz[:-2], edges_hz[1:-1], edges_hz[2:]], 1))


def dct2(v, axis: int = -1) -> np.ndarray:
    """Orthonormal DCT-II."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[axis] == 0:
        raise ValueError("empty input")
    return scipy.fft.dct(v, type=2, norm="ortho", axis=axis)


def idct2(c, axis: int = -1) -> np.ndarray:
    return scipy.fft.idct(np.asarray(c, dtype=np.float64), type=2, norm="ortho", axis=axis)


def autocorrelation(frame, max_lag: int) -> np.ndarray:
    """r[k] = sum_t x[t] x[t+k] for k = 0..max_lag."""
    x = np.asarray(frame, dtype=np.float64)
    if max_lag >= x.size:
        raise ValueError("max_lag must be smaller than the frame length")
    n = x.size
    return np.array([np.dot(x[: n - k], x[k:]) for k in range(max_lag + 1)])


def levinson_durbin(r, order: int):
    """Levinson recursion on an autocorrelation sequence.

    Returns ``(a, err)`` with ``a[0] == 1`` so that the prediction-error filter is
    ``e[t] = sum_k a[k] x[t-k]``.
    """
    r = np.asarray(r, dtype=np.float64)
    if order < 1:
        raise ValueError("order must be >= 1")
    if r.size < order + 1:
        raise ValueError("autocorrelation too short for the requested order")
    if not r[0] > 0:
        raise DegenerateFrameError("zero-energy frame")
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1:0:-1])
        k = -acc / err
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        err *= 1.0 - k * k
        if not err > 0:
            raise DegenerateFrameError("prediction error vanished (perfectly predictable frame)")
    return a, err


def erb(f):
    """Glasberg-Moore equivalent rectangular bandwidth in Hz."""
    return 24.7 * (4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


def erb_space(f_min: float, f_max: float, n: int) -> np.ndarray:
    """n center frequencies equally spaced on the ERB-rate scale, ascending."""
    rate = lambda f: 21.4 * np.log10(4.37 * f / 1000.0 + 1.0)  # noqa: E731
    e = np.linspace(rate(f_min), rate(f_max), n)
    return (10.0 ** (e / 21.4) - 1.0) * 1000.0 / 4.37


def gammatone_impulse_responses(center_freqs, sample_rate: int = SAMPLE_RATE,
                                duration: float = 0.128, order: int = 4) -> np.ndarray:
    """FIR gammatone kernels, each scaled to unit gain at its center frequency."""
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    fc = np.asarray(center_freqs, dtype=np.float64)[:, None]
    b = 1.019 * erb(fc)
    g = t ** (order - 1) * np.exp(-2 * np.pi * b * t) * np.cos(2 * np.pi * fc * t)
    gain = np.abs(np.sum(g * np.exp(-2j * np.pi * fc * t), axis=1, keepdims=True))
    return g / gain


def gammatone_filterbank(signal: AudioSignal, n_channels: int = 23, f_min: float = 125.0,
                         f_max: float | None = None):
    """Split a signal into 4th-order gammatone bands.

    Returns ``(bands, center_freqs)`` with ``bands`` of shape (n_channels, len(signal)).
    """
    if n_channels < 1:
        raise ConfigurationError("n_channels must be >= 1")
    fs = signal.sample_rate
    if f_max is None:
        f_max = 0.45 * fs
    if fs < 2 * f_max:
        raise ConfigurationError("sample rate too low for the highest center frequency")
    cfs = erb_space(f_min, f_max, n_channels) if n_channels > 1 else np.array([f_min])
    kernels = gammatone_impulse_responses(cfs, fs)
    x = signal.samples
    bands = scipy.signal.fftconvolve(x[None, :], kernels, axes=1)[:, : x.size]
    return bands, cfs


def hilbert_envelope(band) -> np.ndarray:
    """Magnitude of the analytic signal (FFT method), along the last axis."""
    band = np.asarray(band, dtype=np.float64)
    if band.shape[-1] == 0:
        raise ValueError("empty input")
    return np.abs(scipy.signal.hilbert(band, axis=-1))
