"""Multi-resolution log-spectral front-end and waveform resynthesis.

Every 10 ms frame carries, in this order:

====== ===== ====== =====================================
slice  dims  offset source
====== ===== ====== =====================================
fft    257   0      log power, 25 ms window, 512-pt FFT
mel25  32    257    log Mel energies, 25 ms / 512
mel50  50    289    log Mel energies, 50 ms / 1024
mel75  100   339    log Mel energies, 75 ms / 2048
cep25  32    439    DCT-II of mel25
cep50  50    471    DCT-II of mel50
cep75  100   521    DCT-II of mel75
====== ===== ====== =====================================
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .dsp import SAMPLE_RATE, AudioSignal, dct2, istft, mel_filterbank, stft

EPS = 1e-10
HOP = 160
FEATURE_DIM = 621
BLOCK_FRAMES = 200

# (window samples, fft size, mel bands)
RESOLUTIONS = ((400, 512, 32), (800, 1024, 50), (1200, 2048, 100))
SPECTRAL_WINDOW, SPECTRAL_FFT = 400, 512

LAYOUT = {
    "fft_log": slice(0, 257),
    "mel25": slice(257, 289),
    "mel50": slice(289, 339),
    "mel75": slice(339, 439),
    "cep25": slice(439, 471),
    "cep50": slice(471, 521),
    "cep75": slice(521, 621),
}


@dataclass(frozen=True)
class FeatureMatrix:
    """T x 621 feature stack; ``norm_scales``/``shifts`` are set by normalization."""

    values: np.ndarray
    norm_scales: np.ndarray | None = None
    shifts: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != FEATURE_DIM:
            raise ValueError(f"expected (T, {FEATURE_DIM}) features, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("features must be finite")
        if self.norm_scales is not None and not np.all(self.norm_scales > 0):
            raise ValueError("norm_scales must be positive")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def slice(self, name: str) -> np.ndarray:
        return self.values[:, LAYOUT[name]]


@dataclass
class FeatureBlock:
    corrupted: np.ndarray  # (BLOCK_FRAMES, FEATURE_DIM)
    clean: np.ndarray
    offset: int = 0
    source: str = ""
    meta: dict = field(default_factory=dict)


@lru_cache(maxsize=None)
def _filterbank(n_filters: int, fft_size: int) -> np.ndarray:
    return mel_filterbank(n_filters, fft_size, SAMPLE_RATE, 0.0, SAMPLE_RATE / 2).weights


def extract_features(signal: AudioSignal) -> FeatureMatrix:
    if signal.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {signal.sample_rate} Hz")
    if len(signal) == 0:
        raise ValueError("empty signal")
    mels, ceps = [], []
    fft_log = None
    for win, nfft, bands in RESOLUTIONS:
        power = np.abs(stft(signal, win, HOP, nfft)) ** 2
        if win == SPECTRAL_WINDOW:
            fft_log = np.log(power + EPS)
        mel = np.log(power @ _filterbank(bands, nfft).T + EPS)
        mels.append(mel)
        ceps.append(dct2(mel, axis=1))
    return FeatureMatrix(np.concatenate([fft_log, *mels, *ceps], axis=1))


def variance_normalize(f: FeatureMatrix, floor: float = 1e-8) -> FeatureMatrix:
    """Divide each dimension by its standard deviation over time (no centering)."""
    if f.n_frames < 2:
        raise ValueError("need at least 2 frames to estimate variances")
    std = f.values.std(axis=0)
    scales = np.where(std < floor, 1.0, std)
    return FeatureMatrix(f.values / scales, norm_scales=scales)


def shift_nonnegative(f: FeatureMatrix) -> FeatureMatrix:
    """Subtract each dimension's minimum so all values are >= 0; the shifts are kept."""
    shifts = f.values.min(axis=0)
    return replace(f, values=f.values - shifts, shifts=shifts)


def normalize(f: FeatureMatrix) -> FeatureMatrix:
    """Network-ready features: variance normalization followed by the min-shift."""
    return shift_nonnegative(variance_normalize(f))


def normalize_like(f: FeatureMatrix, reference: FeatureMatrix) -> FeatureMatrix:
    """Normalize ``f`` with the scales and shifts of an already normalized
    ``reference``, clipping at 0 (the network head's lower bound).

    Training targets use the corrupted input's statistics, since those are the
    only ones available to invert the network output at inference time.
    """
    if reference.norm_scales is None or reference.shifts is None:
        raise ValueError("reference carries no normalization state")
    v = np.maximum(f.values / reference.norm_scales - reference.shifts, 0.0)
    return replace(reference, values=v)


def denormalize(f: FeatureMatrix) -> FeatureMatrix:
    if f.norm_scales is None:
        raise ValueError("features carry no normalization scales")
    v = f.values
    if f.shifts is not None:
        v = v + f.shifts
    return FeatureMatrix(v * f.norm_scales)


def with_values(template: FeatureMatrix, values: np.ndarray) -> FeatureMatrix:
    """New matrix carrying ``template``'s normalization state."""
    return replace(template, values=values)


def reconstruct_waveform(enhanced: FeatureMatrix, corrupted_phase: np.ndarray,
                         target_len: int) -> AudioSignal:
    """Magnitudes from the log-power slice, phase from the corrupted STFT."""
    phase = np.asarray(corrupted_phase)
    if phase.shape[0] != enhanced.n_frames:
        raise ValueError(
            f"phase has {phase.shape[0]} frames, features have {enhanced.n_frames}")
    mag = np.sqrt(np.maximum(np.exp(enhanced.slice("fft_log")) - EPS, 0.0))
    spec = mag * np.exp(1j * np.angle(phase))
    return istft(spec, SPECTRAL_WINDOW, HOP, SPECTRAL_FFT, target_len)


def spectral_stft(signal: AudioSignal) -> np.ndarray:
    return stft(signal, SPECTRAL_WINDOW, HOP, SPECTRAL_FFT)


def blockify(corrupted: FeatureMatrix, clean: FeatureMatrix, rng: np.random.Generator,
             block: int = BLOCK_FRAMES, source: str = "") -> list[FeatureBlock]:
    """Cut time-aligned, non-overlapping blocks after a random start offset."""
    if corrupted.n_frames != clean.n_frames:
        raise ValueError("corrupted and clean features are not time-aligned")
    T = corrupted.n_frames
    if T < block:
        return []
    offset = int(rng.integers(0, T % block + 1))
    n = (T - offset) // block
    out = []
    for i in range(n):
        s = offset + i * block
        out.append(FeatureBlock(corrupted.values[s:s + block].copy(),
                                clean.values[s:s + block].copy(), s, source))
    return out


# little-endian container: "WRNF", version, T, D, T*D f64 values, D scales, D shifts.
# All-zero scales mean "not normalized"; shifts are zero when not min-shifted.
_WRNF_MAGIC = b"WRNF"
_WRNF_VERSION = 1


def features_to_bytes(f: FeatureMatrix) -> bytes:
    T, D = f.values.shape
    scales = f.norm_scales if f.norm_scales is not None else np.zeros(D)
    shifts = f.shifts if f.shifts is not None else np.zeros(D)
    return b"".join([
        _WRNF_MAGIC,
        struct.pack("<III", _WRNF_VERSION, T, D),
        f.values.astype("<f8").tobytes(),
        np.asarray(scales, "<f8").tobytes(),
        np.asarray(shifts, "<f8").tobytes(),
    ])


def features_from_bytes(data: bytes) -> FeatureMatrix:
    if len(data) < 16 or data[:4] != _WRNF_MAGIC:
        raise ValueError("not a WRNF feature container")
    version, T, D = struct.unpack("<III", data[4:16])
    if version != _WRNF_VERSION:
        raise ValueError(f"unsupported WRNF version {version}")
    expected = 16 + 8 * (T * D + 2 * D)
    if len(data) != expected:
        raise ValueError(f"WRNF payload is {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, "<f8", offset=16).astype(np.float64)
    values = arr[: T * D].reshape(T, D)
    scales = arr[T * D: T * D + D]
    shifts = arr[T * D + D:]
    has_scales = bool(np.any(scales != 0))
    has_shifts = bool(np.any(shifts != 0))
    return FeatureMatrix(values, scales if has_scales else None, shifts if has_shifts else None)


def save_features(path, f: FeatureMatrix) -> None:
    with open(path, "wb") as fh:
        fh.write(features_to_bytes(f))


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        return features_from_bytes(fh.read())
