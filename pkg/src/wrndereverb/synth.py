"""Speech-like test signals: voiced syllables with formants, fricative bursts, pauses.

Used to build fixture corpora when no licensed speech is around. The signals
have syllabic (~4 Hz) energy modulation and a harmonic/formant structure, which
is what the dereverberation front-end and the SRMR measure react to.
"""
from __future__ import annotations

import numpy as np
import scipy.signal

from .dsp import SAMPLE_RATE, AudioSignal


def _resonator(freq: float, bw: float, fs: int):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def _syllable(rng: np.random.Generator, fs: int) -> np.ndarray:
    dur = rng.uniform(0.12, 0.30)
    n = int(dur * fs)
    t = np.arange(n) / fs
    f0 = np.linspace(rng.uniform(90, 220), rng.uniform(90, 220), n)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    n_harm = int(7000 // f0.max())
    k = np.arange(1, n_harm + 1)[:, None]
    src = (np.sin(k * phase[None, :]) / k).sum(axis=0)
    out = np.zeros(n)
    for lo, hi, bw in ((300, 800, 80), (900, 2300, 120), (2400, 3200, 200)):
        b, a = _resonator(rng.uniform(lo, hi), bw, fs)
        out += scipy.signal.lfilter(b, a, src)
    attack = min(n, int(0.02 * fs))
    env = np.exp(-t / rng.uniform(0.08, 0.25))
    env[:attack] *= np.linspace(0, 1, attack)
    env[-attack:] *= np.linspace(1, 0, attack)
    voiced = out * env
    if rng.random() < 0.4:
        m = int(rng.uniform(0.04, 0.08) * fs)
        b, a = scipy.signal.butter(2, rng.uniform(2500, 5000) / (fs / 2), "high")
        fric = scipy.signal.lfilter(b, a, rng.standard_normal(m)) * np.hanning(m)
        fric *= 0.3 * np.abs(voiced).max() / (np.abs(fric).max() + 1e-12)
        voiced = np.concatenate([fric, voiced])
    return voiced


def speech_like(duration: float, rng: np.random.Generator, fs: int = SAMPLE_RATE,
                floor: float = 1e-4) -> AudioSignal:
    """Synthetic utterance of ``duration`` seconds with peak 0.5."""
    n = int(round(duration * fs))
    out = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * fs)
    while pos < n:
        syl = _syllable(rng, fs) * rng.uniform(0.3, 1.0)
        end = min(n, pos + syl.size)
        out[pos:end] += syl[: end - pos]
        gap = rng.uniform(0.03, 0.15) if rng.random() < 0.8 else rng.uniform(0.3, 0.5)
        pos = end + int(gap * fs)
    out *= 0.5 / (np.abs(out).max() + 1e-12)
    out += floor * rng.standard_normal(n)
    return AudioSignal(out, fs)


def corpus(n: int, duration: float, seed: int) -> list[AudioSignal]:
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]
    return [speech_like(duration, r) for r in rngs]
