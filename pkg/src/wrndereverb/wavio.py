"""PCM16 mono 16 kHz WAV I/O on top of the stdlib ``wave`` module."""
from __future__ import annotations

import os
import tempfile
import wave

import numpy as np

from .dsp import SAMPLE_RATE, AudioSignal


class WavFormatError(ValueError):
    pass


def wav_read(path) -> AudioSignal:
    try:
        with wave.open(os.fspath(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1:
                raise WavFormatError(f"{path}: {channels} channels, expected mono")
            if width != 2:
                raise WavFormatError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
            if rate != SAMPLE_RATE:
                raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
            data = w.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if n == 0 or len(data) == 0:
        raise WavFormatError(f"{path}: empty data chunk")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples, rate)


def to_pcm16(samples) -> np.ndarray:
    """Clamp to [-1, 1], scale by 32768, round half away from zero, saturate."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32768.0
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def wav_write(path, signal: AudioSignal) -> None:
    """Write atomically (temp file in the target directory, then rename)."""
    if signal.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"can only write {SAMPLE_RATE} Hz audio")
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".wav.tmp")
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(signal.sample_rate)
            w.writeframes(to_pcm16(signal.samples).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
