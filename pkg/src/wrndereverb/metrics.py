"""Objective quality measures: LTSD voice activity, LLR distortion, SRMR, corpus reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.ndimage import maximum_filter1d

from .dsp import (AudioSignal, DegenerateFrameError, autocorrelation, frame_signal,
                  gammatone_filterbank, hamming_window, hilbert_envelope,
                  levinson_durbin, stft)

log = logging.getLogger(__name__)

VAD_WINDOW, VAD_HOP, VAD_FFT = 400, 160, 512
LPC_ORDER = 16
LLR_CLAMP = (0.0, 2.0)
LLR_KEEP = 0.95


class SignalTooShortError(ValueError):
    pass


class NoActiveFramesError(ValueError):
    pass


def vad_ltsd(signal: AudioSignal, order: int = 3, threshold_db: float = 6.0,
             noise_fraction: float = 0.1, smooth: int = 5) -> np.ndarray:
    """Long-term spectral divergence VAD; one boolean per 10 ms STFT frame."""
    if signal.duration < 0.5:
        raise SignalTooShortError("VAD needs at least 0.5 s of audio")
    mag = np.abs(stft(signal, VAD_WINDOW, VAD_HOP, VAD_FFT))
    T = mag.shape[0]
    ltse = maximum_filter1d(mag, size=2 * order + 1, axis=0, mode="nearest")
    frame_energy = (mag ** 2).sum(axis=1)
    n_noise = max(1, int(round(noise_fraction * T)))
    quiet = np.argsort(frame_energy, kind="stable")[:n_noise]
    noise_psd = np.maximum((mag[quiet] ** 2).mean(axis=0), 1e-300)
    ratio = (ltse ** 2 / noise_psd).mean(axis=1)
    ltsd = 10.0 * np.log10(np.maximum(ratio, 1e-300))
    active = ltsd > threshold_db
    if smooth > 1:
        counts = np.convolve(active.astype(int), np.ones(smooth, dtype=int), mode="same")
        active = counts > smooth // 2
    return active


def frame_mask_to_samples(mask: np.ndarray, n_samples: int, hop: int = VAD_HOP) -> np.ndarray:
    """Sample i belongs to the frame whose center (t * hop) is nearest."""
    idx = np.minimum((np.arange(n_samples) + hop // 2) // hop, len(mask) - 1)
    return np.asarray(mask, bool)[idx]


def _toeplitz_quadratic(a: np.ndarray, r: np.ndarray) -> float:
    p = a.size
    # a R a^T with R[i, j] = r[|i - j|]
    acc = r[0] * np.dot(a, a)
    for k in range(1, p):
        acc += 2.0 * r[k] * np.dot(a[:-k], a[k:])
    return float(acc)


def llr_frames(reference: AudioSignal, target: AudioSignal, mask: np.ndarray | None = None,
               order: int = LPC_ORDER) -> np.ndarray:
    """Clamped per-frame LLR values over active, non-degenerate frames."""
    if len(reference) != len(target):
        raise ValueError("reference and target lengths differ; align them first")
    if mask is None:
        mask = vad_ltsd(reference)
    w = hamming_window(VAD_WINDOW)
    ref_frames = frame_signal(reference.samples, VAD_WINDOW, VAD_HOP)
    tgt_frames = frame_signal(target.samples, VAD_WINDOW, VAD_HOP)
    out = []
    for t in np.flatnonzero(mask):
        rc = autocorrelation(ref_frames[t] * w, order)
        rp = autocorrelation(tgt_frames[t] * w, order)
        try:
            ac, _ = levinson_durbin(rc, order)
            ap, _ = levinson_durbin(rp, order)
        except DegenerateFrameError:
            continue
        num = _toeplitz_quadratic(ap, rc)
        den = _toeplitz_quadratic(ac, rc)
        if not (num > 0 and den > 0):
            continue
        out.append(min(max(math.log(num / den), LLR_CLAMP[0]), LLR_CLAMP[1]))
    return np.asarray(out)


def llr(reference: AudioSignal, target: AudioSignal, mask: np.ndarray | None = None) -> float:
    """Log-likelihood ratio (Itakura) distortion; lower is better, 0 for identical signals."""
    vals = llr_frames(reference, target, mask)
    if vals.size == 0:
        raise NoActiveFramesError("no active speech frames to score")
    keep = max(1, int(round(LLR_KEEP * vals.size)))
    return float(np.mean(np.sort(vals)[:keep]))


SRMR_WINDOW_S, SRMR_SHIFT_S = 0.256, 0.064
SRMR_MOD_CENTERS = np.geomspace(4.0, 128.0, 8)


def modulation_band_edges(centers=SRMR_MOD_CENTERS) -> np.ndarray:
    c = np.asarray(centers)
    ratio = np.sqrt(c[1] / c[0])
    inner = np.sqrt(c[:-1] * c[1:])
    return np.concatenate([[c[0] / ratio], inner, [c[-1] * ratio]])


def modulation_energies(signal: AudioSignal, n_channels: int = 23) -> np.ndarray:
    """(n_channels, 8) energy per acoustic channel and modulation band."""
    if signal.duration < 1.0:
        raise SignalTooShortError("SRMR needs at least 1 s of audio")
    fs = signal.sample_rate
    bands, _ = gammatone_filterbank(signal, n_channels)
    env = hilbert_envelope(bands)
    win = int(round(SRMR_WINDOW_S * fs))
    shift = int(round(SRMR_SHIFT_S * fs))
    frames = np.lib.stride_tricks.sliding_window_view(env, win, axis=1)[:, ::shift]
    frames = frames - frames.mean(axis=-1, keepdims=True)
    spec = np.abs(np.fft.rfft(frames * hamming_window(win), axis=-1)) ** 2
    freqs = np.fft.rfftfreq(win, 1.0 / fs)
    edges = modulation_band_edges()
    out = np.empty((bands.shape[0], len(SRMR_MOD_CENTERS)))
    for j in range(len(SRMR_MOD_CENTERS)):
        sel = (freqs >= edges[j]) & (freqs < edges[j + 1])
        out[:, j] = spec[:, :, sel].sum(axis=(1, 2))
    return out


def srmr(signal: AudioSignal) -> float:
    """Speech-to-reverberation modulation energy ratio; higher means less reverberant."""
    e = modulation_energies(signal).sum(axis=0)
    high = e[4:].sum()
    if not high > 0:
        raise ValueError("signal has no modulation energy (silent input?)")
    return float(e[:4].sum() / high)


# ---------------------------------------------------------------------------
# corpus reports


@dataclass
class UtteranceScore:
    id: str
    srmr: float | None = None
    llr: float | None = None
    tags: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class CorpusItem:
    id: str
    signal: AudioSignal | None
    reference: AudioSignal | None = None
    tags: dict = field(default_factory=dict)
    error: str | None = None  # set when loading already failed


def parse_tags(text: str) -> dict:
    """'rt60=0.5 dist=near' (space, comma or semicolon separated) -> dict."""
    tags = {}
    for tok in text.replace(";", " ").replace(",", " ").split():
        if "=" not in tok:
            raise ValueError(f"malformed condition tag {tok!r}; expected key=value")
        k, v = tok.split("=", 1)
        if not k:
            raise ValueError(f"malformed condition tag {tok!r}")
        tags[k] = v
    return tags


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


@dataclass
class MetricReport:
    per_utterance: list[UtteranceScore]
    system: str = "system"
    comparison: dict | None = None

    @property
    def strata(self) -> dict:
        groups: dict[str, list[UtteranceScore]] = {}
        ok = [u for u in self.per_utterance if u.error is None]
        if ok:
            groups["all"] = ok
        for u in ok:
            for k, v in sorted(u.tags.items()):
                groups.setdefault(f"{k}={v}", []).append(u)
        return {
            key: {
                "n": len(rows),
                "llr": _mean(r.llr for r in rows),
                "srmr": _mean(r.srmr for r in rows),
            }
            for key, rows in sorted(groups.items())
        }

    def compare(self, baseline: "MetricReport") -> dict:
        """Per-stratum deltas (this - baseline) and the better system per metric."""
        mine, theirs = self.strata, baseline.strata
        out = {}
        for key in sorted(set(mine) & set(theirs)):
            entry = {}
            for metric, lower_better in (("llr", True), ("srmr", False)):
                a, b = mine[key][metric], theirs[key][metric]
                if a is None or b is None:
                    continue
                if a == b:
                    best = "tie"
                elif (a < b) == lower_better:
                    best = self.system
                else:
                    best = baseline.system
                entry[metric] = {"delta": a - b, "best": best}
            out[key] = entry
        self.comparison = out
        return out

    def to_dict(self) -> dict:
        d = {
            "system": self.system,
            "per_utterance": [
                {"id": u.id, "llr": u.llr, "srmr": u.srmr, "tags": u.tags, "error": u.error}
                for u in self.per_utterance
            ],
            "strata": self.strata,
        }
        if self.comparison is not None:
            d["comparison"] = self.comparison
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        rows = [UtteranceScore(r["id"], r.get("srmr"), r.get("llr"), dict(r.get("tags") or {}),
                               r.get("error")) for r in d["per_utterance"]]
        return cls(rows, d.get("system", "system"), d.get("comparison"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "llr", "srmr", "tags", "error"])
        for u in self.per_utterance:
            tags = " ".join(f"{k}={v}" for k, v in sorted(u.tags.items()))
            w.writerow([u.id, "" if u.llr is None else repr(u.llr),
                        "" if u.srmr is None else repr(u.srmr), tags, u.error or ""])
        return buf.getvalue()


def score_item(item: CorpusItem) -> UtteranceScore:
    row = UtteranceScore(item.id, tags=dict(item.tags))
    if item.error is not None:
        row.error = item.error
        return row
    try:
        row.srmr = srmr(item.signal)
        if item.reference is not None:
            ref, tgt = item.reference, item.signal
            n = min(len(ref), len(tgt))
            row.llr = llr(AudioSignal(ref.samples[:n], ref.sample_rate),
                          AudioSignal(tgt.samples[:n], tgt.sample_rate))
    except Exception as exc:  # recorded per utterance, never fatal
        log.warning("scoring %s failed: %s", item.id, exc)
        row.srmr = row.llr = None
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def evaluate_corpus(items: Iterable[CorpusItem], system: str = "system",
                    baseline: MetricReport | None = None,
                    scorer: Callable[[CorpusItem], UtteranceScore] = score_item) -> MetricReport:
    rows = sorted((scorer(it) for it in items), key=lambda r: r.id)
    report = MetricReport(rows, system)
    if baseline is not None:
        report.compare(baseline)
    return report
