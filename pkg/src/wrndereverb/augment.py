"""On-the-fly generation of corrupted/clean training pairs.

Reverberation comes from a shoebox image-source model whose uniform wall
reflection coefficient is set from Eyring's formula for the requested RT60.
Noise is mixed at an SNR measured over voice-active samples, and the feature
time axis is stretched by a random factor shared by both sides of the pair.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.signal

from .dsp import SAMPLE_RATE, AudioSignal
from .frontend import (BLOCK_FRAMES, FeatureBlock, FeatureMatrix, blockify, extract_features,
                       normalize, normalize_like)
from .metrics import frame_mask_to_samples, vad_ltsd

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
RT60_LIMITS = (0.05, 0.8)


class GeometryError(ValueError):
    pass


class RirTooShortError(ValueError):
    pass


@dataclass
class Rir:
    taps: np.ndarray
    room_dims: tuple = (0.0, 0.0, 0.0)
    source_pos: tuple = (0.0, 0.0, 0.0)
    mic_pos: tuple = (0.0, 0.0, 0.0)
    target_rt60: float | None = None
    sample_rate: int = SAMPLE_RATE
    direct_index: int = 0

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.size == 0 or not np.all(np.isfinite(self.taps)):
            raise ValueError("RIR taps must be non-empty and finite")


@dataclass
class AugmentSpec:
    rt60_range: tuple = (0.05, 0.8)
    snr_range_db: tuple = (5.0, 25.0)
    time_scale_range: tuple = (0.9, 1.1)
    room_dims_range: tuple = ((2.5, 10.0), (2.5, 10.0), (2.2, 4.0))
    distance_range: tuple = (0.3, 3.0)
    wall_clearance: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.rt60_range = tuple(map(float, self.rt60_range))
        self.snr_range_db = tuple(map(float, self.snr_range_db))
        self.time_scale_range = tuple(map(float, self.time_scale_range))
        self.room_dims_range = tuple(tuple(map(float, r)) for r in self.room_dims_range)
        self.distance_range = tuple(map(float, self.distance_range))
        for name in ("rt60_range", "snr_range_db", "time_scale_range", "distance_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
        if len(self.room_dims_range) != 3 or any(lo > hi for lo, hi in self.room_dims_range):
            raise ValueError("room_dims_range needs three ordered intervals")
        if not (RT60_LIMITS[0] <= self.rt60_range[0] and self.rt60_range[1] <= RT60_LIMITS[1]):
            raise ValueError(f"rt60_range must lie within {RT60_LIMITS}")
        if not (0.9 <= self.time_scale_range[0] and self.time_scale_range[1] <= 1.1):
            raise ValueError("time_scale_range must lie within [0.9, 1.1]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# room impulse responses


def eyring_reflection(room_dims, rt60: float) -> float:
    """Uniform pressure reflection coefficient reaching ``rt60`` by Eyring's formula."""
    L, W, H = room_dims
    V = L * W * H
    S = 2.0 * (L * W + L * H + W * H)
    alpha = 1.0 - math.exp(-0.161 * V / (S * rt60))
    return math.sqrt(1.0 - alpha)


def _axis_images(length: float, src: float, mic: float, reach: float):
    n_max = int(math.ceil(reach / (2.0 * length))) + 1
    n = np.arange(-n_max, n_max + 1)
    pos = np.concatenate([src + 2 * n * length, -src + 2 * n * length])
    refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
    return pos - mic, refl


def image_source_rir(room_dims, source_pos, mic_pos, beta: float, n_taps: int,
                     fs: int = SAMPLE_RATE, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Unnormalized shoebox RIR, delays rounded to the nearest sample."""
    reach = n_taps * c / fs
    axes = [_axis_images(room_dims[i], source_pos[i], mic_pos[i], reach) for i in range(3)]
    (dx, rx), (dy, ry), (dz, rz) = axes
    yz_d2 = dy[:, None] ** 2 + dz[None, :] ** 2
    yz_r = ry[:, None] + rz[None, :]
    h = np.zeros(n_taps)
    for x, r in zip(dx, rx):
        d = np.sqrt(x * x + yz_d2)
        idx = np.rint(d * fs / c).astype(np.int64)
        keep = idx < n_taps
        if not keep.any():
            continue
        order = (r + yz_r)[keep]
        amp = beta ** order / (4 * np.pi * d[keep])
        h += np.bincount(idx[keep], weights=amp, minlength=n_taps)
    return h


def _check_inside(room_dims, p, what: str):
    for v, L in zip(p, room_dims):
        if not 0.0 < v < L:
            raise GeometryError(f"{what} position {tuple(p)} is outside the room {tuple(room_dims)}")


def synth_rir(room_dims, source_pos, mic_pos, rt60: float, max_len_s: float | None = None,
              rng: np.random.Generator | None = None, fs: int = SAMPLE_RATE,
              beta: float | None = None) -> Rir:
    """Shoebox RIR normalized so the direct-path tap equals 1.

    ``beta`` overrides the Eyring-derived reflection coefficient (``0`` gives the
    direct path only). ``rng`` is accepted for interface symmetry; the image
    model is deterministic.
    """
    room_dims = tuple(float(v) for v in room_dims)
    source_pos = tuple(float(v) for v in source_pos)
    mic_pos = tuple(float(v) for v in mic_pos)
    if any(v <= 0 for v in room_dims):
        raise GeometryError("room dimensions must be positive")
    _check_inside(room_dims, source_pos, "source")
    _check_inside(room_dims, mic_pos, "microphone")
    dist = math.dist(source_pos, mic_pos)
    if dist < 0.5 * SPEED_OF_SOUND / fs:
        raise GeometryError("source and microphone coincide")
    if max_len_s is None:
        max_len_s = 1.2 * rt60 + dist / SPEED_OF_SOUND + 0.02
    direct = int(np.rint(dist * fs / SPEED_OF_SOUND))
    n_taps = max(int(math.ceil(max_len_s * fs)), direct + 1)
    if beta is not None:
        h = image_source_rir(room_dims, source_pos, mic_pos, beta, n_taps, fs)
    else:
        if not RT60_LIMITS[0] <= rt60 <= RT60_LIMITS[1]:
            raise ValueError(f"rt60 {rt60} outside {RT60_LIMITS}")
        h = _calibrated_rir(room_dims, source_pos, mic_pos, rt60, n_taps, fs)
    h /= abs(h[direct])
    return Rir(h, room_dims, source_pos, mic_pos, rt60, fs, direct)


def _calibrated_rir(room_dims, source_pos, mic_pos, rt60, n_taps, fs, iters=5, tol=0.03):
    # Image-source decays run slower than Eyring predicts in non-cubic rooms
    # (grazing paths dominate the tail), so the Eyring design RT60 is corrected
    # multiplicatively against the measured T30.
    design = rt60
    best = None
    for _ in range(iters):
        beta = eyring_reflection(room_dims, design)
        h = image_source_rir(room_dims, source_pos, mic_pos, beta, n_taps, fs)
        try:
            measured = measure_rt60(h, fs)
        except RirTooShortError:
            return h
        err = abs(measured - rt60) / rt60
        if best is None or err < best[0]:
            best = (err, h)
        if err < tol:
            break
        design *= rt60 / measured
    return best[1]


def measure_rt60(rir, fs: int = SAMPLE_RATE, start_db: float = -5.0,
                 stop_db: float = -35.0) -> float:
    """T30 estimate from Schroeder backward integration, extrapolated to 60 dB."""
    if isinstance(rir, Rir):
        fs = rir.sample_rate
        taps = rir.taps
    else:
        taps = np.asarray(rir, dtype=np.float64)
    energy = np.cumsum((taps ** 2)[::-1])[::-1]
    if not energy[0] > 0:
        raise RirTooShortError("RIR has no energy")
    edc = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))
    below_start = np.flatnonzero(edc <= start_db)
    below_stop = np.flatnonzero(edc <= stop_db)
    if below_stop.size == 0 or below_start.size == 0:
        raise RirTooShortError(f"decay never reaches {stop_db} dB")
    i0, i1 = below_start[0], below_stop[0]
    if i1 - i0 < 2:
        raise RirTooShortError("no decay region between the fit limits")
    t = np.arange(i0, i1 + 1) / fs
    slope, _ = np.polyfit(t, edc[i0:i1 + 1], 1)
    if not slope < 0:
        raise RirTooShortError("energy decay curve is not decreasing")
    return float(-60.0 / slope)


def apply_rir(speech: AudioSignal, rir: Rir) -> AudioSignal:
    """Full convolution, scaled down only if the peak exceeds 1."""
    if speech.sample_rate != rir.sample_rate:
        raise ValueError("sample rates of speech and RIR differ")
    y = scipy.signal.convolve(speech.samples, rir.taps, mode="full")
    peak = np.abs(y).max() if y.size else 0.0
    if peak > 1.0:
        y = y / peak
    return AudioSignal(y, speech.sample_rate)


# ---------------------------------------------------------------------------
# noise


def active_power(x: np.ndarray, vad_mask: np.ndarray | None) -> float:
    """Mean power over VAD-active samples, or over the whole signal if none are active."""
    if vad_mask is not None:
        sel = frame_mask_to_samples(vad_mask, x.size)
        if sel.any():
            return float(np.mean(x[sel] ** 2))
    return float(np.mean(x ** 2))


def mix_noise(speech: AudioSignal, noise: AudioSignal, snr_db: float,
              vad_mask: np.ndarray | None, rng: np.random.Generator,
              return_info: bool = False):
    """Add ``noise`` (looped, random start) scaled to ``snr_db`` over active speech."""
    if math.isinf(snr_db) and snr_db > 0:
        out = AudioSignal(speech.samples.copy(), speech.sample_rate)
        return (out, {"noise_start": None, "noise_gain": 0.0}) if return_info else out
    if noise.sample_rate != speech.sample_rate:
        raise ValueError("noise sample rate differs from speech")
    n = len(speech)
    start = int(rng.integers(0, len(noise)))
    seg = np.take(noise.samples, np.arange(start, start + n), mode="wrap")
    p_noise = float(np.mean(seg ** 2))
    if not p_noise > 0:
        raise ValueError("noise source is silent")
    p_speech = active_power(speech.samples, vad_mask)
    gain = math.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    out = AudioSignal(speech.samples + gain * seg, speech.sample_rate)
    if return_info:
        return out, {"noise_start": start, "noise_gain": gain}
    return out


def achieved_snr(speech: AudioSignal, mixture: AudioSignal, vad_mask) -> float:
    noise = mixture.samples - speech.samples
    return 10.0 * math.log10(active_power(speech.samples, vad_mask) / np.mean(noise ** 2))


def load_noise_pool(directory) -> list[tuple[str, AudioSignal]]:
    """All WAVs in ``directory`` sorted by file name."""
    from .wavio import wav_read

    names = sorted(f for f in os.listdir(directory) if f.lower().endswith(".wav"))
    return [(name, wav_read(os.path.join(directory, name))) for name in names]


# ---------------------------------------------------------------------------
# feature-level tempo perturbation


def time_scale_features(f: FeatureMatrix, factor: float) -> FeatureMatrix:
    """Linear interpolation along time to round(T / factor) frames."""
    if not 0.9 <= factor <= 1.1:
        raise ValueError("time-scale factor must lie in [0.9, 1.1]")
    T = f.n_frames
    if T < 2:
        raise ValueError("need at least 2 frames")
    T_new = int(math.floor(T / factor + 0.5))
    if T_new == T:
        return FeatureMatrix(f.values.copy(), f.norm_scales, f.shifts)
    pos = np.arange(T_new) * (T - 1) / (T_new - 1)
    lo = np.minimum(np.floor(pos).astype(int), T - 2)
    frac = (pos - lo)[:, None]
    v = f.values
    out = (1.0 - frac) * v[lo] + frac * v[lo + 1]
    return FeatureMatrix(out, f.norm_scales, f.shifts)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Example:
    blocks: list[FeatureBlock]
    provenance: dict = field(default_factory=dict)


def example_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, epoch, index])


def draw_geometry(spec: AugmentSpec, rng: np.random.Generator, max_tries: int = 1000):
    """Room dims, source and mic positions with wall clearance and bounded distance."""
    clear = spec.wall_clearance
    for _ in range(max_tries):
        dims = np.array([rng.uniform(lo, hi) for lo, hi in spec.room_dims_range])
        if np.any(dims <= 2 * clear):
            continue
        mic = rng.uniform(clear, dims - clear)
        for _ in range(50):
            dist = rng.uniform(*spec.distance_range)
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            src = mic + dist * u
            if np.all(src > clear) and np.all(src < dims - clear):
                return tuple(dims), tuple(src), tuple(mic)
    raise GeometryError("could not place source and microphone in any sampled room")


def _draw(rng: np.random.Generator, lo: float, hi: float) -> float:
    """Uniform draw that also accepts a degenerate infinite range (noise-free mixing)."""
    u = rng.random()
    return float(lo) if lo == hi else float(lo + (hi - lo) * u)


def corrupt(clean: AudioSignal, noise_pool, spec: AugmentSpec,
            rng: np.random.Generator) -> tuple[AudioSignal, dict]:
    """Reverberant, noisy version of ``clean``, time-aligned to it by dropping the
    direct-path delay; returns the signal and the drawn parameters."""
    dims, src, mic = draw_geometry(spec, rng)
    rt60 = float(rng.uniform(*spec.rt60_range))
    rir = synth_rir(dims, src, mic, rt60)
    reverberant = apply_rir(clean, rir)
    d0 = rir.direct_index
    reverberant = AudioSignal(reverberant.samples[d0:d0 + len(clean)], clean.sample_rate)

    snr = _draw(rng, *spec.snr_range_db)
    if noise_pool:
        k = int(rng.integers(0, len(noise_pool)))
        noise_name, noise = noise_pool[k]
    else:
        noise_name = "white"
        noise = AudioSignal(rng.standard_normal(len(clean)), clean.sample_rate)
    mask = vad_ltsd(reverberant)
    corrupted, mix_info = mix_noise(reverberant, noise, snr, mask, rng, return_info=True)
    info = {
        "room_dims": [float(v) for v in dims],
        "source_pos": [float(v) for v in src],
        "mic_pos": [float(v) for v in mic],
        "distance": float(math.dist(src, mic)),
        "rt60": rt60,
        "snr_db": snr,
        "noise": noise_name,
        "noise_start": mix_info["noise_start"],
    }
    return corrupted, info


def generate_example(clean: AudioSignal, noise_pool, spec: AugmentSpec,
                     rng: np.random.Generator, utt_id: str = "") -> Example:
    """Corrupt ``clean`` and cut normalized (corrupted, clean) feature blocks."""
    if clean.duration < 2.0:
        raise ValueError("clean utterance shorter than 2 s")
    corrupted, info = corrupt(clean, noise_pool, spec, rng)
    f_corr = extract_features(corrupted)
    f_clean = extract_features(clean)
    factor = float(rng.uniform(*spec.time_scale_range))
    f_corr = normalize(time_scale_features(f_corr, factor))
    f_clean = normalize_like(time_scale_features(f_clean, factor), f_corr)
    blocks = blockify(f_corr, f_clean, rng, BLOCK_FRAMES, source=utt_id)
    prov = {"utterance": utt_id, "seed": spec.seed, **info, "time_scale": factor,
            "block_offsets": [int(b.offset) for b in blocks]}
    for b in blocks:
        b.meta = prov
    log.info("example %s", prov)
    return Example(blocks, prov)


class BlockStream:
    """Endless, seekable stream of training blocks over a corpus.

    Augmentation for utterance ``i`` in epoch ``e`` draws from an RNG seeded by
    ``(seed, e, i)`` (``e`` fixed to 0 when ``redraw`` is False, in which case the
    generated blocks are cached), so the stream is a pure function of the corpus
    order and the seed, and can be resumed from ``position``.
    """

    def __init__(self, corpus, noise_pool, spec: AugmentSpec, redraw: bool = True,
                 shuffle: bool = True):
        self.corpus = list(corpus)  # [(utt_id, AudioSignal)]
        if not self.corpus:
            raise ValueError("empty corpus")
        self.noise_pool = list(noise_pool or [])
        self.spec = spec
        self.redraw = redraw
        self.shuffle = shuffle
        self.position = {"epoch": 0, "item": 0, "block": 0}
        self._cache: dict[int, list[FeatureBlock]] = {}
        self._current: tuple[tuple[int, int], list[FeatureBlock]] | None = None
        self.provenance_log: list[dict] = []

    def _order(self, epoch: int) -> np.ndarray:
        n = len(self.corpus)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.spec.seed, epoch, 2**31]).permutation(n)

    def _blocks_for(self, epoch: int, utt: int) -> list[FeatureBlock]:
        if not self.redraw and utt in self._cache:
            return self._cache[utt]
        key = (epoch if self.redraw else 0, utt)
        if self._current is not None and self._current[0] == key:
            return self._current[1]
        uid, signal = self.corpus[utt]
        try:
            ex = generate_example(signal, self.noise_pool, self.spec,
                                  example_rng(self.spec.seed, utt, key[0]), uid)
            blocks = ex.blocks
            self.provenance_log.append(ex.provenance)
        except Exception as exc:
            log.warning("skipping utterance %s: %s", uid, exc)
            blocks = []
        if not self.redraw:
            self._cache[utt] = blocks
        self._current = (key, blocks)
        return blocks

    def __iter__(self):
        return self

    def __next__(self) -> FeatureBlock:
        empty_items = 0
        while True:
            pos = self.position
            order = self._order(pos["epoch"])
            utt = int(order[pos["item"]])
            blocks = self._blocks_for(pos["epoch"], utt)
            if pos["block"] < len(blocks):
                b = blocks[pos["block"]]
                pos["block"] += 1
                return b
            if not blocks:
                empty_items += 1
                if empty_items > len(self.corpus) and not self.redraw:
                    raise RuntimeError("no utterance in the corpus yields a training block")
            pos["block"] = 0
            pos["item"] += 1
            if pos["item"] >= len(self.corpus):
                pos["item"] = 0
                pos["epoch"] += 1

    def state(self) -> dict:
        return dict(self.position)

    def restore(self, state: dict) -> None:
        self.position = {k: int(state[k]) for k in ("epoch", "item", "block")}
