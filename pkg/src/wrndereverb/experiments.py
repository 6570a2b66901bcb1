"""Desk-scale experiments shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import synth
from .augment import AugmentSpec, BlockStream, corrupt, example_rng
from .dsp import AudioSignal
from .enhance import enhance
from .frontend import extract_features, normalize, normalize_like
from .metrics import llr, srmr
from .nn.network import WideResNet, WrbConfig
from .nn.train import TrainConfig, Trainer


def fixture_corpus(n: int, duration: float = 2.5, seed: int = 0, floor: float = 3e-3):
    """[(id, signal)] synthetic utterances."""
    return [(f"utt{i:03d}", synth.speech_like(duration, np.random.default_rng([seed, i]),
                                              floor=floor)) for i in range(n)]


@dataclass
class OverfitResult:
    losses: list
    seconds: float
    initial: float = field(init=False)
    final: float = field(init=False)

    def __post_init__(self):
        self.initial = self.losses[0]
        self.final = float(np.mean(self.losses[-5:]))

    @property
    def ratio(self) -> float:
        return self.final / self.initial


def overfit(n_utterances: int = 5, max_steps: int = 500, time_limit: float = 600.0,
            target_ratio: float = 0.1, lr: float = 3e-3, seed: int = 0,
            rt60_range=(0.05, 0.1), snr_range_db=(math.inf, math.inf)) -> OverfitResult:
    """Fit the desk network to a fixed set of blocks until the mean loss of the
    last pass over them drops below ``target_ratio`` times the first loss."""
    corpus = fixture_corpus(n_utterances, seed=seed)
    spec = AugmentSpec(rt60_range=rt60_range, snr_range_db=snr_range_db, seed=seed)
    stream = BlockStream(corpus, [], spec, redraw=False, shuffle=False)
    trainer = Trainer(WideResNet(WrbConfig.desk(seed)), TrainConfig(lr=lr, batch_size=1))
    window = n_utterances
    t0 = time.perf_counter()

    def stop(history):
        if time.perf_counter() - t0 > time_limit:
            return True
        if len(history) < window + 1:
            return False
        last = np.mean([h["loss"] for h in history[-window:]])
        return last < target_ratio * history[0]["loss"]

    history = trainer.run(stream, max_steps, stop=stop)
    return OverfitResult([h["loss"] for h in history], time.perf_counter() - t0)


def train_directional(n_train: int = 20, steps: int = 150, lr: float = 3e-3, seed: int = 1,
                      rt60: float = 0.5, snr_db: float = 20.0) -> WideResNet:
    """Desk network trained on freshly drawn rooms at one corruption level."""
    corpus = fixture_corpus(n_train, seed=seed, floor=1e-4)
    spec = AugmentSpec(rt60_range=(rt60, rt60), snr_range_db=(snr_db, snr_db), seed=seed)
    stream = BlockStream(corpus, [], spec, redraw=True, shuffle=True)
    trainer = Trainer(WideResNet(WrbConfig.desk(seed)), TrainConfig(lr=lr, batch_size=1))
    trainer.run(stream, steps)
    return trainer.net


@dataclass
class HeldOutScores:
    mse_corrupted: list
    mse_enhanced: list
    srmr_corrupted: list
    srmr_enhanced: list
    llr_corrupted: list
    llr_enhanced: list

    def summary(self) -> dict:
        better = sum(e < c for e, c in zip(self.mse_enhanced, self.mse_corrupted))
        return {
            "n": len(self.mse_corrupted),
            "mse_better": int(better),
            "mse_corrupted": float(np.mean(self.mse_corrupted)),
            "mse_enhanced": float(np.mean(self.mse_enhanced)),
            "srmr_corrupted": float(np.mean(self.srmr_corrupted)),
            "srmr_enhanced": float(np.mean(self.srmr_enhanced)),
            "llr_corrupted": float(np.mean(self.llr_corrupted)),
            "llr_enhanced": float(np.mean(self.llr_enhanced)),
        }


def held_out_set(n: int = 20, seed: int = 99, rt60: float = 0.5, snr_db: float = 20.0,
                 duration: float = 3.0):
    """[(clean, corrupted)] pairs from seeds disjoint from the training fixtures."""
    spec = AugmentSpec(rt60_range=(rt60, rt60), snr_range_db=(snr_db, snr_db), seed=seed)
    pairs = []
    for i, (_, clean) in enumerate(fixture_corpus(n, duration, seed=seed, floor=1e-4)):
        noisy, _ = corrupt(clean, [], spec, example_rng(seed, i))
        pairs.append((clean, noisy))
    return pairs


def score_held_out(net: WideResNet, pairs) -> HeldOutScores:
    s = HeldOutScores([], [], [], [], [], [])
    for clean, noisy in pairs:
        norm = normalize(extract_features(noisy))
        x = norm.values
        y = normalize_like(extract_features(clean), norm).values
        x_enh = net.infer(x)
        s.mse_corrupted.append(float(np.mean((x - y) ** 2)))
        s.mse_enhanced.append(float(np.mean((x_enh - y) ** 2)))
        enhanced = enhance(noisy, net)
        s.srmr_corrupted.append(srmr(noisy))
        s.srmr_enhanced.append(srmr(enhanced))
        s.llr_corrupted.append(llr(clean, noisy))
        s.llr_enhanced.append(llr(clean, enhanced))
    return s


__all__ = ["AudioSignal", "HeldOutScores", "OverfitResult", "fixture_corpus", "held_out_set",
           "overfit", "score_held_out", "train_directional"]
