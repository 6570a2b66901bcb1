"""Inference: waveform -> normalized features -> network -> resynthesized waveform."""
from __future__ import annotations

from .dsp import AudioSignal
from .frontend import (FeatureMatrix, denormalize, extract_features, normalize,
                       reconstruct_waveform, spectral_stft, with_values)
from .nn.checkpoint import Checkpoint
from .nn.network import WideResNet


def _network(model) -> WideResNet:
    return model.build_network() if isinstance(model, Checkpoint) else model


def enhance_features(signal: AudioSignal, model) -> FeatureMatrix:
    """Enhanced log-spectral features in the unnormalized domain."""
    net = _network(model)
    norm = normalize(extract_features(signal))
    out = net.infer(norm.values)
    return denormalize(with_values(norm, out))


def enhance(signal: AudioSignal, model) -> AudioSignal:
    """Full pass over the utterance; output has the input's length."""
    feats = enhance_features(signal, model)
    return reconstruct_waveform(feats, spectral_stft(signal), len(signal))
