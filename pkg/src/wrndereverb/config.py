"""Run configuration for the command-line tools (JSON in, resolved JSON out)."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .augment import AugmentSpec
from .nn.network import WrbConfig
from .nn.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus: str = ""
    noise: str | None = None
    out: str = "run"


@dataclass
class RunConfig:
    """Everything a training run depends on.

    ``seed`` is copied into the augmentation and model seeds so a single number
    pins the whole run. ``preset`` picks the architecture defaults ("desk" or
    "full") that ``model`` entries then override.
    """

    seed: int = 0
    preset: str = "desk"
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    model: WrbConfig = field(default_factory=WrbConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    redraw: bool = True
    stop_ratio: float | None = None
    stop_window: int = 5

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an integer in [0, 2**64)")
        preset = d.get("preset", "desk")
        if preset not in ("desk", "full"):
            raise ConfigError("preset must be 'desk' or 'full'")
        base_model = WrbConfig.desk() if preset == "desk" else WrbConfig()
        try:
            augment = AugmentSpec(**{**_section(d, "augment", AugmentSpec), "seed": seed})
            model_d = {**asdict(base_model), **_section(d, "model", WrbConfig), "seed": seed}
            if "widths" not in d.get("model", {}) and preset == "full":
                model_d["widths"] = ()
            model = WrbConfig(**model_d)
            train = TrainConfig(**_section(d, "train", TrainConfig))
            paths = Paths(**_section(d, "paths", Paths))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("corpus", "noise", "out"):
            v = getattr(paths, name)
            if v:
                setattr(paths, name, os.path.normpath(os.path.join(base_dir, v)))
        if train.batch_size < 1 or train.steps < 0 or train.lr <= 0:
            raise ConfigError("train needs batch_size >= 1, steps >= 0, lr > 0")
        stop_ratio = d.get("stop_ratio")
        if stop_ratio is not None and not 0 < stop_ratio < 1:
            raise ConfigError("stop_ratio must lie in (0, 1)")
        return cls(seed, preset, augment, model, train, paths, bool(d.get("redraw", True)),
                   stop_ratio, int(d.get("stop_window", 5)))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def validate_paths(self) -> None:
        if not self.paths.corpus or not os.path.isdir(self.paths.corpus):
            raise ConfigError(f"corpus directory not found: {self.paths.corpus!r}")
        if self.paths.noise and not os.path.isdir(self.paths.noise):
            raise ConfigError(f"noise directory not found: {self.paths.noise!r}")
        parent = os.path.dirname(os.path.abspath(self.paths.out))
        if not os.path.isdir(parent):
            raise ConfigError(f"parent of output directory does not exist: {parent}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "preset": self.preset,
            "augment": self.augment.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "paths": asdict(self.paths),
            "redraw": self.redraw,
            "stop_ratio": self.stop_ratio,
            "stop_window": self.stop_window,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _section(d: dict, key: str, kind) -> dict:
    sec = d.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be an object")
    allowed = {f.name for f in fields(kind)}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
    return {k: v for k, v in sec.items() if k != "seed"}
