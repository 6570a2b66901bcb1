"""Training loop: blocks -> forward -> MSE -> backward -> AdamW."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from ..frontend import FeatureBlock
from .checkpoint import Checkpoint
from .layers import mse_loss
from .network import WideResNet, WrbConfig
from .optim import AdamW

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, provenance: str):
        super().__init__(f"non-finite loss at step {step} (last batch: {provenance})")
        self.step = step
        self.provenance = provenance


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 1000
    checkpoint_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


def batch_arrays(blocks: list[FeatureBlock]):
    x = np.stack([b.corrupted for b in blocks])[:, None]
    y = np.stack([b.clean for b in blocks])[:, None]
    return x, y


def batch_provenance(blocks: list[FeatureBlock]) -> str:
    return ",".join(f"{b.source}@{b.offset}" for b in blocks)


class Trainer:
    def __init__(self, net: WideResNet, config: TrainConfig):
        self.net = net
        self.config = config
        self.optimizer = AdamW([p for _, p in net.parameters()], lr=config.lr,
                               betas=(config.beta1, config.beta2), eps=config.eps,
                               weight_decay=config.weight_decay)
        self.step = 0

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, config: TrainConfig | None = None) -> "Trainer":
        if config is None:
            config = TrainConfig(**ck.train_config) if ck.train_config else TrainConfig()
        tr = cls(WideResNet(ck.config), config)
        ck.load_into(tr.net, tr.optimizer)
        tr.step = ck.step
        return tr

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        return Checkpoint.capture(self.net, self.optimizer, self.step,
                                  self.config.to_dict(), extra)

    def train_step(self, blocks: list[FeatureBlock]) -> float:
        x, y = batch_arrays(blocks)
        self.net.train()
        self.net.zero_grad()
        out = self.net.forward(x)
        loss, g = mse_loss(y, out)
        if not math.isfinite(loss):
            raise TrainingDivergedError(self.step + 1, batch_provenance(blocks))
        self.net.backward(g)
        self.optimizer.step()
        self.step += 1
        return loss

    def run(self, stream: Iterable[FeatureBlock], steps: int | None = None,
            log_sink: Callable[[dict], None] | None = None,
            checkpoint_sink: Callable[[Checkpoint], None] | None = None,
            extra_state: Callable[[], dict] | None = None,
            stop: Callable[[list[dict]], bool] | None = None) -> list[dict]:
        """Train until ``steps`` more steps are done or ``stop(history)`` is true."""
        steps = self.config.steps if steps is None else steps
        it: Iterator[FeatureBlock] = iter(stream)
        history = []
        for _ in range(steps):
            t0 = time.perf_counter()
            blocks = [next(it) for _ in range(self.config.batch_size)]
            loss = self.train_step(blocks)
            rec = {"step": self.step, "loss": loss, "lr": self.optimizer.lr,
                   "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3)}
            history.append(rec)
            if log_sink is not None:
                log_sink(rec)
            log.debug("step %d loss %.6f", self.step, loss)
            if checkpoint_sink is not None and self.config.checkpoint_every > 0 \
                    and self.step % self.config.checkpoint_every == 0:
                checkpoint_sink(self.checkpoint(extra_state() if extra_state else None))
            if stop is not None and stop(history):
                break
        return history


def train(stream: Iterable[FeatureBlock], model: WrbConfig, hyper: TrainConfig,
          checkpoint_sink: Callable[[Checkpoint], None] | None = None,
          log_sink: Callable[[dict], None] | None = None) -> list[dict]:
    """Fresh network trained for ``hyper.steps`` steps; returns the training log."""
    trainer = Trainer(WideResNet(model), hyper)
    return trainer.run(stream, log_sink=log_sink, checkpoint_sink=checkpoint_sink)


def jsonl_sink(fh) -> Callable[[dict], None]:
    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
    return write


def relative_drop_reached(ratio: float, window: int) -> Callable[[list[dict]], bool]:
    """Stop once the mean loss of the last ``window`` steps falls below ``ratio`` times
    the mean of the first ``window`` steps."""
    def stop(history):
        if len(history) < 2 * window:
            return False
        first = np.mean([h["loss"] for h in history[:window]])
        last = np.mean([h["loss"] for h in history[-window:]])
        return last < ratio * first
    return stop
