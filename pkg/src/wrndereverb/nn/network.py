"""Wide residual network over (channels, time, features) feature stacks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import BatchNorm, Conv1dTime, Layer, Param, PReLU, ReLU

FULL_WIDTHS = (4, 8, 16, 32)


@dataclass
class WrbConfig:
    """Architecture hyperparameters.

    ``widths`` gives the channel count of each wide residual group; when empty it
    is ``widen_factor * (4, 8, 16, 32)``.
    """

    n_wrb: int = 4
    blocks_per_wrb: int = 2
    base_channels: int = 16
    widen_factor: int = 8
    kernel: int = 3
    widths: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            if self.n_wrb != len(FULL_WIDTHS):
                raise ValueError("explicit widths are required when n_wrb != 4")
            self.widths = tuple(self.widen_factor * w for w in FULL_WIDTHS)
        if len(self.widths) != self.n_wrb:
            raise ValueError("need one width per WRB")
        vals = (self.n_wrb, self.blocks_per_wrb, self.base_channels, self.widen_factor,
                self.kernel, *self.widths)
        if any(v <= 0 for v in vals):
            raise ValueError("all architecture sizes must be positive")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")

    @classmethod
    def desk(cls, seed: int = 0) -> "WrbConfig":
        """Reduced preset used by tests and laptop-scale runs."""
        return cls(base_channels=8, widths=(8, 16, 24, 32), seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class ResidualBlock(Layer):
    """Pre-activation block: shortcut(x) + conv(prelu(bn(conv(prelu(bn(x))))))."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.bn1, self.act1 = BatchNorm(c_in), PReLU(c_in)
        self.conv1 = Conv1dTime(c_in, c_out, k, rng)
        self.bn2, self.act2 = BatchNorm(c_out), PReLU(c_out)
        self.conv2 = Conv1dTime(c_out, c_out, k, rng)
        self.shortcut = Conv1dTime(c_in, c_out, 1, rng) if c_in != c_out else None

    def layers(self):
        named = [("bn1", self.bn1), ("act1", self.act1), ("conv1", self.conv1),
                 ("bn2", self.bn2), ("act2", self.act2), ("conv2", self.conv2)]
        if self.shortcut is not None:
            named.append(("shortcut", self.shortcut))
        return named

    def forward(self, x, cache=True):
        h = x
        for layer in (self.bn1, self.act1, self.conv1, self.bn2, self.act2, self.conv2):
            h = layer.forward(h, cache)
        skip = x if self.shortcut is None else self.shortcut.forward(x, cache)
        return skip + h

    def backward(self, g):
        dh = g
        for layer in (self.conv2, self.act2, self.bn2, self.conv1, self.act1, self.bn1):
            dh = layer.backward(dh)
        dskip = g if self.shortcut is None else self.shortcut.backward(g)
        return dh + dskip


class WideResidualGroup(Layer):
    """blocks_per_wrb residual blocks; the first one widens."""

    def __init__(self, c_in: int, width: int, n_blocks: int, k: int, rng):
        self.blocks = [ResidualBlock(c_in if i == 0 else width, width, k, rng)
                       for i in range(n_blocks)]

    def forward(self, x, cache=True):
        for b in self.blocks:
            x = b.forward(x, cache)
        return x

    def backward(self, g):
        for b in reversed(self.blocks):
            g = b.backward(g)
        return g


class WideResNet(Layer):
    """stem conv -> [stem | input] -> WRB x n -> BN -> PReLU -> conv to 1 channel -> ReLU."""

    def __init__(self, config: WrbConfig, n_features: int = 621):
        self.config = config
        self.n_features = n_features
        rng = np.random.default_rng(config.seed)
        k = config.kernel
        self.stem = Conv1dTime(1, config.base_channels, k, rng)
        c = config.base_channels + 1
        self.groups = []
        for w in config.widths:
            self.groups.append(WideResidualGroup(c, w, config.blocks_per_wrb, k, rng))
            c = w
        self.bn, self.act = BatchNorm(c), PReLU(c)
        self.head = Conv1dTime(c, 1, k, rng)
        self.out_act = ReLU()

    # -- traversal ---------------------------------------------------------
    def named_layers(self):
        yield "stem", self.stem
        for gi, grp in enumerate(self.groups):
            for bi, blk in enumerate(grp.blocks):
                for name, layer in blk.layers():
                    yield f"wrb{gi + 1}.block{bi + 1}.{name}", layer
        yield "bn", self.bn
        yield "act", self.act
        yield "head", self.head

    def parameters(self) -> list[tuple[str, Param]]:
        return [(f"{ln}.{pn}", p) for ln, layer in self.named_layers() for pn, p in layer.params()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{ln}.{bn}", b) for ln, layer in self.named_layers() for bn, b in layer.buffers()]

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        for _, layer in self.named_layers():
            if isinstance(layer, BatchNorm):
                layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- compute -----------------------------------------------------------
    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        """x: (B, 1, T, F) or (1, T, F) -> same shape."""
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, T, F) input, got {x.shape}")
        if x.shape[3] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[3]}")
        h = self.stem.forward(x, cache)
        h = np.concatenate([h, x], axis=1)
        for grp in self.groups:
            h = grp.forward(h, cache)
        h = self.act.forward(self.bn.forward(h, cache), cache)
        out = self.out_act.forward(self.head.forward(h, cache), cache)
        return out[0] if squeeze else out

    def backward(self, g: np.ndarray) -> np.ndarray:
        """Accumulates parameter gradients; returns the gradient wrt the input."""
        squeeze = g.ndim == 3
        if squeeze:
            g = g[None]
        g = self.head.backward(self.out_act.backward(g))
        g = self.bn.backward(self.act.backward(g))
        for grp in reversed(self.groups):
            g = grp.backward(g)
        c = self.config.base_channels
        dx = g[:, c:] + self.stem.backward(np.ascontiguousarray(g[:, :c]))
        return dx[0] if squeeze else dx

    def infer(self, x: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Eval-mode forward over (T, F) features, chunked along the feature axis.

        Features never interact, so chunking is exact.
        """
        was = [layer.training for _, layer in self.named_layers() if isinstance(layer, BatchNorm)]
        self.eval()
        try:
            T, F = x.shape
            out = np.empty((T, F))
            for s in range(0, F, chunk):
                xs = np.ascontiguousarray(x[None, None, :, s:s + chunk])
                out[:, s:s + chunk] = self._forward_any_width(xs)[0, 0]
            return out
        finally:
            bns = [layer for _, layer in self.named_layers() if isinstance(layer, BatchNorm)]
            for bn, mode in zip(bns, was):
                bn.training = mode

    def _forward_any_width(self, x):
        h = self.stem.forward(x, False)
        h = np.concatenate([h, x], axis=1)
        for grp in self.groups:
            h = grp.forward(h, False)
        h = self.act.forward(self.bn.forward(h, False), False)
        return self.out_act.forward(self.head.forward(h, False), False)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.value) for n, p in self.parameters()] + self.buffers()
