"""Binary checkpoint container.

Layout (little-endian)::

    b"WRNC"  u32 version
    u32 len  JSON header (sorted keys): model config, train config, extra state
    u32 n    parameter arrays, traversal order of WideResNet.parameters()
    u32 n    buffer arrays (BatchNorm running stats), traversal order of buffers()
    u8       has optimizer state; if 1: u64 optimizer step, then n first moments
             and n second moments in parameter order
    u64      trainer step counter

Each array is ``u16 name length, name (utf-8), u8 ndim, u32 * ndim shape, f64 data``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .network import WideResNet, WrbConfig

MAGIC = b"WRNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: WrbConfig
    params: list[tuple[str, np.ndarray]]
    buffers: list[tuple[str, np.ndarray]]
    step: int = 0
    opt_step: int | None = None
    opt_m: list[np.ndarray] | None = None
    opt_v: list[np.ndarray] | None = None
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, net: WideResNet, optimizer=None, step: int = 0,
                train_config: dict | None = None, extra: dict | None = None) -> "Checkpoint":
        return cls(
            config=net.config,
            params=[(n, p.value.copy()) for n, p in net.parameters()],
            buffers=[(n, b.copy()) for n, b in net.buffers()],
            step=step,
            opt_step=None if optimizer is None else optimizer.t,
            opt_m=None if optimizer is None else [m.copy() for m in optimizer.m],
            opt_v=None if optimizer is None else [v.copy() for v in optimizer.v],
            train_config=dict(train_config or {}),
            extra=dict(extra or {}),
        )

    def build_network(self) -> WideResNet:
        net = WideResNet(self.config)
        self.load_into(net)
        return net

    def load_into(self, net: WideResNet, optimizer=None) -> None:
        targets = net.parameters()
        if [n for n, _ in targets] != [n for n, _ in self.params]:
            raise CheckpointError("parameter layout does not match the network")
        for (_, p), (_, v) in zip(targets, self.params):
            if p.value.shape != v.shape:
                raise CheckpointError("parameter shape mismatch")
            p.value[...] = v
        for (_, b), (_, v) in zip(net.buffers(), self.buffers):
            b[...] = v
        if optimizer is not None and self.opt_m is not None:
            optimizer.t = self.opt_step
            for dst, src in zip(optimizer.m, self.opt_m):
                dst[...] = src
            for dst, src in zip(optimizer.v, self.opt_v):
                dst[...] = src


def _pack_array(name: str, a: np.ndarray) -> bytes:
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def to_bytes(ck: Checkpoint) -> bytes:
    header = json.dumps({"model": ck.config.to_dict(), "train": ck.train_config,
                         "extra": ck.extra}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(ck.params)))
    parts += [_pack_array(n, a) for n, a in ck.params]
    parts.append(struct.pack("<I", len(ck.buffers)))
    parts += [_pack_array(n, a) for n, a in ck.buffers]
    if ck.opt_m is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ", 1, ck.opt_step))
        parts += [_pack_array(n, m) for (n, _), m in zip(ck.params, ck.opt_m)]
        parts += [_pack_array(n, v) for (n, _), v in zip(ck.params, ck.opt_v)]
    parts.append(struct.pack("<Q", ck.step))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self):
        (ln,) = self.unpack("<H")
        name = self.take(ln).decode()
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, a


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a WRNC checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
        config = WrbConfig(**header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    (n,) = r.unpack("<I")
    params = [r.array() for _ in range(n)]
    (nb,) = r.unpack("<I")
    buffers = [r.array() for _ in range(nb)]
    (has_opt,) = r.unpack("<B")
    opt_step = opt_m = opt_v = None
    if has_opt:
        (opt_step,) = r.unpack("<Q")
        opt_m = [r.array()[1] for _ in range(n)]
        opt_v = [r.array()[1] for _ in range(n)]
    (step,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config, params, buffers, step, opt_step, opt_m, opt_v,
                      header.get("train", {}), header.get("extra", {}))


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ck))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
