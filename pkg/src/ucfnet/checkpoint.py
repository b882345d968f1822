"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"UCFCKPT\\x00"
    version    u32
    config     u64 length + UTF-8 key=value text (network config echo)
    iteration  u64
    seed       i64
    blocks     u32 count, then per block:
                 u16 name length, name (UTF-8),
                 u8 ndim, ndim x u64 dims,
                 float64 little-endian payload

Block names carry a section prefix: ``param/``, ``buffer/`` or ``momentum/``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Network, NetworkConfig, build_network

MAGIC = b"UCFCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    seed: int = 0

    @classmethod
    def capture(cls, network: Network, momentum=None, iteration: int = 0, seed: int = 0) -> "Checkpoint":
        return cls(
            network.config,
            {k: v.copy() for k, v in network.named_params().items()},
            {k: v.copy() for k, v in network.named_buffers().items()},
            {k: v.copy() for k, v in (momentum or {}).items()},
            iteration,
            seed,
        )

    def blocks(self):
        for section, store in (("param", self.params), ("buffer", self.buffers), ("momentum", self.momentum)):
            for name, value in store.items():
                yield f"{section}/{name}", value


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = ckpt.config.to_text().encode()
    parts += [struct.pack("<Q", len(cfg)), cfg, struct.pack("<Qq", ckpt.iteration, ckpt.seed)]
    blocks = list(ckpt.blocks())
    parts.append(struct.pack("<I", len(blocks)))
    for name, value in blocks:
        raw = name.encode()
        arr = np.ascontiguousarray(value, dtype="<f8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<Q")
    config = NetworkConfig.from_text(r.take(cfg_len).decode())
    iteration, seed = r.unpack("<Qq")
    (count,) = r.unpack("<I")
    stores: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "momentum": {}}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        section, _, key = name.partition("/")
        if section not in stores:
            raise CheckpointError(f"unknown block section in {name!r}")
        stores[section][key] = arr
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last block")
    return Checkpoint(config, stores["param"], stores["buffer"], stores["momentum"], iteration, seed)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def apply_checkpoint(network: Network, ckpt: Checkpoint) -> None:
    """Copy checkpoint blocks into ``network`` in place, validating names and shapes."""
    for label, target, source in (
        ("param", network.named_params(), ckpt.params),
        ("buffer", network.named_buffers(), ckpt.buffers),
    ):
        for name, dest in target.items():
            if name not in source:
                raise CheckpointError(f"checkpoint lacks block {label}/{name}")
            if source[name].shape != dest.shape:
                raise CheckpointError(
                    f"shape mismatch in block {label}/{name}: checkpoint {source[name].shape}, network {dest.shape}"
                )
        extra = set(source) - set(target)
        if extra:
            raise CheckpointError(f"checkpoint has blocks unknown to the network: {label}/{sorted(extra)[0]}")
    for label, target, source in (
        ("param", network.named_params(), ckpt.params),
        ("buffer", network.named_buffers(), ckpt.buffers),
    ):
        for name, dest in target.items():
            dest[...] = source[name]


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = build_network(ckpt.config, ckpt.seed)
    apply_checkpoint(net, ckpt)
    return net
