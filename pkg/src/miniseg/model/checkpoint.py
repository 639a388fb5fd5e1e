"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MSG1"                       magic
    u32 version
    config: u8 stages, stages*u32 C, stages*u32 N, stages*u32 M,
            u32 K, u32 classes, u32 ablation flag bits
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 role, u8 rank,
                rank*u32 extents, float32 data (little-endian)
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Tuple, Union

import numpy as np

from ..layers import ROLES, Module
from .config import ConfigError, MiniSegConfig
from .network import MiniSeg, build

MAGIC = b"MSG1"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class WeightEntry:
    array: np.ndarray
    role: str

    @property
    def shape(self) -> tuple:
        return self.array.shape


class ModelWeights:
    """Ordered name -> (array, role) mapping, in module enumeration order."""

    def __init__(self, entries=None):
        self._entries: "OrderedDict[str, WeightEntry]" = OrderedDict(entries or ())

    @classmethod
    def from_model(cls, model: Module) -> "ModelWeights":
        return cls((name, WeightEntry(p.data.copy(), p.role)) for name, p in model.named_parameters())

    def __getitem__(self, name: str) -> WeightEntry:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def learnable(self):
        return [(n, e) for n, e in self._entries.items() if e.role not in ("bn_mean", "bn_var")]

    def equals(self, other: "ModelWeights") -> bool:
        """Bit-exact comparison of names, roles and array bytes."""
        if list(self) != list(other):
            return False
        return all(
            e.role == other[n].role and e.shape == other[n].shape and e.array.tobytes() == other[n].array.tobytes()
            for n, e in self.items()
        )


def apply_weights(model: Module, weights: ModelWeights) -> None:
    """Copy ``weights`` into ``model``; raise on the first name/shape disagreement."""
    params = list(model.named_parameters())
    names = list(weights)
    for k, (name, p) in enumerate(params):
        if k >= len(names):
            raise ShapeMismatchError(f"checkpoint has no tensor for {name!r} (model expects {len(params)} tensors)")
        got = names[k]
        entry = weights[got]
        if got != name or entry.shape != p.shape:
            raise ShapeMismatchError(
                f"tensor #{k}: model expects {name!r} with shape {p.shape}, "
                f"checkpoint has {got!r} with shape {entry.shape}"
            )
    if len(names) > len(params):
        raise ShapeMismatchError(f"checkpoint has extra tensor {names[len(params)]!r}")
    for name, p in params:
        p.data[...] = weights[name].array


def _config_bytes(cfg: MiniSegConfig) -> bytes:
    n = len(cfg.channels)
    parts = [struct.pack("<B", n)]
    for seq in (cfg.channels, cfg.blocks, cfg.downsamplers):
        parts.append(struct.pack(f"<{n}I", *seq))
    parts.append(struct.pack("<3I", cfg.branches, cfg.classes, cfg.flag_bits()))
    return b"".join(parts)


def save_checkpoint(model: MiniSeg, path: Union[str, Path]) -> None:
    weights = ModelWeights.from_model(model)
    out = [MAGIC, struct.pack("<I", VERSION), _config_bytes(model.config), struct.pack("<I", len(weights))]
    for name, entry in weights.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(entry.array, dtype="<f4")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", ROLES.index(entry.role), arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Union[str, Path]) -> Tuple[MiniSegConfig, ModelWeights]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}; not a MiniSeg checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads version {VERSION}")
    (stages,) = r.unpack("<B")
    c = r.unpack(f"<{stages}I")
    n = r.unpack(f"<{stages}I")
    m = r.unpack(f"<{stages}I")
    k, classes, bits = r.unpack("<3I")
    try:
        cfg = MiniSegConfig.from_flag_bits(bits, channels=c, blocks=n, downsamplers=m, branches=k, classes=classes)
    except ConfigError as exc:
        raise CorruptCheckpointError(f"invalid config block: {exc}") from exc
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("tensor name is not valid UTF-8") from exc
        role_idx, rank = r.unpack("<BB")
        if role_idx >= len(ROLES):
            raise CorruptCheckpointError(f"tensor {name!r}: unknown role byte {role_idx}")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        entries.append((name, WeightEntry(arr, ROLES[role_idx])))
    if r.pos != len(r.buf):
        raise CorruptCheckpointError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor")
    return cfg, ModelWeights(entries)


def load_model(path: Union[str, Path], expected: MiniSegConfig = None) -> MiniSeg:
    """Build the model a checkpoint describes (or ``expected``) and load its weights."""
    cfg, weights = load_checkpoint(path)
    model = build(expected or cfg)
    apply_weights(model, weights)
    return model
