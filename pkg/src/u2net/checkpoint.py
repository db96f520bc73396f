"""Binary checkpoint format.

Layout, all integers little-endian::

    b"U2CK"
    u32 version
    u32 config length, then that many bytes of UTF-8 JSON
    u32 entry count
    per entry:
        u16 name length, UTF-8 name
        u8 dtype code (0 = float32, 1 = float64)
        u8 rank, then rank x u64 dims
        raw little-endian values

Every declared length is checked against the bytes that remain before
anything is allocated, so a damaged file raises a typed error instead of
exhausting memory or reading garbage.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .analyzer import count_params
from .errors import CheckpointCorruptError, CheckpointShapeError, CheckpointVersionError, ConfigurationError
from .network import NetworkConfig, U2Net, build_network
from .nn import PRNG_NAME

MAGIC = b"U2CK"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
MAX_RANK = 8


@dataclass
class Checkpoint:
    config: dict
    tensors: dict  # name -> ndarray, in file order

    @property
    def network_config(self) -> NetworkConfig:
        try:
            return NetworkConfig.from_dict(self.config["network"])
        except (KeyError, TypeError, AttributeError, ConfigurationError) as exc:
            raise CheckpointCorruptError(f"checkpoint config does not describe a network: {exc}") from exc


def encode(tensors: dict, config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = CODE_FOR_DTYPE.get(arr.dtype)
        if code is None:
            raise ConfigurationError(f"{name}: cannot store dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > MAX_RANK:
            raise ConfigurationError(f"{name}: name too long or rank too high")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> memoryview:
        if n < 0 or n > self.remaining():
            raise CheckpointCorruptError(
                f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, {self.remaining()} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise CheckpointCorruptError("not a checkpoint: bad magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    (cfg_len,) = r.unpack("<I", "config length")
    raw_cfg = bytes(r.take(cfg_len, "config"))
    try:
        config = json.loads(raw_cfg.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"config is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise CheckpointCorruptError("config JSON must be an object")
    (count,) = r.unpack("<I", "entry count")
    # smallest possible entry: u16 + u8 + u8 with an empty name and rank 0 + one value
    if count * 8 > r.remaining():
        raise CheckpointCorruptError(f"entry count {count} cannot fit in {r.remaining()} bytes")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        try:
            name = bytes(r.take(name_len, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptError(f"entry {i} name is not UTF-8") from exc
        if name in tensors:
            raise CheckpointCorruptError(f"duplicate entry {name!r}")
        code, rank = r.unpack("<BB", f"{name} header")
        if code not in DTYPE_CODES:
            raise CheckpointCorruptError(f"{name}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise CheckpointCorruptError(f"{name}: rank {rank} exceeds {MAX_RANK}")
        dims = r.unpack(f"<{rank}Q", f"{name} dims")
        dtype = DTYPE_CODES[code]
        nbytes = dtype.itemsize
        for d in dims:
            nbytes *= d
            if nbytes > r.remaining():
                raise CheckpointCorruptError(
                    f"truncated checkpoint: {name} declares shape {dims} but only {r.remaining()} bytes remain")
        data = r.take(nbytes, f"{name} values")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.remaining():
        raise CheckpointCorruptError(f"{r.remaining()} trailing bytes after the last entry")
    return Checkpoint(config, tensors)


def checkpoint_config(net: U2Net, extra: dict | None = None) -> dict:
    cfg = {"network": net.config.to_dict(), "dtype": net.dtype.name, "prng": PRNG_NAME}
    if extra:
        cfg.update(extra)
    return cfg


def save_checkpoint(net: U2Net, path: Union[str, os.PathLike], extra: dict | None = None) -> Path:
    """Write ``net``'s parameters and running statistics; the write is atomic."""
    path = Path(path)
    data = encode(net.state_dict(), checkpoint_config(net, extra))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    return decode(Path(path).read_bytes())


def load_checkpoint(path: Union[str, os.PathLike]) -> U2Net:
    """Rebuild the network described by the file and load its values."""
    ckpt = read_checkpoint(path)
    config = ckpt.network_config
    dtype = np.float64 if ckpt.config.get("dtype") == "float64" else np.float32
    wrong = [n for n, a in ckpt.tensors.items() if a.dtype != np.dtype(dtype)]
    if wrong:
        raise CheckpointShapeError(f"entries {wrong[:3]} are not {np.dtype(dtype).name}")
    # compare sizes analytically first so a damaged config cannot trigger a huge allocation
    expected = count_params(config).values
    stored = sum(int(a.size) for a in ckpt.tensors.values())
    if expected != stored:
        raise CheckpointShapeError(f"config describes {expected} values but the file holds {stored}")
    net = build_network(config, seed=0, dtype=dtype)
    net.load_state_dict(ckpt.tensors)
    return net
