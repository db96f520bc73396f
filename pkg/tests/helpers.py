"""Shared builders for small networks and checkpoint corruption."""

import struct

import numpy as np

from u2net.network import NetworkConfig, preset_config


def tiny_config(input_size=32, batchnorm=True, trunk=4, mid=2):
    """The small preset's topology with a ``trunk``-channel trunk and ``mid`` internal channels."""
    d = preset_config("small", input_size, batchnorm).to_dict()
    for s in d["encoder"] + d["decoder"]:
        s["mid"] = mid
        s["c_out"] = trunk
        s["c_in"] = 2 * trunk if s["name"].startswith("De") else trunk
    d["encoder"][0]["c_in"] = 3
    d["name"] = "tiny"
    return NetworkConfig.from_dict(d)


def mutate(buf: bytes, rng: np.random.Generator) -> bytes:
    """One random corruption: truncation, bit flip, overwrite, insertion, deletion or a forged length."""
    b = bytearray(buf)
    kind = int(rng.integers(6))
    if kind == 0:
        return bytes(b[: int(rng.integers(len(b)))])
    if kind == 1:
        i = int(rng.integers(len(b)))
        b[i] ^= 1 << int(rng.integers(8))
    elif kind == 2:
        i = int(rng.integers(len(b)))
        n = int(rng.integers(1, 9))
        b[i:i + n] = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
    elif kind == 3:
        i = int(rng.integers(len(b) + 1))
        b[i:i] = rng.integers(0, 256, int(rng.integers(1, 9)), dtype=np.uint8).tobytes()
    elif kind == 4:
        i = int(rng.integers(len(b)))
        del b[i:i + int(rng.integers(1, 33))]
    else:
        # forge one of the 32-bit header fields (version, config length, or one inside the payload)
        i = int(rng.choice([4, 8, int(rng.integers(0, max(1, len(b) - 4)))]))
        b[i:i + 4] = struct.pack("<I", int(rng.choice([0, 1, 2, 0xFFFFFFFF, int(rng.integers(2 ** 32))])))
    return bytes(b)
