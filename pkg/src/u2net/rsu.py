"""Residual U-blocks: RSU-L and the dilated RSU-LF variant."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn import ConvUnit, Module, SeedLike, make_rng
from .tensor import Tensor, add, concat_channels, maxpool2, upsample_bilinear


@dataclass(frozen=True)
class RsuSpec:
    """RSU-``height``(c_in, mid, c_out); ``dilated`` selects the "F" variant."""

    height: int
    c_in: int
    mid: int
    c_out: int
    dilated: bool = False

    def __post_init__(self):
        if int(self.height) != self.height or self.height < 2:
            raise ConfigurationError(f"RSU height must be an int >= 2, got {self.height}")
        for name in ("c_in", "mid", "c_out"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"RSU {name} must be a positive int, got {v}")

    @property
    def name(self) -> str:
        return f"RSU-{self.height}{'F' if self.dilated else ''}"

    def __str__(self) -> str:
        return f"{self.name}({self.c_in},{self.mid},{self.c_out})"

    @classmethod
    def parse(cls, text: str) -> "RsuSpec":
        """Parse ``RSU-7:3:32:64`` or ``RSU-4F:512:256:512``."""
        m = re.fullmatch(r"RSU-(\d+)(F?):(\d+):(\d+):(\d+)", text.strip(), flags=re.IGNORECASE)
        if not m:
            raise ConfigurationError(f"cannot parse RSU spec {text!r}; expected RSU-L[F]:Cin:M:Cout")
        return cls(int(m[1]), int(m[3]), int(m[4]), int(m[5]), dilated=bool(m[2]))

    def layer_plan(self) -> list[tuple[str, int, int, int]]:
        """(name, c_in, c_out, dilation) for every conv unit in construction order."""
        L, m = self.height, self.mid
        plan = [("conv_in", self.c_in, self.c_out, 1)]
        for i in range(1, L):
            dil = 2 ** (i - 1) if self.dilated else 1
            plan.append((f"enc.{i - 1}", self.c_out if i == 1 else m, m, dil))
        plan.append(("bottom", m, m, 2 ** (L - 1) if self.dilated else 2))
        for i in range(L - 1, 0, -1):
            dil = 2 ** (i - 1) if self.dilated else 1
            plan.append((f"dec.{i - 1}", 2 * m, self.c_out if i == 1 else m, dil))
        return plan


class RsuBlock(Module):
    """conv_in -> U-shaped encoder/decoder -> residual sum with conv_in's output.

    ``enc[i-1]`` is encoder layer e_i and ``dec[i-1]`` decoder layer d_i, so
    ``dec[0]`` produces the U-branch output.
    """

    def __init__(self, spec: RsuSpec, seed: SeedLike = None, dtype=np.float32, batchnorm: bool = True):
        self.spec = spec
        rng = make_rng(seed)
        units = {name: ConvUnit(ci, co, 3, dil, bn=batchnorm, rng=rng, dtype=dtype)
                 for name, ci, co, dil in spec.layer_plan()}
        L = spec.height
        self.conv_in = units["conv_in"]
        self.enc = [units[f"enc.{i}"] for i in range(L - 1)]
        self.bottom = units["bottom"]
        self.dec = [units[f"dec.{i}"] for i in range(L - 1)]

    def conv_units(self) -> list[tuple[str, ConvUnit]]:
        return [(name, unit) for name, unit in self._walk()]

    def _walk(self):
        yield "conv_in", self.conv_in
        for i, u in enumerate(self.enc):
            yield f"enc.{i}", u
        yield "bottom", self.bottom
        for i in range(len(self.dec) - 1, -1, -1):
            yield f"dec.{i}", self.dec[i]

    def children(self):
        return iter(self.conv_units())

    def forward(self, x: Tensor) -> Tensor:
        return rsu_forward(self, x)


def build_rsu(spec: RsuSpec, seed: SeedLike = None, dtype=np.float32, batchnorm: bool = True) -> RsuBlock:
    return RsuBlock(spec, seed, dtype, batchnorm)


def rsu_forward(block: RsuBlock, x: Tensor) -> Tensor:
    spec = block.spec
    if x.ndim != 4 or x.shape[1] != spec.c_in:
        raise ConfigurationError(f"{spec} expects {spec.c_in} input channels, got shape {x.shape}")
    x0 = block.conv_in(x)
    feats = []
    h = x0
    for i, unit in enumerate(block.enc):
        if i > 0 and not spec.dilated:
            h = maxpool2(h)
        h = unit(h)
        feats.append(h)
    d = block.bottom(h)
    for i in range(len(block.dec) - 1, -1, -1):
        skip = feats[i]
        if d.shape[2:] != skip.shape[2:]:
            d = upsample_bilinear(d, skip.shape[2], skip.shape[3])
        d = block.dec[i](concat_channels(d, skip))
    return add(d, x0)


def rsu_receptive_field(spec: RsuSpec) -> int:
    """Receptive field (one axis, input pixels) of the conv_in -> encoder -> bottom path.

    A kxk conv adds ``(k-1) * dilation * jump``; a 2x2/2 pool adds ``jump``
    and then doubles it.
    """
    rf, jump = 1, 1
    for name, _, _, dil in spec.layer_plan():
        if name.startswith("dec"):
            break
        if name.startswith("enc.") and name != "enc.0" and not spec.dilated:
            rf += jump
            jump *= 2
        rf += 2 * dil * jump
    return rf
