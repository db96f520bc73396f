"""The two-level nested U-structure: 6 encoder + 5 decoder RSU stages, 6 side heads, 1x1 fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .nn import ConvUnit, Module, PRNG_NAME, SeedLike, make_rng
from .rsu import RsuBlock, RsuSpec
from .tensor import (Tensor, concat, maxpool2, no_grad, sigmoid,
                     upsample_bilinear)

ENCODER_NAMES = ("En_1", "En_2", "En_3", "En_4", "En_5", "En_6")
DECODER_NAMES = ("De_5", "De_4", "De_3", "De_2", "De_1")
# side output m (1-based) comes from SIDE_SOURCES[6 - m]
SIDE_SOURCES = ("En_6", "De_5", "De_4", "De_3", "De_2", "De_1")
MIN_INPUT = 32


@dataclass(frozen=True)
class StageSpec:
    name: str
    rsu: RsuSpec


def _symmetric_encoder(decoder_name: str) -> str:
    return "En_" + decoder_name.split("_")[1]


@dataclass
class NetworkConfig:
    encoder: tuple
    decoder: tuple
    side_sources: tuple = SIDE_SOURCES
    input_size: int = 320
    batchnorm: bool = True
    name: str = "custom"

    def __post_init__(self):
        self.encoder = tuple(self.encoder)
        self.decoder = tuple(self.decoder)
        self.side_sources = tuple(self.side_sources)
        self.validate()

    def validate(self) -> None:
        if len(self.encoder) != 6 or len(self.decoder) != 5:
            raise ConfigurationError(
                f"need 6 encoder and 5 decoder stages, got {len(self.encoder)} and {len(self.decoder)}")
        if tuple(s.name for s in self.encoder) != ENCODER_NAMES:
            raise ConfigurationError(f"encoder stages must be named {ENCODER_NAMES}")
        if tuple(s.name for s in self.decoder) != DECODER_NAMES:
            raise ConfigurationError(f"decoder stages must be named {DECODER_NAMES}")
        if self.side_sources != SIDE_SOURCES:
            raise ConfigurationError(f"side outputs must come from {SIDE_SOURCES}")
        if self.encoder[0].rsu.c_in != 3:
            raise ConfigurationError("En_1 must take 3 input channels")
        for prev, cur in zip(self.encoder, self.encoder[1:]):
            if cur.rsu.c_in != prev.rsu.c_out:
                raise ConfigurationError(
                    f"{cur.name} takes {cur.rsu.c_in} channels but {prev.name} emits {prev.rsu.c_out}")
        out = {s.name: s.rsu.c_out for s in self.encoder}
        prev_out = out["En_6"]
        for stage in self.decoder:
            want = prev_out + out[_symmetric_encoder(stage.name)]
            if stage.rsu.c_in != want:
                raise ConfigurationError(f"{stage.name} takes {stage.rsu.c_in} channels, expected {want}")
            prev_out = stage.rsu.c_out
            out[stage.name] = prev_out
        if int(self.input_size) != self.input_size or self.input_size < MIN_INPUT:
            raise ConfigurationError(f"input_size must be an int >= {MIN_INPUT}")

    def stages(self) -> tuple:
        return self.encoder + self.decoder

    def stage(self, name: str) -> StageSpec:
        for s in self.stages():
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        def stage(s: StageSpec) -> dict:
            r = s.rsu
            return {"name": s.name, "height": r.height, "c_in": r.c_in, "mid": r.mid,
                    "c_out": r.c_out, "dilated": r.dilated}
        return {"name": self.name, "input_size": self.input_size, "batchnorm": self.batchnorm,
                "encoder": [stage(s) for s in self.encoder],
                "decoder": [stage(s) for s in self.decoder],
                "side_sources": list(self.side_sources)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            def stage(s: dict) -> StageSpec:
                return StageSpec(s["name"], RsuSpec(int(s["height"]), int(s["c_in"]), int(s["mid"]),
                                                    int(s["c_out"]), bool(s.get("dilated", False))))
            return cls(encoder=tuple(stage(s) for s in d["encoder"]),
                       decoder=tuple(stage(s) for s in d["decoder"]),
                       side_sources=tuple(d.get("side_sources", SIDE_SOURCES)),
                       input_size=int(d.get("input_size", 320)),
                       batchnorm=bool(d.get("batchnorm", True)),
                       name=str(d.get("name", "custom")))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"malformed network config: {exc!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigurationError("config JSON must be an object")
        return cls.from_dict(d)


_TABLE = {
    # name: (L, c_in, mid, c_out, dilated)
    "full": {
        "En_1": (7, 3, 32, 64, False), "En_2": (6, 64, 32, 128, False),
        "En_3": (5, 128, 64, 256, False), "En_4": (4, 256, 128, 512, False),
        "En_5": (4, 512, 256, 512, True), "En_6": (4, 512, 256, 512, True),
        "De_5": (4, 1024, 256, 512, True), "De_4": (4, 1024, 128, 256, False),
        "De_3": (5, 512, 64, 128, False), "De_2": (6, 256, 32, 64, False),
        "De_1": (7, 128, 16, 64, False),
    },
    "small": {
        "En_1": (7, 3, 16, 64, False), "En_2": (6, 64, 16, 64, False),
        "En_3": (5, 64, 16, 64, False), "En_4": (4, 64, 16, 64, False),
        "En_5": (4, 64, 16, 64, True), "En_6": (4, 64, 16, 64, True),
        "De_5": (4, 128, 16, 64, True), "De_4": (4, 128, 16, 64, False),
        "De_3": (5, 128, 16, 64, False), "De_2": (6, 128, 16, 64, False),
        "De_1": (7, 128, 16, 64, False),
    },
}


def preset_config(name: str, input_size: int = 320, batchnorm: bool = True) -> NetworkConfig:
    """Stage table of the full model (``"full"``) or the lightweight one (``"small"``)."""
    if name not in _TABLE:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(_TABLE)}")
    rows = _TABLE[name]

    def stage(n: str) -> StageSpec:
        L, ci, m, co, dil = rows[n]
        return StageSpec(n, RsuSpec(L, ci, m, co, dil))

    return NetworkConfig(encoder=tuple(stage(n) for n in ENCODER_NAMES),
                         decoder=tuple(stage(n) for n in DECODER_NAMES),
                         input_size=input_size, batchnorm=batchnorm, name=name)


@dataclass
class SaliencyOutputs:
    """Side maps ``sides[m-1]`` = S_side^(m) for m = 1..6, plus the fused map."""

    sides: list
    fused: Tensor
    side_logits: list
    fused_logit: Tensor

    def maps(self) -> list:
        """All seven probability maps: s1..s6 then the fused map."""
        return list(self.sides) + [self.fused]

    def logits(self) -> list:
        return list(self.side_logits) + [self.fused_logit]


class U2Net(Module):
    def __init__(self, config: NetworkConfig, seed: SeedLike = None, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = make_rng(seed)
        bn = config.batchnorm
        self.stages = {s.name: RsuBlock(s.rsu, rng, dtype, bn) for s in config.stages()}
        # side m reads the stage SIDE_SOURCES[6 - m]
        self.sides = [ConvUnit(config.stage(SIDE_SOURCES[6 - m]).rsu.c_out, 1, 3, 1,
                               bn=False, activation=False, rng=rng, dtype=dtype)
                      for m in range(1, 7)]
        self.fuse = ConvUnit(6, 1, 1, 1, bn=False, activation=False, rng=rng, dtype=dtype)

    def children(self):
        for name in ENCODER_NAMES + DECODER_NAMES:
            yield name, self.stages[name]
        for m, head in enumerate(self.sides, start=1):
            yield f"side{m}", head
        yield "fuse", self.fuse

    def forward(self, images) -> SaliencyOutputs:
        return forward(self, images)


def build_network(config: NetworkConfig, seed: SeedLike = 0, dtype=np.float32) -> U2Net:
    """Construct and Xavier-initialise every stage, side head and the fusion conv."""
    return U2Net(config, seed, dtype)


def forward(net: U2Net, images) -> SaliencyOutputs:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=net.dtype))
    if x.ndim != 4 or x.shape[1] != 3:
        raise ConfigurationError(f"expected N x 3 x H x W images, got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    if H < MIN_INPUT or W < MIN_INPUT:
        raise ConfigurationError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}, got {H}x{W}")
    if x.dtype != net.dtype:
        x = Tensor(x.data.astype(net.dtype))

    feats = {}
    h = x
    for i, name in enumerate(ENCODER_NAMES):
        if i:
            h = maxpool2(h)
        h = net.stages[name](h)
        feats[name] = h
    d = feats["En_6"]
    for name in DECODER_NAMES:
        skip = feats[_symmetric_encoder(name)]
        d = upsample_bilinear(d, skip.shape[2], skip.shape[3])
        d = net.stages[name](concat([d, skip]))
        feats[name] = d

    side_logits = []
    for m in range(1, 7):
        logit = net.sides[m - 1](feats[SIDE_SOURCES[6 - m]])
        side_logits.append(upsample_bilinear(logit, H, W))
    fused_logit = net.fuse(concat(side_logits))
    return SaliencyOutputs(sides=[sigmoid(z) for z in side_logits], fused=sigmoid(fused_logit),
                           side_logits=side_logits, fused_logit=fused_logit)


def predict(net: U2Net, image, orig_h: Optional[int] = None, orig_w: Optional[int] = None) -> np.ndarray:
    """Resize to the configured input size, run inference, resize the fused map back.

    ``image`` is 3 x H x W (or 1 x 3 x H x W) in [0, 1]; returns an
    ``orig_h`` x ``orig_w`` array (default: the image's own size).
    """
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[:2] != (1, 3):
        raise ConfigurationError(f"predict expects a 3 x H x W image, got {arr.shape}")
    orig_h = arr.shape[2] if orig_h is None else int(orig_h)
    orig_w = arr.shape[3] if orig_w is None else int(orig_w)
    size = net.config.input_size
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            x = upsample_bilinear(Tensor(arr.astype(net.dtype)), size, size)
            out = forward(net, x)
            fused = upsample_bilinear(out.fused, orig_h, orig_w)
    finally:
        net.train(was_training)
    return fused.data[0, 0]


def network_metadata(net: U2Net) -> dict:
    return {"config": net.config.to_dict(), "dtype": net.dtype.name, "prng": PRNG_NAME}
