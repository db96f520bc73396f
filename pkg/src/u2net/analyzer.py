"""Closed-form parameter and FLOPs accounting for RSU stages, the whole network and comparison blocks.

Counting rules: a convolution costs ``Ho * Wo * Cout * Cin * k * k``
multiply-accumulates (bias, BN, pooling and upsampling are free) and
FLOPs = ``FLOPS_PER_MAC`` * MACs.  Parameters are conv weights plus biases,
and four values per BatchNorm channel (gamma, beta and both running
statistics), i.e. exactly what a checkpoint stores.

Comparison blocks map ``(Cin, M, Cout)`` at full resolution:

* PLN: 3x3 Cin->M, 3x3 M->Cout
* RES: PLN plus a 1x1 Cin->Cout shortcut
* DSE: three densely connected 3x3 layers (Cin + k*M -> M, k = 0..2), then 1x1 (Cin + 3M)->Cout
* INC: 3x3 Cin->M, four parallel 3x3 M->M branches (dilation 1, 2, 4, 8), then 1x1 4M->Cout
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError
from .network import DECODER_NAMES, ENCODER_NAMES, MIN_INPUT, SIDE_SOURCES, NetworkConfig
from .rsu import RsuSpec, rsu_receptive_field

FLOPS_PER_MAC = 2
BYTES_PER_VALUE = 4
BLOCK_FAMILIES = ("PLN", "RES", "DSE", "INC")


def pooled(size: int) -> int:
    """Output size of a 2x2 stride-2 ceil-mode max pool."""
    return -(-size // 2)


@dataclass(frozen=True)
class ConvLayer:
    name: str
    c_in: int
    c_out: int
    kernel: int
    h: int
    w: int
    dilation: int = 1
    batchnorm: bool = False

    @property
    def macs(self) -> int:
        return self.h * self.w * self.c_out * self.c_in * self.kernel * self.kernel

    @property
    def params(self) -> int:
        return self.kernel * self.kernel * self.c_in * self.c_out + self.c_out + (4 * self.c_out if self.batchnorm else 0)

    @property
    def trainable(self) -> int:
        return self.params - (2 * self.c_out if self.batchnorm else 0)


@dataclass
class CostReport:
    name: str
    layers: list
    stage_shapes: dict = field(default_factory=dict)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def flops(self) -> int:
        return FLOPS_PER_MAC * self.macs

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def trainable_params(self) -> int:
        return sum(layer.trainable for layer in self.layers)

    @property
    def param_bytes(self) -> int:
        return BYTES_PER_VALUE * self.params

    def to_dict(self) -> dict:
        return {"name": self.name, "macs": self.macs, "flops": self.flops,
                "gflops": self.gflops, "params": self.params,
                "trainable_params": self.trainable_params,
                "param_bytes": self.param_bytes, "param_mb": self.param_bytes / 1e6,
                "flops_per_mac": FLOPS_PER_MAC,
                "layers": [dict(asdict(layer), macs=layer.macs, params=layer.params) for layer in self.layers],
                "stage_shapes": {k: list(v) for k, v in self.stage_shapes.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class BlockKind:
    """One of PLN | RES | DSE | INC | RSU-L | RSU-LF with channels (c_in, mid, c_out)."""

    kind: str
    c_in: int
    mid: int
    c_out: int

    def __post_init__(self):
        if self.kind not in BLOCK_FAMILIES and not re.fullmatch(r"RSU-\d+F?", self.kind):
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if min(self.c_in, self.mid, self.c_out) < 1:
            raise ConfigurationError("block channels must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "BlockKind":
        """``PLN:3:32:64`` or ``RSU-7:3:32:64``."""
        parts = text.strip().upper().split(":")
        if len(parts) != 4:
            raise ConfigurationError(f"cannot parse block {text!r}; expected KIND:Cin:M:Cout")
        try:
            return cls(parts[0], int(parts[1]), int(parts[2]), int(parts[3]))
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse block {text!r}") from exc

    def with_mid(self, mid: int) -> "BlockKind":
        return BlockKind(self.kind, self.c_in, int(mid), self.c_out)

    def rsu_spec(self) -> RsuSpec:
        m = re.fullmatch(r"RSU-(\d+)(F?)", self.kind)
        if not m:
            raise ConfigurationError(f"{self.kind} is not an RSU block")
        return RsuSpec(int(m[1]), self.c_in, self.mid, self.c_out, bool(m[2]))

    def label(self) -> str:
        return self.kind


def _check_size(h: int, w: int) -> None:
    if h < 1 or w < 1:
        raise ConfigurationError(f"spatial size must be positive, got {h}x{w}")


def rsu_layers(spec: RsuSpec, h: int, w: int, prefix: str = "", batchnorm: bool = True) -> list:
    """Conv layers of an RSU at their true resolutions (encoder e_i after i-1 pools)."""
    _check_size(h, w)
    res = [(h, w)]
    for _ in range(spec.height - 2):
        ph, pw = res[-1]
        res.append((ph, pw) if spec.dilated else (pooled(ph), pooled(pw)))
    layers = []
    for name, ci, co, dil in spec.layer_plan():
        if name == "conv_in":
            rh, rw = h, w
        elif name == "bottom":
            rh, rw = res[-1]
        else:
            rh, rw = res[int(name.split(".")[1])]
        layers.append(ConvLayer(prefix + name, ci, co, 3, rh, rw, dil, batchnorm))
    return layers


def _family_layers(kind: BlockKind, h: int, w: int) -> list:
    ci, m, co = kind.c_in, kind.mid, kind.c_out
    if kind.kind in ("PLN", "RES"):
        layers = [ConvLayer("conv1", ci, m, 3, h, w), ConvLayer("conv2", m, co, 3, h, w)]
        if kind.kind == "RES":
            layers.append(ConvLayer("shortcut", ci, co, 1, h, w))
        return layers
    if kind.kind == "DSE":
        layers = [ConvLayer(f"dense{k}", ci + k * m, m, 3, h, w) for k in range(3)]
        return layers + [ConvLayer("transition", ci + 3 * m, co, 1, h, w)]
    if kind.kind == "INC":
        layers = [ConvLayer("conv_in", ci, m, 3, h, w)]
        layers += [ConvLayer(f"branch_d{d}", m, m, 3, h, w, d) for d in (1, 2, 4, 8)]
        return layers + [ConvLayer("fuse", 4 * m, co, 1, h, w)]
    return rsu_layers(kind.rsu_spec(), h, w, batchnorm=False)


def flops(kind: Union[BlockKind, RsuSpec, str], size: Sequence[int]) -> CostReport:
    """Cost of one block on an ``(H, W)`` or ``(H, W, C_in)`` input."""
    if isinstance(kind, str):
        kind = BlockKind.parse(kind)
    if isinstance(kind, RsuSpec):
        kind = BlockKind(kind.name, kind.c_in, kind.mid, kind.c_out)
    h, w = int(size[0]), int(size[1])
    if len(size) > 2 and int(size[2]) != kind.c_in:
        raise ConfigurationError(f"input has {size[2]} channels but {kind.kind} expects {kind.c_in}")
    _check_size(h, w)
    return CostReport(f"{kind.kind}({kind.c_in},{kind.mid},{kind.c_out})", _family_layers(kind, h, w),
                      {"output": (h, w, kind.c_out)})


def network_layers(config: NetworkConfig, h: int, w: int) -> tuple[list, dict]:
    """Every conv of the network plus a per-stage (H, W, C) output table."""
    layers, shapes = [], {}
    res = {}
    ch, cw = h, w
    for i, name in enumerate(ENCODER_NAMES):
        if i:
            ch, cw = pooled(ch), pooled(cw)
        res[name] = (ch, cw)
    for name in DECODER_NAMES:
        res[name] = res["En_" + name.split("_")[1]]
    for stage in config.stages():
        rh, rw = res[stage.name]
        layers += rsu_layers(stage.rsu, rh, rw, f"{stage.name}.", config.batchnorm)
        shapes[stage.name] = (rh, rw, stage.rsu.c_out)
    for m in range(1, 7):
        src = SIDE_SOURCES[6 - m]
        rh, rw = res[src]
        layers.append(ConvLayer(f"side{m}", config.stage(src).rsu.c_out, 1, 3, rh, rw))
        shapes[f"side{m}"] = (h, w, 1)
    layers.append(ConvLayer("fuse", 6, 1, 1, h, w))
    shapes["fuse"] = (h, w, 1)
    return layers, shapes


def network_cost(config: NetworkConfig, size: Sequence[int] | None = None) -> CostReport:
    h, w = (config.input_size, config.input_size) if size is None else (int(size[0]), int(size[1]))
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ConfigurationError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}, got {h}x{w}")
    layers, shapes = network_layers(config, h, w)
    return CostReport(config.name, layers, shapes)


@dataclass(frozen=True)
class ParamCount:
    values: int
    trainable: int

    @property
    def bytes(self) -> int:
        return BYTES_PER_VALUE * self.values

    @property
    def megabytes(self) -> float:
        return self.bytes / 1e6


def count_params(config: Union[NetworkConfig, RsuSpec], batchnorm: bool = True) -> ParamCount:
    """Checkpoint value count (BN as 4 per channel) and trainable count (BN as 2 per channel)."""
    if isinstance(config, RsuSpec):
        layers = rsu_layers(config, 1, 1, batchnorm=batchnorm)
    else:
        layers, _ = network_layers(config, MIN_INPUT, MIN_INPUT)
    return ParamCount(sum(l.params for l in layers), sum(l.trainable for l in layers))


def stage_shapes(config: NetworkConfig, size: Sequence[int]) -> list:
    """Rows ``(stage, (H, W, C_in), (H, W, C_out))`` for En_1..En_6, De_5..De_1 and the side heads."""
    h, w = int(size[0]), int(size[1])
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ConfigurationError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}, got {h}x{w}")
    _, shapes = network_layers(config, h, w)
    rows = []
    for stage in config.stages():
        rh, rw, co = shapes[stage.name]
        rows.append((stage.name, (rh, rw, stage.rsu.c_in), (rh, rw, co)))
    for m in range(1, 7):
        src = SIDE_SOURCES[6 - m]
        rh, rw, c = shapes[src]
        rows.append((f"side{m}", (rh, rw, c), shapes[f"side{m}"]))
    return rows


@dataclass
class CostCurve:
    """FLOPs against M for each block kind, with quadratic fits a + b*M + c*M^2."""

    m_values: list
    series: dict
    coefficients: dict
    residuals: dict

    def to_dict(self) -> dict:
        return {"m_values": list(self.m_values),
                "series": {k: [int(v) for v in vs] for k, vs in self.series.items()},
                "coefficients": {k: list(map(float, c)) for k, c in self.coefficients.items()},
                "residuals": dict(self.residuals)}

    def relative_quadratic(self, kind: str) -> float:
        """Share of the largest count explained by the c*M^2 term at the largest M."""
        c = self.coefficients[kind][2]
        return float(abs(c) * max(self.m_values) ** 2 / max(self.series[kind]))

    def csv(self) -> str:
        rows = ["kind,M,gflops"]
        for kind, values in self.series.items():
            for m, v in zip(self.m_values, values):
                rows.append(f"{kind},{m},{v / 1e9:.9g}")
        return "\n".join(rows) + "\n"


def fit_quadratic(m_values: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, float]:
    """Least-squares (a, b, c) and the largest residual relative to max |y|.

    M is scaled to [0, 1] before solving so the Vandermonde matrix stays well
    conditioned; coefficients are mapped back to the raw M scale.
    """
    m = np.asarray(m_values, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if m.size < 3 or np.unique(m).size < 3:
        raise ConfigurationError("a quadratic fit needs at least 3 distinct M values")
    s = float(np.max(np.abs(m)))
    A = np.vander(m / s, 3, increasing=True)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.max(np.abs(A @ coef - y)) / max(np.max(np.abs(y)), 1.0))
    return coef / np.array([1.0, s, s * s]), resid


def cost_curve(kinds: Sequence[Union[BlockKind, str]], m_values: Sequence[int],
               size: Sequence[int] = (320, 320)) -> CostCurve:
    """FLOPs-vs-M series for every kind (its own M replaced by each value)."""
    kinds = [BlockKind.parse(k) if isinstance(k, str) else k for k in kinds]
    m_values = [int(m) for m in m_values]
    if len(m_values) < 3:
        raise ConfigurationError("cost_curve needs at least 3 M values")
    series, coefs, resids = {}, {}, {}
    for kind in kinds:
        values = [flops(kind.with_mid(m), size).flops for m in m_values]
        coef, resid = fit_quadratic(m_values, values)
        series[kind.label()] = values
        coefs[kind.label()] = tuple(coef)
        resids[kind.label()] = resid
    return CostCurve(m_values, series, coefs, resids)


def comparison_kinds(c_in: int = 3, c_out: int = 64, mid: int = 16, rsu: str = "RSU-7") -> list:
    """The five-way block comparison: PLN, RES, DSE, INC and an RSU."""
    return [BlockKind(k, c_in, mid, c_out) for k in BLOCK_FAMILIES + (rsu,)]


def receptive_field(spec: RsuSpec) -> int:
    return rsu_receptive_field(spec)


def layer_macs_from_trace(records) -> int:
    """MACs of the conv2d calls captured by :func:`u2net.tensor.trace`."""
    total = 0
    for rec in records:
        if rec.op == "conv2d":
            n, _, ho, wo = rec.output
            o, c, kh, kw = rec.inputs[1]
            total += ho * wo * o * c * kh * kw * n
    return total


def gflops_summary(report: CostReport) -> str:
    return f"{report.name}: {report.gflops:.3f} GFLOPs, {report.params} params ({report.param_bytes / 1e6:.2f} MB)"


__all__ = ["BlockKind", "ConvLayer", "CostReport", "CostCurve", "ParamCount", "FLOPS_PER_MAC",
           "count_params", "flops", "network_cost", "stage_shapes", "cost_curve", "fit_quadratic",
           "comparison_kinds", "receptive_field", "layer_macs_from_trace", "rsu_layers", "pooled",
           "gflops_summary"]
