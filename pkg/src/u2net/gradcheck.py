"""Central finite-difference verification of every differentiable primitive and of a whole RSU.

Each case builds float64 inputs, reduces the op output to a scalar with a
fixed random projection ``sum(r * y)``, back-propagates, and compares the
analytic gradient with ``(f(x + h) - f(x - h)) / 2h`` at sampled coordinates.
The error measure is ``|a - n| / max(|a|, |n|, floor)``.

Inputs keep away from kinks: ReLU inputs satisfy ``|x| >= 0.1``, max-pool
windows hold well-separated values and BCE predictions stay inside
[0.05, 0.95], so a step of ``h`` never crosses a non-differentiable point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import make_rng
from .rsu import RsuSpec, build_rsu

STEP = 1e-6
FLOOR = 1e-6
TOLERANCE = 1e-4
COORDS_PER_INPUT = 8
ZERO_ATOL = 1e-6


@dataclass
class OpResult:
    name: str
    cases: int
    max_error: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.cases > 0 and self.max_error < TOLERANCE


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list:
        return [f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} cases={r.cases:<4} max_rel_err={r.max_error:.3e}"
                for r in self.results]


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_function(fn: Callable[[list], T.Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator,
                   coords: int = COORDS_PER_INPUT, h: float = STEP, projection: Optional[np.ndarray] = None,
                   differentiable: Optional[Sequence[bool]] = None,
                   structural_zero: Sequence[int] = ()) -> tuple[float, str]:
    """Largest relative error over sampled coordinates of every differentiable input.

    Inputs listed in ``structural_zero`` have an exactly zero true gradient
    (a bias followed by batch-statistics normalisation).  A ratio against
    finite-difference noise is meaningless there, so they pass when both the
    analytic and the numeric value are below ``ZERO_ATOL`` and count as an
    infinite error otherwise.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    differentiable = differentiable or [True] * len(arrays)
    leaves = [T.Tensor(a.copy(), requires_grad=d) for a, d in zip(arrays, differentiable)]
    y = fn(leaves)
    r = projection if projection is not None else rng.standard_normal(y.shape)
    loss = T.tsum(T.mul(y, T.Tensor(r))) if y.ndim else T.scale(y, float(r))

    def value(vals: list) -> float:
        with T.no_grad():
            out = fn([T.Tensor(v) for v in vals]).data
        return float(np.sum(out * r))

    loss.backward()
    worst, where = 0.0, ""
    for k, (leaf, d) in enumerate(zip(leaves, differentiable)):
        if not d:
            continue
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat_idx = rng.choice(leaf.data.size, size=min(coords, leaf.data.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, leaf.data.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            numeric = (value(plus) - value(minus)) / (2 * h)
            if k in structural_zero:
                err = 0.0 if max(abs(analytic[idx]), abs(numeric)) < ZERO_ATOL else float("inf")
            else:
                err = float(relative_error(analytic[idx], numeric))
            if err > worst:
                worst, where = err, f"input {k} at {tuple(int(i) for i in idx)}: analytic {analytic[idx]:.6g}, numeric {numeric:.6g}"
    return worst, where


# ---------------------------------------------------------------- per-op case generators

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _separated(rng, shape):
    """Values whose pairwise gaps are at least 0.05 (a shuffled ramp)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 - n * 0.025).reshape(shape)


def _conv_case(rng, stride_choices=(1, 2), dilation_choices=(1, 2)):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice(stride_choices))
    dil = int(rng.choice(dilation_choices)) if k > 1 else 1
    pad = int(rng.integers(0, dil * (k // 2) + 1))
    size = int(rng.integers(max(dil * (k - 1) + 1 - 2 * pad, 3), 8))
    arrays = [rng.standard_normal((n, c, size, size + int(rng.integers(0, 2)))),
              rng.standard_normal((o, c, k, k)), rng.standard_normal(o)]
    return (lambda t: T.conv2d(t[0], t[1], t[2], stride, pad, dil)), arrays, None


def _maxpool_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 8)), int(rng.integers(2, 8)))
    return (lambda t: T.maxpool2(t[0])), [_separated(rng, shape)], None


def _upsample_case(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    oh, ow = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    return (lambda t: T.upsample_bilinear(t[0], oh, ow)), [rng.standard_normal(shape)], None


def _concat_case(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    k = int(rng.integers(2, 4))
    arrays = [rng.standard_normal((n, int(rng.integers(1, 4)), h, w)) for _ in range(k)]
    return (lambda t: T.concat(t)), arrays, None


def _shape(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))


def _relu_case(rng):
    return (lambda t: T.relu(t[0])), [_away_from_zero(rng, _shape(rng))], None


def _sigmoid_case(rng):
    return (lambda t: T.sigmoid(t[0])), [rng.uniform(-6, 6, size=_shape(rng))], None


def _add_case(rng):
    s = _shape(rng)
    return (lambda t: T.add(t[0], t[1])), [rng.standard_normal(s), rng.standard_normal(s)], None


def _mul_case(rng):
    s = _shape(rng)
    return (lambda t: T.mul(t[0], t[1])), [rng.standard_normal(s), rng.standard_normal(s)], None


def _scale_case(rng):
    f = float(rng.uniform(-3, 3))
    return (lambda t: T.scale(t[0], f)), [rng.standard_normal(_shape(rng))], None


def _sum_case(rng):
    return (lambda t: T.tsum(t[0])), [rng.standard_normal(_shape(rng))], None


def _batchnorm_case(training: bool):
    def make(rng):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        running_mean = rng.standard_normal(c)
        running_var = rng.uniform(0.5, 2.0, size=c)

        def fn(t):
            params = T.BatchNormParams(t[1], t[2], running_mean.copy(), running_var.copy(), training=training)
            return T.batchnorm2d(t[0], params)

        arrays = [rng.standard_normal((n, c, h, w)) * 2 + 0.5,
                  rng.uniform(0.5, 1.5, size=c), rng.standard_normal(c)]
        return fn, arrays, None
    return make


def _bce_case(reduction: str):
    def make(rng):
        s = _shape(rng)
        target = (rng.random(s) < 0.5).astype(np.float64)
        return (lambda t: T.bce_loss(t[0], target, reduction)), [rng.uniform(0.05, 0.95, size=s)], None
    return make


PRIMITIVES: dict = {
    "conv2d": _conv_case,
    "conv2d_strided": lambda rng: _conv_case(rng, (2, 3), (1,)),
    "maxpool2": _maxpool_case,
    "upsample_bilinear": _upsample_case,
    "concat": _concat_case,
    "relu": _relu_case,
    "sigmoid": _sigmoid_case,
    "add": _add_case,
    "mul": _mul_case,
    "scale": _scale_case,
    "sum": _sum_case,
    "batchnorm_train": _batchnorm_case(True),
    "batchnorm_eval": _batchnorm_case(False),
    "bce_sum": _bce_case("sum"),
    "bce_mean": _bce_case("mean"),
}


def check_primitive(name: str, cases: int = 100, seed: int = 0) -> OpResult:
    rng = make_rng([seed, sum(map(ord, name))])
    worst, where = 0.0, ""
    for _ in range(cases):
        fn, arrays, diff = PRIMITIVES[name](rng)
        err, loc = check_function(fn, arrays, rng, differentiable=diff)
        if err > worst:
            worst, where = err, loc
    return OpResult(name, cases, worst, where)


def parameter_slots(block) -> list:
    """(owner, attribute) for every parameter, in ``named_parameters`` order."""
    slots = []
    for _, unit in block.conv_units():
        slots += [(unit, "weight"), (unit, "bias")]
        if unit.bn is not None:
            slots += [(unit.bn, "gamma"), (unit.bn, "beta")]
    return slots


def rsu_case(rng: np.random.Generator, spec: RsuSpec = RsuSpec(4, 2, 2, 2), size: int = 8,
             training: bool = True, coords: int = 2) -> tuple[float, str]:
    """Gradient check of a whole float64 RSU w.r.t. its input and every parameter.

    In inference mode the running statistics are randomised so that the
    conv biases feeding BatchNorm carry a non-trivial gradient.
    """
    block = build_rsu(spec, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    slots = parameter_slots(block)
    assert len(slots) == len(block.parameters())
    units = [u for _, u in block.conv_units()]
    for unit in units:
        unit.train(training)
        if not training:
            unit.bn.running_mean[...] = rng.standard_normal(unit.c_out) * 0.3
            unit.bn.running_var[...] = rng.uniform(0.5, 2.0, size=unit.c_out)
    stats = [(u.bn.running_mean.copy(), u.bn.running_var.copy()) for u in units]

    def fn(t):
        for unit, (rm, rv) in zip(units, stats):
            unit.bn.running_mean[...] = rm
            unit.bn.running_var[...] = rv
        for (owner, attr), leaf in zip(slots, t[1:]):
            setattr(owner, attr, leaf)
        return block(t[0])

    arrays = [rng.standard_normal((2, spec.c_in, size, size))]
    arrays += [getattr(owner, attr).data.copy() for owner, attr in slots]
    zero = [1 + i for i, (owner, attr) in enumerate(slots)
            if training and attr == "bias" and getattr(owner, "bn", None) is not None]
    return check_function(fn, arrays, rng, coords=coords, structural_zero=zero)


def check_rsu(cases: int = 100, seed: int = 0, training: bool = True) -> OpResult:
    rng = make_rng([seed, 4242, int(training)])
    worst, where = 0.0, ""
    for _ in range(cases):
        err, loc = rsu_case(rng, training=training)
        if err > worst:
            worst, where = err, loc
    return OpResult(f"RSU-4(2,2,2) {'train' if training else 'eval'}", cases, worst, where)


def run_suite(seed: int = 0, cases: int = 100, rsu_cases: Optional[int] = None,
              ops: Optional[Sequence[str]] = None, log: Optional[Callable[[str], None]] = None) -> GradcheckReport:
    """Every primitive plus the RSU in both BatchNorm modes."""
    start = time.perf_counter()
    report = GradcheckReport()
    for name in ops or PRIMITIVES:
        res = check_primitive(name, cases, seed)
        report.results.append(res)
        if log:
            log(report.lines()[-1])
    n_rsu = cases if rsu_cases is None else rsu_cases
    if n_rsu:
        for training in (True, False):
            report.results.append(check_rsu(n_rsu, seed, training))
            if log:
                log(report.lines()[-1])
    report.seconds = time.perf_counter() - start
    return report
