"""Central finite-difference checks for every differentiable op.

Each case draws random inputs, runs the op, reduces the output against a fixed
random projection and compares the analytic gradient of every input with a
central difference. Ops are looked up on the autograd module at call time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .boxgeom import Box
from .models.core import Proposal

STEP = 1e-6
TOLERANCE = 1e-4
FLOOR = 1e-8
# absolute slack per entry; central differences carry about eps * |loss| / step of rounding noise
ABS_TOLERANCE = 1e-8

Build = Callable[[Sequence[Tensor]], Tensor]
Case = tuple[list[np.ndarray], Build]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = ABS_TOLERANCE) -> float:
    """Worst entrywise mismatch beyond ``atol``, relative to the larger gradient magnitude.

    Entries that agree within ``atol`` count as exact, so a gradient that is
    identically zero is not failed on finite-difference rounding noise.
    """
    if not analytic.size:
        return 0.0
    excess = np.maximum(np.abs(analytic - numeric) - atol, 0.0)
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), FLOOR)
    return float(np.max(excess)) / scale


def _away_from(x: np.ndarray, point: float, gap: float) -> np.ndarray:
    # push values out of [point - gap, point + gap] so kinks stay outside the stencil
    d = x - point
    return point + np.where(d >= 0.0, d + gap, d - gap)


def _shape(rng: np.random.Generator, ndim: int = 2) -> tuple[int, ...]:
    return tuple(int(s) for s in rng.integers(1, 5, size=ndim))


def _op(name: str) -> Callable:
    return getattr(ag, name)


def _elementwise(name: str) -> Callable[[np.random.Generator], Case]:
    def case(rng: np.random.Generator) -> Case:
        shape = _shape(rng)
        a = rng.normal(size=shape)
        if name in ("maximum", "minimum"):
            # no ties between operands
            b = a + _away_from(rng.normal(size=shape), 0.0, 0.1)
        else:
            b = rng.normal(size=shape[1:]) if rng.random() < 0.5 else rng.normal(size=shape)
        if name == "div":
            b = _away_from(b, 0.0, 0.5)
        return [a, b], lambda t: _op(name)(t[0], t[1])

    return case


def _unary(name: str, **kwargs) -> Callable[[np.random.Generator], Case]:
    def case(rng: np.random.Generator) -> Case:
        x = rng.normal(size=_shape(rng))
        if name == "relu":
            x = _away_from(x, 0.0, 1e-3)
        return [x], lambda t: _op(name)(t[0], **kwargs)

    return case


def _case_scalar_mul(rng: np.random.Generator) -> Case:
    c = float(rng.normal())
    return [rng.normal(size=_shape(rng))], lambda t: _op("scalar_mul")(t[0], c)


def _case_matmul(rng: np.random.Generator) -> Case:
    n, k, m = (int(s) for s in rng.integers(1, 5, size=3))
    return [rng.normal(size=(n, k)), rng.normal(size=(k, m))], lambda t: _op("matmul")(t[0], t[1])


def _case_transpose(rng: np.random.Generator) -> Case:
    return [rng.normal(size=_shape(rng))], lambda t: _op("transpose")(t[0])


def _case_reshape(rng: np.random.Generator) -> Case:
    shape = _shape(rng)
    return [rng.normal(size=shape)], lambda t: _op("reshape")(t[0], (shape[1], shape[0]))


def _reduction(name: str) -> Callable[[np.random.Generator], Case]:
    def case(rng: np.random.Generator) -> Case:
        axis = [None, 0, 1][int(rng.integers(3))]
        return [rng.normal(size=_shape(rng))], lambda t: _op(name)(t[0], axis=axis)

    return case


def _case_concat(rng: np.random.Generator) -> Case:
    axis = int(rng.integers(2))
    base = _shape(rng)
    other = list(base)
    other[axis] = int(rng.integers(1, 4))
    return [rng.normal(size=base), rng.normal(size=tuple(other))], lambda t: _op("concat")([t[0], t[1]], axis=axis)


def _case_index_select(rng: np.random.Generator) -> Case:
    shape = _shape(rng)
    axis = int(rng.integers(2))
    idx = [int(i) for i in rng.integers(0, shape[axis], size=int(rng.integers(1, 6)))]
    return [rng.normal(size=shape)], lambda t: _op("index_select")(t[0], idx, axis=axis)


def _case_softmax(rng: np.random.Generator) -> Case:
    axis = [-1, 0][int(rng.integers(2))]
    return [rng.normal(size=_shape(rng)) * 2.0], lambda t: _op("softmax")(t[0], axis=axis)


def _case_layernorm(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 5)), int(rng.integers(2, 6)))
    return [rng.normal(size=shape)], lambda t: _op("layernorm")(t[0], eps=1e-5)


def _case_clip(rng: np.random.Generator) -> Case:
    x = rng.normal(size=_shape(rng))
    x = _away_from(_away_from(x, -0.5, 1e-3), 0.5, 1e-3)
    return [x], lambda t: _op("clip")(t[0], -0.5, 0.5)


def _case_where(rng: np.random.Generator) -> Case:
    shape = _shape(rng)
    cond = rng.random(size=shape) < 0.5
    return [rng.normal(size=shape), rng.normal(size=shape)], lambda t: _op("where")(cond, t[0], t[1])


def _loss_case(name: str) -> Callable[[np.random.Generator], Case]:
    def case(rng: np.random.Generator) -> Case:
        shape = _shape(rng)
        x = rng.normal(size=shape)
        y = rng.normal(size=shape)
        d = x - y
        if name == "smooth_l1":
            d = _away_from(_away_from(d, 1.0, 1e-3), -1.0, 1e-3)
        else:
            d = _away_from(d, 0.0, 1e-3)
        return [y + d, y], lambda t: _op(name)(t[0], t[1], **({"beta": 1.0} if name == "smooth_l1" else {}))

    return case


def _case_decoder_loss(rng: np.random.Generator) -> Case:
    # local imports: decoder and training sit above this module in the import graph
    from .decoder import DecoderConfig, DecoderModel, parameter_shapes
    from .training import TrainConfig, set_loss

    cfg = DecoderConfig(num_queries=3, num_layers=1, model_dim=8, num_heads=2, mlp_hidden=8)
    names = list(parameter_shapes(cfg))
    initial = {n: rng.normal(0.0, 0.3, size=s) for n, s in parameter_shapes(cfg).items()}
    tokens = rng.normal(size=(4, 8))
    positional = rng.normal(size=(4, 8)) * 0.1
    union = Box(0.5, 0.5, 0.5, 0.5)
    gt = [
        Proposal(Box(float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.3, 0.6)), float(rng.uniform(0.3, 0.6))), float(rng.uniform(4.0, 5.0)))
        for _ in range(2)
    ] + [Proposal(Box(0.3, 0.3, 0.4, 0.4), 2.0)]
    train_cfg = TrainConfig()

    def build(t: Sequence[Tensor]) -> Tensor:
        model = DecoderModel(cfg, params=initial)
        model.params = dict(zip(names, t))
        out = model.decode(model.build_query(None), tokens, positional, union)
        return set_loss(out, gt, train_cfg).total_tensor

    return [initial[n] for n in names], build


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _elementwise("add"),
    "sub": _elementwise("sub"),
    "mul": _elementwise("mul"),
    "div": _elementwise("div"),
    "maximum": _elementwise("maximum"),
    "minimum": _elementwise("minimum"),
    "where": _case_where,
    "scalar_mul": _case_scalar_mul,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
    "sum": _reduction("sum"),
    "mean": _reduction("mean"),
    "concat": _case_concat,
    "index_select": _case_index_select,
    "relu": _unary("relu"),
    "gelu": _unary("gelu"),
    "sigmoid": _unary("sigmoid"),
    "tanh": _unary("tanh"),
    "softmax": _case_softmax,
    "layernorm": _case_layernorm,
    "clip": _case_clip,
    "smooth_l1": _loss_case("smooth_l1"),
    "l1": _loss_case("l1"),
    "decoder_set_loss": _case_decoder_loss,
}

COMPOSITE_CASES = ("decoder_set_loss",)
# coordinates probed per parameter tensor in composite cases
COMPOSITE_ENTRIES = 6


def _reduce(out: Tensor, projection: np.ndarray) -> Tensor:
    if out.size == 1:
        return ag.reshape(out, ())
    return ag.sum(ag.mul(out, projection))


def check_case(
    arrays: list[np.ndarray],
    build: Build,
    rng: np.random.Generator,
    step: float = STEP,
    max_entries: Optional[int] = None,
) -> float:
    """Worst relative error over all inputs of one drawn case.

    With ``max_entries`` set, larger inputs are probed at that many random
    coordinates instead of all of them.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(tensors)
    projection = rng.normal(size=out.shape)
    ag.backward(_reduce(out, projection))

    def value(inputs: list[np.ndarray]) -> float:
        with ag.no_grad():
            return _reduce(build([Tensor(a) for a in inputs]), projection).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)
        probe = [a.copy() for a in arrays]
        flat = probe[i].reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.zeros(entries.size)
        for k, j in enumerate(entries):
            orig = flat[j]
            flat[j] = orig + step
            up = value(probe)
            flat[j] = orig - step
            down = value(probe)
            flat[j] = orig
            numeric[k] = (up - down) / (2.0 * step)
        worst = max(worst, relative_error(analytic[entries], numeric))
    return worst


@dataclass
class OpCheck:
    op: str
    worst: float
    trials: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


@dataclass
class GradcheckReport:
    results: list[OpCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        width = max((len(r.op) for r in self.results), default=2)
        return [
            f"{r.op.ljust(width)}  worst rel err {r.worst:.3e}  {'ok' if r.passed else 'FAIL'}" for r in self.results
        ]


def run_gradcheck(
    seed: int = 7,
    trials: int = 20,
    tolerance: float = TOLERANCE,
    ops: Optional[Sequence[str]] = None,
    composition_trials: Optional[int] = None,
) -> GradcheckReport:
    report = GradcheckReport()
    names = list(CASES)
    for name in ops or names:
        case = CASES[name]
        composite = name in COMPOSITE_CASES
        count = composition_trials if (composite and composition_trials is not None) else trials
        worst = 0.0
        for trial in range(count):
            rng = np.random.default_rng([seed, names.index(name), trial])
            arrays, build = case(rng)
            worst = max(worst, check_case(arrays, build, rng, max_entries=COMPOSITE_ENTRIES if composite else None))
        report.results.append(OpCheck(name, worst, count, tolerance))
    return report
