"""Central finite-difference checks of the autodiff engine.

The relative error of one check is
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``
over the checked coordinates.  Inputs to piecewise-linear ops (relu,
max-pool, the budget and sharing hinges) are drawn away from their kinks
so that the finite differences are well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .architecture import Architecture, LayerSpec
from .autograd import (
    Tensor,
    add,
    batchnorm2d,
    concat,
    conv2d,
    exp,
    flip_width,
    global_avg_pool,
    linear,
    log,
    masked_conv2d,
    matmul,
    max_pool2d,
    mean_all,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
    sub,
    sum_all,
    take_channels,
)
from .model import build_from_descriptor
from .objective import BudgetLossState, SharingLossConfig, budget_loss, cross_entropy, identity, sharing_loss, total_loss

STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    n_coords: int
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = STEP,
                    max_coords: int | None = 40, gen: np.random.Generator | None = None) -> tuple[float, int]:
    """Compare backward() of the scalar ``fn()`` with central differences.

    At most ``max_coords`` coordinates per input are perturbed (all when
    None).  Returns ``(relative error, coordinates checked)``.
    """
    gen = gen or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic, numeric = [], []
    for t in inputs:
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = fn().item()
            flat[c] = orig - step
            down = fn().item()
            flat[c] = orig
            numeric.append((up - down) / (2 * step))
            analytic.append(grad.reshape(-1)[c])
    return relative_error(np.array(analytic), np.array(numeric)), len(analytic)


# -- case factories --------------------------------------------------------------
# Each factory takes a generator and returns (scalar fn, inputs to check).

def _t(a) -> Tensor:
    return Tensor(a, requires_grad=True)


def _proj(out: Tensor, gen) -> Tensor:
    # contract with a fixed random tensor so every output entry matters
    return sum_all(mul(out, Tensor(gen.standard_normal(out.shape))))


def _away_from_zero(gen, shape, margin=0.05):
    a = gen.standard_normal(shape)
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin * 2, a)


def _dims(gen, n, lo=1, hi=6):
    return tuple(int(v) for v in gen.integers(lo, hi + 1, size=n))


def _with_weights(out_shape, gen, body):
    w = Tensor(gen.standard_normal(out_shape))
    return lambda: sum_all(mul(body(), w))


def _binary(op):
    def case(gen):
        s = _dims(gen, 3)
        a, b = _t(gen.standard_normal(s)), _t(gen.standard_normal(s))
        return _with_weights(s, gen, lambda: op(a, b)), [a, b]
    return case


def _scalar_mul(gen):
    s = _dims(gen, 2)
    a, k = _t(gen.standard_normal(s)), _t(np.array(gen.uniform(0.5, 2.0)))
    return _with_weights(s, gen, lambda: mul(a, k)), [a, k]


def _div_neg(gen):
    s = _dims(gen, 2)
    a = _t(gen.standard_normal(s))
    return _with_weights(s, gen, lambda: -(a / 3.0)), [a]


def _relu(gen):
    s = _dims(gen, 3)
    a = _t(_away_from_zero(gen, s))
    return _with_weights(s, gen, lambda: relu(a)), [a]


def _exp_log(gen):
    s = _dims(gen, 2)
    a = _t(gen.uniform(0.2, 2.0, size=s))
    return _with_weights(s, gen, lambda: add(exp(a), log(a))), [a]


def _reductions(gen):
    s = _dims(gen, 3)
    a = _t(gen.standard_normal(s))
    return lambda: add(mul(sum_all(mul(a, a)), Tensor(0.5)), mean_all(a)), [a]


def _reshape_concat(gen):
    a, b = _t(gen.standard_normal(_dims(gen, 2))), _t(gen.standard_normal(_dims(gen, 1)))
    n = a.size + b.size
    return _with_weights((n,), gen, lambda: concat([reshape(a, (a.size,)), b])), [a, b]


def _take_flip(gen):
    n, c, h, w = _dims(gen, 4)
    x = _t(gen.standard_normal((n, c, h, w)))
    idx = np.sort(gen.choice(c, size=int(gen.integers(1, c + 1)), replace=False))
    return _with_weights((n, len(idx), h, w), gen, lambda: flip_width(take_channels(x, idx))), [x]


def _matmul(gen):
    m, k, n = _dims(gen, 3)
    a, b = _t(gen.standard_normal((m, k))), _t(gen.standard_normal((k, n)))
    return _with_weights((m, n), gen, lambda: matmul(a, b)), [a, b]


def _linear(gen):
    n, f, k = _dims(gen, 3)
    x, w, b = _t(gen.standard_normal((n, f))), _t(gen.standard_normal((f, k))), _t(gen.standard_normal(k))
    return _with_weights((n, k), gen, lambda: linear(x, w, b)), [x, w, b]


def _softmax_ce(gen):
    n, k = _dims(gen, 1)[0], int(gen.integers(2, 7))
    z = _t(gen.standard_normal((n, k)) * 2)
    y = gen.integers(0, k, size=n)
    return lambda: softmax_cross_entropy(z, y), [z]


def _conv_shapes(gen):
    n, c, o = int(gen.integers(1, 3)), int(gen.integers(1, 4)), int(gen.integers(1, 4))
    k = int(gen.choice([1, 3]))
    stride, pad = int(gen.integers(1, 3)), int(gen.integers(0, 2))
    size = int(gen.integers(k, 7))
    while (size + 2 * pad - k) % stride:
        size += 1
    return n, c, o, k, stride, pad, size


def _conv(gen):
    n, c, o, k, stride, pad, size = _conv_shapes(gen)
    x, kern = _t(gen.standard_normal((n, c, size, size))), _t(gen.standard_normal((o, c, k, k)))
    out_shape = conv2d(x, kern, stride, pad).shape
    return _with_weights(out_shape, gen, lambda: conv2d(x, kern, stride, pad)), [x, kern]


def _masked_conv(gen):
    n, c, o, k, stride, pad, size = _conv_shapes(gen)
    x, kern = _t(gen.standard_normal((n, c, size, size))), _t(gen.standard_normal((o, c, k, k)))
    s = _t(gen.uniform(-1.0, 1.0, size=c))
    out_shape = masked_conv2d(x, kern, s, stride, pad).shape
    return _with_weights(out_shape, gen, lambda: masked_conv2d(x, kern, s, stride, pad)), [x, kern, s]


def _max_pool(gen):
    n, c = _dims(gen, 2, 1, 3)
    size = int(gen.choice([2, 3]))
    h = size * int(gen.integers(1, 3))
    # a permutation scaled well above the FD step keeps every window's max unique
    vals = gen.permutation(n * c * h * h).reshape(n, c, h, h) * 0.1
    x = _t(vals + gen.uniform(0, 0.01, size=vals.shape))
    out_shape = max_pool2d(x, size, size).shape
    return _with_weights(out_shape, gen, lambda: max_pool2d(x, size, size)), [x]


def _gap(gen):
    n, c, h, w = _dims(gen, 4)
    x = _t(gen.standard_normal((n, c, h, w)))
    return _with_weights((n, c), gen, lambda: global_avg_pool(x)), [x]


def _batchnorm(training):
    def case(gen):
        n, c = int(gen.integers(2, 4)), int(gen.integers(1, 4))
        h, w = _dims(gen, 2, 2, 4)
        x = _t(gen.standard_normal((n, c, h, w)) * 2 + 1)
        g, b = _t(gen.uniform(0.5, 1.5, size=c)), _t(gen.standard_normal(c))
        rm, rv = gen.standard_normal(c), gen.uniform(0.5, 2.0, size=c)

        def fn():
            return batchnorm2d(x, g, b, rm.copy(), rv.copy(), training)
        return _with_weights((n, c, h, w), gen, fn), [x, g, b]
    return case


def _composite(gen):
    """CE + budget + sharing on a tiny two-domain model with real-valued switches."""
    arch = Architecture((2, 6, 6), [
        LayerSpec("conv", 2, 3, 3, 1, 1, masked=True), LayerSpec("bn"), LayerSpec("relu"),
        LayerSpec("conv", 3, 3, 3, 1, 1, masked=True), LayerSpec("bn"), LayerSpec("add", source=2),
        LayerSpec("gap")], name="gradcheck")
    model = build_from_descriptor(arch, [("a", 3), ("b", 2)], seed=int(gen.integers(1 << 30)), switch_mode="real")
    for d in model.domains.values():
        for s in d.switches.values():
            s.data[:] = gen.uniform(0.5, 1.0, size=s.size)
    # mean switch ~0.75 and mean product ~0.56: both hinges sit in their linear part at beta=0.65
    beta = 0.65
    budget = BudgetLossState(beta, {"a": float(gen.uniform(0.5, 2.0)), "b": 1.0})
    share = SharingLossConfig(float(gen.uniform(0.5, 2.0)), arch.switch_count, 1.0)
    x = gen.standard_normal((3, 2, 6, 6))
    y = gen.integers(0, 3, size=3)
    state = model.domain("a")

    def fn():
        ce = cross_entropy(model.forward("a", x, "train"), y)
        lb = budget_loss(state.mask_set(), budget, identity)
        lps = sharing_loss(model.mask_sets(), share, beta, identity)
        return total_loss(ce, lb, lps)
    params = state.mask_parameters() + model.domain("b").mask_parameters() + state.classifier_parameters()
    return fn, params


CASES: dict[str, Callable] = {
    "add": _binary(add), "sub": _binary(sub), "mul": _binary(mul), "scalar_mul": _scalar_mul,
    "div_neg": _div_neg, "relu": _relu, "exp_log": _exp_log, "reductions": _reductions,
    "reshape_concat": _reshape_concat, "take_flip": _take_flip, "matmul": _matmul, "linear": _linear,
    "softmax_ce": _softmax_ce, "conv2d": _conv, "masked_conv2d": _masked_conv, "max_pool2d": _max_pool,
    "global_avg_pool": _gap, "batchnorm_train": _batchnorm(True), "batchnorm_eval": _batchnorm(False),
    "composite_total_loss": _composite,
}


def run_suite(repeats: int = 3, seed: int = 0, tolerance: float = TOLERANCE, step: float = STEP,
              names: Sequence[str] | None = None) -> list[GradCheckResult]:
    """Run every case ``repeats`` times with independent random draws."""
    results = []
    for name in (names or list(CASES)):
        for r in range(repeats):
            gen = rngmod.stream(seed, "gradcheck", name, r)
            fn, inputs = CASES[name](gen)
            err, n = check_gradients(fn, inputs, step, gen=gen)
            results.append(GradCheckResult(f"{name}[{r}]", err, n, err <= tolerance))
    return results
