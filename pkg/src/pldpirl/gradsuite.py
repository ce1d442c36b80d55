"""Registry of differentiable operations and losses for the gradient oracle.

Each entry builds a random problem instance; non-scalar outputs are reduced
with a fixed random weighting so that every output element contributes a
distinct gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .encoder import EncoderConfig, cbam_block, init_params
from .gradcheck import check_many
from .losses import LossConfig, nce_loss, pld_loss, similarity_h, total_loss
from .tensor import Tensor

Builder = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[Tensor]]]
REGISTRY: Dict[str, Builder] = {}


def register(name: str):
    def deco(fn: Builder) -> Builder:
        REGISTRY[name] = fn
        return fn
    return deco


def _t(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, *shape, margin=0.1) -> Tensor:
    mag = rng.uniform(margin, 1.0, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape))


def _unit(rng, *shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _weighted(op: Callable[..., Tensor], rng) -> Callable[..., Tensor]:
    """Wrap ``op`` so its output is reduced to a scalar by a fixed random weighting."""
    cache = {}

    def fn(*xs):
        out = op(*xs)
        if out.data.size == 1:
            return ops.sum(out)
        if "w" not in cache:
            cache["w"] = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
        return ops.sum(ops.mul(out, Tensor(cache["w"])))
    return fn


# -- elementwise ---------------------------------------------------------------
@register("add")
def _(rng):
    return _weighted(ops.add, rng), [_t(rng, 3, 4), _t(rng, 3, 4)]


@register("sub")
def _(rng):
    return _weighted(ops.sub, rng), [_t(rng, 3, 4), _t(rng, 3, 4)]


@register("mul")
def _(rng):
    return _weighted(ops.mul, rng), [_t(rng, 3, 4), _t(rng, 3, 4)]


@register("div")
def _(rng):
    return _weighted(ops.div, rng), [_t(rng, 3, 4), _away_from_zero(rng, 3, 4, margin=0.3)]


@register("relu")
def _(rng):
    return _weighted(ops.relu, rng), [_away_from_zero(rng, 4, 5, margin=0.01)]


@register("sigmoid")
def _(rng):
    return _weighted(ops.sigmoid, rng), [_t(rng, 4, 5, lo=-4, hi=4)]


@register("exp")
def _(rng):
    return _weighted(ops.exp, rng), [_t(rng, 4, 5, lo=-2, hi=2)]


@register("log")
def _(rng):
    return _weighted(ops.log, rng), [_t(rng, 4, 5, lo=0.2, hi=3)]


# -- shape -----------------------------------------------------------------------
@register("reshape")
def _(rng):
    return _weighted(lambda x: ops.reshape(x, (6, 2)), rng), [_t(rng, 3, 4)]


@register("transpose")
def _(rng):
    return _weighted(lambda x: ops.transpose(x, (2, 0, 1)), rng), [_t(rng, 2, 3, 4)]


@register("expand")
def _(rng):
    return _weighted(lambda x: ops.expand(x, (3, 4, 5)), rng), [_t(rng, 3, 1, 5)]


@register("index")
def _(rng):
    idx = rng.integers(0, 5, size=7)  # repeats exercise gradient accumulation
    return _weighted(lambda x: ops.index(x, idx), rng), [_t(rng, 5, 3)]


@register("concat")
def _(rng):
    return _weighted(lambda a, b: ops.concat([a, b], axis=1), rng), [_t(rng, 2, 3), _t(rng, 2, 4)]


# -- reductions ------------------------------------------------------------------
@register("sum")
def _(rng):
    return _weighted(lambda x: ops.sum(x, axis=1), rng), [_t(rng, 3, 4, 2)]


@register("mean")
def _(rng):
    return _weighted(lambda x: ops.mean(x, axis=(0, 2), keepdims=True), rng), [_t(rng, 3, 4, 2)]


@register("amax")
def _(rng):
    # distinct values spaced well beyond eps so the argmax never flips
    x = rng.permutation(24).reshape(4, 6) * 0.05 + rng.uniform(0, 0.01, size=(4, 6))
    return _weighted(lambda t: ops.amax(t, axis=1), rng), [Tensor(x)]


@register("dot")
def _(rng):
    return _weighted(ops.dot, rng), [_t(rng, 3, 5), _t(rng, 3, 5)]


@register("matmul")
def _(rng):
    return _weighted(ops.matmul, rng), [_t(rng, 4, 5), _t(rng, 5, 3)]


@register("linear")
def _(rng):
    return _weighted(ops.linear, rng), [_t(rng, 4, 5), _t(rng, 5, 3), _t(rng, 3)]


# -- convolution and pooling -----------------------------------------------------
@register("conv2d")
def _(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    fn = lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=padding)
    return _weighted(fn, rng), [_t(rng, 2, 2, 7, 7), _t(rng, 3, 2, 3, 3), _t(rng, 3)]


@register("conv2d_patchify")
def _(rng):
    fn = lambda x, w: ops.conv2d(x, w, stride=2)
    return _weighted(fn, rng), [_t(rng, 2, 2, 6, 6), _t(rng, 3, 2, 2, 2)]


def _distinct_map(rng, *shape) -> Tensor:
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.03 + rng.uniform(0, 0.005, size=n)).reshape(shape))


@register("max_pool2d")
def _(rng):
    return _weighted(lambda x: ops.max_pool2d(x, 2), rng), [_distinct_map(rng, 2, 2, 4, 4)]


@register("global_avg_pool")
def _(rng):
    return _weighted(ops.global_avg_pool, rng), [_t(rng, 2, 3, 4, 4)]


@register("global_max_pool")
def _(rng):
    return _weighted(ops.global_max_pool, rng), [_distinct_map(rng, 2, 3, 3, 3)]


# -- normalization and classification ---------------------------------------------
@register("l2_normalize")
def _(rng):
    return _weighted(ops.l2_normalize, rng), [_away_from_zero(rng, 3, 5, margin=0.2)]


@register("cosine_similarity")
def _(rng):
    return _weighted(ops.cosine_similarity, rng), [_away_from_zero(rng, 3, 5, margin=0.2), _away_from_zero(rng, 3, 5, margin=0.2)]


@register("softmax")
def _(rng):
    return _weighted(ops.softmax, rng), [_t(rng, 3, 4, lo=-3, hi=3)]


@register("log_softmax")
def _(rng):
    return _weighted(ops.log_softmax, rng), [_t(rng, 3, 4, lo=-3, hi=3)]


@register("logsumexp")
def _(rng):
    return _weighted(lambda x: ops.logsumexp(x, axis=-1), rng), [_t(rng, 3, 5, lo=-3, hi=3)]


@register("cross_entropy")
def _(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda z: ops.cross_entropy(z, labels)), [_t(rng, 5, 4, lo=-3, hi=3)]


def _top2_gap(a: np.ndarray, axis) -> float:
    srt = np.sort(a, axis=axis)
    return float(np.min(np.take(srt, -1, axis=axis) - np.take(srt, -2, axis=axis)))


def _cbam_margin(p, x: np.ndarray, prefix: str) -> float:
    """Distance of a CBAM input from its nearest kink (relu zero, max tie)."""
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    pooled = np.concatenate([flat.mean(axis=2), flat.max(axis=2)])
    pre = pooled @ p[f"{prefix}.mlp1"].data
    hidden = np.maximum(pre, 0.0) @ p[f"{prefix}.mlp2"].data
    chan = 1.0 / (1.0 + np.exp(-(hidden[:n] + hidden[n:])))
    x1 = x * chan[:, :, None, None]
    return min(float(np.min(np.abs(pre))), _top2_gap(flat, 2), _top2_gap(x1, 1))


@register("cbam_block")
def _(rng):
    cfg = EncoderConfig(channels=(4, 8), cbam=True, cbam_reduction=2, cbam_kernel=3)
    prefix = "stage1.cbam"
    while True:
        p = init_params(cfg, int(rng.integers(1 << 30)))
        x = rng.uniform(-1.0, 1.0, size=(2, 8, 4, 4))
        if _cbam_margin(p, x, prefix) > 1e-3:
            break
    names = [f"{prefix}.mlp1", f"{prefix}.mlp2", f"{prefix}.spatial"]
    fn = lambda x, *weights: cbam_block(p, x, prefix)
    return _weighted(fn, rng), [Tensor(x)] + [p[n] for n in names]


# -- objectives ------------------------------------------------------------------
# Losses are probed at unit vectors; finite differences step slightly off the
# sphere, which the formulas tolerate (they only use inner products).
def _loss_cfg(rng) -> LossConfig:
    return LossConfig(tau=float(rng.choice([0.2, 0.4, 0.6])), lam=0.5, negatives=8, dataset_size=40)


@register("similarity_h")
def _(rng):
    cfg = _loss_cfg(rng)
    fn = lambda f, g: similarity_h(f, g, cfg.tau, cfg.ratio)
    return fn, [Tensor(_unit(rng, 6)), Tensor(_unit(rng, 6))]


@register("nce_loss")
def _(rng):
    cfg = _loss_cfg(rng)
    b, k, d = 3, 8, 6
    fn = lambda f, g, n: nce_loss(f, g, n, cfg)
    return fn, [Tensor(_unit(rng, b, d)), Tensor(_unit(rng, b, d)), Tensor(_unit(rng, b, k, d))]


@register("nce_loss_sampled")
def _(rng):
    cfg = replace(_loss_cfg(rng), noise="sampled")
    b, k, d = 3, 8, 6
    fn = lambda f, g, n: nce_loss(f, g, n, cfg)
    return fn, [Tensor(_unit(rng, b, d)), Tensor(_unit(rng, b, d)), Tensor(_unit(rng, b, k, d))]


def _pld_problem(rng):
    cfg = _loss_cfg(rng)
    b, d, k = 4, 6, 3
    ci, cp = _unit(rng, k, d), _unit(rng, k, d)
    ai, ap = rng.integers(0, k, size=b), rng.integers(0, k, size=b)
    return cfg, b, d, (ci, cp, ai, ap)


@register("pld_loss")
def _(rng):
    cfg, b, d, (ci, cp, ai, ap) = _pld_problem(rng)
    fn = lambda f, g: pld_loss(f, g, ci, cp, ai, ap, cfg)
    return fn, [Tensor(_unit(rng, b, d)), Tensor(_unit(rng, b, d))]


@register("total_loss")
def _(rng):
    cfg, b, d, (ci, cp, ai, ap) = _pld_problem(rng)
    negs = _unit(rng, b, 8, d)

    def fn(f, g):
        return total_loss(nce_loss(f, g, negs, cfg), pld_loss(f, g, ci, cp, ai, ap, cfg), cfg.lam)
    return fn, [Tensor(_unit(rng, b, d)), Tensor(_unit(rng, b, d))]


@dataclass
class OpResult:
    name: str
    trials: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


TOLERANCE = 1e-4


@dataclass
class SuiteReport:
    results: List[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.results)

    def lines(self) -> List[str]:
        out = [f"{'op':<20} {'trials':>6} {'max_rel_err':>12} {'status':>6}"]
        for r in self.results:
            out.append(f"{r.name:<20} {r.trials:>6} {r.max_error:>12.3e} {'ok' if r.passed else 'FAIL':>6}")
        return out


def run_suite(
    trials: int = 100, seed: int = 0, eps: float = 1e-5, names: Optional[Sequence[str]] = None
) -> SuiteReport:
    report = SuiteReport()
    for name in names or list(REGISTRY):
        if name not in REGISTRY:
            raise KeyError(f"no gradient check registered for {name!r}")
        t0 = time.perf_counter()
        rng = np.random.default_rng((seed, sorted(REGISTRY).index(name)))
        worst = 0.0
        for _ in range(trials):
            fn, inputs = REGISTRY[name](rng)
            worst = max(worst, check_many(fn, inputs, eps))
        report.results.append(OpResult(name, trials, worst, time.perf_counter() - t0))
    return report
