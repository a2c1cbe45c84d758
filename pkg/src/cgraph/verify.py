"""Finite-difference verification of every differentiable primitive and the full loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import engine as E
from .config import TrainConfig
from .engine import Tensor, gradcheck_params
from .model import init_model
from .synth import DatasetSpec, Episode, sample_episode

TOLERANCE = 1e-4

LossFn = Callable[[Mapping[str, Tensor]], Tensor]
Case = tuple[LossFn, dict[str, Tensor]]


def _leaf(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def _weighted(out: Tensor, rng_seed: int = 11) -> Tensor:
    # a random linear read-out so every output coordinate carries gradient
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return E.reduce_sum(out * w)


def _away_from_zero(rng, shape=(3, 5), margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _resolve(op) -> Callable:
    # names are looked up on the engine at check time so patched rules are exercised
    return getattr(E, op) if isinstance(op, str) else op


def _binary(op) -> Callable[[np.random.Generator], Case]:
    def case(rng):
        a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal(4) + 3.0)
        fn = _resolve(op)
        return (lambda p: _weighted(fn(p["a"], p["b"]))), {"a": a, "b": b}
    return case


def _unary(op, sample=None) -> Callable[[np.random.Generator], Case]:
    def case(rng):
        x = _leaf(sample(rng) if sample else rng.standard_normal((3, 5)))
        fn = _resolve(op)
        return (lambda p: _weighted(fn(p["x"]))), {"x": x}
    return case


def _layer_norm(rng):
    x = _leaf(rng.standard_normal((4, 6)))
    g, b = _leaf(rng.standard_normal(6)), _leaf(rng.standard_normal(6))
    return (lambda p: _weighted(E.layer_norm(p["x"], p["g"], p["b"]))), {"x": x, "g": g, "b": b}


def _conv(rng):
    x = _leaf(rng.standard_normal((2, 4, 5)))
    w = _leaf(0.5 * rng.standard_normal((3, 2, 3, 3)))
    b = _leaf(rng.standard_normal(3))
    return (lambda p: _weighted(E.conv3x3(p["x"], p["w"], p["b"]))), {"x": x, "w": w, "b": b}


def _matmul(rng):
    a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((4, 2)))
    return (lambda p: _weighted(E.matmul(p["a"], p["b"]))), {"a": a, "b": b}


def _concat(rng):
    a, b = _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((2, 4)))
    return (lambda p: _weighted(E.concat([p["a"], p["b"]], axis=1))), {"a": a, "b": b}


def _max_over(rng):
    a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 4)))
    return (lambda p: _weighted(E.max_over([p["a"], p["b"]]))), {"a": a, "b": b}


def _distinct(rng):
    return rng.permutation(15).reshape(3, 5) * 0.3 + 0.01 * rng.standard_normal((3, 5))


PRIMITIVES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary("add"),
    "subtract": _binary("subtract"),
    "multiply": _binary("multiply"),
    "divide": _binary("divide"),
    "scale": _unary(lambda x: E.scale(x, -1.7)),
    "masked_zero": _unary(lambda x: E.masked_zero(x, np.arange(15).reshape(3, 5) % 3 == 0)),
    "tanh": _unary("tanh"),
    "sigmoid": _unary("sigmoid"),
    "relu": _unary("relu", _away_from_zero),
    "exp": _unary("exp"),
    "log": _unary("log", lambda rng: rng.uniform(0.5, 2.0, (3, 5))),
    "sqrt": _unary("sqrt", lambda rng: rng.uniform(0.5, 2.0, (3, 5))),
    "reshape": _unary(lambda x: E.reshape(x, (5, 3))),
    "transpose": _unary("transpose"),
    "concat": _concat,
    "index_select": _unary(lambda x: E.index_select(x, (slice(None), np.array([4, 0, 4, 2])))),
    "reduce_sum": _unary(lambda x: E.reduce_sum(x, axis=1)),
    "reduce_mean": _unary(lambda x: E.reduce_mean(x, axis=0)),
    "reduce_max": _unary(lambda x: E.reduce_max(x, axis=1), _distinct),
    "max_over": _max_over,
    "l2_norm": _unary(lambda x: E.l2_norm(x, axis=0)),
    "matmul": _matmul,
    "softmax_rows": _unary("softmax_rows"),
    "log_softmax_rows": _unary("log_softmax_rows"),
    "layer_norm": _layer_norm,
    "conv3x3": _conv,
    "adaptive_avg_pool_1d": _unary(lambda x: E.adaptive_avg_pool_1d(x, 3)),
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)

    def line(self) -> str:
        return f"{self.name:<24} {self.max_rel_err:.3e} {'PASS' if self.passed else 'FAIL'}"


def check_primitive(name: str, seed: int = 0) -> CheckResult:
    with E.default_dtype(np.float64):
        loss_fn, params = PRIMITIVES[name](np.random.default_rng(seed))
        errs = gradcheck_params(loss_fn, params)
    return CheckResult(name, max(errs.values()))


TOY_CONFIG = TrainConfig(channels=8, patch=4, canvas=16, nodes=8, depth=3, k=3, n_classes=2,
                         patients=8, train_classes=(1,), precision="float64", seed=3)


def toy_episode(cfg: TrainConfig = TOY_CONFIG) -> Episode:
    spec = DatasetSpec(canvas=cfg.canvas, n_classes=cfg.n_classes, patients=cfg.patients)
    return sample_episode(spec, "A", 1, 1, seed=cfg.seed)


def check_composite(max_coords: int | None = 64, seed: int = 0) -> CheckResult:
    """Gradcheck of segmentation + contrastive loss through the whole model on a 4x4x8 episode.

    ``max_coords`` caps the probed coordinates per parameter tensor to bound runtime.
    """
    from .training import episode_losses

    cfg = TOY_CONFIG
    episode = toy_episode(cfg)
    params = init_model(cfg)
    with E.default_dtype(np.float64):
        errs = gradcheck_params(lambda p: episode_losses(params, cfg, episode).total,
                                params.named(), max_coords=max_coords, seed=seed)
    return CheckResult("composite_loss", max(errs.values()))


def run_suite(max_coords: int | None = 64) -> list[CheckResult]:
    results = [check_primitive(name) for name in PRIMITIVES]
    results.append(check_composite(max_coords))
    return results
