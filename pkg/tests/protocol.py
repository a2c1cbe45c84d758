"""Shared cross-domain training protocol: train on domain A classes 1-3, score domain B class 4."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from cgraph.config import TrainConfig
from cgraph.training import boundary_entropy, eval_episodes, evaluate_suite, train_loop

SEEDS = (0, 1, 2)
PROTOCOL = TrainConfig(iterations=2000, train_domain="A", train_classes=(1, 2, 3),
                       eval_domain="B", eval_class=4, eval_episodes=50)

VARIANTS = {
    "full": {},
    "baseline": {"decoder": "prototype"},
    "no_cnc": {"alpha": 0.0},
}


@dataclass
class ProtocolRun:
    variant: str
    seed: int
    mean_dsc: float
    boundary_entropy: float


def run_variant(variant: str, seed: int, base: TrainConfig = PROTOCOL) -> ProtocolRun:
    cfg = dataclasses.replace(base, seed=seed, **VARIANTS[variant])
    params, _ = train_loop(cfg)
    episodes = eval_episodes(cfg)
    result = evaluate_suite(params, cfg, episodes)
    return ProtocolRun(variant, seed, result.mean, boundary_entropy(params, cfg, episodes))
