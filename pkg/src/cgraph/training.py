"""Episodic training, losses and Dice evaluation."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy import ndimage

from . import engine as E
from .cnc import cnc_loss, entropy_map, select_confused, semantic_center
from .config import TrainConfig
from .engine import OptimizerState, Tensor, TrainingError, adam_step
from .graph import EpisodeSkip, resize_mask
from .model import ModelParams, forward, init_model
from .synth import DatasetSpec, Episode, sample_episode

log = logging.getLogger(__name__)

METRICS_HEADER = ("iter", "loss_seg", "loss_cnc", "loss_total", "lr")
EVAL_HEADER = ("episode", "class", "domain", "dsc")

Sampler = Callable[[int, int], Episode]


@dataclass
class MetricsRecord:
    iteration: int
    loss_seg: float
    loss_cnc: float
    loss_total: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.iteration), _fmt(self.loss_seg), _fmt(self.loss_cnc),
                _fmt(self.loss_total), _fmt(self.lr)]


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def seg_loss(fg: Tensor, gt_resized: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with clamped logs."""
    y = np.asarray(gt_resized, dtype=fg.data.dtype)
    pos = E.log(fg) * y
    neg = E.log(1.0 - fg) * (1.0 - y)
    return -E.reduce_mean(pos + neg)


def total_loss(seg: Tensor, cnc: Tensor, alpha: float) -> Tensor:
    return seg + E.scale(cnc, alpha)


def evaluate_dsc(pred_mask: np.ndarray, gt: np.ndarray) -> float:
    """Dice score in percent; 100 when both masks are empty."""
    pred = np.asarray(pred_mask).astype(bool)
    ref = np.asarray(gt).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    denom = int(pred.sum()) + int(ref.sum())
    if denom == 0:
        return 100.0
    return 200.0 * int((pred & ref).sum()) / denom


@dataclass
class EpisodeLosses:
    seg: Tensor
    cnc: Tensor
    total: Tensor
    fg: Tensor
    gt_resized: np.ndarray


def episode_losses(params: ModelParams, cfg: TrainConfig, episode: Episode) -> EpisodeLosses:
    result = forward(params, cfg, episode.supports, episode.query_image)
    fg = result.prediction.fg
    gt = resize_mask(episode.query_mask, *fg.shape)
    seg = seg_loss(fg, gt)
    if cfg.alpha > 0:
        selection = select_confused(entropy_map(fg), gt, result.query_nodes, cfg.delta)
        cnc = cnc_loss(selection, semantic_center(result.query_nodes, gt), cfg.tau)
    else:
        cnc = Tensor(np.zeros((), dtype=fg.data.dtype))
    return EpisodeLosses(seg, cnc, total_loss(seg, cnc, cfg.alpha), fg, gt)


def sub_seed(seed: int, *counters: int) -> int:
    """Counter-based child seed; deterministic for any (seed, counters)."""
    return int(np.random.SeedSequence([seed, *counters]).generate_state(1)[0])


def dataset_spec(cfg: TrainConfig) -> DatasetSpec:
    return DatasetSpec(canvas=cfg.canvas, n_classes=cfg.n_classes, patients=cfg.patients)


def default_sampler(cfg: TrainConfig) -> Sampler:
    spec = dataset_spec(cfg)

    def sample(iteration: int, attempt: int) -> Episode:
        seed = sub_seed(cfg.seed, iteration, attempt)
        cls = cfg.train_classes[seed % len(cfg.train_classes)]
        return sample_episode(spec, cfg.train_domain, cls, 1, seed)

    return sample


def fixed_sampler(episode: Episode) -> Sampler:
    return lambda iteration, attempt: episode


def train_steps(cfg: TrainConfig, sampler: Sampler | None = None,
                params: ModelParams | None = None,
                max_skips: int = 50) -> Iterator[tuple[ModelParams, MetricsRecord]]:
    """Yield (params, metrics) after every iteration; params are updated in place."""
    sampler = sampler or default_sampler(cfg)
    params = params or init_model(cfg)
    named = params.named()
    state = OptimizerState(base_lr=cfg.lr, decay=cfg.decay, decay_every=cfg.decay_every)
    with E.default_dtype(cfg.dtype):
        for it in range(cfg.iterations):
            for attempt in range(max_skips):
                try:
                    losses = episode_losses(params, cfg, sampler(it, attempt))
                    break
                except EpisodeSkip:
                    continue
                except FloatingPointError as exc:
                    raise TrainingError(f"non-finite values at iteration {it}: {exc}") from exc
            else:
                raise TrainingError(f"iteration {it}: {max_skips} consecutive episodes skipped")
            total = losses.total.item()
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at iteration {it}")
            lr = state.lr
            for p in named.values():
                p.grad = None
            losses.total.backward()
            adam_step(named, {k: p.grad for k, p in named.items() if p.grad is not None}, state)
            yield params, MetricsRecord(it, losses.seg.item(), losses.cnc.item(), total, lr)


def train_loop(cfg: TrainConfig, sampler: Sampler | None = None,
               params: ModelParams | None = None,
               metrics_out: io.TextIOBase | None = None) -> tuple[ModelParams, list[MetricsRecord]]:
    params = params or init_model(cfg)
    records = []
    writer = None
    if metrics_out is not None:
        writer = csv.writer(metrics_out, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    for _, rec in train_steps(cfg, sampler, params):
        records.append(rec)
        if writer is not None:
            writer.writerow(rec.row())
        if rec.iteration % 100 == 0:
            log.info("iter %d seg %.4f cnc %.4f lr %.3g", rec.iteration, rec.loss_seg,
                     rec.loss_cnc, rec.lr)
    return params, records


def predict(params: ModelParams, cfg: TrainConfig, episode: Episode):
    with E.no_grad(), E.default_dtype(cfg.dtype):
        return forward(params, cfg, episode.supports, episode.query_image)


def eval_episodes(cfg: TrainConfig, count: int | None = None, shots: int | None = None,
                  domain: str | None = None, class_id: int | None = None) -> list[Episode]:
    """Held-out episodes; seeds derive from the config seed so every run sees the same set."""
    spec = dataset_spec(cfg)
    count = cfg.eval_episodes if count is None else count
    if count < 1:
        raise ValueError(f"episode count must be at least 1, got {count}")
    shots = cfg.shots if shots is None else shots
    domain = domain or cfg.eval_domain
    class_id = class_id or cfg.eval_class
    return [sample_episode(spec, domain, class_id, shots, sub_seed(10_000 + i, 99))
            for i in range(count)]


@dataclass
class EvalRow:
    episode: int
    class_id: int
    domain: str
    dsc: float


@dataclass
class EvalResult:
    rows: list[EvalRow]
    per_class: dict[int, float]
    mean: float

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        for r in self.rows:
            writer.writerow([r.episode, r.class_id, r.domain, _fmt(r.dsc)])
        return buf.getvalue()


def evaluate_suite(params: ModelParams, cfg: TrainConfig, episodes: Iterable[Episode],
                   threads: int | None = None) -> EvalResult:
    """Inference-only Dice over episodes, aggregated per class in episode order."""
    episodes = list(episodes)
    threads = threads or int(os.environ.get("CGRAPH_THREADS", "1"))

    def score(ep: Episode) -> float:
        return evaluate_dsc(predict(params, cfg, ep).prediction.mask, ep.query_mask)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score, episodes))
    else:
        scores = [score(ep) for ep in episodes]
    rows = [EvalRow(i, ep.class_id, ep.domain, s) for i, (ep, s) in enumerate(zip(episodes, scores))]
    per_class: dict[int, list[float]] = {}
    for r in rows:
        per_class.setdefault(r.class_id, []).append(r.dsc)
    mean = float(np.mean([r.dsc for r in rows])) if rows else float("nan")
    return EvalResult(rows, {c: float(np.mean(v)) for c, v in sorted(per_class.items())}, mean)


def boundary_band(gt_resized: np.ndarray, width: int = 2) -> np.ndarray:
    gt = np.asarray(gt_resized, dtype=bool)
    grown = ndimage.binary_dilation(gt, iterations=width)
    shrunk = ndimage.binary_erosion(gt, iterations=width)
    return grown & ~shrunk


def boundary_entropy(params: ModelParams, cfg: TrainConfig, episodes: Iterable[Episode]) -> float:
    """Mean prediction entropy over the ground-truth boundary band, pooled over episodes."""
    values = []
    for ep in episodes:
        fg = predict(params, cfg, ep).prediction.fg
        gt = resize_mask(ep.query_mask, *fg.shape)
        values.append(entropy_map(fg)[boundary_band(gt)])
    return float(np.concatenate(values).mean())
