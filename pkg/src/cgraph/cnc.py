"""Confusion-minimizing node contrast.

Query nodes whose prediction entropy exceeds a threshold are split by the
ground truth into positives and negatives and contrasted against the mean
foreground node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .engine.tensor import LOG_CLAMP
from .graph import EpisodeSkip


@dataclass(frozen=True)
class CNCConfig:
    delta: float = 0.2
    tau: float = 0.1
    alpha: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.delta < math.log(2.0):
            raise ValueError(f"entropy threshold must lie in (0, ln 2), got {self.delta}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.alpha < 0:
            raise ValueError(f"loss weight must be non-negative, got {self.alpha}")


@dataclass
class ConfusionSelection:
    entropy: np.ndarray
    mask: np.ndarray  # H x W, entropy above threshold
    positives: Tensor  # C x |p|
    negatives: Tensor  # C x |n|

    @property
    def n_pos(self) -> int:
        return self.positives.shape[1]

    @property
    def n_neg(self) -> int:
        return self.negatives.shape[1]


def _xlogx(p: np.ndarray) -> np.ndarray:
    return p * np.log(np.maximum(p, LOG_CLAMP))


def entropy_map(fg) -> np.ndarray:
    """Binary prediction entropy per position (treated as a constant downstream).

    The two terms are summed smaller-probability first so that H(p) and
    H(1 - p) agree bit for bit whenever 1 - (1 - p) == p.
    """
    p = np.asarray(fg.data if isinstance(fg, Tensor) else fg, dtype=np.float64)
    q = 1.0 - p
    lo, hi = np.minimum(p, q), np.maximum(p, q)
    return -(_xlogx(lo) + _xlogx(hi))


def select_confused(entropy: np.ndarray, gt_resized: np.ndarray, query_nodes: Tensor,
                    delta: float) -> ConfusionSelection:
    c, h, w = query_nodes.shape
    gt = np.asarray(gt_resized, dtype=bool)
    confused = E.select(lambda: np.asarray(entropy) > delta)
    flat = E.reshape(query_nodes, (c, h * w))
    pos = np.flatnonzero((confused & gt).reshape(-1))
    neg = np.flatnonzero((confused & ~gt).reshape(-1))
    return ConfusionSelection(
        entropy=np.asarray(entropy),
        mask=confused,
        positives=E.index_select(flat, (slice(None), pos)),
        negatives=E.index_select(flat, (slice(None), neg)),
    )


def semantic_center(query_nodes: Tensor, gt_resized: np.ndarray) -> Tensor:
    c, h, w = query_nodes.shape
    cols = np.flatnonzero(np.asarray(gt_resized, dtype=bool).reshape(-1))
    if cols.size == 0:
        raise EpisodeSkip("query foreground is empty at feature resolution")
    picked = E.index_select(E.reshape(query_nodes, (c, h * w)), (slice(None), cols))
    return E.reduce_mean(picked, axis=1)


def _cosine_to(center: Tensor, nodes: Tensor) -> Tensor:
    """Cosine between a C-vector and each column of a C x M matrix; returns 1 x M."""
    c = center.shape[0]
    q = E.reshape(center, (c, 1))
    q_unit = q / E.l2_norm(q, axis=0)
    n_unit = nodes / E.l2_norm(nodes, axis=0)
    return E.matmul(E.transpose(q_unit), n_unit)


def cnc_loss(selection: ConfusionSelection, center: Tensor, tau: float) -> Tensor:
    """Mean negative log-probability of the positive column of softmax(J / tau).

    Zero (with no gradient) when either the positive or negative set is empty.
    """
    n_pos, n_neg = selection.n_pos, selection.n_neg
    if n_pos == 0 or n_neg == 0:
        return E.Tensor(np.zeros((), dtype=center.data.dtype))
    pos_cos = E.transpose(_cosine_to(center, selection.positives))  # |p| x 1
    neg_cos = _cosine_to(center, selection.negatives)  # 1 x |n|
    neg_block = E.zeros((n_pos, n_neg)) + neg_cos
    logits = E.scale(E.concat([pos_cos, neg_block], axis=1), 1.0 / tau)
    first = E.index_select(E.log_softmax_rows(logits), (slice(None), 0))
    return -E.reduce_mean(first)


def cost_matrix(selection: ConfusionSelection, center: Tensor) -> np.ndarray:
    """The |p| x (1 + |n|) cosine matrix, for inspection."""
    with E.no_grad():
        pos = _cosine_to(center, selection.positives).data.reshape(-1)
        neg = _cosine_to(center, selection.negatives).data.reshape(-1)
    return np.column_stack([pos, np.broadcast_to(neg, (pos.size, neg.size))])
