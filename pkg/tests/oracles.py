"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package; every routine is a plain loop.
"""

from __future__ import annotations

import math

import numpy as np


def topk_rows(edges: np.ndarray, k: int) -> np.ndarray:
    """Boolean adjacency from a full sort of each row; ties go to the lower index."""
    m = edges.shape[0]
    adj = np.zeros((m, m), dtype=bool)
    for i in range(m):
        ranked = sorted((j for j in range(m) if j != i), key=lambda j: (-edges[i, j], j))
        for j in ranked[:k]:
            adj[i, j] = True
    return adj


def bin_average(x: np.ndarray, n: int) -> np.ndarray:
    c, length = x.shape
    out = np.zeros((c, n))
    for b in range(n):
        start = (b * length) // n
        end = -((-(b + 1) * length) // n)
        for ch in range(c):
            out[ch, b] = sum(x[ch, start:end]) / (end - start)
    return out


def confused_counts(entropy: np.ndarray, gt: np.ndarray, delta: float) -> tuple[int, int]:
    pos = neg = 0
    h, w = entropy.shape
    for r in range(h):
        for c in range(w):
            if entropy[r, c] > delta:
                if gt[r, c]:
                    pos += 1
                else:
                    neg += 1
    return pos, neg


def dice_percent(pred: np.ndarray, gt: np.ndarray) -> float:
    overlap = size_p = size_g = 0
    for a, b in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        size_p += bool(a)
        size_g += bool(b)
        overlap += bool(a) and bool(b)
    if size_p + size_g == 0:
        return 100.0
    return 200.0 * overlap / (size_p + size_g)


def block_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    bh, bw = mask.shape[0] // h, mask.shape[1] // w
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            out[r, c] = mask[r * bh:(r + 1) * bh, c * bw:(c + 1) * bw].mean() >= 0.5
    return out


def mask_then_pool(nodes: np.ndarray, mask: np.ndarray, n: int) -> np.ndarray:
    c, h, w = nodes.shape
    fg = block_mask(mask, h, w)
    flat = np.array([[nodes[ch, r, q] * fg[r, q] for r in range(h) for q in range(w)]
                     for ch in range(c)])
    return bin_average(flat, n)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (math.sqrt(np.dot(a, a)) * math.sqrt(np.dot(b, b))))


def max_relative(rows: np.ndarray, k: int) -> np.ndarray:
    """For each node: elementwise max over its top-k cosine neighbours of (self - neighbour)."""
    m, c = rows.shape
    sims = np.array([[cosine(rows[i], rows[j]) for j in range(m)] for i in range(m)])
    adj = topk_rows(sims, k)
    out = np.zeros((m, c))
    for i in range(m):
        diffs = [rows[i] - rows[j] for j in range(m) if adj[i, j]]
        out[i] = np.max(diffs, axis=0)
    return out


def binary_entropy(p: float) -> float:
    terms = [x * math.log(x) for x in (p, 1 - p) if x > 0]
    return -sum(terms)
