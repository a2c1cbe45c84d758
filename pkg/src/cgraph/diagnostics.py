"""Graph exports and subgraph compactness statistics for offline inspection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import cosine_edges_array, topk_neighbors


class StatError(ValueError):
    pass


def pca_project(nodes: np.ndarray, dims: int, tol: float = 1e-8,
                max_iter: int = 10_000) -> np.ndarray:
    """Project the columns of a C x M matrix onto its top principal axes.

    Axes come from power iteration with deflation on the covariance, starting
    from a fixed vector, then a small Rayleigh-Ritz step inside the found
    subspace.  Each axis is signed so that its largest-magnitude
    entry is positive.  Missing rank is padded with zero rows.
    """
    x = np.asarray(nodes, dtype=np.float64)
    c, m = x.shape
    if not 1 <= dims <= m:
        raise ValueError(f"need 1 <= dims <= M, got dims={dims}, M={m}")
    centered = x - x.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / m
    scale = max(np.trace(cov), 1e-300)
    axes = []
    residual = cov.copy()
    start = np.linspace(1.0, 2.0, c)
    for _ in range(min(dims, c)):
        v = start / np.linalg.norm(start)
        # keep the start vector out of already-found directions
        for a in axes:
            v -= (a @ v) * a
        if np.linalg.norm(v) < 1e-12:
            break
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = residual @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * scale:
                break
            w /= norm
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        eigval = v @ residual @ v
        if eigval <= 1e-12 * scale:
            break
        axes.append(v)
        residual = residual - eigval * np.outer(v, v)
    out = np.zeros((dims, m))
    if not axes:
        return out
    # Rayleigh-Ritz polish: rotate within the found subspace so projections are uncorrelated
    basis, _ = np.linalg.qr(np.array(axes).T)
    vals, rot = np.linalg.eigh(basis.T @ cov @ basis)
    basis = basis @ rot[:, np.argsort(vals)[::-1]]
    for i in range(basis.shape[1]):
        a = basis[:, i]
        if a[np.argmax(np.abs(a))] < 0:
            a = -a
        out[i] = a @ centered
    return out


@dataclass
class GraphExport:
    layer: int
    nodes: list[tuple[int, int, int, int, float, float, float]]
    edges: list[tuple[int, int, float]]


def build_export(nodes: np.ndarray, gt_resized: np.ndarray, k: int, layer: int) -> GraphExport:
    """Nodes (C x H x W) with PCA coordinates plus their top-k cosine edges.

    Node indices and grid positions are 1-based, nodes in row-major order.
    """
    if layer < 1:
        raise ValueError(f"layer index is 1-based, got {layer}")
    c, h, w = nodes.shape
    flat = nodes.reshape(c, h * w)
    coords = pca_project(flat, 3)
    labels = np.asarray(gt_resized, dtype=np.int64).reshape(-1)
    edges = cosine_edges_array(flat)
    idx = topk_neighbors(edges, k)
    node_rows = [(i + 1, i // w + 1, i % w + 1, int(labels[i]), *map(float, coords[:, i]))
                 for i in range(h * w)]
    edge_rows = [(i + 1, int(j) + 1, float(edges[i, j])) for i in range(h * w) for j in idx[i]]
    return GraphExport(layer, node_rows, edge_rows)


def format_export(export: GraphExport) -> str:
    lines = [f"NODE {i} {r} {c} {lab} {a:.9g} {b:.9g} {d:.9g}"
             for i, r, c, lab, a, b, d in export.nodes]
    lines += [f"EDGE {s} {t} {wt:.9g}" for s, t, wt in export.edges]
    return "\n".join(lines) + "\n"


def export_graph(nodes: np.ndarray, gt_resized: np.ndarray, k: int, layer: int,
                 path: Path) -> GraphExport:
    export = build_export(nodes, gt_resized, k, layer)
    path = Path(path)
    try:
        path.write_text(format_export(export))
    except OSError as exc:
        raise OSError(f"could not write graph export to {path}: {exc}") from exc
    return export


def parse_export(text: str, layer: int = 0) -> GraphExport:
    nodes, edges = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "NODE":
            nodes.append((int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4]),
                          float(parts[5]), float(parts[6]), float(parts[7])))
        elif parts[0] == "EDGE":
            edges.append((int(parts[1]), int(parts[2]), float(parts[3])))
        else:
            raise ValueError(f"unrecognised graph export line: {line!r}")
    return GraphExport(layer, nodes, edges)


@dataclass
class Compactness:
    intra: float
    inter: float

    @property
    def gap(self) -> float:
        return self.intra - self.inter


def subgraph_stats(nodes: np.ndarray, gt_resized: np.ndarray) -> Compactness:
    """Mean cosine over same-label and cross-label node pairs (self pairs excluded)."""
    flat = np.asarray(nodes, dtype=np.float64)
    flat = flat.reshape(flat.shape[0], -1)
    labels = np.asarray(gt_resized, dtype=bool).reshape(-1)
    if labels.all() or not labels.any():
        raise StatError("compactness needs both foreground and background nodes")
    cos = cosine_edges_array(flat)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    return Compactness(intra=float(cos[same].mean()), inter=float(cos[diff].mean()))
