"""Structural Prior Graph layers: support subgraph linking, interactive subgraph
injection and graph structure modeling, stacked with a growing neighborhood."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import DimensionError, Tensor
from .graph import (
    FeatureGraph,
    cosine_edges_array,
    extract_support_subgraph,
    topk_neighbors,
    uniform_fan_in,
)


@dataclass
class TransformerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ffn_w1: Tensor  # 2C x C
    ffn_b1: Tensor
    ffn_w2: Tensor  # C x 2C
    ffn_b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass
class SPGLayerParams:
    ssl: TransformerParams
    isi: TransformerParams
    w_phi: Tensor  # C x 2C
    gsm_ln_g: Tensor
    gsm_ln_b: Tensor
    k: int


@dataclass
class ForwardTrace:
    """Intermediate quantities collected for verification and diagnostics."""

    attentions: list[np.ndarray] = field(default_factory=list)
    adjacencies: list[tuple[int, str, np.ndarray]] = field(default_factory=list)
    support_nodes: list[np.ndarray] = field(default_factory=list)
    query_nodes: list[np.ndarray] = field(default_factory=list)
    layer: int = 0


def k_schedule(k: int, depth: int) -> list[int]:
    """Neighborhood sizes growing linearly from k to 2k, rounded half up."""
    if depth == 1:
        return [k]
    return [int(math.floor(k + i * k / (depth - 1) + 0.5)) for i in range(depth)]


def init_transformer(rng: np.random.Generator, c: int) -> TransformerParams:
    sq = lambda: E.parameter(uniform_fan_in(rng, (c, c), c))  # noqa: E731
    return TransformerParams(
        w_q=sq(), w_k=sq(), w_v=sq(), w_o=sq(),
        ffn_w1=E.parameter(uniform_fan_in(rng, (2 * c, c), c)),
        ffn_b1=E.parameter(np.zeros(2 * c)),
        ffn_w2=E.parameter(uniform_fan_in(rng, (c, 2 * c), 2 * c)),
        ffn_b2=E.parameter(np.zeros(c)),
        ln1_g=E.parameter(np.ones(c)), ln1_b=E.parameter(np.zeros(c)),
        ln2_g=E.parameter(np.ones(c)), ln2_b=E.parameter(np.zeros(c)),
    )


def init_stack(rng: np.random.Generator, c: int, depth: int, k: int) -> list[SPGLayerParams]:
    layers = []
    for k_i in k_schedule(k, depth):
        layers.append(SPGLayerParams(
            ssl=init_transformer(rng, c),
            isi=init_transformer(rng, c),
            w_phi=E.parameter(uniform_fan_in(rng, (c, 2 * c), 2 * c)),
            gsm_ln_g=E.parameter(np.ones(c)),
            gsm_ln_b=E.parameter(np.zeros(c)),
            k=k_i,
        ))
    return layers


def transformer_block(queries: Tensor, keys_values: Tensor, params: TransformerParams,
                      trace: ForwardTrace | None = None) -> Tensor:
    """Single-head attention with post-norm residual FFN; C x N_q in, C x N_q out."""
    c = queries.shape[0]
    if keys_values.shape[0] != c or params.w_q.shape != (c, c):
        raise DimensionError(f"transformer channels disagree: queries {queries.shape}, "
                             f"keys {keys_values.shape}, W_q {params.w_q.shape}")
    xq = E.transpose(queries)
    xk = E.transpose(keys_values)
    logits = E.matmul(E.matmul(xq, params.w_q), E.transpose(E.matmul(xk, params.w_k)))
    attn = E.softmax_rows(E.scale(logits, 1.0 / math.sqrt(c)))
    if trace is not None:
        trace.attentions.append(attn.data)
    agg = E.matmul(attn, E.matmul(xk, params.w_v))
    h = E.layer_norm(xq + E.matmul(agg, params.w_o), params.ln1_g, params.ln1_b)
    hidden = E.relu(E.matmul(h, E.transpose(params.ffn_w1)) + params.ffn_b1)
    ffn = E.matmul(hidden, E.transpose(params.ffn_w2)) + params.ffn_b2
    out = E.layer_norm(h + ffn, params.ln2_g, params.ln2_b)
    return E.transpose(out)


def ssl_stage(subgraph: Tensor, params: TransformerParams,
              trace: ForwardTrace | None = None) -> Tensor:
    return transformer_block(subgraph, subgraph, params, trace)


def sinusoidal_posenc(c: int, h: int, w: int) -> np.ndarray:
    """2D sine/cosine encoding: first C/2 channels follow the column, last C/2 the row."""
    if c % 4:
        raise ValueError(f"channel count {c} must be divisible by 4")
    half = c // 2
    freqs = 1.0 / 10000 ** (np.arange(0, half, 2) / half)

    def encode(positions: np.ndarray) -> np.ndarray:
        phase = positions[:, None] * freqs[None, :]
        enc = np.empty((positions.size, half))
        enc[:, 0::2] = np.sin(phase)
        enc[:, 1::2] = np.cos(phase)
        return enc

    cols = encode(np.arange(w, dtype=np.float64))  # w x half
    rows = encode(np.arange(h, dtype=np.float64))  # h x half
    out = np.empty((c, h, w))
    out[:half] = np.broadcast_to(cols.T[:, None, :], (half, h, w))
    out[half:] = np.broadcast_to(rows.T[:, :, None], (half, h, w))
    return out


def isi_stage(query_nodes: Tensor, support_nodes: Tensor, linked: Tensor,
              params: TransformerParams, trace: ForwardTrace | None = None) -> tuple[Tensor, Tensor]:
    c, h, w = query_nodes.shape
    if support_nodes.shape != query_nodes.shape:
        raise DimensionError(f"support {support_nodes.shape} and query {query_nodes.shape} differ")
    pos = sinusoidal_posenc(c, h, w).astype(query_nodes.data.dtype)

    def inject(nodes: Tensor) -> Tensor:
        flat = E.reshape(nodes + pos, (c, h * w))
        return E.reshape(transformer_block(flat, linked, params, trace), (c, h, w))

    return inject(query_nodes), inject(support_nodes)


def max_relative(rows: Tensor, idx: np.ndarray) -> Tensor:
    """Per node (row), the elementwise max of self minus each listed neighbour."""
    m, c = rows.shape
    neighbours = E.index_select(rows, np.ascontiguousarray(idx.T))  # k x M x C
    return E.reduce_max(E.reshape(rows, (1, m, c)) - neighbours, axis=0)


def gsm_stage(graph: FeatureGraph, w_phi: Tensor, ln_g: Tensor, ln_b: Tensor, k: int,
              trace: ForwardTrace | None = None, tag: str = "") -> FeatureGraph:
    """Dynamic top-k max-relative graph convolution with a residual connection."""
    c, h, w = graph.nodes.shape
    rows = E.transpose(E.reshape(graph.nodes, (c, h * w)))  # HW x C
    edges = E.select(lambda: cosine_edges_array(rows.data.T))
    idx = E.select(lambda: topk_neighbors(edges, k))
    if trace is not None:
        trace.adjacencies.append((trace.layer, tag, idx))
    rel = max_relative(rows, idx)
    update = E.layer_norm(E.matmul(E.concat([rows, rel], axis=1), E.transpose(w_phi)), ln_g, ln_b)
    out = E.reshape(E.transpose(update + rows), (c, h, w))
    adjacency = np.zeros((h * w, h * w), dtype=bool)
    np.put_along_axis(adjacency, idx, True, axis=1)
    return FeatureGraph(out, edge_cache=edges, adjacency=adjacency)


def spg_layer(support: Tensor, query: Tensor, support_mask: np.ndarray,
              layer: SPGLayerParams, n: int, gather_foreground: bool = False,
              trace: ForwardTrace | None = None) -> tuple[Tensor, Tensor, Tensor]:
    sub = extract_support_subgraph(support, support_mask, n, gather_foreground)
    linked = ssl_stage(sub, layer.ssl, trace)
    query, support = isi_stage(query, support, linked, layer.isi, trace)
    query = gsm_stage(FeatureGraph(query), layer.w_phi, layer.gsm_ln_g, layer.gsm_ln_b,
                      layer.k, trace, "query").nodes
    support = gsm_stage(FeatureGraph(support), layer.w_phi, layer.gsm_ln_g, layer.gsm_ln_b,
                        layer.k, trace, "support").nodes
    return support, query, linked


def spg_forward(support_graph: FeatureGraph, query_graph: FeatureGraph, support_mask: np.ndarray,
                stack: list[SPGLayerParams], n: int = 64, gather_foreground: bool = False,
                trace: ForwardTrace | None = None) -> tuple[FeatureGraph, FeatureGraph, Tensor]:
    """Run the SPG stack; returns the output support and query graphs and the last linked subgraph."""
    if support_graph.nodes.shape != query_graph.nodes.shape:
        raise DimensionError(f"support {support_graph.nodes.shape} and query "
                             f"{query_graph.nodes.shape} graphs differ in shape")
    support, query = support_graph.nodes, query_graph.nodes
    linked = None
    for i, layer in enumerate(stack, start=1):
        if trace is not None:
            trace.layer = i
        support, query, linked = spg_layer(support, query, support_mask, layer, n,
                                           gather_foreground, trace)
        if trace is not None:
            trace.support_nodes.append(support.data)
            trace.query_nodes.append(query.data)
    return FeatureGraph(support), FeatureGraph(query), linked
