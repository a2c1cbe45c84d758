"""Subgraph matching decoding, plus the prototype-matching comparator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import DimensionError, Tensor
from .graph import EpisodeSkip, resize_mask, uniform_fan_in

BASELINE_SCALE = 20.0
BASELINE_SHIFT = 0.5


@dataclass
class ResBlock:
    conv1_w: Tensor
    conv1_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor


@dataclass
class SMDParams:
    w_s: Tensor
    w_qp: Tensor
    w_a: Tensor
    fuse_w: Tensor  # C x (N + C)
    fuse_b: Tensor
    blocks: list[ResBlock]
    head_w: Tensor  # 1 x C
    head_b: Tensor


@dataclass
class Prediction:
    fg: Tensor  # H x W foreground probability
    bg: Tensor
    mask: np.ndarray  # binary, image resolution


def init_smd(rng: np.random.Generator, c: int, n: int) -> SMDParams:
    blocks = []
    for _ in range(2):
        blocks.append(ResBlock(
            conv1_w=E.parameter(uniform_fan_in(rng, (c, c, 3, 3), 9 * c)),
            conv1_b=E.parameter(np.zeros(c)),
            ln_g=E.parameter(np.ones(c)),
            ln_b=E.parameter(np.zeros(c)),
            conv2_w=E.parameter(uniform_fan_in(rng, (c, c, 3, 3), 9 * c)),
            conv2_b=E.parameter(np.zeros(c)),
        ))
    return SMDParams(
        w_s=E.parameter(uniform_fan_in(rng, (c, c), c)),
        w_qp=E.parameter(uniform_fan_in(rng, (c, c), c)),
        w_a=E.parameter(uniform_fan_in(rng, (c, c), c)),
        fuse_w=E.parameter(uniform_fan_in(rng, (c, n + c), n + c)),
        fuse_b=E.parameter(np.zeros(c)),
        blocks=blocks,
        head_w=E.parameter(uniform_fan_in(rng, (1, c), c)),
        head_b=E.parameter(np.zeros(1)),
    )


def project_shared(subgraph: Tensor, query_nodes: Tensor, params: SMDParams) -> tuple[Tensor, Tensor]:
    """Support subgraph -> C x N via W_s; query nodes -> HW x C via W_q."""
    c, h, w = query_nodes.shape
    if subgraph.shape[0] != c:
        raise DimensionError(f"subgraph {subgraph.shape} and query nodes {query_nodes.shape} "
                             "have different channel counts")
    support_proj = E.matmul(params.w_s, subgraph)
    query_proj = E.matmul(E.transpose(E.reshape(query_nodes, (c, h * w))), params.w_qp)
    return support_proj, query_proj


def channel_self_update(subgraph: Tensor, w_a: Tensor) -> Tensor:
    return (1.0 + E.tanh(E.matmul(w_a, subgraph))) * subgraph


def aggregate_kshot(subgraphs: list[Tensor]) -> Tensor:
    if not subgraphs:
        raise ValueError("aggregate_kshot needs at least one subgraph")
    if len(subgraphs) == 1:
        return subgraphs[0]
    total = subgraphs[0]
    for s in subgraphs[1:]:
        if s.shape != total.shape:
            raise DimensionError(f"k-shot subgraphs differ in shape: {s.shape} vs {total.shape}")
        total = total + s
    return E.scale(total, 1.0 / len(subgraphs))


def connectivity_map(query_proj: Tensor, support_updated: Tensor, h: int, w: int) -> Tensor:
    """sigmoid of the HW x N affinity, laid out as N x H x W."""
    affinity = E.matmul(query_proj, support_updated)  # HW x N
    n = affinity.shape[1]
    return E.sigmoid(E.reshape(E.transpose(affinity), (n, h, w)))


def channel_layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer norm over the channel axis of a C x H x W map."""
    return E.transpose(E.layer_norm(E.transpose(x, (1, 2, 0)), gain, bias), (2, 0, 1))


def upsample_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    return np.repeat(np.repeat(mask, out_h // h, axis=0), out_w // w, axis=1)


def make_prediction(fg: Tensor, image_hw: tuple[int, int]) -> Prediction:
    bg = 1.0 - fg
    mask = upsample_nearest(fg.data > 0.5, *image_hw).astype(np.uint8)
    return Prediction(fg=fg, bg=bg, mask=mask)


def decode_prediction(phi: Tensor, query_nodes: Tensor, params: SMDParams,
                      image_hw: tuple[int, int]) -> Prediction:
    c, h, w = query_nodes.shape
    if phi.shape[1:] != (h, w):
        raise DimensionError(f"connectivity map {phi.shape} vs query nodes {query_nodes.shape}")
    fused = E.concat([phi, query_nodes], axis=0)
    x = E.matmul(params.fuse_w, E.reshape(fused, (fused.shape[0], h * w)))
    x = E.reshape(x + E.reshape(params.fuse_b, (c, 1)), (c, h, w))
    for blk in params.blocks:
        y = E.conv3x3(x, blk.conv1_w, blk.conv1_b)
        y = E.relu(channel_layer_norm(y, blk.ln_g, blk.ln_b))
        x = x + E.conv3x3(y, blk.conv2_w, blk.conv2_b)
    logit = E.matmul(params.head_w, E.reshape(x, (c, h * w))) + E.reshape(params.head_b, (1, 1))
    fg = E.reshape(E.sigmoid(logit), (h, w))
    return make_prediction(fg, image_hw)


def smd_forward(support_subgraphs: list[Tensor], query_nodes: Tensor, params: SMDParams,
                image_hw: tuple[int, int]) -> Prediction:
    """Full matching decode; several support subgraphs are averaged after the channel update."""
    c, h, w = query_nodes.shape
    updated = []
    query_proj = None
    for sub in support_subgraphs:
        s_proj, query_proj = project_shared(sub, query_nodes, params)
        updated.append(channel_self_update(s_proj, params.w_a))
    phi = connectivity_map(query_proj, aggregate_kshot(updated), h, w)
    return decode_prediction(phi, query_nodes, params, image_hw)


def masked_prototype(support_nodes: Tensor, support_mask: np.ndarray) -> Tensor:
    c, h, w = support_nodes.shape
    fg = resize_mask(support_mask, h, w).reshape(-1)
    if not fg.any():
        raise EpisodeSkip("support foreground is empty at feature resolution")
    cols = np.flatnonzero(fg)
    picked = E.index_select(E.reshape(support_nodes, (c, h * w)), (slice(None), cols))
    return E.reduce_mean(picked, axis=1)


def prototypical_baseline(support_nodes, support_mask, query_nodes: Tensor,
                          image_hw: tuple[int, int] | None = None) -> Prediction:
    """fg = sigmoid(20 * (cos(query node, prototype) - 0.5)).

    ``support_nodes``/``support_mask`` may be lists for K shots; the prototypes
    are then averaged.
    """
    if isinstance(support_nodes, Tensor):
        support_nodes, support_mask = [support_nodes], [support_mask]
    protos = [masked_prototype(s, m) for s, m in zip(support_nodes, support_mask)]
    proto = aggregate_kshot(protos)
    c, h, w = query_nodes.shape
    flat = E.reshape(query_nodes, (c, h * w))
    q_unit = flat / E.l2_norm(flat, axis=0)
    p_unit = proto / E.l2_norm(proto, axis=0)
    cos = E.matmul(E.reshape(p_unit, (1, c)), q_unit)
    fg = E.reshape(E.sigmoid(E.scale(cos - BASELINE_SHIFT, BASELINE_SCALE)), (h, w))
    if image_hw is None:
        image_hw = support_mask[0].shape
    return make_prediction(fg, image_hw)
