"""Feature maps as graphs: encoder, positional nodes, cosine edges and top-k adjacency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import DimensionError, Tensor


class EpisodeSkip(Exception):
    """The episode cannot be used (e.g. its foreground vanishes at feature resolution)."""


@dataclass
class FeatureGraph:
    nodes: Tensor  # C x H x W, nodes kept in row-major index order
    edge_cache: np.ndarray | None = None
    adjacency: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return self.nodes.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.nodes.shape[1], self.nodes.shape[2]

    def flat(self) -> Tensor:
        c, h, w = self.nodes.shape
        return E.reshape(self.nodes, (c, h * w))

    def with_edges(self, k: int) -> "FeatureGraph":
        edges = cosine_edges_array(self.flat().data)
        return FeatureGraph(self.nodes, edges, topk_adjacency(edges, k))


@dataclass
class EncoderBlock:
    ln_g: Tensor
    ln_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    patch_w: Tensor  # C x (3*P*P)
    patch_b: Tensor
    blocks: list[EncoderBlock]
    pos: Tensor  # learnable positional encoding, C x H x W
    patch: int


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(rng: np.random.Generator, channels: int, patch: int, feat_h: int,
                 feat_w: int) -> EncoderParams:
    fan = 3 * patch * patch
    blocks = []
    for _ in range(2):
        blocks.append(EncoderBlock(
            ln_g=E.parameter(np.ones(channels)),
            ln_b=E.parameter(np.zeros(channels)),
            w1=E.parameter(uniform_fan_in(rng, (channels, channels), channels)),
            b1=E.parameter(np.zeros(channels)),
            w2=E.parameter(uniform_fan_in(rng, (channels, channels), channels)),
            b2=E.parameter(np.zeros(channels)),
        ))
    return EncoderParams(
        patch_w=E.parameter(uniform_fan_in(rng, (channels, fan), fan)),
        patch_b=E.parameter(np.zeros(channels)),
        blocks=blocks,
        pos=E.parameter(0.02 * rng.standard_normal((channels, feat_h, feat_w))),
        patch=patch,
    )


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(3, H_img, W_img) -> (H*W, 3*P*P) with patches in row-major order."""
    c, hi, wi = image.shape
    if hi % patch or wi % patch:
        raise ValueError(f"image size {hi}x{wi} is not divisible by patch size {patch}")
    h, w = hi // patch, wi // patch
    x = image.reshape(c, h, patch, w, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(h * w, c * patch * patch)


def encode_image(image: np.ndarray, params: EncoderParams) -> Tensor:
    """Patch embedding followed by two residual per-position MLP blocks; returns C x H x W."""
    p = params.patch
    rows = Tensor(patchify(np.asarray(image, dtype=params.patch_w.data.dtype), p))
    x = E.matmul(rows, E.transpose(params.patch_w)) + params.patch_b
    for blk in params.blocks:
        hidden = E.relu(E.matmul(E.layer_norm(x, blk.ln_g, blk.ln_b), E.transpose(blk.w1)) + blk.b1)
        x = x + E.matmul(hidden, E.transpose(blk.w2)) + blk.b2
    h, w = image.shape[1] // p, image.shape[2] // p
    return E.reshape(E.transpose(x), (x.shape[1], h, w))


def add_positional(feature: Tensor, pos: Tensor) -> Tensor:
    if feature.shape != pos.shape:
        raise DimensionError(f"feature {feature.shape} and positional encoding {pos.shape} differ")
    return feature + pos


def node_index(h: int, w: int, width: int) -> int:
    """1-based node index of 1-based grid position (h, w)."""
    return (h - 1) * width + w


def cosine_edges(nodes: Tensor, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarity of the columns of a C x M node matrix."""
    unit = nodes / E.l2_norm(nodes, axis=0, eps=eps)
    return E.matmul(E.transpose(unit), unit)


def cosine_edges_array(nodes: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    unit = nodes / np.sqrt((nodes * nodes).sum(axis=0, keepdims=True) + eps * eps)
    return unit.T @ unit


def topk_neighbors(edges: np.ndarray, k: int) -> np.ndarray:
    """Indices (M x k) of the k largest off-diagonal edges per row.

    Ties at the cut-off go to the lower index.  Columns come out in ascending
    index order, not by similarity.
    """
    m = edges.shape[0]
    if not 1 <= k <= m - 1:
        raise ValueError(f"k must lie in [1, {m - 1}], got {k}")
    scores = np.array(edges, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise FloatingPointError("edge weights contain non-finite values")
    np.fill_diagonal(scores, -np.inf)
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1:k]
    above = scores > kth
    tied = scores == kth
    room = k - above.sum(axis=1, keepdims=True)
    chosen = above | (tied & (np.cumsum(tied, axis=1) <= room))
    return np.nonzero(chosen)[1].reshape(m, k)


def topk_adjacency(edges, k: int) -> np.ndarray:
    edges = edges.data if isinstance(edges, Tensor) else np.asarray(edges)
    idx = topk_neighbors(edges, k)
    adj = np.zeros(edges.shape, dtype=bool)
    np.put_along_axis(adj, idx, True, axis=1)
    return adj


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Average-pool a binary image mask to h x w and threshold at 0.5 (ties count as foreground)."""
    mask = np.asarray(mask, dtype=np.float64)
    hi, wi = mask.shape
    if hi % h or wi % w:
        raise ValueError(f"mask {hi}x{wi} cannot be pooled to {h}x{w}")
    pooled = mask.reshape(h, hi // h, w, wi // w).mean(axis=(1, 3))
    return pooled >= 0.5


def extract_support_subgraph(nodes: Tensor, mask: np.ndarray, n: int,
                             gather_foreground: bool = False) -> Tensor:
    """Masked support nodes pooled to C x n.

    By default the mask multiplies the full map and background zeros take part
    in the bin averages.  ``gather_foreground`` instead pools only the
    foreground columns.
    """
    c, h, w = nodes.shape
    fg = resize_mask(mask, h, w)
    if not fg.any():
        raise EpisodeSkip("support foreground is empty at feature resolution")
    flat = E.reshape(nodes, (c, h * w))
    if gather_foreground:
        cols = np.flatnonzero(fg.reshape(-1))
        picked = E.index_select(flat, (slice(None), cols))
        return E.adaptive_avg_pool_1d(picked, n, allow_upsample=True)
    masked = E.masked_zero(flat, fg.reshape(1, -1))
    return E.adaptive_avg_pool_1d(masked, n)
