"""Parameter container and the end-to-end episode forward pass."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .config import TrainConfig
from .engine import Tensor
from .graph import EncoderParams, FeatureGraph, add_positional, encode_image, init_encoder
from .smd import Prediction, SMDParams, init_smd, prototypical_baseline, smd_forward
from .spg import ForwardTrace, SPGLayerParams, init_stack, spg_forward
from .graph import extract_support_subgraph


@dataclass
class ModelParams:
    encoder: EncoderParams
    spg: list[SPGLayerParams]
    smd: SMDParams | None

    def named(self) -> dict[str, Tensor]:
        """Every learnable tensor under a stable dotted name."""
        out: dict[str, Tensor] = {}
        _collect(self, "", out)
        return out


def _collect(obj, prefix: str, out: dict[str, Tensor]) -> None:
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _collect(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, out)
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            _collect(item, f"{prefix}.{i}", out)


def init_model(cfg: TrainConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed if seed is None else seed, 7]))
    h, w = cfg.feature_hw
    with E.default_dtype(cfg.dtype):
        params = ModelParams(
            encoder=init_encoder(rng, cfg.channels, cfg.patch, h, w),
            spg=init_stack(rng, cfg.channels, cfg.depth, cfg.k),
            smd=init_smd(rng, cfg.channels, cfg.nodes) if cfg.decoder == "smd" else None,
        )
    for t in params.named().values():
        t.data = t.data.astype(cfg.dtype)
    return params


@dataclass
class ForwardResult:
    prediction: Prediction
    query_nodes: Tensor  # final-layer query nodes, C x H x W
    support_nodes: list[Tensor]
    trace: ForwardTrace | None = None
    linked: list[Tensor] = field(default_factory=list)


def embed(image: np.ndarray, params: ModelParams) -> Tensor:
    return add_positional(encode_image(image, params.encoder), params.encoder.pos)


def forward(params: ModelParams, cfg: TrainConfig, supports: list[tuple[np.ndarray, np.ndarray]],
            query_image: np.ndarray, trace: ForwardTrace | None = None) -> ForwardResult:
    """Encode, run the SPG stack per support shot, then decode the query.

    With several shots the SPG stack runs once per shot; the query node maps
    are averaged and the support subgraphs are averaged inside the matching step.
    """
    image_hw = query_image.shape[1:]
    gather = cfg.pool == "gather"
    query0 = FeatureGraph(embed(query_image.astype(cfg.dtype), params))
    query_outs, support_outs, linked = [], [], []
    for image, mask in supports:
        support0 = FeatureGraph(embed(image.astype(cfg.dtype), params))
        s_out, q_out, last_linked = spg_forward(support0, query0, mask, params.spg, cfg.nodes,
                                                gather, trace)
        query_outs.append(q_out.nodes)
        support_outs.append(s_out.nodes)
        linked.append(last_linked)
    query_nodes = query_outs[0]
    if len(query_outs) > 1:
        total = query_outs[0]
        for q in query_outs[1:]:
            total = total + q
        query_nodes = E.scale(total, 1.0 / len(query_outs))
    masks = [m for _, m in supports]
    if cfg.decoder == "prototype":
        pred = prototypical_baseline(support_outs, masks, query_nodes, image_hw)
    else:
        subgraphs = [extract_support_subgraph(s, m, cfg.nodes, gather)
                     for s, m in zip(support_outs, masks)]
        pred = smd_forward(subgraphs, query_nodes, params.smd, image_hw)
    return ForwardResult(pred, query_nodes, support_outs, trace, linked)
