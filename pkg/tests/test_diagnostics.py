import numpy as np
import pytest

import cgraph.engine as E
from cgraph.config import TrainConfig
from cgraph.graph import resize_mask
from cgraph.model import forward
from cgraph.spg import ForwardTrace
from cgraph.synth import sample_episode
from cgraph.training import dataset_spec, fixed_sampler, train_loop
from cgraph.diagnostics import (
    StatError,
    build_export,
    export_graph,
    format_export,
    parse_export,
    pca_project,
    subgraph_stats,
)


def _eig_oracle(x, dims):
    centered = x - x.mean(axis=1, keepdims=True)
    vals, vecs = np.linalg.eigh(centered @ centered.T / x.shape[1])
    order = np.argsort(vals)[::-1][:dims]
    return vecs[:, order].T @ centered


def test_pca_collinear_points():
    t = np.linspace(-1, 1, 20)
    x = np.outer([1.0, 2.0, -1.0], t) + np.array([[0.5], [0.1], [3.0]])
    out = pca_project(x, 3)
    assert np.var(out[0]) == pytest.approx(np.var(x - x.mean(axis=1, keepdims=True), axis=1).sum())
    assert np.allclose(out[1:], 0)


def test_pca_zero_mean(rng):
    out = pca_project(rng.standard_normal((6, 30)) + 4.0, 3)
    assert np.allclose(out.mean(axis=1), 0, atol=1e-12)


def test_pca_matches_eigendecomposition(rng):
    for _ in range(5):
        x = rng.standard_normal((8, 50)) * rng.uniform(0.5, 3.0, (8, 1))
        ours, ref = pca_project(x, 3), _eig_oracle(x, 3)
        for a, b in zip(ours, ref):
            sign = 1.0 if a @ b >= 0 else -1.0
            assert np.max(np.abs(a - sign * b)) < 1e-6


def test_pca_components_orthogonal(rng):
    out = pca_project(rng.standard_normal((8, 50)), 3)
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(out[i] @ out[j]) < 1e-6


def test_pca_sign_convention(rng):
    x = rng.standard_normal((5, 40))
    assert np.array_equal(pca_project(x, 2), pca_project(x, 2))
    assert np.array_equal(pca_project(x, 2), pca_project(x.copy(), 2))


def test_pca_pads_rank_deficiency():
    x = np.zeros((4, 10))
    x[0] = np.arange(10)
    assert np.array_equal(pca_project(x, 3)[1:], np.zeros((2, 10)))


def test_pca_requires_enough_columns():
    with pytest.raises(ValueError):
        pca_project(np.zeros((3, 2)), 3)


def _graph(rng, c=6, h=4, w=5):
    nodes = rng.standard_normal((c, h, w))
    gt = np.zeros((h, w), dtype=bool)
    gt[1:3, 1:4] = True
    return nodes, gt


def test_export_counts_and_ordering(rng, tmp_path):
    nodes, gt = _graph(rng)
    export_graph(nodes, gt, 4, 1, tmp_path / "g.txt")
    lines = (tmp_path / "g.txt").read_text().splitlines()
    node_lines = [l for l in lines if l.startswith("NODE")]
    edge_lines = [l for l in lines if l.startswith("EDGE")]
    assert len(node_lines) == 20 and len(edge_lines) == 20 * 4
    edges = [tuple(map(int, l.split()[1:3])) for l in edge_lines]
    assert edges == sorted(edges)
    assert all(1 <= s <= 20 and 1 <= t <= 20 and s != t for s, t in edges)
    first = node_lines[6].split()
    assert first[1:5] == ["7", "2", "2", "1"]


def test_export_deterministic(rng, tmp_path):
    nodes, gt = _graph(rng)
    export_graph(nodes, gt, 3, 2, tmp_path / "a")
    export_graph(nodes.copy(), gt, 3, 2, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_export_round_trip(rng):
    nodes, gt = _graph(rng)
    export = build_export(nodes, gt, 3, 1)
    parsed = parse_export(format_export(export), layer=1)
    assert [r[:4] for r in parsed.nodes] == [r[:4] for r in export.nodes]
    for a, b in zip(parsed.nodes, export.nodes):
        assert [f"{v:.9g}" for v in a[4:]] == [f"{v:.9g}" for v in b[4:]]
    assert [(s, t, f"{w:.9g}") for s, t, w in parsed.edges] == [(s, t, f"{w:.9g}") for s, t, w in export.edges]
    assert format_export(parsed) == format_export(export)


def test_export_rejects_layer_zero(rng):
    nodes, gt = _graph(rng)
    with pytest.raises(ValueError):
        build_export(nodes, gt, 3, 0)


def test_export_io_error_names_path(rng, tmp_path):
    nodes, gt = _graph(rng)
    target = tmp_path / "missing_dir" / "g.txt"
    with pytest.raises(OSError, match="missing_dir"):
        export_graph(nodes, gt, 3, 1, target)


def test_compactness_identical_nodes():
    nodes = np.tile(np.array([1.0, -2.0, 0.5])[:, None, None], (1, 3, 3))
    gt = np.zeros((3, 3), dtype=bool)
    gt[0] = True
    stats = subgraph_stats(nodes, gt)
    assert stats.intra == pytest.approx(1.0) and stats.inter == pytest.approx(1.0)
    assert stats.gap == pytest.approx(0.0, abs=1e-12)


def test_compactness_orthogonal_clusters():
    nodes = np.zeros((2, 2, 3))
    nodes[0, 0, :] = 1.0
    nodes[1, 1, :] = 2.0
    gt = np.array([[True] * 3, [False] * 3])
    stats = subgraph_stats(nodes, gt)
    assert (stats.intra, stats.inter) == (pytest.approx(1.0), pytest.approx(0.0))
    assert stats.gap == pytest.approx(1.0)


@pytest.mark.parametrize("fill", [True, False])
def test_compactness_needs_two_classes(rng, fill):
    with pytest.raises(StatError):
        subgraph_stats(rng.standard_normal((3, 2, 2)), np.full((2, 2), fill))


@pytest.fixture(scope="module")
def overfit_stats():
    """Per-layer compactness of the query graph after 100 steps on one fixed episode, 3 seeds."""
    out = {}
    for seed in (0, 1, 2):
        cfg = TrainConfig(iterations=100, seed=seed)
        ep = sample_episode(dataset_spec(cfg), "A", 1, 1, seed=5)
        params, _ = train_loop(cfg, fixed_sampler(ep))
        trace = ForwardTrace()
        with E.default_dtype(np.float64), E.no_grad():
            forward(params, cfg, ep.supports, ep.query_image, trace)
        gt = resize_mask(ep.query_mask, *cfg.feature_hw)
        out[seed] = [subgraph_stats(nodes, gt) for nodes in trace.query_nodes]
    return out


def test_trained_intra_exceeds_inter(overfit_stats):
    for stats in overfit_stats.values():
        assert len(stats) == 3
        assert all(s.intra > s.inter for s in stats)


def test_trained_gap_grows_with_depth(overfit_stats):
    grows = [all(b.gap >= a.gap for a, b in zip(stats, stats[1:])) for stats in overfit_stats.values()]
    assert sum(grows) >= 2
