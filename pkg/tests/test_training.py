import dataclasses
import io
import math

import numpy as np
import pytest

import cgraph.engine as E
from cgraph.config import TrainConfig
from cgraph.engine import Tensor, TrainingError
from cgraph.graph import EpisodeSkip
from cgraph.model import forward, init_model
from cgraph.training import (
    boundary_band,
    default_sampler,
    episode_losses,
    eval_episodes,
    evaluate_dsc,
    evaluate_suite,
    fixed_sampler,
    predict,
    seg_loss,
    sub_seed,
    total_loss,
    train_loop,
)

import oracles

SMALL = TrainConfig(channels=8, canvas=32, patch=4, nodes=16, k=3, iterations=3, patients=20,
                    eval_episodes=3)


def test_seg_loss_at_half():
    gt = np.array([[1, 0], [0, 0]])
    assert seg_loss(Tensor(np.full((2, 2), 0.5)), gt).item() == pytest.approx(math.log(2), abs=1e-15)


def test_seg_loss_perfect_prediction():
    gt = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert seg_loss(Tensor(gt), gt).item() <= -math.log(1 - 1e-7) + 1e-15


def test_seg_loss_hand_summed():
    fg = np.array([[0.9, 0.2], [0.4, 0.7]])
    gt = np.array([[1, 0], [1, 0]])
    terms = [-math.log(0.9), -math.log(0.8), -math.log(0.4), -math.log(0.3)]
    assert seg_loss(Tensor(fg), gt).item() == pytest.approx(sum(terms) / 4, rel=1e-12)


def test_total_loss_values():
    seg, cnc = Tensor(0.5), Tensor(2.0)
    assert total_loss(seg, cnc, 0.0).item() == 0.5
    assert total_loss(seg, cnc, 0.01).item() == pytest.approx(0.52, rel=1e-15)


def test_total_loss_gradient_is_weighted_sum(rng):
    x0 = rng.standard_normal(4)

    def grad(fn):
        x = Tensor(x0, requires_grad=True)
        fn(x).backward()
        return x.grad

    seg = lambda x: E.reduce_sum(E.tanh(x))  # noqa: E731
    cnc = lambda x: E.reduce_mean(x * x)  # noqa: E731
    combined = grad(lambda x: total_loss(seg(x), cnc(x), 0.01))
    assert np.allclose(combined, grad(seg) + 0.01 * grad(cnc), atol=1e-15)


def test_zero_alpha_skips_contrast_without_changing_gradients():
    cfg = dataclasses.replace(SMALL, alpha=0.0)
    params = init_model(cfg)
    episode = default_sampler(cfg)(0, 0)
    named = params.named()
    episode_losses(params, cfg, episode).total.backward()
    skipped = {k: p.grad.copy() for k, p in named.items() if p.grad is not None}
    for p in named.values():
        p.grad = None
    full = dataclasses.replace(cfg, alpha=1.0)
    losses = episode_losses(params, full, episode)
    total_loss(losses.seg, losses.cnc, 0.0).backward()
    for k, g in skipped.items():
        assert np.allclose(named[k].grad, g, atol=1e-14), k


def test_zero_iterations_keep_initialisation():
    cfg = dataclasses.replace(SMALL, iterations=0)
    params, records = train_loop(cfg)
    fresh = init_model(cfg)
    assert records == []
    for name, t in params.named().items():
        assert np.array_equal(t.data, fresh.named()[name].data)


def test_metrics_identical_across_runs():
    texts = []
    for _ in range(2):
        buf = io.StringIO()
        train_loop(SMALL, metrics_out=buf)
        texts.append(buf.getvalue())
    assert texts[0] == texts[1]
    lines = texts[0].splitlines()
    assert lines[0] == "iter,loss_seg,loss_cnc,loss_total,lr"
    assert len(lines) == SMALL.iterations + 1


def test_training_changes_parameters():
    params, records = train_loop(SMALL)
    fresh = init_model(SMALL)
    assert any(not np.array_equal(t.data, fresh.named()[n].data) for n, t in params.named().items())
    assert all(r.lr == 1e-3 for r in records)


def test_skipped_episode_is_resampled():
    good = default_sampler(SMALL)(0, 0)
    calls = []

    def sampler(iteration, attempt):
        calls.append((iteration, attempt))
        if attempt == 0:
            raise EpisodeSkip("empty")
        return good

    train_loop(dataclasses.replace(SMALL, iterations=2), sampler)
    assert calls == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_non_finite_loss_reports_iteration():
    ep = default_sampler(SMALL)(0, 0)
    bad = dataclasses.replace(ep, query_image=np.full_like(ep.query_image, np.nan))
    with pytest.raises(TrainingError, match="iteration 0"):
        train_loop(SMALL, fixed_sampler(bad))


def test_sub_seed_deterministic():
    assert sub_seed(3, 1, 2) == sub_seed(3, 1, 2)
    assert sub_seed(3, 1, 2) != sub_seed(3, 2, 1)


def test_dice_hand_cases():
    a = np.zeros((4, 4), dtype=bool)
    a[0] = True
    b = np.zeros((4, 4), dtype=bool)
    b[0, :2] = True
    b[1, :2] = True
    assert evaluate_dsc(a, a) == 100.0
    assert evaluate_dsc(a, ~a) == 0.0
    assert evaluate_dsc(a, b) == 50.0
    assert evaluate_dsc(np.zeros((2, 2)), np.zeros((2, 2))) == 100.0


def test_dice_matches_oracle_1000(rng):
    mismatches = 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 9, size=2))
        p = rng.random(shape) < rng.random()
        g = rng.random(shape) < rng.random()
        mismatches += evaluate_dsc(p, g) != oracles.dice_percent(p, g)
        mismatches += evaluate_dsc(p, g) != evaluate_dsc(g, p)
    assert mismatches == 0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate_dsc(np.zeros((2, 2)), np.zeros((2, 3)))


@pytest.fixture(scope="module")
def small_model():
    return init_model(SMALL)


def test_suite_single_shot_equals_direct_path(small_model):
    ep = eval_episodes(SMALL, 1)[0]
    with E.no_grad():
        direct = forward(small_model, SMALL, ep.supports, ep.query_image).prediction.mask
    result = evaluate_suite(small_model, SMALL, [ep])
    assert result.mean == evaluate_dsc(direct, ep.query_mask) == result.rows[0].dsc


def test_suite_order_independent_and_threaded(small_model, monkeypatch):
    eps = eval_episodes(SMALL, 4)
    forward_result = evaluate_suite(small_model, SMALL, eps)
    backward_result = evaluate_suite(small_model, SMALL, eps[::-1])
    assert forward_result.mean == pytest.approx(backward_result.mean, abs=1e-12)
    assert forward_result.per_class == pytest.approx(backward_result.per_class)
    monkeypatch.setenv("CGRAPH_THREADS", "3")
    threaded = evaluate_suite(small_model, SMALL, eps)
    assert [r.dsc for r in threaded.rows] == [r.dsc for r in forward_result.rows]


def test_eval_episodes_shots_and_count():
    eps = eval_episodes(SMALL, 2, shots=5)
    assert len(eps) == 2 and all(len(e.supports) == 5 for e in eps)
    with pytest.raises(ValueError):
        eval_episodes(SMALL, 0)


def test_predict_mask_at_image_resolution(small_model):
    ep = eval_episodes(SMALL, 1)[0]
    assert predict(small_model, SMALL, ep).prediction.mask.shape == (32, 32)


def test_boundary_band():
    gt = np.zeros((9, 9), dtype=bool)
    gt[2:7, 2:7] = True
    band = boundary_band(gt, 1)
    assert band[2, 2] and band[1, 4] and not band[4, 4] and not band[0, 0]


def test_float32_training_runs():
    cfg = dataclasses.replace(SMALL, precision="float32", iterations=2)
    params, records = train_loop(cfg)
    assert all(t.data.dtype == np.float32 for t in params.named().values())
    assert all(np.isfinite(r.loss_total) for r in records)
