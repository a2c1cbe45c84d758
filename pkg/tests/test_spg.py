import numpy as np
import pytest

import cgraph.engine as E
from cgraph.engine import Tensor, gradcheck_params
from cgraph.graph import FeatureGraph
from cgraph.spg import (
    ForwardTrace,
    gsm_stage,
    init_stack,
    init_transformer,
    isi_stage,
    k_schedule,
    max_relative,
    sinusoidal_posenc,
    spg_forward,
    spg_layer,
    ssl_stage,
    transformer_block,
)

import oracles


def _layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def test_single_key_gets_full_weight(rng):
    params = init_transformer(rng, 8)
    trace = ForwardTrace()
    transformer_block(Tensor(rng.standard_normal((8, 5))), Tensor(rng.standard_normal((8, 1))), params, trace)
    assert np.array_equal(trace.attentions[0], np.ones((5, 1)))


def test_zero_query_key_weights_give_uniform_attention(rng):
    params = init_transformer(rng, 8)
    params.w_q.data[:] = 0
    params.w_k.data[:] = 0
    trace = ForwardTrace()
    transformer_block(Tensor(rng.standard_normal((8, 3))), Tensor(rng.standard_normal((8, 7))), params, trace)
    assert np.allclose(trace.attentions[0], 1 / 7, atol=1e-15)


def test_attention_rows_and_gradcheck(rng):
    params = init_transformer(rng, 4)
    q, kv = rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
    trace = ForwardTrace()
    transformer_block(Tensor(q), Tensor(kv), params, trace)
    assert np.all(np.abs(trace.attentions[0].sum(axis=1) - 1) <= 1e-6)
    r = rng.standard_normal((4, 3))
    named = {f: getattr(params, f) for f in ("w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_b2", "ln1_g", "ln2_b")}
    err = gradcheck_params(lambda p: E.reduce_sum(transformer_block(Tensor(q), Tensor(kv), params) * r), named)
    assert max(err.values()) < 1e-4


def test_ssl_single_node_is_ffn_path(rng):
    params = init_transformer(rng, 8)
    x = rng.standard_normal((8, 1))
    row = x.T
    h = _layer_norm(row + row @ params.w_v.data @ params.w_o.data)
    hidden = np.maximum(h @ params.ffn_w1.data.T + params.ffn_b1.data, 0)
    expected = _layer_norm(h + hidden @ params.ffn_w2.data.T + params.ffn_b2.data).T
    assert np.allclose(ssl_stage(Tensor(x), params).data, expected, atol=1e-12)


@pytest.mark.parametrize("n", [1, 16, 64])
def test_ssl_keeps_shape(rng, n):
    assert ssl_stage(Tensor(rng.standard_normal((8, n))), init_transformer(rng, 8)).shape == (8, n)


def test_ssl_permutation_equivariant(rng):
    params = init_transformer(rng, 8)
    x = rng.standard_normal((8, 10))
    perm = rng.permutation(10)
    out = ssl_stage(Tensor(x), params).data
    assert np.allclose(ssl_stage(Tensor(x[:, perm]), params).data, out[:, perm], atol=1e-12)


def test_posenc_origin():
    pe = sinusoidal_posenc(16, 4, 4)
    origin = pe[:, 0, 0]
    assert np.all(origin[0::2] == 0) and np.all(origin[1::2] == 1)


def test_posenc_pure():
    assert np.array_equal(sinusoidal_posenc(64, 16, 16), sinusoidal_posenc(64, 16, 16))


def test_posenc_positions_distinct():
    flat = sinusoidal_posenc(64, 16, 16).reshape(64, -1).T
    assert len({tuple(np.round(v, 12)) for v in flat}) == 256


def test_posenc_requires_channels_multiple_of_four():
    with pytest.raises(ValueError):
        sinusoidal_posenc(6, 2, 2)


def test_isi_single_linked_node(rng):
    params = init_transformer(rng, 8)
    trace = ForwardTrace()
    q, s = isi_stage(Tensor(rng.standard_normal((8, 3, 3))), Tensor(rng.standard_normal((8, 3, 3))),
                     Tensor(rng.standard_normal((8, 1))), params, trace)
    assert q.shape == s.shape == (8, 3, 3)
    assert all(np.array_equal(a, np.ones((9, 1))) for a in trace.attentions)


def test_isi_gradient_flows_from_both_paths(rng):
    params = init_transformer(rng, 8)
    q0, s0, link = (rng.standard_normal(s) for s in ((8, 2, 2), (8, 2, 2), (8, 3)))
    rq, rs = rng.standard_normal((8, 2, 2)), rng.standard_normal((8, 2, 2))

    def grad_wv(use_q, use_s):
        params.w_v.requires_grad = True
        params.w_v.grad = None
        q, s = isi_stage(Tensor(q0), Tensor(s0), Tensor(link), params)
        loss = E.reduce_sum(q * (rq * use_q)) + E.reduce_sum(s * (rs * use_s))
        loss.backward()
        return params.w_v.grad.copy()

    both, only_q, only_s = grad_wv(1, 1), grad_wv(1, 0), grad_wv(0, 1)
    assert np.abs(only_q).max() > 0 and np.abs(only_s).max() > 0
    assert np.allclose(both, only_q + only_s, atol=1e-12)


def _gsm_params(rng, c):
    stack = init_stack(rng, c, 1, 3)
    return stack[0]


def test_gsm_zero_projection_is_identity(rng):
    layer = _gsm_params(rng, 8)
    layer.w_phi.data[:] = 0
    nodes = rng.standard_normal((8, 3, 3))
    out = gsm_stage(FeatureGraph(Tensor(nodes)), layer.w_phi, layer.gsm_ln_g, layer.gsm_ln_b, 3)
    assert np.array_equal(out.nodes.data, nodes)


def test_max_relative_zero_for_identical_nodes(rng):
    rows = np.tile(rng.standard_normal(5), (6, 1))
    idx = np.array([[j for j in range(6) if j != i][:3] for i in range(6)])
    assert np.array_equal(max_relative(Tensor(rows), idx).data, np.zeros((6, 5)))


def test_gsm_four_node_instance_matches_oracle():
    rows = np.array([[1.0, 0.0, 2.0], [0.9, 0.1, 1.5], [-1.0, 2.0, 0.0], [0.2, -0.5, 1.0]])
    from cgraph.graph import cosine_edges_array, topk_neighbors

    idx = topk_neighbors(cosine_edges_array(rows.T), 2)
    assert np.allclose(max_relative(Tensor(rows), idx).data, oracles.max_relative(rows, 2), atol=1e-12)


def test_k_schedule():
    assert k_schedule(9, 3) == [9, 14, 18]
    assert k_schedule(4, 1) == [4]


def _stack_inputs(rng, c=8, hw=4, depth=3, k=3):
    stack = init_stack(rng, c, depth, k)
    support = rng.standard_normal((c, hw, hw))
    query = rng.standard_normal((c, hw, hw))
    mask = np.zeros((hw * 2, hw * 2))
    mask[2:6, 1:7] = 1
    return stack, support, query, mask


def test_single_layer_stack_is_one_pass(rng):
    stack, support, query, mask = _stack_inputs(rng, depth=1)
    s_out, q_out, _ = spg_forward(FeatureGraph(Tensor(support)), FeatureGraph(Tensor(query)), mask, stack, n=8)
    s_ref, q_ref, _ = spg_layer(Tensor(support), Tensor(query), mask, stack[0], 8)
    assert np.array_equal(s_out.nodes.data, s_ref.data)
    assert np.array_equal(q_out.nodes.data, q_ref.data)


def test_stack_gradcheck_on_4x4_map(rng):
    stack, support, query, mask = _stack_inputs(rng)
    s_leaf, q_leaf = Tensor(support, requires_grad=True), Tensor(query, requires_grad=True)
    r = rng.standard_normal((8, 4, 4))

    def loss(p):
        _, q_out, _ = spg_forward(FeatureGraph(p["support"]), FeatureGraph(p["query"]), mask, stack, n=8)
        return E.reduce_sum(E.tanh(q_out.nodes) * r)

    named = {"support": s_leaf, "query": q_leaf, "w_phi": stack[1].w_phi,
             "ssl_wq": stack[0].ssl.w_q, "isi_wv": stack[2].isi.w_v}
    assert max(gradcheck_params(loss, named).values()) < 1e-4


def test_stack_adjacency_counts_and_determinism(rng):
    stack, support, query, mask = _stack_inputs(rng, k=3)
    trace = ForwardTrace()
    a = spg_forward(FeatureGraph(Tensor(support)), FeatureGraph(Tensor(query)), mask, stack, 8, trace=trace)
    b = spg_forward(FeatureGraph(Tensor(support)), FeatureGraph(Tensor(query)), mask, stack, 8)
    assert np.array_equal(a[1].nodes.data, b[1].nodes.data)
    ks = k_schedule(3, 3)
    for layer, _, idx in trace.adjacencies:
        assert idx.shape == (16, ks[layer - 1])
        assert not np.any(idx == np.arange(16)[:, None])
        assert all(len(set(row)) == len(row) for row in idx.tolist())
    for attn in trace.attentions:
        assert np.all(np.abs(attn.sum(axis=1) - 1) <= 1e-6)
