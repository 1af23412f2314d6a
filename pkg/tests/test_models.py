import math

import numpy as np
import pytest

from csagat import tensor as T
from csagat.csa import dummy_attention, identity_attention
from csagat.graph import Graph, synthetic_planted
from csagat.models import (
    GAT,
    GCN,
    MLP,
    AttentionMap,
    GatLayerParams,
    gat_layer_forward,
    gat_scores,
    init_gat_layer,
    load_checkpoint,
    model_forward,
    parameters,
    save_checkpoint,
)
from csagat.tensor import Tensor
from fdcheck import numerical_grad, rel_error


@pytest.fixture
def small_graph():
    rng = np.random.default_rng(0)
    n = 5
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 3), (1, 4)]
    return Graph.from_edges(rng.normal(size=(n, 3)), rng.integers(0, 2, n), pairs, class_count=2)


def leaky(x, s):
    return x if x > 0 else s * x


# ---------------------------------------------------------------- scores


def test_zero_attention_vector_gives_zero_scores_and_uniform_weights(small_graph):
    layer = init_gat_layer(np.random.default_rng(1), 3, 4, heads=2)
    for a in layer.a:
        a.data[:] = 0.0
    for s in gat_scores(Tensor(small_graph.features), layer, small_graph):
        assert np.all(s.data == 0)
    _, att, _ = gat_layer_forward(Tensor(small_graph.features), layer, small_graph)
    np.testing.assert_allclose(att.values, dummy_attention(small_graph, 2).values, atol=1e-15)


def test_singleton_self_loop_gets_all_attention():
    g = Graph.from_edges(np.array([[0.3, -2.0]]), np.array([0]), [])
    layer = init_gat_layer(np.random.default_rng(2), 2, 3, heads=3)
    _, att, _ = gat_layer_forward(Tensor(g.features), layer, g)
    np.testing.assert_array_equal(att.values, np.ones((3, 1)))


def test_scores_match_dense_per_edge_oracle(small_graph):
    g = small_graph
    layer = init_gat_layer(np.random.default_rng(3), 3, 4, heads=2)
    h = g.features
    scores = gat_scores(Tensor(h), layer, g)
    for k in range(2):
        W, a = layer.W[k].data, layer.a[k].data
        for e, (j, i) in enumerate(zip(g.src, g.dst)):
            wi, wj = h[i] @ W, h[j] @ W
            expected = leaky(float(np.dot(a, np.concatenate([wi, wj]))), 0.2)
            assert abs(scores[k].data[e] - expected) < 1e-12


# ---------------------------------------------------------------- aggregation


def test_dummy_override_is_mean_aggregation(small_graph):
    g = small_graph
    layer = init_gat_layer(np.random.default_rng(4), 3, 4, heads=2, head_merge="concat", activation=None)
    out, _, _ = gat_layer_forward(Tensor(g.features), layer, g, dummy_attention(g, 2))
    for k in range(2):
        z = g.features @ layer.W[k].data
        for i in range(g.n):
            nbrs = [int(j) for j, d in zip(g.src, g.dst) if d == i]
            expected = sum(z[j] for j in nbrs) / len(nbrs)
            np.testing.assert_allclose(out.data[i, 4 * k : 4 * k + 4], expected, atol=1e-12, rtol=0)


def test_identity_override_returns_projection_exactly(small_graph):
    g = small_graph
    layer = init_gat_layer(np.random.default_rng(5), 3, 4, heads=3, head_merge="concat", activation=None)
    out, _, _ = gat_layer_forward(Tensor(g.features), layer, g, identity_attention(g, 3))
    expected = np.concatenate([g.features @ w.data for w in layer.W], axis=1)
    assert np.array_equal(out.data, expected)


def test_factual_attention_rows_sum_to_one(small_graph):
    layer = init_gat_layer(np.random.default_rng(6), 3, 4, heads=4)
    _, att, _ = gat_layer_forward(Tensor(small_graph.features), layer, small_graph)
    att.validate(small_graph)
    np.testing.assert_allclose(att.row_sums(small_graph), 1.0, atol=1e-12)


def test_override_equal_to_factual_reproduces_output(small_graph):
    layer = init_gat_layer(np.random.default_rng(7), 3, 4, heads=2)
    h = Tensor(small_graph.features)
    out, att, _ = gat_layer_forward(h, layer, small_graph)
    again, _, _ = gat_layer_forward(h, layer, small_graph, att)
    np.testing.assert_allclose(again.data, out.data, atol=1e-9, rtol=0)


def test_override_blocks_gradient(small_graph):
    layer = init_gat_layer(np.random.default_rng(8), 3, 4, heads=2)
    for p in layer.parameters():
        p.zero_grad()
    with T.new_tape():
        out, _, live = gat_layer_forward(Tensor(small_graph.features), layer, small_graph, dummy_attention(small_graph, 2))
        T.backward(T.sum(out))
    assert live is None
    assert all(np.all(a.grad == 0) for a in layer.a)
    assert any(np.any(w.grad != 0) for w in layer.W)


def test_override_length_checked(small_graph):
    layer = init_gat_layer(np.random.default_rng(9), 3, 4, heads=1)
    with pytest.raises(ValueError, match="edges"):
        gat_layer_forward(Tensor(small_graph.features), layer, small_graph, AttentionMap(np.ones((1, 3))))


def test_layer_input_shape_checked(small_graph):
    layer = init_gat_layer(np.random.default_rng(9), 3, 4, heads=1)
    with pytest.raises(T.ShapeError):
        gat_scores(Tensor(np.ones((5, 2))), layer, small_graph)


# ---------------------------------------------------------------- models


def test_mlp_ignores_edges(small_graph):
    mlp = MLP(3, 2, hidden=6, rng=np.random.default_rng(0))
    denser = Graph.from_edges(small_graph.features, small_graph.labels, [(i, j) for i in range(5) for j in range(i)])
    a, _ = model_forward(mlp, small_graph)
    b, _ = model_forward(mlp, denser)
    assert np.array_equal(a.data, b.data)


def test_one_layer_gat_hand_computed():
    g = Graph.from_edges(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), [(0, 1)])
    model = GAT(2, 2, num_layers=1, out_heads=1, dropout=0.0, attn_dropout=0.0)
    layer = model.layers[0]
    layer.W[0].data = np.eye(2)
    layer.a[0].data = np.array([0.0, 0.0, 1.0, 0.0])  # score = first feature of the source
    logits, traces = model_forward(model, g)
    e = math.e
    expected = np.array([[e / (1 + e), 1 / (1 + e)]] * 2)
    np.testing.assert_allclose(logits.data, expected, atol=1e-15)
    assert len(traces) == 1 and traces[0].layer_index == 0


def test_eval_forward_is_deterministic(small_graph):
    model = GAT(3, 2, rng=np.random.default_rng(1))
    a, _ = model_forward(model, small_graph)
    b, _ = model_forward(model, small_graph)
    assert a.data.tobytes() == b.data.tobytes()


def test_train_mode_needs_rng_and_uses_dropout(small_graph):
    model = GAT(3, 2, rng=np.random.default_rng(1))
    with pytest.raises(ValueError):
        model_forward(model, small_graph, train_mode=True)
    a, _ = model_forward(model, small_graph, train_mode=True, rng=np.random.default_rng(0))
    b, _ = model_forward(model, small_graph)
    assert not np.allclose(a.data, b.data)


def test_overrides_rejected_for_non_attention_models(small_graph):
    for model in (MLP(3, 2), GCN(3, 2)):
        with pytest.raises(ValueError, match="attention"):
            model_forward(model, small_graph, overrides={0: dummy_attention(small_graph)})


def test_traces_hold_factual_attention(small_graph):
    model = GAT(3, 2, heads=3, rng=np.random.default_rng(2))
    _, traces = model_forward(model, small_graph)
    assert [t.attention.heads for t in traces] == [3, 1]
    for t in traces:
        t.attention.validate(small_graph)
    assert traces[0].input_features.shape == (5, 3)
    assert traces[1].input_features is traces[0].output_features


@pytest.mark.parametrize("kind", ["gat", "gcn", "mlp"])
def test_permutation_equivariance(kind):
    g, _ = synthetic_planted(blocks=3, nodes_per_block=6, p_informative=0.5, p_noise=0.1, feature_dim=4, seed=3)
    model = {"gat": GAT, "gcn": GCN, "mlp": MLP}[kind](4, 3, rng=np.random.default_rng(5))
    perm = np.random.default_rng(1).permutation(g.n)
    a, _ = model_forward(model, g)
    b, _ = model_forward(model, g.permute(perm))
    np.testing.assert_allclose(b.data[perm], a.data, atol=1e-9, rtol=0)


def test_gcn_on_regular_graph_matches_dense_oracle():
    n = 8  # cycle: 2-regular, 3 with the self-loop
    rng = np.random.default_rng(0)
    g = Graph.from_edges(rng.normal(size=(n, 3)), np.zeros(n, dtype=int), [(i, (i + 1) % n) for i in range(n)], class_count=2)
    model = GCN(3, 2, hidden=4, num_layers=1, rng=np.random.default_rng(1))
    out, _ = model_forward(model, g)
    A = np.eye(n)
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = 1.0
    d = A.sum(axis=1)
    A_hat = A / np.sqrt(np.outer(d, d))
    np.testing.assert_allclose(A_hat, A / 3.0)
    expected = A_hat @ g.features @ model.weights[0].data + model.biases[0].data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_full_gat_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    n = 6
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)]
    g = Graph.from_edges(rng.uniform(-2, 2, (n, 4)), np.array([0, 1, 2, 0, 1, 2]), pairs)
    model = GAT(4, 3, hidden=3, heads=2, rng=np.random.default_rng(3))
    mask = np.array([0, 2, 3, 5])

    def loss_value():
        with T.no_grad():
            logits, _ = model_forward(model, g, train_mode=True, rng=np.random.default_rng(7))
            return T.cross_entropy(logits, g.labels, mask).item()

    params = parameters(model)
    for p in params:
        p.zero_grad()
    with T.new_tape():
        logits, _ = model_forward(model, g, train_mode=True, rng=np.random.default_rng(7))
        T.backward(T.cross_entropy(logits, g.labels, mask))
    numeric = numerical_grad(loss_value, [p.data for p in params])
    for p, num in zip(params, numeric):
        assert rel_error(p.grad, num) < 1e-4


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("kind", ["gat", "gcn", "mlp"])
def test_checkpoint_roundtrip(tmp_path, kind, small_graph):
    model = {"gat": GAT, "gcn": GCN, "mlp": MLP}[kind](3, 2, rng=np.random.default_rng(4))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    for (na, a), (nb, b) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb and np.array_equal(a.data, b.data)
    x, _ = model_forward(model, small_graph)
    y, _ = model_forward(back, small_graph)
    assert np.array_equal(x.data, y.data)


def test_checkpoint_layout_is_documented_header_plus_le_float64(tmp_path):
    import json
    import struct

    model = MLP(3, 2, hidden=4, rng=np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:8] == b"CSACKPT1"
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    assert header["architecture"] == "mlp"
    sizes = [int(np.prod(t["shape"])) for t in header["tensors"]]
    assert len(raw) == 16 + hlen + 8 * sum(sizes)
    first = np.frombuffer(raw[16 + hlen : 16 + hlen + 8 * sizes[0]], dtype="<f8")
    np.testing.assert_array_equal(first, model.weights[0].data.ravel())
