import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrx import tensor as T
from vrx.grn import (ConfigMismatch, DistillConfig, DistillData, GrnConfig, GrnModel, distill_train,
                     export_edge_weights, graph_conv_layer, softmax_np)
from vrx.scg import edge_pairs
from vrx.tensor import BatchNorm, Tensor

from helpers import (edge_dict, eq3_oracle, eq3_oracle_per_edge, gradcheck, numeric_grad, random_inputs,
                     random_layer, rel_err, tiny_model)


def _random_graph(rng, N, d, e_dim):
    f = rng.normal(size=(N, d))
    edges = rng.normal(size=(N * (N - 1), e_dim))
    ew = rng.normal(size=(N, N))
    return f, edges, ew


def test_layer_matches_loop_oracle_500_cases():
    rng = np.random.default_rng(0)
    worst = 0.0
    for case in range(500):
        N = int(rng.integers(2, 4))
        d_in, d_out, e_in, e_out = (int(v) for v in rng.integers(1, 5, size=4))
        concat, normalize = bool(case % 2), bool((case // 2) % 2)
        layer = random_layer(rng, d_in, d_out, e_in, e_out, concat)
        f, edges, ew = _random_graph(rng, N, d_in, e_in)
        got_n, got_e = graph_conv_layer(Tensor(f), Tensor(edges), Tensor(ew), layer, normalize=normalize)
        want_n, want_e = eq3_oracle(f, edge_dict(edges, N), ew, layer, normalize)
        worst = max(worst, np.max(np.abs(got_n.data - want_n)))
        worst = max(worst, max(np.max(np.abs(got_e.data[k] - want_e[p])) for k, p in enumerate(edge_pairs(N))))
    assert worst < 1e-10


def test_concat_sum_matches_per_neighbour_form():
    rng = np.random.default_rng(1)
    for _ in range(50):
        N = int(rng.integers(2, 4))
        layer = random_layer(rng, 3, 4, 2, 2)
        f, edges, ew = _random_graph(rng, N, 3, 2)
        got, _ = graph_conv_layer(Tensor(f), Tensor(edges), Tensor(ew), layer, normalize=False)
        np.testing.assert_allclose(got.data, eq3_oracle_per_edge(f, edge_dict(edges, N), ew, layer), atol=1e-10)


def test_hand_evaluated_two_node_graph():
    # 1-dim everything; f = [1, -2], edges (0->1) = 0.5, (1->0) = -1
    layer = random_layer(np.random.default_rng(0), 1, 1, 1, 1)
    layer.W1.data[...] = 2.0
    layer.W2.data[...] = 3.0
    layer.W3.data[...] = [[0.5], [4.0]]
    layer.W4.data[...] = -1.0
    ew = np.array([[0.0, 0.25], [0.75, 0.0]])     # e[j, i]
    f = np.array([[1.0], [-2.0]])
    edges = np.array([[0.5], [-1.0]])              # order (0,1), (1,0)
    # node 0: 2*1 + 0.5*(0.75*3*-2) + 4*(-1) = 2 - 2.25 - 4 = -4.25 -> relu 0
    # node 1: 2*-2 + 0.5*(0.25*3*1) + 4*0.5 = -4 + 0.375 + 2 = -1.625 -> relu 0
    # with W1 = -2 instead: node 0: -2 -2.25 -4 -> 0; node 1: 4 + .375 + 2 = 6.375
    layer.W1.data[...] = -2.0
    out, e_out = graph_conv_layer(Tensor(f), Tensor(edges), Tensor(ew), layer, normalize=False)
    np.testing.assert_allclose(out.data[:, 0], [0.0, 6.375], atol=1e-12)
    np.testing.assert_allclose(e_out.data[:, 0], [-0.5, 1.0], atol=1e-12)


def test_zero_edge_weights_switch_off_neighbours():
    rng = np.random.default_rng(2)
    layer = random_layer(rng, 3, 4, 4, 5)
    f, edges, _ = _random_graph(rng, 3, 3, 4)
    zero = Tensor(np.zeros((3, 3)))
    base, _ = graph_conv_layer(Tensor(f), Tensor(edges), zero, layer, normalize=False)
    g = f.copy()
    g[2] += rng.normal(size=3) * 10
    pert, _ = graph_conv_layer(Tensor(g), Tensor(edges), zero, layer, normalize=False)
    np.testing.assert_array_equal(pert.data[:2], base.data[:2])
    assert not np.array_equal(pert.data[2], base.data[2])


def test_layer_gradient_wrt_edge_weights():
    rng = np.random.default_rng(3)
    for seed in range(10):
        layer = random_layer(rng, 3, 4, 4, 5)
        f, edges, ew = _random_graph(rng, 3, 3, 4)
        err = gradcheck(lambda w: graph_conv_layer(Tensor(f), Tensor(edges), w, layer)[0], [ew], seed)
        assert err < 1e-4


def test_layer_dimension_errors():
    layer = random_layer(np.random.default_rng(0), 2, 2, 4, 5)
    with pytest.raises(ConfigMismatch):
        graph_conv_layer(Tensor(np.zeros((3, 2))), Tensor(np.zeros((5, 4))), Tensor(np.ones((3, 3))), layer)
    with pytest.raises(T.ShapeError):
        graph_conv_layer(Tensor(np.zeros((3, 3))), Tensor(np.zeros((6, 4))), Tensor(np.ones((3, 3))), layer)


def test_model_forward_matches_stacked_oracle():
    model = tiny_model(seed=4)
    nodes, locs = random_inputs(model, B=3, seed=5)
    emb, logits = model.forward(nodes, locs)
    cfg = model.config
    N = cfg.n_concepts
    flat = []
    for b in range(3):
        per_class = []
        for c in range(cfg.n_classes):
            f = nodes[c, b]
            edges = edge_dict(model.edge_inputs(locs[c, b]), N)
            for layer in model.layers:
                f, edges = eq3_oracle(f, edges, model.edge_weights.data[c], layer)
            vec = np.concatenate([f.reshape(-1)] + [edges[p] for p in edge_pairs(N)])
            np.testing.assert_allclose(emb.data[c, b], vec, atol=1e-10)
            per_class.append(vec)
        flat.append(np.concatenate(per_class))
    want = np.array(flat) @ model.E_w.data + model.E_b.data
    np.testing.assert_allclose(logits.data, want, atol=1e-10)


def test_edge_input_rows_are_start_then_end_locations():
    model = tiny_model(N=3)
    locs = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    rows = model.edge_inputs(locs)
    for k, (j, i) in enumerate(edge_pairs(3)):
        np.testing.assert_array_equal(rows[k], np.concatenate([locs[j], locs[i]]))


def test_default_dimensions():
    cfg = GrnConfig(n_classes=3)
    assert cfg.embedding_dim == 188
    model = GrnModel(cfg)
    assert model.E_w.shape == (564, 3)
    nodes = np.random.default_rng(0).normal(size=(3, 2, 4, 64))
    emb, logits = model.forward(nodes, np.random.default_rng(1).uniform(size=(3, 2, 4, 2)))
    assert emb.shape == (3, 2, 188) and logits.shape == (2, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.lists(st.integers(1, 70), min_size=2, max_size=4), st.integers(1, 9))
def test_embedding_dimension_algebra(N, node_dims, e_out):
    edge_dims = [4] + [e_out] * (len(node_dims) - 1)
    cfg = GrnConfig(2, N, node_dims, edge_dims)
    assert cfg.embedding_dim == N * node_dims[-1] + N * (N - 1) * e_out


def test_config_validation():
    with pytest.raises(ConfigMismatch):
        GrnConfig(3, 4, (64, 32), (4, 5, 5))
    with pytest.raises(ConfigMismatch):
        GrnConfig(3, 4, (64, 32), (3, 5))
    with pytest.raises(ConfigMismatch):
        GrnModel(GrnConfig(3), [0, 1])
    model = tiny_model()
    with pytest.raises(ConfigMismatch):
        model.forward(np.zeros((2, 1, 4, 6)), np.zeros((2, 1, 4, 2)))


def test_identical_hypotheses_differ_by_class_weights():
    model = tiny_model(seed=6)
    nodes, locs = random_inputs(model, B=1, seed=1)
    nodes[:] = nodes[0]
    locs[:] = locs[0]
    emb, _ = model.forward(nodes, locs)
    assert not np.allclose(emb.data[0], emb.data[1])


def test_parameter_isolation_bitwise():
    model = tiny_model(seed=7)
    nodes, locs = random_inputs(model, B=4, seed=2)
    base = model.forward(nodes, locs)[0].data.copy()
    model.edge_weights.data[1] += np.random.default_rng(0).normal(size=(4, 4))
    pert = model.forward(nodes, locs)[0].data
    for c in (0, 2):
        assert pert[c].tobytes() == base[c].tobytes()
    assert not np.array_equal(pert[1], base[1])


def test_end_to_end_gradient_200_parameters():
    model = tiny_model(seed=8)
    nodes, locs = random_inputs(model, B=5, seed=3)
    target = softmax_np(np.random.default_rng(4).normal(size=(5, 3)))

    def loss():
        _, logits = model.forward(nodes, locs)
        return T.l1_loss(T.softmax(logits), Tensor(target))

    params = model.parameters()
    for p in params:
        p.grad = None
    with T.Tape():
        y = loss()
    T.backward(y)
    grads = [p.grad.copy() for p in params]

    rng = np.random.default_rng(9)
    sizes = np.array([p.data.size for p in params])
    picks = 0
    worst = 0.0
    while picks < 200:
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = params[k].data.reshape(-1)
        idx = int(rng.integers(flat.size))
        num = numeric_grad(lambda: loss().item(), flat[idx:idx + 1])
        worst = max(worst, rel_err(grads[k].reshape(-1)[idx], num[0], floor=1e-3))
        picks += 1
    assert worst < 1e-3


def _tiny_data(model, S=40, seed=0):
    nodes, locs = random_inputs(model, B=S, seed=seed)
    rng = np.random.default_rng(seed + 1)
    W = rng.normal(size=(model.config.node_dims[0], 1))
    logits = np.stack([nodes[c].mean(axis=1) @ W for c in range(model.config.n_classes)], axis=1)[..., 0] * 3
    return DistillData(nodes, locs, logits)


def test_distill_lr_zero_keeps_parameters():
    model = tiny_model(seed=10)
    before = [p.data.copy() for p in model.parameters()]
    distill_train(model, _tiny_data(model), DistillConfig(epochs=3, batch_size=16, lr=0.0))
    for a, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_distill_loss_decreases_and_is_deterministic():
    runs = []
    for _ in range(2):
        model = tiny_model(seed=11)
        hist = distill_train(model, _tiny_data(model), DistillConfig(epochs=60, batch_size=16, lr=0.01))
        runs.append((hist, model))
    hist = runs[0][0]
    windows = [np.mean(hist.loss[i:i + 10]) for i in range(0, 60, 10)]
    assert windows[-1] < windows[0]
    assert hist.loss[49] < hist.loss[0]
    assert runs[0][0].loss == runs[1][0].loss
    assert runs[0][1].edge_weights.data.tobytes() == runs[1][1].edge_weights.data.tobytes()
    assert hist.to_csv().splitlines()[0] == "epoch,l1_loss,agreement,lr"


def test_distill_rejects_empty_data():
    model = tiny_model()
    empty = DistillData(np.zeros((3, 0, 4, 6)), np.zeros((3, 0, 4, 2)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        distill_train(model, empty)


def test_lr_schedule():
    cfg = DistillConfig()
    assert cfg.lr_at(0) == cfg.lr_at(99) == 0.01
    assert cfg.lr_at(100) == pytest.approx(0.005)
    assert cfg.lr_at(299) < cfg.lr_at(100)


def test_export_edge_weights_init_and_errors():
    model = GrnModel(GrnConfig(3), [5, 7, 9])
    w = export_edge_weights(model, 7)
    np.testing.assert_array_equal(w, np.ones((4, 4)) - np.eye(4))
    with pytest.raises(KeyError):
        export_edge_weights(model, 1)


def test_trained_edge_weights_are_class_specific():
    model = tiny_model(seed=12)
    model.edge_weights.data[...] = 1.0
    distill_train(model, _tiny_data(model, seed=3), DistillConfig(epochs=20, batch_size=16))
    a, b = export_edge_weights(model, 0), export_edge_weights(model, 1)
    assert np.linalg.norm(a - b) > 0


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=13)
    model.save(tmp_path / "m", bank_hashes=["abc"])
    loaded = GrnModel.load(tmp_path / "m")
    nodes, locs = random_inputs(model, B=2)
    assert model.forward(nodes, locs)[1].data.tobytes() == loaded.forward(nodes, locs)[1].data.tobytes()


def test_batch_norm_state_is_shared_across_hypotheses():
    model = tiny_model()
    assert all(isinstance(layer.bn, BatchNorm) for layer in model.layers)
    assert model.layers[0].bn.gamma.shape == (model.config.node_dims[1],)
