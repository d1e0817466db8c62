"""Shared oracles for the test suite: finite differences and a loop-based graph layer."""

from __future__ import annotations

import numpy as np

from vrx import tensor as T
from vrx.grn import GrnConfig, GrnModel, Layer, graph_conv_layer
from vrx.scg import edge_pairs
from vrx.teacher import conv2d, global_avg_pool, maxpool2
from vrx.tensor import BatchNorm, Tensor

H = 1e-5
REL_TOL = 1e-4
FLOOR = 1e-4    # relative errors are taken against max(|analytic|, |numeric|, FLOOR)


def rel_err(a: np.ndarray, n: np.ndarray, floor: float = FLOOR) -> float:
    a, n = np.asarray(a, float), np.asarray(n, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to the array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(build, arrays: list[np.ndarray], seed: int = 0) -> float:
    """Max relative error between tape gradients and finite differences.

    ``build(*tensors)`` returns a tensor; the scalar checked is a random
    weighting of its entries so every upstream gradient is exercised.
    """
    rng = np.random.default_rng(seed + 10_000)
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    R = rng.normal(size=out_shape)

    def scalar(tensors):
        out = build(*tensors)
        return T.sum(T.mul(out, Tensor(R))) if out.shape else T.scale(out, float(R))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape():
        y = scalar(leaves)
    T.backward(y)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f():
            return scalar([Tensor(x) for x in arrays]).item()
        num = numeric_grad(f, arrays[k])
        worst = max(worst, rel_err(leaves[k].grad, num))
    return worst


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def primitive_cases(seed: int) -> dict:
    """name -> (build, arrays) for every differentiable primitive, random shapes per seed."""
    rng = np.random.default_rng(seed)
    m, k, n = (int(v) for v in rng.integers(2, 5, size=3))
    bn_state = BatchNorm(k)
    bn_state.running_mean = rng.normal(size=k)
    bn_state.running_var = rng.uniform(0.5, 2.0, size=k)
    g0, b0 = rng.normal(size=k), rng.normal(size=k)

    def bn(train):
        def build(x, gamma, beta):
            s = BatchNorm(k)
            s.gamma, s.beta = gamma, beta
            s.running_mean, s.running_var = bn_state.running_mean.copy(), bn_state.running_var.copy()
            return T.batch_norm(x, s, training=train)
        return build

    labels = rng.integers(0, k, size=m)
    idx = rng.integers(0, k, size=k + 1)
    target = rng.normal(size=(m, k))
    return {
        "add": (T.add, [rng.normal(size=(m, k)), rng.normal(size=(m, k))]),
        "sub": (T.sub, [rng.normal(size=(m, k)), rng.normal(size=(m, k))]),
        "mul": (T.mul, [rng.normal(size=(m, k)), rng.normal(size=(m, k))]),
        "scale": (lambda a: T.scale(a, 1.7), [rng.normal(size=(m, k))]),
        "bias_add": (T.bias_add, [rng.normal(size=(m, k)), rng.normal(size=k)]),
        "matmul": (T.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]),
        "matmul_batched": (T.matmul, [rng.normal(size=(2, m, k)), rng.normal(size=(2, k, n))]),
        "reshape": (lambda a: T.reshape(a, (k, m)), [rng.normal(size=(m, k))]),
        "permute": (lambda a: T.permute(a, (2, 0, 1)), [rng.normal(size=(m, k, n))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [rng.normal(size=(m, k)), rng.normal(size=(m, n))]),
        "slice": (lambda a: T.slice_axis(a, 1, 1, k), [rng.normal(size=(m, k))]),
        "take": (lambda a: T.take(a, idx, axis=1), [rng.normal(size=(m, k))]),
        "sum": (T.sum, [rng.normal(size=(m, k))]),
        "mean": (T.mean, [rng.normal(size=(m, k))]),
        "relu": (T.relu, [_away_from_zero(rng, (m, k))]),
        "softmax": (T.softmax, [rng.normal(size=(m, k))]),
        "l1_loss": (lambda a: T.l1_loss(a, Tensor(target)), [target + _away_from_zero(rng, (m, k))]),
        "cross_entropy": (lambda a: T.cross_entropy(a, labels), [rng.normal(size=(m, k))]),
        "batch_norm_train": (bn(True), [rng.normal(size=(m + 4, k)), g0, b0]),
        "batch_norm_eval": (bn(False), [rng.normal(size=(m + 4, k)), g0, b0]),
        "conv2d": (conv2d, [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        "maxpool2": (maxpool2, [rng.permutation(32).reshape(1, 2, 4, 4) / 7.0]),
        "global_avg_pool": (global_avg_pool, [rng.normal(size=(2, 3, 2, 2))]),
    }


# ---------------------------------------------------------------------------
# graph layer oracle

def random_layer(rng, d_in: int, d_out: int, e_in: int, e_out: int, concat: bool = True) -> Layer:
    def w(a, b):
        return Tensor(rng.normal(size=(a, b)), requires_grad=True)
    bn = BatchNorm(d_out)
    bn.gamma = Tensor(rng.uniform(0.5, 1.5, d_out), requires_grad=True)
    bn.beta = Tensor(rng.normal(size=d_out), requires_grad=True)
    bn.running_mean = rng.normal(size=d_out)
    bn.running_var = rng.uniform(0.5, 2.0, size=d_out)
    return Layer(w(d_in, d_out), w(d_in, d_out), w(d_out + e_in, d_out) if concat else None, w(e_in, e_out), bn)


def eq3_oracle(f: np.ndarray, edges: dict, e: np.ndarray, layer: Layer, normalize: bool = True):
    """Loop-by-loop evaluation of one GraphConv layer on a single graph.

    f[i] are node rows, edges[(j, i)] edge rows, e[j, i] the aggregation weight
    from start node j to end node i. Row-vector convention: x @ W.
    """
    W1, W2, W4 = layer.W1.data, layer.W2.data, layer.W4.data
    W3 = None if layer.W3 is None else layer.W3.data
    N = len(f)
    out = []
    for i in range(N):
        acc = f[i] @ W1
        msg_nodes = np.zeros(W2.shape[1])
        msg_edges = np.zeros(W4.shape[0])
        for j in range(N):
            if j == i:
                continue
            if W3 is None:
                acc = acc + e[j, i] * (f[j] @ W2)
            else:
                msg_nodes = msg_nodes + e[j, i] * (f[j] @ W2)
                msg_edges = msg_edges + edges[(j, i)]
        if W3 is not None:
            # sum_j W3 C(e_ji W2 f_j, edge_ji) = W3 C(sum_j e_ji W2 f_j, sum_j edge_ji) by linearity
            acc = acc + np.concatenate([msg_nodes, msg_edges]) @ W3
        h = np.maximum(acc, 0.0)
        if normalize:
            bn = layer.bn
            h = (h - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma.data + bn.beta.data
        out.append(h)
    new_edges = {p: edges[p] @ W4 for p in edges}
    return np.array(out), new_edges


def eq3_oracle_per_edge(f, edges, e, layer):
    """Same layer with the concatenation applied per neighbour before summing (no linearity shortcut)."""
    W1, W2, W3 = layer.W1.data, layer.W2.data, layer.W3.data
    N = len(f)
    out = []
    for i in range(N):
        acc = f[i] @ W1
        for j in range(N):
            if j != i:
                acc = acc + np.concatenate([e[j, i] * (f[j] @ W2), edges[(j, i)]]) @ W3
        out.append(np.maximum(acc, 0.0))
    return np.array(out)


def tiny_model(seed: int = 0, n: int = 3, N: int = 4, D: int = 6, concat: bool = True) -> GrnModel:
    cfg = GrnConfig(n, N, (D, 5, 4), (4, 3, 2), concat, seed=seed)
    model = GrnModel(cfg, list(range(n)))
    rng = np.random.default_rng(seed + 1)
    model.edge_weights.data[...] = rng.normal(size=model.edge_weights.shape)
    for layer in model.layers:
        layer.bn.running_mean = rng.normal(size=layer.bn.running_mean.shape)
        layer.bn.running_var = rng.uniform(0.5, 2.0, size=layer.bn.running_var.shape)
    model.E_b.data[...] = rng.normal(size=n)
    return model.eval()


def random_inputs(model: GrnModel, B: int, seed: int = 0):
    cfg = model.config
    rng = np.random.default_rng(seed)
    nodes = rng.normal(size=(cfg.n_classes, B, cfg.n_concepts, cfg.node_dims[0]))
    locs = rng.uniform(size=(cfg.n_classes, B, cfg.n_concepts, 2))
    return nodes, locs


def edge_dict(rows: np.ndarray, N: int) -> dict:
    return {p: rows[k] for k, p in enumerate(edge_pairs(N))}


__all__ = ["H", "REL_TOL", "rel_err", "numeric_grad", "gradcheck", "primitive_cases", "random_layer",
           "eq3_oracle", "eq3_oracle_per_edge", "tiny_model", "random_inputs", "edge_dict",
           "graph_conv_layer"]


def make_hset(model: GrnModel, seed: int = 0, image_id: int | None = 0, all_dummy: bool = False, eps: float = 1e-3):
    """Hand-built hypothesis set matching a model's class ids and dims."""
    from vrx.scg import ConceptDetection, HypothesisSet, Scg

    cfg = model.config
    rng = np.random.default_rng(seed)
    scgs = []
    for c in model.class_ids:
        nodes = []
        for v in range(cfg.n_concepts):
            det = not all_dummy and rng.random() < 0.8
            if det:
                loc = (float(rng.uniform()), float(rng.uniform()))
                x, y = int(loc[0] * 60), int(loc[1] * 60)
                nodes.append(ConceptDetection(v, True, rng.normal(size=cfg.node_dims[0]), loc,
                                              float(rng.uniform()), (x, y, x + 4, y + 4)))
            else:
                nodes.append(ConceptDetection(v, False, np.full(cfg.node_dims[0], eps), (0.0, 0.0), float("inf")))
        scgs.append(Scg(c, nodes, image_id))
    return HypothesisSet(scgs, image_id)


ACCEPTANCE: dict[int, str] = {}   # criterion number -> printed result line


def record(criterion: int, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:2d}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line, flush=True)
    return line
