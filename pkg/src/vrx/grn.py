"""Graph reasoning network: shared GraphConv stack with class-specific aggregation
weights, a linear fusion head, and distillation training against the teacher."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .scg import HypothesisSet, edge_pairs
from .tensor import BatchNorm, Tensor

log = logging.getLogger(__name__)


class ConfigMismatch(ValueError):
    pass


@dataclass
class GrnConfig:
    n_classes: int
    n_concepts: int = 4
    node_dims: tuple[int, ...] = (64, 64, 32, 32)
    edge_dims: tuple[int, ...] = (4, 5, 5, 5)
    edge_concat: bool = True
    edge_init: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.node_dims = tuple(self.node_dims)
        self.edge_dims = tuple(self.edge_dims)
        if len(self.node_dims) != len(self.edge_dims) or len(self.node_dims) < 2:
            raise ConfigMismatch(f"node dims {self.node_dims} and edge dims {self.edge_dims} "
                                 "need equal length >= 2")
        if self.edge_dims[0] != 4:
            raise ConfigMismatch("input edge features are [x_j, y_j, x_i, y_i]; edge_dims[0] must be 4")

    @property
    def n_layers(self) -> int:
        return len(self.node_dims) - 1

    @property
    def n_edges(self) -> int:
        return self.n_concepts * (self.n_concepts - 1)

    @property
    def embedding_dim(self) -> int:
        return self.n_concepts * self.node_dims[-1] + self.n_edges * self.edge_dims[-1]

    def node_slice(self, v: int) -> slice:
        d = self.node_dims[-1]
        return slice(v * d, (v + 1) * d)

    def edge_slice(self, p: int) -> slice:
        d = self.edge_dims[-1]
        start = self.n_concepts * self.node_dims[-1] + p * d
        return slice(start, start + d)


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class Layer:
    W1: Tensor
    W2: Tensor
    W3: Tensor | None
    W4: Tensor
    bn: BatchNorm

    def parameters(self) -> list[Tensor]:
        ps = [self.W1, self.W2] + ([self.W3] if self.W3 is not None else []) + [self.W4]
        return ps + self.bn.parameters()


class GrnModel:
    """Weights act by right-multiplication on row vectors (``x @ W``)."""

    def __init__(self, config: GrnConfig, class_ids: list[int] | None = None):
        self.config = cfg = config
        self.class_ids = list(class_ids) if class_ids is not None else list(range(cfg.n_classes))
        if len(self.class_ids) != cfg.n_classes:
            raise ConfigMismatch(f"{len(self.class_ids)} class ids for n_classes={cfg.n_classes}")
        rng = np.random.default_rng(cfg.seed)
        self.layers: list[Layer] = []
        for k in range(cfg.n_layers):
            din, dout = cfg.node_dims[k], cfg.node_dims[k + 1]
            ein, eout = cfg.edge_dims[k], cfg.edge_dims[k + 1]
            W3 = Tensor(_glorot(rng, dout + ein, dout), requires_grad=True, name=f"l{k}.W3") \
                if cfg.edge_concat else None
            self.layers.append(Layer(
                W1=Tensor(_glorot(rng, din, dout), requires_grad=True, name=f"l{k}.W1"),
                W2=Tensor(_glorot(rng, din, dout), requires_grad=True, name=f"l{k}.W2"),
                W3=W3,
                W4=Tensor(_glorot(rng, ein, eout), requires_grad=True, name=f"l{k}.W4"),
                bn=BatchNorm(dout)))
        N = cfg.n_concepts
        self.edge_weights = Tensor(np.full((cfg.n_classes, N, N), cfg.edge_init), requires_grad=True,
                                   name="edge_weights")
        self.E_w = Tensor(_glorot(rng, cfg.n_classes * cfg.embedding_dim, cfg.n_classes), requires_grad=True,
                          name="E.w")
        self.E_b = Tensor(np.zeros(cfg.n_classes), requires_grad=True, name="E.b")
        self.training = False

        self._offdiag = np.broadcast_to(1.0 - np.eye(N), (cfg.n_classes, N, N)).copy()
        pairs = edge_pairs(N)
        self._incoming = np.zeros((N, len(pairs)))
        for p, (_, i) in enumerate(pairs):
            self._incoming[i, p] = 1.0
        self._pairs = pairs

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.layers:
            ps.extend(layer.parameters())
        return ps + [self.edge_weights, self.E_w, self.E_b]

    def train(self, mode: bool = True) -> "GrnModel":
        self.training = mode
        return self

    def eval(self) -> "GrnModel":
        return self.train(False)

    def class_index(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} is not a class of interest {self.class_ids}") from None

    # forward ------------------------------------------------------------

    def edge_inputs(self, locs: np.ndarray) -> np.ndarray:
        """[..., N, 2] locations -> [..., P, 4] rows [x_j, y_j, x_i, y_i]."""
        j = [a for a, _ in self._pairs]
        i = [b for _, b in self._pairs]
        return np.concatenate([locs[..., j, :], locs[..., i, :]], axis=-1)

    def forward(self, nodes: np.ndarray, locs: np.ndarray):
        """Batched forward.

        nodes: [n, B, N, D] node features per hypothesis, locs: [n, B, N, 2].
        Returns (embeddings [n, B, embedding_dim], logits [B, n]).
        """
        cfg = self.config
        n, B, N, D = nodes.shape
        if n != cfg.n_classes or N != cfg.n_concepts or D != cfg.node_dims[0]:
            raise ConfigMismatch(f"hypotheses of shape {nodes.shape} vs config n={cfg.n_classes}, "
                                 f"N={cfg.n_concepts}, D={cfg.node_dims[0]}")
        P = cfg.n_edges
        F = Tensor(nodes.reshape(n * B * N, D))
        Ed = Tensor(self.edge_inputs(locs).reshape(n * B * P, 4))
        A = T.permute(T.mul(self.edge_weights, Tensor(self._offdiag)), (0, 2, 1))   # [n, i, j]
        inc = Tensor(self._incoming)
        for k, layer in enumerate(self.layers):
            dout = cfg.node_dims[k + 1]
            ein = cfg.edge_dims[k]
            own = T.matmul(F, layer.W1)
            H = T.reshape(T.matmul(F, layer.W2), (n, B, N, dout))
            H = T.reshape(T.permute(H, (0, 2, 1, 3)), (n, N, B * dout))
            agg = T.matmul(A, H)                                                  # sum_j e_ji W2 f_j
            agg = T.reshape(T.permute(T.reshape(agg, (n, N, B, dout)), (0, 2, 1, 3)), (n * B * N, dout))
            if layer.W3 is not None:
                Ein = T.reshape(T.permute(T.reshape(Ed, (n, B, P, ein)), (2, 0, 1, 3)), (P, n * B * ein))
                aggE = T.matmul(inc, Ein)                                         # sum_j edge_ji
                aggE = T.reshape(T.permute(T.reshape(aggE, (N, n, B, ein)), (1, 2, 0, 3)), (n * B * N, ein))
                msg = T.matmul(T.concat([agg, aggE], axis=1), layer.W3)
            else:
                msg = agg
            F = T.batch_norm(T.relu(T.add(own, msg)), layer.bn, training=self.training)
            Ed = T.matmul(Ed, layer.W4)
        emb = T.concat([T.reshape(F, (n, B, N * cfg.node_dims[-1])),
                        T.reshape(Ed, (n, B, P * cfg.edge_dims[-1]))], axis=2)
        flat = T.reshape(T.permute(emb, (1, 0, 2)), (B, n * cfg.embedding_dim))
        logits = T.bias_add(T.matmul(flat, self.E_w), self.E_b)
        return emb, logits

    def forward_hypotheses(self, hsets: list[HypothesisSet]):
        nodes, locs = stack_hypotheses(hsets, self.class_ids)
        return self.forward(nodes, locs)

    def predict_logits(self, nodes: np.ndarray, locs: np.ndarray, batch: int = 512) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            outs = [self.forward(nodes[:, i:i + batch], locs[:, i:i + batch])[1].data
                    for i in range(0, nodes.shape[1], batch)]
        finally:
            self.training = was
        return np.concatenate(outs, axis=0)

    # persistence ----------------------------------------------------------

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"l{k}.W1"] = layer.W1.data
            out[f"l{k}.W2"] = layer.W2.data
            if layer.W3 is not None:
                out[f"l{k}.W3"] = layer.W3.data
            out[f"l{k}.W4"] = layer.W4.data
            out[f"l{k}.bn.gamma"] = layer.bn.gamma.data
            out[f"l{k}.bn.beta"] = layer.bn.beta.data
            out[f"l{k}.bn.running_mean"] = layer.bn.running_mean
            out[f"l{k}.bn.running_var"] = layer.bn.running_var
        out["edge_weights"] = self.edge_weights.data
        out["E.w"] = self.E_w.data
        out["E.b"] = self.E_b.data
        return out

    def save(self, directory, bank_hashes: list[str] | None = None, extra: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors = self.named_tensors()
        for name, arr in tensors.items():
            T.save_tensor(arr, d / f"{name}.tensor")
        manifest = {"kind": "grn", "config": asdict(self.config), "class_ids": self.class_ids,
                    "bank_hashes": bank_hashes or [], "tensors": sorted(tensors)}
        manifest.update(extra or {})
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "GrnModel":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        model = cls(GrnConfig(**m["config"]), m["class_ids"])
        for k, layer in enumerate(model.layers):
            for attr in ("W1", "W2", "W3", "W4"):
                t = getattr(layer, attr)
                if t is not None:
                    t.data[...] = T.load_tensor(d / f"l{k}.{attr}.tensor").data
            layer.bn.gamma.data[...] = T.load_tensor(d / f"l{k}.bn.gamma.tensor").data
            layer.bn.beta.data[...] = T.load_tensor(d / f"l{k}.bn.beta.tensor").data
            layer.bn.running_mean = T.load_tensor(d / f"l{k}.bn.running_mean.tensor").data.copy()
            layer.bn.running_var = T.load_tensor(d / f"l{k}.bn.running_var.tensor").data.copy()
        model.edge_weights.data[...] = T.load_tensor(d / "edge_weights.tensor").data
        model.E_w.data[...] = T.load_tensor(d / "E.w.tensor").data
        model.E_b.data[...] = T.load_tensor(d / "E.b.tensor").data
        return model


def stack_hypotheses(hsets: list[HypothesisSet], class_ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """[n, B, N, D] node features and [n, B, N, 2] locations in class order."""
    nodes, locs = [], []
    for h in hsets:
        if sorted(s.class_id for s in h.scgs) != sorted(class_ids):
            raise ConfigMismatch(f"hypothesis classes {[s.class_id for s in h.scgs]} vs model {class_ids}")
        nodes.append(np.stack([h[c].node_features() for c in class_ids]))
        locs.append(np.stack([h[c].locations() for c in class_ids]))
    return np.stack(nodes, axis=1), np.stack(locs, axis=1)


def graph_conv_layer(nodes: Tensor, edges: Tensor, edge_weights: Tensor, layer: Layer, training: bool = False,
                     normalize: bool = True):
    """One layer on a single graph: nodes [N, d_in], edges [P, e_in] in ``edge_pairs`` order,
    edge_weights [N, N] indexed [from, to]. Returns (nodes', edges')."""
    N = nodes.shape[0]
    pairs = edge_pairs(N)
    if edges.shape[0] != len(pairs) or edge_weights.shape != (N, N):
        raise ConfigMismatch(f"graph of {N} nodes needs {len(pairs)} edges and an {N}x{N} weight matrix")
    offdiag = Tensor(1.0 - np.eye(N))
    A = T.transpose(T.mul(edge_weights, offdiag))
    agg = T.matmul(A, T.matmul(nodes, layer.W2))
    if layer.W3 is not None:
        inc = np.zeros((N, len(pairs)))
        for p, (_, i) in enumerate(pairs):
            inc[i, p] = 1.0
        msg = T.matmul(T.concat([agg, T.matmul(Tensor(inc), edges)], axis=1), layer.W3)
    else:
        msg = agg
    out = T.relu(T.add(T.matmul(nodes, layer.W1), msg))
    if normalize:
        out = T.batch_norm(out, layer.bn, training=training)
    return out, T.matmul(edges, layer.W4)


def export_edge_weights(model: GrnModel, class_id: int) -> np.ndarray:
    """Learned e^c as an N x N matrix, row = start node j, column = end node i, zero diagonal."""
    c = model.class_index(class_id)
    w = model.edge_weights.data[c].copy()
    np.fill_diagonal(w, 0.0)
    return w


# ---------------------------------------------------------------------------
# distillation

@dataclass
class DistillConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 0.01
    decay_start: int = 100
    decay_every: int = 50
    decay: float = 0.5
    p_mask: float = 0.5
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        if epoch < self.decay_start:
            return self.lr
        return self.lr * self.decay ** (1 + (epoch - self.decay_start) // self.decay_every)


@dataclass
class DistillData:
    """Precomputed student inputs and teacher targets.

    ``masked_*`` hold one concept-masked variant per sample (same shapes); rows
    without a detected concept to mask repeat the original.
    """
    nodes: np.ndarray            # [n, S, N, D]
    locs: np.ndarray             # [n, S, N, 2]
    teacher_logits: np.ndarray   # [S, n] restricted to the classes of interest
    masked_nodes: np.ndarray | None = None
    masked_locs: np.ndarray | None = None
    masked_logits: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.nodes.shape[1]


@dataclass
class DistillHistory:
    loss: list[float] = field(default_factory=list)
    agreement: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "l1_loss", "agreement", "lr"])
        for e, (l, a, r) in enumerate(zip(self.loss, self.agreement, self.lr)):
            w.writerow([e, repr(l), repr(a), repr(r)])
        return buf.getvalue()


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def distill_train(model: GrnModel, data: DistillData, config: DistillConfig | None = None) -> DistillHistory:
    """Minimize mean |softmax(student) - softmax(teacher)| with Adam."""
    cfg = config or DistillConfig()
    if data.size == 0:
        raise ValueError("no distillation samples")
    rng = np.random.default_rng(cfg.seed)
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    target = softmax_np(data.teacher_logits)
    has_masked = data.masked_nodes is not None
    target_m = softmax_np(data.masked_logits) if has_masked else None
    history = DistillHistory()
    model.train()
    S = data.size
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        perm = rng.permutation(S)
        swap = rng.random(S) < cfg.p_mask if has_masked else np.zeros(S, dtype=bool)
        total, agree = 0.0, 0
        for i in range(0, S, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            sw = swap[idx]
            nodes = data.nodes[:, idx].copy()
            locs = data.locs[:, idx].copy()
            tgt = target[idx].copy()
            if sw.any():
                nodes[:, sw] = data.masked_nodes[:, idx[sw]]
                locs[:, sw] = data.masked_locs[:, idx[sw]]
                tgt[sw] = target_m[idx[sw]]
            opt.zero_grad()
            with T.Tape():
                _, logits = model.forward(nodes, locs)
                loss = T.l1_loss(T.softmax(logits), Tensor(tgt))
            if not np.isfinite(loss.item()):
                model.eval()
                raise FloatingPointError(f"distillation loss diverged at epoch {epoch}")
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            agree += int((logits.data.argmax(1) == tgt.argmax(1)).sum())
        history.loss.append(total / S)
        history.agreement.append(agree / S)
        history.lr.append(opt.lr)
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            log.info("distill epoch %d loss %.5f agreement %.4f lr %.5f", epoch, history.loss[-1],
                     history.agreement[-1], opt.lr)
    model.eval()
    return history


def agreement(model: GrnModel, nodes: np.ndarray, locs: np.ndarray, teacher_logits: np.ndarray) -> float:
    pred = model.predict_logits(nodes, locs).argmax(1)
    return float((pred == teacher_logits.argmax(1)).mean())
