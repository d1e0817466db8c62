"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape():
        loss = l1_loss(softmax(matmul(x, w)), target)
    backward(loss)

Outside a tape every operation is a plain numpy computation, which is what
inference paths use.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=DTYPE, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)


_local = threading.local()

# op name -> vjp(grad_out, entry) -> tuple of input grads (None where not needed)
_VJP: dict[str, Callable] = {}


def register_vjp(op: str):
    def deco(fn):
        _VJP[op] = fn
        return fn
    return deco


class Tape:
    """Ordered record of primitive applications on the current thread."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.entries)


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def apply(op: str, inputs: Sequence[Tensor], out: np.ndarray, **saved) -> Tensor:
    """Wrap ``out`` as a tensor and record it if any input needs a gradient."""
    result = Tensor(out)
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return result
    if op not in _VJP:
        raise TapeError(f"no adjoint registered for op {op!r}")
    if tape.consumed:
        raise TapeError("tape already consumed by backward(); start a new Tape")
    result.requires_grad = True
    result._tape = tape
    result._index = len(tape.entries)
    tape.entries.append(TapeEntry(op, tuple(inputs), result, saved))
    return result


def backward(root: Tensor, wrt: Sequence[Tensor] = (), retain_tape: bool = False) -> list[np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf on the tape.

    ``wrt`` may name intermediate tensors as well; their gradients are returned
    in order (zeros when unreachable). Leaves that the root does not depend on
    get zero gradients.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        raise TapeError("root was not recorded on a tape")
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; re-run the forward pass")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries[: root._index + 1]):
        for t in entry.inputs:
            if t.requires_grad and t._tape is None:
                leaves[id(t)] = t
        g = grads.pop(id(entry.output), None) if not _wanted(entry.output, wrt) else grads.get(id(entry.output))
        if g is None:
            continue
        in_grads = _VJP[entry.op](g, entry)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # leaves recorded after the root never reach it
    for entry in tape.entries[root._index + 1:]:
        for t in entry.inputs:
            if t.requires_grad and t._tape is None:
                leaves.setdefault(id(t), t)

    for key, leaf in leaves.items():
        g = grads.get(key)
        g = np.zeros_like(leaf.data) if g is None else g
        leaf.grad = g if leaf.grad is None else leaf.grad + g

    if not retain_tape:
        tape.consumed = True
        # entries and outputs point at each other; drop the saved arrays now, not at the next cyclic GC
        tape.entries.clear()
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _wanted(t: Tensor, wrt: Sequence[Tensor]) -> bool:
    return any(t is w for w in wrt)


# ---------------------------------------------------------------------------
# primitives

def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return apply("add", (a, b), a.data + b.data)


@register_vjp("add")
def _add_vjp(g, e):
    return g, g


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return apply("sub", (a, b), a.data - b.data)


@register_vjp("sub")
def _sub_vjp(g, e):
    return g, -g


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    return apply("mul", (a, b), a.data * b.data)


@register_vjp("mul")
def _mul_vjp(g, e):
    a, b = e.inputs
    return g * b.data, g * a.data


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return apply("scale", (a,), a.data * c, c=c)


@register_vjp("scale")
def _scale_vjp(g, e):
    return (g * e.saved["c"],)


def bias_add(a, b) -> Tensor:
    """Add a 1-D bias along the last axis; the only broadcast supported."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match last axis of {a.shape}")
    return apply("bias_add", (a, b), a.data + b.data)


@register_vjp("bias_add")
def _bias_add_vjp(g, e):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched over a shared leading axis for 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return apply("matmul", (a, b), a.data @ b.data)


@register_vjp("matmul")
def _matmul_vjp(g, e):
    a, b = e.inputs
    if a.ndim == 2:
        return g @ b.data.T, a.data.T @ g
    return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return apply("reshape", (a,), a.data.reshape(shape))


@register_vjp("reshape")
def _reshape_vjp(g, e):
    return (g.reshape(e.inputs[0].shape),)


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    return apply("permute", (a,), np.ascontiguousarray(a.data.transpose(axes)), axes=axes)


@register_vjp("permute")
def _permute_vjp(g, e):
    return (g.transpose(np.argsort(e.saved["axes"])),)


def transpose(a) -> Tensor:
    return permute(a, (1, 0))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty list")
    ref = parts[0]
    ax = axis % ref.ndim
    for p in parts[1:]:
        if p.ndim != ref.ndim or any(p.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax):
            raise ShapeError(f"concat: {p.shape} disagrees with {ref.shape} off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    return apply("concat", parts, np.concatenate([p.data for p in parts], axis=ax), axis=ax, sizes=sizes)


@register_vjp("concat")
def _concat_vjp(g, e):
    cuts = np.cumsum(e.saved["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=e.saved["axis"]))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return apply("slice", (a,), a.data[tuple(idx)].copy(), index=tuple(idx))


@register_vjp("slice")
def _slice_vjp(g, e):
    out = np.zeros_like(e.inputs[0].data)
    out[e.saved["index"]] = g
    return (out,)


def take(a, indices: Sequence[int], axis: int = -1) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    return apply("take", (a,), np.take(a.data, indices, axis=axis), indices=indices, axis=axis)


@register_vjp("take")
def _take_vjp(g, e):
    a = e.inputs[0]
    axis = e.saved["axis"] % a.ndim
    out = np.zeros_like(a.data)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, e.saved["indices"], np.moveaxis(g, axis, 0))
    return (out,)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return apply("sum", (a,), np.array(a.data.sum()))


@register_vjp("sum")
def _sum_vjp(g, e):
    return (np.full_like(e.inputs[0].data, float(g)),)


def mean(a) -> Tensor:
    a = as_tensor(a)
    return apply("mean", (a,), np.array(a.data.mean()))


@register_vjp("mean")
def _mean_vjp(g, e):
    x = e.inputs[0].data
    return (np.full_like(x, float(g) / x.size),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return apply("relu", (a,), np.maximum(a.data, 0.0))


@register_vjp("relu")
def _relu_vjp(g, e):
    return (g * (e.inputs[0].data > 0),)


def softmax(a) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=-1, keepdims=True)
    return apply("softmax", (a,), out)


@register_vjp("softmax")
def _softmax_vjp(g, e):
    s = e.output.data
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def l1_loss(a, b) -> Tensor:
    """Mean absolute difference."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same("l1_loss", a, b)
    d = a.data - b.data
    return apply("l1_loss", (a, b), np.array(np.abs(d).mean()), sign=np.sign(d))


@register_vjp("l1_loss")
def _l1_vjp(g, e):
    s = e.saved["sign"] * (float(g) / e.saved["sign"].size)
    return s, -s


def cross_entropy(logits, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()
    return apply("cross_entropy", (logits,), np.array(loss), logp=logp, labels=labels)


@register_vjp("cross_entropy")
def _ce_vjp(g, e):
    p = np.exp(e.saved["logp"])
    labels = e.saved["labels"]
    p[np.arange(len(labels)), labels] -= 1.0
    return (p * (float(g) / len(labels)),)


class BatchNorm:
    """Per-feature standardization over axis 0 with learned scale and shift."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name="bn.gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name="bn.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def batch_norm(a, state: BatchNorm, training: bool = True) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {a.shape} vs feature dim {state.gamma.shape[0]}")
    x = a.data
    if training:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu) * inv
    out = xhat * state.gamma.data + state.beta.data
    return apply("batch_norm", (a, state.gamma, state.beta), out,
                 xhat=xhat, inv=inv, training=training)


@register_vjp("batch_norm")
def _bn_vjp(g, e):
    _, gamma, _ = e.inputs
    xhat, inv = e.saved["xhat"], e.saved["inv"]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma.data
    if e.saved["training"]:
        n = g.shape[0]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# optimizer

def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    t = state.get("t", 0) + 1
    m = state.setdefault("m", [np.zeros_like(p.data) for p in params])
    v = state.setdefault("v", [np.zeros_like(p.data) for p in params])
    if len(m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for k, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeError(f"grad {g.shape} does not match param {p.data.shape}")
        m[k] = beta1 * m[k] + (1 - beta1) * g
        v[k] = beta2 * v[k] + (1 - beta2) * g * g
        p.data -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    state["t"] = t
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, *self.betas, eps=self.eps)


# ---------------------------------------------------------------------------
# container format: one JSON header line, then the base64 little-endian payload

def dumps_tensor(x) -> str:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8", order="C")
    header = {"shape": list(arr.shape), "dtype": "f64", "encoding": "base64-le"}
    return json.dumps(header) + "\n" + base64.b64encode(arr.tobytes()).decode("ascii") + "\n"


def loads_tensor(text: str) -> Tensor:
    head, _, payload = text.partition("\n")
    header = json.loads(head)
    if header.get("dtype") != "f64" or header.get("encoding") != "base64-le":
        raise ValueError(f"unsupported tensor container header: {header}")
    raw = base64.b64decode(payload.strip())
    shape = tuple(header["shape"])
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"payload has {arr.size} values, header shape {shape}")
    return Tensor(arr.reshape(shape).astype(DTYPE))


def save_tensor(x, path) -> None:
    Path(path).write_text(dumps_tensor(x))


def load_tensor(path) -> Tensor:
    return loads_tensor(Path(path).read_text())
