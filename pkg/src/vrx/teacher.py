"""Small CNN teacher: three conv blocks, global average pool, linear head.

The convolution, pooling and global-average primitives live here rather than
in ``tensor`` because nothing else needs them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor, apply, register_vjp

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# primitives

def conv2d(x, w, b) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1. x: [B,C,H,W], w: [O,C,3,3]."""
    x, w, b = T.as_tensor(x), T.as_tensor(w), T.as_tensor(b)
    B, C, H, W = x.shape
    O = w.shape[0]
    if w.shape[1:] != (C, 3, 3) or b.shape != (O,):
        raise T.ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    out = cols @ w.data.reshape(O, -1).T + b.data
    out = np.ascontiguousarray(out.reshape(B, H, W, O).transpose(0, 3, 1, 2))
    return apply("conv2d", (x, w, b), out, cols=cols)


@register_vjp("conv2d")
def _conv2d_vjp(g, e):
    x, w, _ = e.inputs
    B, C, H, W = x.shape
    O = w.shape[0]
    gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
    dw = (gm.T @ e.saved["cols"]).reshape(w.shape) if w.requires_grad else None
    db = gm.sum(axis=0)
    dx = None
    if x.requires_grad:
        dcols = (gm @ w.data.reshape(O, -1)).reshape(B, H, W, C, 3, 3)
        dxp = np.zeros((B, C, H + 2, W + 2))
        for ky in range(3):
            for kx in range(3):
                dxp[:, :, ky:ky + H, kx:kx + W] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        dx = dxp[:, :, 1:-1, 1:-1]
    return dx, dw, db


def maxpool2(x) -> Tensor:
    x = T.as_tensor(x)
    B, C, H, W = x.shape
    win = x.data[:, :, : H // 2 * 2, : W // 2 * 2].reshape(B, C, H // 2, 2, W // 2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return apply("maxpool2", (x,), out, arg=arg)


@register_vjp("maxpool2")
def _maxpool2_vjp(g, e):
    x = e.inputs[0]
    B, C, H, W = x.shape
    h, w = H // 2, W // 2
    win = np.zeros((B, C, h, w, 4))
    np.put_along_axis(win, e.saved["arg"][..., None], g[..., None], axis=-1)
    dx = np.zeros_like(x.data)
    dx[:, :, : h * 2, : w * 2] = win.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h * 2, w * 2)
    return (dx,)


def global_avg_pool(x) -> Tensor:
    x = T.as_tensor(x)
    return apply("gap", (x,), x.data.mean(axis=(2, 3)))


@register_vjp("gap")
def _gap_vjp(g, e):
    B, C, H, W = e.inputs[0].shape
    return (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)).copy(),)


# ---------------------------------------------------------------------------
# model

@dataclass
class TeacherModel:
    n_classes: int
    channels: tuple[int, ...] = (8, 16, 64)
    in_channels: int = 3
    seed: int = 0
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.params: dict[str, Tensor] = {}
        c_in = self.in_channels
        for k, c_out in enumerate(self.channels):
            std = np.sqrt(2.0 / (c_in * 9))
            self.params[f"conv{k}.w"] = Tensor(rng.normal(0, std, (c_out, c_in, 3, 3)), requires_grad=True)
            self.params[f"conv{k}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            c_in = c_out
        self.params["fc.w"] = Tensor(rng.normal(0, np.sqrt(1.0 / c_in), (c_in, self.n_classes)), requires_grad=True)
        self.params["fc.b"] = Tensor(np.zeros(self.n_classes), requires_grad=True)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, images, return_map: bool = False):
        """Logits for a [B,C,H,W] batch; optionally the last conv activation too."""
        h = T.as_tensor(np.asarray(images.data if isinstance(images, Tensor) else images) - 0.5)
        fmap = None
        for k in range(len(self.channels)):
            h = T.relu(conv2d(h, self.params[f"conv{k}.w"], self.params[f"conv{k}.b"]))
            if k == len(self.channels) - 1:
                fmap = h
            h = maxpool2(h)
        feats = global_avg_pool(h)
        logits = T.bias_add(T.matmul(feats, self.params["fc.w"]), self.params["fc.b"])
        if return_map:
            return logits, fmap, feats
        return logits

    def _batched(self, images, fn, batch: int = 128) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        outs = [fn(images[i:i + batch]) for i in range(0, len(images), batch)]
        return np.concatenate(outs, axis=0)

    def logits(self, images, batch: int = 128) -> np.ndarray:
        return self._batched(images, lambda x: self.forward(x).data, batch)

    def features(self, images, batch: int = 128) -> np.ndarray:
        """Penultimate (pooled) features, shape [B, feature_dim]."""
        return self._batched(images, lambda x: self.forward(x, return_map=True)[2].data, batch)

    def predict(self, images, classes=None) -> np.ndarray:
        z = self.logits(images)
        if classes is not None:
            z = z[:, list(classes)]
        return z.argmax(axis=1)

    # persistence -------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, p in self.params.items():
            T.save_tensor(p, d / f"{name}.tensor")
        manifest = {"kind": "teacher", "n_classes": self.n_classes, "channels": list(self.channels),
                    "in_channels": self.in_channels, "seed": self.seed, "history": self.history,
                    "tensors": sorted(self.params)}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "TeacherModel":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        model = cls(m["n_classes"], tuple(m["channels"]), m["in_channels"], m["seed"], m.get("history", {}))
        for name in m["tensors"]:
            model.params[name].data[...] = T.load_tensor(d / f"{name}.tensor").data
        return model


def accuracy(teacher: TeacherModel, images: list, classes=None) -> float:
    if not images:
        return float("nan")
    x = np.stack([im.pixels for im in images])
    y = np.array([im.label for im in images])
    pred = teacher.predict(x, classes)
    if classes is not None:
        pred = np.asarray(classes)[pred]
    return float((pred == y).mean())


def train_teacher(dataset: list, n_classes: int | None = None, epochs: int = 8, lr: float = 2e-3,
                  seed: int = 0, batch_size: int = 32, val_fraction: float = 0.1,
                  channels: tuple[int, ...] = (8, 16, 64)) -> TeacherModel:
    """Cross-entropy training with Adam; a held-out slice gives validation accuracy."""
    if not dataset:
        raise TrainingError("empty dataset")
    labels = np.array([im.label for im in dataset])
    n_classes = n_classes or int(labels.max()) + 1
    if len(set(labels.tolist())) < 2:
        raise TrainingError("need at least two classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    X = np.stack([im.pixels for im in dataset])

    model = TeacherModel(n_classes, channels, X.shape[1], seed)
    opt = T.Adam(model.parameters(), lr=lr)
    history = {"loss": [], "train_acc": [], "val_acc": []}
    for epoch in range(epochs):
        perm = rng.permutation(train_idx)
        total, correct, seen = 0.0, 0, 0
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            opt.zero_grad()
            with T.Tape():
                logits = model.forward(X[idx])
                loss = T.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged to {loss.item()} at epoch {epoch}, batch {i // batch_size}")
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(1) == labels[idx]).sum())
            seen += len(idx)
        history["loss"].append(total / seen)
        history["train_acc"].append(correct / seen)
        if n_val:
            history["val_acc"].append(float((model.predict(X[val_idx]) == labels[val_idx]).mean()))
        log.info("teacher epoch %d loss %.4f train %.3f val %s", epoch, history["loss"][-1],
                 history["train_acc"][-1], history["val_acc"][-1] if n_val else "-")
    model.history = history
    return model


# ---------------------------------------------------------------------------
# attention

def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear interpolation matrix (half-pixel centres), shape [n_out, n_in]."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    R = np.zeros((n_out, n_in))
    R[np.arange(n_out), lo] += 1 - frac
    R[np.arange(n_out), hi] += frac
    return R


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``arr``."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    return resize_matrix(h, out_h) @ arr @ resize_matrix(w, out_w).T


def grad_attention_batch(teacher: TeacherModel, images: np.ndarray, class_ids) -> tuple[np.ndarray, np.ndarray]:
    """Grad-CAM maps in [0,1], shape [B,H,W], plus a per-image dead-map flag."""
    images = np.asarray(images)
    class_ids = np.asarray(class_ids, dtype=int)
    if np.any(class_ids >= teacher.n_classes) or np.any(class_ids < 0):
        raise ValueError(f"class id out of range for {teacher.n_classes} classes")
    with T.Tape():
        logits, fmap, _ = teacher.forward(images, return_map=True)
        picked = T.sum(T.take(T.reshape(logits, (-1,)),
                              np.arange(len(images)) * teacher.n_classes + class_ids, axis=0))
    (g,) = T.backward(picked, wrt=[fmap])
    weights = g.mean(axis=(2, 3))
    cam = np.maximum(np.einsum("bc,bchw->bhw", weights, fmap.data), 0.0)
    H, W = images.shape[-2:]
    cam = resize_bilinear(cam, H, W)
    lo = cam.min(axis=(1, 2), keepdims=True)
    span = cam.max(axis=(1, 2), keepdims=True) - lo
    dead = span[:, 0, 0] <= 1e-12
    cam = np.where(span > 1e-12, (cam - lo) / np.where(span > 1e-12, span, 1.0), 0.0)
    return cam, dead


def grad_attention(teacher: TeacherModel, image: np.ndarray, class_id: int) -> tuple[np.ndarray, dict]:
    cam, dead = grad_attention_batch(teacher, image[None], [class_id])
    return cam[0], {"dead": bool(dead[0])}
