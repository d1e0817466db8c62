"""Glyph-based image world with controllable parts, layouts and poses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import dumps_tensor, loads_tensor

SHAPES = ("disc", "bar", "cross", "ring", "wedge")

PALETTE = {
    "disc": (0.90, 0.20, 0.15),
    "bar": (0.15, 0.75, 0.20),
    "cross": (0.15, 0.30, 0.95),
    "ring": (0.95, 0.85, 0.10),
    "wedge": (0.85, 0.20, 0.90),
}


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Global transform about the image centre: rotation in degrees, then shift."""
    rotation: float = 0.0
    dx: float = 0.0
    dy: float = 0.0


@dataclass
class WorldSpec:
    n_classes: int
    class_parts: list[list[str]]
    layouts: list[list[tuple[float, float]]]
    poses: list[Pose] = field(default_factory=lambda: [Pose()])
    pose_set: list[list[int]] | None = None
    image_size: int = 64
    channels: int = 3
    noise_level: float = 0.03
    part_radius: float = 7.0
    jitter: float = 0.02
    clutter: int = 3
    name: str = "world"

    def __post_init__(self):
        self.layouts = [[tuple(map(float, p)) for p in lay] for lay in self.layouts]
        self.poses = [p if isinstance(p, Pose) else Pose(**p) for p in self.poses]
        if self.pose_set is None:
            self.pose_set = [list(range(len(self.poses))) for _ in range(self.n_classes)]
        self.validate()

    @property
    def parts_per_class(self) -> list[int]:
        return [len(p) for p in self.class_parts]

    @property
    def part_shapes(self) -> tuple[str, ...]:
        return SHAPES

    def validate(self) -> None:
        if self.n_classes < 1:
            raise WorldError("n_classes must be positive")
        if not (len(self.class_parts) == len(self.layouts) == len(self.pose_set) == self.n_classes):
            raise WorldError("class_parts, layouts and pose_set need one entry per class")
        signatures = []
        for c, (parts, lay) in enumerate(zip(self.class_parts, self.layouts)):
            if len(parts) < 1 or len(parts) != len(lay):
                raise WorldError(f"class {c}: {len(parts)} parts but {len(lay)} positions")
            for s in parts:
                if s not in SHAPES:
                    raise WorldError(f"class {c}: unknown shape {s!r}")
            for x, y in lay:
                if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                    raise WorldError(f"class {c}: position ({x}, {y}) outside [0,1]^2")
            if not self.pose_set[c]:
                raise WorldError(f"class {c}: empty pose set")
            for p in self.pose_set[c]:
                if not 0 <= p < len(self.poses):
                    raise WorldError(f"class {c}: pose id {p} out of range")
            signatures.append(tuple(sorted(zip(parts, lay))))
        for a in range(self.n_classes):
            for b in range(a):
                if signatures[a] == signatures[b]:
                    raise WorldError(f"classes {b} and {a} have identical parts and layout")

    def with_pose_sets(self, pose_set: list[list[int]]) -> "WorldSpec":
        return replace(self, pose_set=[list(p) for p in pose_set])

    def unbiased(self) -> "WorldSpec":
        """Same world with every pose allowed for every class."""
        return self.with_pose_sets([list(range(len(self.poses)))] * self.n_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layouts"] = [[list(p) for p in lay] for lay in self.layouts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        d["poses"] = [Pose(**p) for p in d.get("poses", [{}])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WorldSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class LabeledImage:
    pixels: np.ndarray              # [C, H, W] in [0, 1]
    label: int
    image_id: int
    pose: int
    provenance: list[dict]

    def part_box(self, part: int) -> tuple[int, int, int, int]:
        return tuple(self.provenance[part]["box"])


# ---------------------------------------------------------------------------
# world catalogue

def default_world() -> WorldSpec:
    """Three classes sharing five glyphs; each class has its own arrangement of four parts."""
    return WorldSpec(
        n_classes=3,
        class_parts=[
            ["disc", "bar", "cross", "ring"],
            ["wedge", "disc", "bar", "cross"],
            ["ring", "wedge", "disc", "bar"],
        ],
        layouts=[
            [(0.28, 0.28), (0.72, 0.28), (0.28, 0.72), (0.72, 0.72)],
            [(0.50, 0.22), (0.22, 0.60), (0.78, 0.60), (0.50, 0.82)],
            [(0.22, 0.30), (0.50, 0.50), (0.78, 0.30), (0.50, 0.80)],
        ],
        poses=[Pose(0.0, 0.0, 0.0), Pose(0.0, 0.05, 0.0), Pose(0.0, -0.05, 0.0)],
        name="default",
    )


def single_part_world() -> WorldSpec:
    """Three classes with one glyph each at a fixed position."""
    return WorldSpec(
        n_classes=3,
        class_parts=[["disc"], ["cross"], ["wedge"]],
        layouts=[[(0.35, 0.40)], [(0.62, 0.55)], [(0.45, 0.65)]],
        poses=[Pose()],
        jitter=0.0,
        name="single-part",
    )


def pose_biased_world() -> WorldSpec:
    """Three classes built from the same four glyphs, told apart only by arrangement.

    Each class is seen in a single pose during training; ``.unbiased()`` gives the
    matching test world with all three poses. The corner orders belong to different
    rotation orbits, so a rotated image never looks like another class's layout.
    """
    a, b = 0.34, 0.66
    tl, tr, bl, br = (a, a), (b, a), (a, b), (b, b)
    return WorldSpec(
        n_classes=3,
        class_parts=[["disc", "ring", "cross", "bar"]] * 3,
        layouts=[[tl, tr, bl, br], [tl, br, bl, tr], [tl, tr, br, bl]],
        poses=[Pose(0.0), Pose(90.0), Pose(180.0)],
        pose_set=[[0], [1], [2]],
        name="pose-biased",
    )


def random_world(n_classes: int, seed: int, parts: int = 3) -> WorldSpec:
    """Random separable world, used for statistics over many classes."""
    rng = np.random.default_rng(seed)
    class_parts, layouts = [], []
    for _ in range(n_classes):
        class_parts.append([str(s) for s in rng.choice(SHAPES, size=parts, replace=False)])
        pts = []
        while len(pts) < parts:
            p = tuple(float(v) for v in rng.uniform(0.2, 0.8, size=2).round(3))
            if all(np.hypot(p[0] - q[0], p[1] - q[1]) > 0.28 for q in pts):
                pts.append(p)
        layouts.append(pts)
    return WorldSpec(n_classes=n_classes, class_parts=class_parts, layouts=layouts,
                     name=f"random-{seed}")


# ---------------------------------------------------------------------------
# rendering

def _glyph_inside(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Signed inside-distance in pixels (positive inside) in glyph-local coordinates."""
    d = np.hypot(u, v)
    if shape == "disc":
        return r - d
    if shape == "ring":
        return np.minimum(r - d, d - 0.5 * r)
    if shape == "bar":
        return np.minimum(r - np.abs(u), 0.38 * r - np.abs(v))
    if shape == "cross":
        h = np.minimum(r - np.abs(u), 0.3 * r - np.abs(v))
        w = np.minimum(r - np.abs(v), 0.3 * r - np.abs(u))
        return np.maximum(h, w)
    if shape == "wedge":
        # isosceles triangle, apex towards -v
        apex = v + r
        base = 0.8 * r - v
        side = (0.55 * (v + r) - np.abs(u)) / np.sqrt(1 + 0.55 ** 2)
        return np.minimum(np.minimum(apex, base), side)
    raise WorldError(f"unknown shape {shape!r}")


def part_centres(spec: WorldSpec, label: int, pose: int, rng: np.random.Generator | None = None) -> np.ndarray:
    pose_t = spec.poses[pose]
    pts = np.asarray(spec.layouts[label], dtype=float) - 0.5
    th = np.deg2rad(pose_t.rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    pts = pts @ rot.T + 0.5 + np.array([pose_t.dx, pose_t.dy])
    if rng is not None and spec.jitter > 0:
        pts = pts + rng.normal(0.0, spec.jitter, size=pts.shape)
    margin = (spec.part_radius + 1) / spec.image_size
    return np.clip(pts, margin, 1 - margin)


def render_image(spec: WorldSpec, label: int, pose: int, rng: np.random.Generator,
                 centres: np.ndarray | None = None,
                 shapes: list[str] | None = None) -> tuple[np.ndarray, list[dict]]:
    H = W = spec.image_size
    C = spec.channels
    img = np.empty((C, H, W))
    base = 0.45 + rng.uniform(-0.05, 0.05)
    img[:] = base
    yy, xx = np.mgrid[0:H, 0:W].astype(float) + 0.5

    for _ in range(spec.clutter):
        s = int(rng.integers(2, 5))
        x0 = int(rng.integers(0, W - s))
        y0 = int(rng.integers(0, H - s))
        grey = rng.uniform(0.2, 0.7)
        tint = rng.uniform(-0.08, 0.08, size=C)
        img[:, y0:y0 + s, x0:x0 + s] = (grey + tint)[:, None, None]

    if centres is None:
        centres = part_centres(spec, label, pose, rng)
    th = np.deg2rad(spec.poses[pose].rotation)
    r = spec.part_radius
    provenance = []
    for k, shape in enumerate(spec.class_parts[label] if shapes is None else shapes):
        cx, cy = centres[k] * np.array([W, H])
        du, dv = xx - cx, yy - cy
        u = np.cos(th) * du + np.sin(th) * dv
        v = -np.sin(th) * du + np.cos(th) * dv
        alpha = np.clip(_glyph_inside(shape, u, v, r) + 0.5, 0.0, 1.0)
        colour = np.asarray(PALETTE[shape][:C]) + rng.uniform(-0.04, 0.04, size=C)
        img = img * (1 - alpha) + colour[:, None, None] * alpha
        ys, xs = np.nonzero(alpha > 0.5)
        box = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1] if len(xs) else \
            [int(cx), int(cy), int(cx) + 1, int(cy) + 1]
        provenance.append({
            "part": k, "shape": shape, "box": box,
            "centre": [float(centres[k][0]), float(centres[k][1])], "pose": int(pose),
        })

    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0), provenance


def generate_dataset(spec: WorldSpec, n_per_class: int, seed: int, id_offset: int = 0) -> list[LabeledImage]:
    """Class-major list of images; image ``k`` draws from ``rng([seed, k])`` only."""
    if n_per_class < 1:
        raise WorldError("n_per_class must be at least 1")
    out = []
    idx = 0
    for c in range(spec.n_classes):
        for _ in range(n_per_class):
            image_id = id_offset + idx
            rng = np.random.default_rng([seed, image_id])
            poses = spec.pose_set[c]
            pose = int(poses[int(rng.integers(len(poses)))])
            pixels, prov = render_image(spec, c, pose, rng)
            out.append(LabeledImage(pixels, c, image_id, pose, prov))
            idx += 1
    return out


def generate_defects(spec: WorldSpec, n_per_class: int, seed: int, id_offset: int = 0) -> list[LabeledImage]:
    """Images with one flawed part: a randomly chosen part is drawn as a different glyph.

    Provenance records the flawed part under ``defect`` as {part, shape, original}.
    """
    out = []
    idx = 0
    for c in range(spec.n_classes):
        for _ in range(n_per_class):
            image_id = id_offset + idx
            rng = np.random.default_rng([seed, image_id])
            poses = spec.pose_set[c]
            pose = int(poses[int(rng.integers(len(poses)))])
            shapes = list(spec.class_parts[c])
            k = int(rng.integers(len(shapes)))
            others = [s for s in SHAPES if s != shapes[k]]
            original, shapes[k] = shapes[k], others[int(rng.integers(len(others)))]
            pixels, prov = render_image(spec, c, pose, rng, shapes=shapes)
            prov[k]["defect"] = {"part": k, "shape": shapes[k], "original": original}
            out.append(LabeledImage(pixels, c, image_id, pose, prov))
            idx += 1
    return out


def mean_pixel(images) -> np.ndarray:
    """Per-channel mean over a dataset (list of LabeledImage or arrays)."""
    arr = [im.pixels if isinstance(im, LabeledImage) else im for im in images]
    return np.mean([a.mean(axis=(1, 2)) for a in arr], axis=0)


def mask_image(image: np.ndarray, attention: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Zero every pixel whose attention is below ``tau``."""
    if not 0.0 < tau < 1.0:
        raise WorldError(f"tau must lie in (0, 1), got {tau}")
    keep = (attention >= tau).astype(image.dtype)
    return image * keep[None, :, :]


def occlude_region(image: np.ndarray, box, fill) -> np.ndarray:
    x0, y0, x1, y1 = (int(v) for v in box)
    _, H, W = image.shape
    if x1 <= x0 or y1 <= y0:
        raise WorldError(f"degenerate box {box}")
    if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
        raise WorldError(f"box {box} outside {W}x{H} image")
    out = image.copy()
    fill = np.broadcast_to(np.asarray(fill, dtype=float).reshape(-1, 1, 1), (image.shape[0], 1, 1))
    out[:, y0:y1, x0:x1] = fill
    return out


# ---------------------------------------------------------------------------
# export

def export_dataset(images: list[LabeledImage], directory, spec: WorldSpec | None = None) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for im in images:
        name = f"images/{im.image_id:06d}.bin"
        (d / name).write_text(dumps_tensor(im.pixels))
        lines.append(json.dumps({"image_id": im.image_id, "file": name, "label": im.label,
                                 "pose": im.pose, "provenance": im.provenance}, sort_keys=True))
    (d / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    if spec is not None:
        (d / "world.json").write_text(spec.to_json())


def load_dataset(directory) -> list[LabeledImage]:
    d = Path(directory)
    out = []
    for line in (d / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        pixels = loads_tensor((d / rec["file"]).read_text()).data
        out.append(LabeledImage(pixels, rec["label"], rec["image_id"], rec["pose"], rec["provenance"]))
    return out


def load_image(path) -> np.ndarray:
    return loads_tensor(Path(path).read_text()).data
