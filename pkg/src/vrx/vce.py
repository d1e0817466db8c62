"""Visual concept extraction: attention filtering, grid segmentation, clustering, ranking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .teacher import TeacherModel, grad_attention_batch, resize_matrix
from .world import LabeledImage, mean_pixel, occlude_region

BANK_VERSION = 1


class SegmentationError(ValueError):
    pass


class DiscoveryError(ValueError):
    pass


class BankIncompatible(ValueError):
    pass


@dataclass
class SegmentConfig:
    grids: tuple[int, ...] = (2, 4, 8)
    patch_size: int = 32
    max_masked: float = 0.9


@dataclass
class DiscoveryConfig:
    K: int = 15
    N: int = 4
    tau: float = 0.5
    use_filter: bool = True
    min_cluster: int = 5
    seed: int = 0
    max_iter: int = 100
    tol: float = 1e-6
    importance_members: int = 40
    threshold_quantile: float = 0.9
    min_separation: float = 0.1     # selected concepts' mean locations must differ by this much; 0 disables
    segment: SegmentConfig = field(default_factory=SegmentConfig)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Patch:
    image_id: int
    box: tuple[int, int, int, int]
    level: int
    feature: np.ndarray
    centroid: tuple[float, float]


@dataclass
class PatchSet:
    """All patches of one image as parallel arrays."""
    image_id: int
    boxes: np.ndarray        # [M, 4] x0, y0, x1, y1
    levels: np.ndarray       # [M]
    centroids: np.ndarray    # [M, 2]
    features: np.ndarray     # [M, D]

    def __len__(self) -> int:
        return len(self.boxes)

    def patches(self) -> list[Patch]:
        return [Patch(self.image_id, tuple(int(v) for v in b), int(l), f, (float(c[0]), float(c[1])))
                for b, l, c, f in zip(self.boxes, self.levels, self.centroids, self.features)]


def attention_mask(attention: np.ndarray, tau: float) -> np.ndarray:
    """Binarized attention: 0 below ``tau``, 1 elsewhere (the map ``mask_image`` multiplies by)."""
    return (attention >= tau).astype(float)


def grid_boxes(height: int, width: int, grids=(2, 4, 8)) -> tuple[np.ndarray, np.ndarray]:
    boxes, levels = [], []
    for g in grids:
        ys = np.linspace(0, height, g + 1).round().astype(int)
        xs = np.linspace(0, width, g + 1).round().astype(int)
        for r in range(g):
            for c in range(g):
                boxes.append((xs[c], ys[r], xs[c + 1], ys[r + 1]))
                levels.append(g)
    return np.array(boxes, dtype=int), np.array(levels, dtype=int)


def _crops(image: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Crop and bilinearly resize each box to ``size`` x ``size``."""
    out = np.empty((len(boxes), image.shape[0], size, size))
    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    for k, (x0, y0, x1, y1) in enumerate(boxes):
        key = (y1 - y0, x1 - x0)
        if key not in cache:
            cache[key] = (resize_matrix(key[0], size), resize_matrix(key[1], size).T)
        ry, rxt = cache[key]
        out[k] = ry @ image[:, y0:y1, x0:x1] @ rxt
    return out


def segment_batch(images: list[np.ndarray], teacher: TeacherModel, masks: list[np.ndarray | None] | None = None,
                  image_ids=None, config: SegmentConfig | None = None, skip_empty: bool = False) -> list[PatchSet]:
    """Segment and featurize many images in shared teacher batches.

    With a mask (binarized attention, 1 = keep), patches whose masked fraction
    exceeds ``max_masked`` are dropped. Features always come from the unmasked
    crop so they are comparable with detection-time patches.
    """
    config = config or SegmentConfig()
    masks = masks if masks is not None else [None] * len(images)
    image_ids = image_ids if image_ids is not None else list(range(len(images)))
    kept, crops = [], []
    for img, m, iid in zip(images, masks, image_ids):
        H, W = img.shape[-2:]
        boxes, levels = grid_boxes(H, W, config.grids)
        if m is not None:
            frac = np.array([1.0 - m[y0:y1, x0:x1].mean() for x0, y0, x1, y1 in boxes])
            sel = frac <= config.max_masked
            boxes, levels = boxes[sel], levels[sel]
        if len(boxes) == 0:
            if skip_empty:
                kept.append((iid, boxes, levels, H, W))
                continue
            raise SegmentationError(f"image {iid}: every patch is masked; lower tau")
        kept.append((iid, boxes, levels, H, W))
        crops.append(_crops(img, boxes, config.patch_size))
    feats = teacher.features(np.concatenate(crops)) if crops else np.zeros((0, teacher.feature_dim))
    out, pos = [], 0
    for iid, boxes, levels, H, W in kept:
        n = len(boxes)
        cent = np.stack([(boxes[:, 0] + boxes[:, 2]) / (2.0 * W), (boxes[:, 1] + boxes[:, 3]) / (2.0 * H)], axis=1) \
            if n else np.zeros((0, 2))
        out.append(PatchSet(iid, boxes, levels, cent, feats[pos:pos + n]))
        pos += n
    return out


def segment_multiresolution(image: np.ndarray, teacher: TeacherModel, mask: np.ndarray | None = None,
                            image_id: int = 0, config: SegmentConfig | None = None) -> list[Patch]:
    return segment_batch([image], teacher, [mask], [image_id], config)[0].patches()


# ---------------------------------------------------------------------------
# clustering

def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd iterations from a seeded k-means++ start. Returns (labels, centres, inertia)."""
    n = len(X)
    k = min(k, n)
    rng = np.random.default_rng(seed)
    centres = np.empty((k, X.shape[1]))
    centres[0] = X[rng.integers(n)]
    d2 = ((X - centres[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centres[j] = X[idx]
        d2 = np.minimum(d2, ((X - centres[j]) ** 2).sum(1))

    prev = np.inf
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centres[None]) ** 2).sum(-1)
        labels = dist.argmin(1)
        inertia = float(dist[np.arange(n), labels].sum())
        for j in range(k):
            members = X[labels == j]
            if len(members):
                centres[j] = members.mean(0)
        if prev < np.inf and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    dist = ((X[:, None, :] - centres[None]) ** 2).sum(-1)
    labels = dist.argmin(1)
    return labels, centres, float(dist[np.arange(n), labels].sum())


# ---------------------------------------------------------------------------
# concept bank

@dataclass
class Concept:
    concept_id: int
    mean_feature: np.ndarray
    members: int
    importance: float
    threshold: float | None
    exemplars: list[dict]       # {image, box, level, distance}, ascending distance
    cluster: int = -1

    def exemplar_location(self, k: int = 0, size: int = 64) -> tuple[float, float]:
        x0, y0, x1, y1 = self.exemplars[k]["box"]
        return ((x0 + x1) / (2 * size), (y0 + y1) / (2 * size))


@dataclass
class ConceptBank:
    class_id: int
    concepts: list[Concept]
    teacher_dim: int
    config_hash: str = ""
    version: int = BANK_VERSION

    @property
    def N(self) -> int:
        return len(self.concepts)

    def means(self) -> np.ndarray:
        return np.stack([c.mean_feature for c in self.concepts])

    def thresholds(self) -> np.ndarray:
        return np.array([np.nan if c.threshold is None else c.threshold for c in self.concepts])

    def digest(self) -> str:
        return hashlib.sha256(bank_to_json(self).encode()).hexdigest()[:16]

    def check_teacher(self, teacher_dim: int) -> None:
        if self.teacher_dim != teacher_dim:
            raise BankIncompatible(f"bank for class {self.class_id} has feature dim {self.teacher_dim}, "
                                   f"teacher has {teacher_dim}")


def discover_concepts(class_images: list[LabeledImage], teacher: TeacherModel, class_id: int,
                      config: DiscoveryConfig | None = None, fill=None,
                      return_clusters: bool = False):
    """Top-N concepts of one class, ranked by mean occlusion drop of the class logit."""
    cfg = config or DiscoveryConfig()
    if len(class_images) < 20:
        raise DiscoveryError(f"need at least 20 images, got {len(class_images)}")
    if cfg.K < cfg.N:
        raise DiscoveryError(f"K={cfg.K} must be >= N={cfg.N}")
    pixels = np.stack([im.pixels for im in class_images])
    ids = [im.image_id for im in class_images]
    by_id = {im.image_id: im.pixels for im in class_images}
    fill = mean_pixel(class_images) if fill is None else np.asarray(fill)

    if cfg.use_filter:
        cams, _ = grad_attention_batch(teacher, pixels, [class_id] * len(pixels))
        masks = [attention_mask(c, cfg.tau) for c in cams]
    else:
        masks = None
    sets = segment_batch(list(pixels), teacher, masks, ids, cfg.segment, skip_empty=True)
    patches = [p for s in sets for p in s.patches()]
    if not patches:
        raise SegmentationError("no candidate patches survived attention filtering; lower tau")
    X = np.stack([p.feature for p in patches])
    labels, _, _ = kmeans(X, cfg.K, cfg.seed, cfg.max_iter, cfg.tol)

    base = teacher.logits(pixels)[:, class_id]
    base_by_id = dict(zip(ids, base))
    census = {}
    candidates = []
    for j in range(int(labels.max()) + 1):
        idx = np.flatnonzero(labels == j)
        census[j] = len(idx)
        if len(idx) < cfg.min_cluster:
            continue
        feats = X[idx]
        mu = feats.mean(0)
        dist = np.linalg.norm(feats - mu, axis=1)
        order = np.argsort(dist, kind="stable")
        probe = order[: cfg.importance_members]
        occluded = np.stack([occlude_region(by_id[patches[idx[k]].image_id], patches[idx[k]].box, fill)
                             for k in probe])
        drops = np.array([base_by_id[patches[idx[k]].image_id] for k in probe]) - \
            teacher.logits(occluded)[:, class_id]
        exemplars = [{"image": int(patches[idx[k]].image_id), "box": [int(v) for v in patches[idx[k]].box],
                      "level": int(patches[idx[k]].level), "distance": float(dist[k])} for k in order]
        candidates.append(Concept(
            concept_id=-1, mean_feature=mu, members=len(idx), importance=float(drops.mean()),
            threshold=float(np.quantile(dist, cfg.threshold_quantile)), exemplars=exemplars, cluster=j))

    if len(candidates) < cfg.N:
        raise DiscoveryError(f"only {len(candidates)} clusters with >= {cfg.min_cluster} members; "
                             f"census {census}")
    candidates.sort(key=lambda c: (-c.importance, c.cluster))
    top = _select_distinct(candidates, cfg.N, cfg.min_separation, cfg.importance_members, pixels.shape[-1])
    for k, c in enumerate(top):
        c.concept_id = k
    bank = ConceptBank(class_id, top, teacher.feature_dim, cfg.digest())
    if return_clusters:
        return bank, candidates
    return bank


def _mean_location(concept: Concept, k: int, size: int) -> np.ndarray:
    return np.mean([concept.exemplar_location(j, size) for j in range(min(k, len(concept.exemplars)))], axis=0)


def _select_distinct(ranked: list[Concept], n: int, min_sep: float, k: int, size: int) -> list[Concept]:
    """Top ``n`` by rank, skipping clusters that sit on an already chosen concept's location.

    Skipped clusters back-fill in rank order when too few distinct ones exist.
    """
    if min_sep <= 0:
        return ranked[:n]
    chosen, skipped, locs = [], [], []
    for c in ranked:
        loc = _mean_location(c, k, size)
        if all(np.linalg.norm(loc - q) >= min_sep for q in locs):
            chosen.append(c)
            locs.append(loc)
        else:
            skipped.append(c)
        if len(chosen) == n:
            return chosen
    keep = {id(c) for c in chosen + skipped[: n - len(chosen)]}
    return [c for c in ranked if id(c) in keep]


# ---------------------------------------------------------------------------
# serialization

def bank_to_dict(bank: ConceptBank) -> dict:
    return {
        "version": bank.version,
        "class_id": bank.class_id,
        "teacher_dim": bank.teacher_dim,
        "config_hash": bank.config_hash,
        "concepts": [{
            "id": c.concept_id,
            "cluster": c.cluster,
            "mean_feature": [float(v) for v in c.mean_feature],
            "importance": c.importance,
            "members": c.members,
            "threshold": c.threshold,
            "exemplars": c.exemplars,
        } for c in bank.concepts],
    }


def bank_to_json(bank: ConceptBank) -> str:
    return json.dumps(bank_to_dict(bank), sort_keys=True)


def bank_from_dict(d: dict, teacher_dim: int | None = None) -> ConceptBank:
    for key in ("class_id", "teacher_dim", "concepts"):
        if key not in d:
            raise ValueError(f"concept bank missing field {key!r}")
    concepts = []
    for k, c in enumerate(d["concepts"]):
        feat = np.asarray(c["mean_feature"], dtype=float)
        if feat.shape != (d["teacher_dim"],):
            raise BankIncompatible(f"concepts[{k}].mean_feature has length {feat.size}, "
                                   f"bank declares {d['teacher_dim']}")
        concepts.append(Concept(
            concept_id=int(c.get("id", k)), mean_feature=feat, members=int(c.get("members", 0)),
            importance=float(c.get("importance", 0.0)), threshold=c.get("threshold"),
            exemplars=list(c.get("exemplars", [])), cluster=int(c.get("cluster", -1))))
    bank = ConceptBank(int(d["class_id"]), concepts, int(d["teacher_dim"]), d.get("config_hash", ""),
                       int(d.get("version", BANK_VERSION)))
    if teacher_dim is not None:
        bank.check_teacher(teacher_dim)
    return bank


def save_bank(bank: ConceptBank, path) -> None:
    Path(path).write_text(bank_to_json(bank))


def load_bank(path, teacher_dim: int | None = None) -> ConceptBank:
    return bank_from_dict(json.loads(Path(path).read_text()), teacher_dim)


def save_banks(banks: list[ConceptBank], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for b in banks:
        save_bank(b, d / f"bank_{b.class_id:03d}.json")


def load_banks(directory, teacher_dim: int | None = None) -> list[ConceptBank]:
    banks = [load_bank(p, teacher_dim) for p in sorted(Path(directory).glob("bank_*.json"))]
    if not banks:
        raise FileNotFoundError(f"no bank_*.json files in {directory}")
    return sorted(banks, key=lambda b: b.class_id)
