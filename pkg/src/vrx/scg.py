"""Structural concept graphs: per-class concept detection and graph assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .teacher import TeacherModel
from .vce import ConceptBank, PatchSet, SegmentConfig, segment_batch
from .world import occlude_region

SCG_VERSION = 1
DUMMY_EPS = 1e-3


class SchemaError(ValueError):
    pass


class DetectionError(ValueError):
    pass


@dataclass
class ConceptDetection:
    concept_id: int
    detected: bool
    feature: np.ndarray
    location: tuple[float, float]
    distance: float
    box: tuple[int, int, int, int] | None = None


@dataclass
class Scg:
    class_id: int
    nodes: list[ConceptDetection]
    image_id: int | None = None
    edges: list[tuple[int, int, tuple[float, float, float, float]]] = field(init=False)

    def __post_init__(self):
        self.edges = edge_list(self.nodes)

    @property
    def N(self) -> int:
        return len(self.nodes)

    def node_features(self) -> np.ndarray:
        return np.stack([n.feature for n in self.nodes])

    def locations(self) -> np.ndarray:
        return np.array([n.location for n in self.nodes], dtype=float)

    def detected(self) -> list[int]:
        return [n.concept_id for n in self.nodes if n.detected]


def edge_pairs(N: int) -> list[tuple[int, int]]:
    """Ordered (from, to) pairs, lexicographic, self-loops excluded."""
    return [(j, i) for j in range(N) for i in range(N) if j != i]


def edge_list(nodes: list[ConceptDetection]):
    return [(j, i, (*nodes[j].location, *nodes[i].location)) for j, i in edge_pairs(len(nodes))]


@dataclass
class HypothesisSet:
    scgs: list[Scg]
    image_id: int | None = None

    def __post_init__(self):
        ids = [s.class_id for s in self.scgs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids in hypothesis set: {ids}")

    @property
    def n(self) -> int:
        return len(self.scgs)

    def __getitem__(self, class_id: int) -> Scg:
        for s in self.scgs:
            if s.class_id == class_id:
                return s
        raise KeyError(class_id)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Node features [n, N, D] and locations [n, N, 2]."""
        return (np.stack([s.node_features() for s in self.scgs]),
                np.stack([s.locations() for s in self.scgs]))


# ---------------------------------------------------------------------------
# detection

def detect_from_patches(patches: PatchSet, bank: ConceptBank, t: float | None = None,
                        eps: float = DUMMY_EPS) -> list[ConceptDetection]:
    """Greedy one-to-one matching of concepts to patches by ascending distance.

    A concept is detected when its matched patch lies within the threshold:
    the global ``t`` when given, else the concept's own threshold.
    """
    means = bank.means()
    N, D = means.shape
    if len(patches) and patches.features.shape[1] != D:
        raise DetectionError(f"patch features have dim {patches.features.shape[1]}, bank has {D}")
    thresholds = np.full(N, float(t)) if t is not None else bank.thresholds()
    if np.any(np.isnan(thresholds)):
        raise DetectionError(f"bank for class {bank.class_id} has concepts without a threshold; pass t")

    assigned: dict[int, tuple[int, float]] = {}
    if len(patches):
        dist = np.linalg.norm(means[:, None, :] - patches.features[None, :, :], axis=-1)
        order = np.argsort(dist, axis=None, kind="stable")
        used = set()
        for flat in order:
            c, p = divmod(int(flat), dist.shape[1])
            if c in assigned or p in used:
                continue
            assigned[c] = (p, float(dist[c, p]))
            used.add(p)
            if len(assigned) == N:
                break

    out = []
    for c in range(N):
        cid = bank.concepts[c].concept_id
        if c in assigned and assigned[c][1] <= thresholds[c]:
            p, d = assigned[c]
            out.append(ConceptDetection(cid, True, patches.features[p].copy(),
                                        (float(patches.centroids[p, 0]), float(patches.centroids[p, 1])),
                                        d, tuple(int(v) for v in patches.boxes[p])))
        else:
            d = assigned[c][1] if c in assigned else float("inf")
            out.append(ConceptDetection(cid, False, np.full(D, eps), (0.0, 0.0), d, None))
    return out


def detect_concepts(image: np.ndarray, bank: ConceptBank, teacher: TeacherModel, t: float | None = None,
                    eps: float = DUMMY_EPS, segment: SegmentConfig | None = None) -> list[ConceptDetection]:
    bank.check_teacher(teacher.feature_dim)
    patches = segment_batch([image], teacher, config=segment)[0]
    return detect_from_patches(patches, bank, t, eps)


def hypotheses_from_patches(patches: PatchSet, banks: list[ConceptBank], t: float | None = None,
                            eps: float = DUMMY_EPS) -> HypothesisSet:
    scgs = [Scg(b.class_id, detect_from_patches(patches, b, t, eps), patches.image_id) for b in banks]
    return HypothesisSet(scgs, patches.image_id)


def build_hypotheses_batch(images: list[np.ndarray], banks: list[ConceptBank], teacher: TeacherModel,
                           t: float | None = None, image_ids=None, eps: float = DUMMY_EPS,
                           segment: SegmentConfig | None = None, chunk: int = 64) -> list[HypothesisSet]:
    if not banks:
        raise ValueError("need at least one concept bank")
    for b in banks:
        b.check_teacher(teacher.feature_dim)
    image_ids = list(image_ids) if image_ids is not None else list(range(len(images)))
    out = []
    for i in range(0, len(images), chunk):
        sets = segment_batch(list(images[i:i + chunk]), teacher, image_ids=image_ids[i:i + chunk], config=segment)
        out.extend(hypotheses_from_patches(ps, banks, t, eps) for ps in sets)
    return out


def build_hypotheses(image: np.ndarray, banks: list[ConceptBank], teacher: TeacherModel,
                     t: float | None = None, image_id: int | None = None, eps: float = DUMMY_EPS,
                     segment: SegmentConfig | None = None) -> HypothesisSet:
    """One SCG per bank; the image is segmented and featurized once."""
    return build_hypotheses_batch([image], banks, teacher, t, [image_id], eps, segment)[0]


def mask_concept(image: np.ndarray, hypotheses: HypothesisSet, class_id: int, concept_id: int,
                 banks: list[ConceptBank], teacher: TeacherModel, fill, t: float | None = None,
                 eps: float = DUMMY_EPS, segment: SegmentConfig | None = None):
    """Occlude a detected concept's patch and rebuild every hypothesis from the result."""
    node = next((n for n in hypotheses[class_id].nodes if n.concept_id == concept_id), None)
    if node is None or not node.detected:
        raise DetectionError(f"concept {concept_id} is not detected in hypothesis {class_id}")
    masked = occlude_region(image, node.box, fill)
    return masked, build_hypotheses(masked, banks, teacher, t, hypotheses.image_id, eps, segment)


# ---------------------------------------------------------------------------
# serialization

def scg_to_dict(scg: Scg) -> dict:
    return {
        "version": SCG_VERSION,
        "class_id": scg.class_id,
        "image_id": scg.image_id,
        "nodes": [{
            "concept_id": n.concept_id,
            "detected": n.detected,
            "feature": [float(v) for v in n.feature],
            "location": [n.location[0], n.location[1]],
            "distance": n.distance if np.isfinite(n.distance) else None,
            "box": list(n.box) if n.box is not None else None,
        } for n in scg.nodes],
        "edges": [{"from": j, "to": i, "spatial": list(s)} for j, i, s in scg.edges],
    }


def serialize_scg(scg: Scg) -> str:
    return json.dumps(scg_to_dict(scg))


def _need(d: dict, key: str, path: str):
    if key not in d:
        raise SchemaError(f"{path}.{key}: missing")
    return d[key]


def scg_from_dict(d: dict) -> Scg:
    nodes = []
    for k, n in enumerate(_need(d, "nodes", "scg")):
        path = f"scg.nodes[{k}]"
        loc = _need(n, "location", path)
        if len(loc) != 2:
            raise SchemaError(f"{path}.location: expected 2 values, got {len(loc)}")
        dist = n.get("distance")
        box = n.get("box")
        nodes.append(ConceptDetection(
            int(_need(n, "concept_id", path)), bool(_need(n, "detected", path)),
            np.asarray(_need(n, "feature", path), dtype=float), (float(loc[0]), float(loc[1])),
            float("inf") if dist is None else float(dist), tuple(box) if box is not None else None))
    if len({len(n.feature) for n in nodes}) > 1:
        raise SchemaError("scg.nodes: feature lengths differ")
    scg = Scg(int(_need(d, "class_id", "scg")), nodes, d.get("image_id"))
    given = {}
    for k, e in enumerate(_need(d, "edges", "scg")):
        path = f"scg.edges[{k}]"
        given[(int(_need(e, "from", path)), int(_need(e, "to", path)))] = _need(e, "spatial", path)
    for j, i, spatial in scg.edges:
        if (j, i) not in given:
            raise SchemaError(f"scg.edges: missing edge ({j},{i})")
        if [float(v) for v in given[(j, i)]] != list(spatial):
            raise SchemaError(f"scg.edges: edge ({j},{i}) spatial {given[(j, i)]} disagrees with node locations")
    extra = set(given) - {(j, i) for j, i, _ in scg.edges}
    if extra:
        raise SchemaError(f"scg.edges: unexpected edges {sorted(extra)}")
    return scg


def parse_scg(text: str) -> Scg:
    return scg_from_dict(json.loads(text))


def hypotheses_to_json(h: HypothesisSet) -> str:
    return json.dumps({"version": SCG_VERSION, "image_id": h.image_id, "scgs": [scg_to_dict(s) for s in h.scgs]})


def hypotheses_from_json(text: str) -> HypothesisSet:
    d = json.loads(text)
    return HypothesisSet([scg_from_dict(s) for s in d["scgs"]], d.get("image_id"))
