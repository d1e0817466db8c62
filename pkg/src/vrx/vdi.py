"""Decision interpretation: gradient contribution scores for hypotheses, nodes and edges."""

from __future__ import annotations

import base64
import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .grn import GrnModel, stack_hypotheses
from .scg import HypothesisSet, build_hypotheses, edge_pairs
from .teacher import TeacherModel
from .vce import ConceptBank

EXPLANATION_VERSION = 1


class ConsistencyError(RuntimeError):
    """An explanation failed its own additivity identities."""


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scores

def contribution_weights(model: GrnModel, nodes: np.ndarray, locs: np.ndarray, class_id: int):
    """Gradient of logit y^c with respect to every hypothesis embedding.

    Returns (alpha [n, B, dim], embeddings [n, B, dim], logits [B, n]). Samples
    are independent in inference mode, so one backward pass over the batch sum
    yields every per-sample gradient.
    """
    if model.training:
        raise RuntimeError("contribution weights need the model in inference mode")
    c = model.class_index(class_id)
    with T.Tape():
        emb, logits = model.forward(nodes, locs)
        y = T.sum(T.take(logits, [c], axis=1))
        (alpha,) = T.backward(y, wrt=[emb])
    return alpha, emb.data, logits.data


def contribution_scores(model: GrnModel, alpha: np.ndarray, emb: np.ndarray):
    """(hypothesis [n, B], node [n, B, N], edge [n, B, P]) scores as slice dot products."""
    cfg = model.config
    prod = alpha * emb
    node = np.stack([prod[..., cfg.node_slice(v)].sum(-1) for v in range(cfg.n_concepts)], axis=-1)
    edge = np.stack([prod[..., cfg.edge_slice(p)].sum(-1) for p in range(cfg.n_edges)], axis=-1)
    return prod.sum(-1), node, edge


# ---------------------------------------------------------------------------
# display buckets

@dataclass(frozen=True)
class ContributionScale:
    """Buckets on a normalized score in [-1, 1]; thresholds are configurable."""
    strong: float = 0.5
    weak: float = 0.1
    names: tuple[str, ...] = ("strong-negative", "negative", "neutral", "positive", "strong-positive")
    colors: tuple[str, ...] = ("#d7301f", "#fdae61", "#bdbdbd", "#9ecae1", "#08519c")

    def __post_init__(self):
        if not 0 <= self.weak < self.strong:
            raise ValueError(f"need 0 <= weak < strong, got {self.weak}, {self.strong}")

    def bucket(self, score: float) -> int:
        if score < -self.strong:
            return 0
        if score < -self.weak:
            return 1
        if score <= self.weak:
            return 2
        if score <= self.strong:
            return 3
        return 4

    def name(self, score: float) -> str:
        return self.names[self.bucket(score)]

    def color(self, score: float) -> str:
        return self.colors[self.bucket(score)]


# ---------------------------------------------------------------------------
# explanation

@dataclass
class HypothesisScores:
    hypothesis: int                # class id the hypothesis was built for
    score: float
    node_scores: list[float]
    edge_scores: list[float]       # in edge_pairs order


@dataclass
class ClassSection:
    class_id: int
    role: str                      # "why" for the predicted class, "why-not" otherwise
    logit: float
    bias: float
    hypotheses: list[HypothesisScores]


@dataclass
class Explanation:
    image_id: int | None
    class_ids: list[int]
    teacher_logits: list[float] | None
    student_logits: list[float]
    predicted: int
    sections: list[ClassSection]
    concepts: list[dict]           # per hypothesis: detected flags, concept ids, boxes, distances, locations
    no_concepts_detected: bool = False
    version: int = EXPLANATION_VERSION
    notes: list[str] = field(default_factory=list)

    def section(self, class_id: int) -> ClassSection:
        for s in self.sections:
            if s.class_id == class_id:
                return s
        raise KeyError(class_id)

    def hypothesis(self, class_id: int, hypothesis: int) -> HypothesisScores:
        for h in self.section(class_id).hypotheses:
            if h.hypothesis == hypothesis:
                return h
        raise KeyError(hypothesis)

    def max_abs(self) -> float:
        vals = [abs(v) for s in self.sections for h in s.hypotheses for v in (*h.node_scores, *h.edge_scores)]
        return max(vals, default=0.0)

    def check(self, tol: float = 1e-8) -> None:
        for s in self.sections:
            total = sum(h.score for h in s.hypotheses) + s.bias
            if abs(total - s.logit) > tol * max(1.0, abs(s.logit)):
                raise ConsistencyError(f"class {s.class_id}: sum of hypothesis scores + bias = {total!r}, "
                                       f"logit = {s.logit!r}")
            for h in s.hypotheses:
                parts = sum(h.node_scores) + sum(h.edge_scores)
                if abs(parts - h.score) > tol * max(1.0, abs(h.score)):
                    raise ConsistencyError(f"class {s.class_id} hypothesis {h.hypothesis}: slices sum to "
                                           f"{parts!r}, score is {h.score!r}")


def _concept_meta(h: HypothesisSet, class_ids: list[int]) -> list[dict]:
    out = []
    for c in class_ids:
        scg = h[c]
        out.append({
            "hypothesis": c,
            "concept_ids": [n.concept_id for n in scg.nodes],
            "detected": [n.detected for n in scg.nodes],
            "boxes": [list(n.box) if n.box is not None else None for n in scg.nodes],
            "distances": [n.distance if np.isfinite(n.distance) else None for n in scg.nodes],
            "locations": [list(n.location) for n in scg.nodes],
        })
    return out


def explain_batch(model: GrnModel, hsets: list[HypothesisSet], teacher_logits: np.ndarray | None = None,
                  tol: float = 1e-8) -> list[Explanation]:
    """Explanations for prebuilt hypothesis sets; every identity is checked before returning."""
    if not hsets:
        return []
    nodes, locs = stack_hypotheses(hsets, model.class_ids)
    cids = model.class_ids
    per_class = {}
    logits = None
    for c in cids:
        alpha, emb, logits = contribution_weights(model, nodes, locs, c)
        per_class[c] = contribution_scores(model, alpha, emb)
    bias = model.E_b.data
    out = []
    for b, h in enumerate(hsets):
        pred = cids[int(np.argmax(logits[b]))]
        sections = []
        for k, c in enumerate(cids):
            hyp, node, edge = per_class[c]
            sections.append(ClassSection(
                c, "why" if c == pred else "why-not", float(logits[b, k]), float(bias[k]),
                [HypothesisScores(cids[i], float(hyp[i, b]), [float(v) for v in node[i, b]],
                                  [float(v) for v in edge[i, b]]) for i in range(len(cids))]))
        none = not any(n.detected for s in h.scgs for n in s.nodes)
        expl = Explanation(
            image_id=h.image_id, class_ids=list(cids),
            teacher_logits=None if teacher_logits is None else [float(v) for v in teacher_logits[b]],
            student_logits=[float(v) for v in logits[b]], predicted=pred, sections=sections,
            concepts=_concept_meta(h, cids), no_concepts_detected=none,
            notes=["no concepts detected"] if none else [])
        expl.check(tol)
        out.append(expl)
    return out


def explain(image: np.ndarray, model: GrnModel, teacher: TeacherModel, banks: list[ConceptBank],
            t: float | None = None, image_id: int | None = None) -> Explanation:
    by_class = {b.class_id: b for b in banks}
    ordered = [by_class[c] for c in model.class_ids]
    h = build_hypotheses(image, ordered, teacher, t, image_id)
    tl = teacher.logits(image[None])[:, model.class_ids]
    return explain_batch(model, [h], tl)[0]


# ---------------------------------------------------------------------------
# serialization and rendering

def explanation_to_dict(e: Explanation) -> dict:
    d = {
        "version": e.version,
        "image_id": e.image_id,
        "class_ids": e.class_ids,
        "teacher_logits": e.teacher_logits,
        "student_logits": e.student_logits,
        "predicted": e.predicted,
        "no_concepts_detected": e.no_concepts_detected,
        "notes": e.notes,
        "concepts": e.concepts,
        "sections": [{
            "class_id": s.class_id, "role": s.role, "logit": s.logit, "bias": s.bias,
            "hypotheses": [{"hypothesis": h.hypothesis, "score": h.score, "node_scores": h.node_scores,
                            "edge_scores": h.edge_scores} for h in s.hypotheses],
        } for s in e.sections],
    }
    m = e.max_abs()
    d["normalizer"] = m
    return d


def explanation_to_json(e: Explanation) -> str:
    # repr-exact floats: json emits the shortest round-tripping form of each double
    return json.dumps(explanation_to_dict(e), indent=1)


def explanation_from_json(text: str) -> Explanation:
    d = json.loads(text)
    if d.get("version") != EXPLANATION_VERSION:
        raise FormatError(f"unsupported explanation version {d.get('version')!r}")
    sections = [ClassSection(s["class_id"], s["role"], s["logit"], s["bias"],
                             [HypothesisScores(h["hypothesis"], h["score"], h["node_scores"], h["edge_scores"])
                              for h in s["hypotheses"]]) for s in d["sections"]]
    return Explanation(d["image_id"], d["class_ids"], d["teacher_logits"], d["student_logits"], d["predicted"],
                       sections, d["concepts"], d["no_concepts_detected"], d["version"], d.get("notes", []))


def explanation_to_csv(e: Explanation) -> str:
    """One row per score: hypothesis totals, then node and edge slices."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "class_id", "role", "hypothesis", "kind", "index", "from", "to", "score"])
    pairs = None
    for s in e.sections:
        for h in s.hypotheses:
            pairs = pairs or edge_pairs(len(h.node_scores))
            w.writerow([e.image_id, s.class_id, s.role, h.hypothesis, "hypothesis", "", "", "", repr(h.score)])
            for v, x in enumerate(h.node_scores):
                w.writerow([e.image_id, s.class_id, s.role, h.hypothesis, "node", v, "", "", repr(x)])
            for p, x in enumerate(h.edge_scores):
                j, i = pairs[p]
                w.writerow([e.image_id, s.class_id, s.role, h.hypothesis, "edge", p, j, i, repr(x)])
    return buf.getvalue()


def render_dot(e: Explanation, class_id: int | None = None, scale: ContributionScale | None = None) -> str:
    """One cluster per hypothesis; colors follow the normalized score buckets."""
    scale = scale or ContributionScale()
    c = e.predicted if class_id is None else class_id
    sec = e.section(c)
    norm = e.max_abs() or 1.0
    lines = [f'digraph "explanation_{e.image_id}_class{c}" {{', "  rankdir=LR;",
             f'  label="class {c} ({sec.role}), logit {sec.logit:.4f}";']
    for h in sec.hypotheses:
        meta = next(m for m in e.concepts if m["hypothesis"] == h.hypothesis)
        lines.append(f"  subgraph cluster_h{h.hypothesis} {{")
        lines.append(f'    label="hypothesis {h.hypothesis}: s={h.score:.4f}";')
        for v, sv in enumerate(h.node_scores):
            style = "filled" if meta["detected"][v] else "filled,dashed"
            lines.append(f'    h{h.hypothesis}_n{v} [label="concept {meta["concept_ids"][v]}\\n{sv:.4f}", '
                         f'style="{style}", fillcolor="{scale.color(sv / norm)}"];')
        N = len(h.node_scores)
        for (j, i), sv in zip(edge_pairs(N), h.edge_scores):
            lines.append(f'    h{h.hypothesis}_n{j} -> h{h.hypothesis}_n{i} [label="{sv:.4f}", '
                         f'color="{scale.color(sv / norm)}"];')
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def render_svg(e: Explanation, image: np.ndarray, class_id: int | None = None,
               scale: ContributionScale | None = None, zoom: int = 4) -> str:
    """Concept boxes of one class section drawn over the image (embedded PNG)."""
    from PIL import Image

    scale = scale or ContributionScale()
    c = e.predicted if class_id is None else class_id
    sec = e.section(c)
    norm = e.max_abs() or 1.0
    H, W = image.shape[1:]
    rgb = (np.clip(np.transpose(image, (1, 2, 0)), 0, 1) * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    href = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * zoom}" height="{H * zoom}" '
             f'viewBox="0 0 {W} {H}">',
             f'<image href="{href}" x="0" y="0" width="{W}" height="{H}" style="image-rendering:pixelated"/>']
    hyp = next(h for h in sec.hypotheses if h.hypothesis == c)
    meta = next(m for m in e.concepts if m["hypothesis"] == c)
    for v, box in enumerate(meta["boxes"]):
        if box is None:
            continue
        x0, y0, x1, y1 = box
        col = scale.color(hyp.node_scores[v] / norm)
        parts.append(f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" fill="none" '
                     f'stroke="{col}" stroke-width="0.8"><title>concept {meta["concept_ids"][v]}: '
                     f'{hyp.node_scores[v]:.4f}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_explanation(e: Explanation, fmt: str = "json", image: np.ndarray | None = None,
                       class_id: int | None = None, scale: ContributionScale | None = None) -> str:
    if fmt == "json":
        return explanation_to_json(e)
    if fmt == "csv":
        return explanation_to_csv(e)
    if fmt == "dot":
        return render_dot(e, class_id, scale)
    if fmt == "svg":
        if image is None:
            raise FormatError("svg rendering needs the image")
        return render_svg(e, image, class_id, scale)
    raise FormatError(f"unknown format {fmt!r}; expected json, csv, dot or svg")
