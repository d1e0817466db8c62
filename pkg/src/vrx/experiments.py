"""End-to-end pipeline and the four experiment families (fidelity, logic
consistency, sensitivity, bias diagnosis) on the synthetic world."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .grn import DistillConfig, DistillData, GrnConfig, GrnModel, agreement, distill_train, softmax_np, \
    stack_hypotheses
from .scg import HypothesisSet, build_hypotheses_batch, edge_pairs
from .teacher import TeacherModel, accuracy, resize_bilinear, train_teacher
from .vce import ConceptBank, DiscoveryConfig, discover_concepts, grid_boxes
from .vdi import Explanation, contribution_scores, contribution_weights, explain_batch
from .world import LabeledImage, WorldSpec, default_world, generate_dataset, generate_defects, mean_pixel, \
    occlude_region, \
    pose_biased_world, single_part_world

log = logging.getLogger(__name__)

WORLDS = {"default": default_world, "pose-biased": pose_biased_world, "single-part": single_part_world}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PipelineConfig:
    world: str = "default"
    train_per_class: int = 400
    test_per_class: int = 200
    discovery_per_class: int = 50
    teacher_epochs: int = 8
    teacher_lr: float = 2e-3
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    node_dims: tuple[int, ...] = (64, 32, 32)
    edge_dims: tuple[int, ...] = (4, 5, 5, 5)
    edge_concat: bool = True
    distill: DistillConfig = field(default_factory=DistillConfig)
    t: float | None = None
    masked_variants: bool = True
    fig4_per_class: int = 2
    seed: int = 0

    def spec(self) -> WorldSpec:
        if self.world not in WORLDS:
            raise ValueError(f"unknown world {self.world!r}; choose from {sorted(WORLDS)}")
        return WORLDS[self.world]()


@dataclass
class LogicConfig:
    source: str = "defects"     # "defects": one flawed part per image; "test": the pipeline's test split
    defects_per_class: int = 100
    pool_max: int = 120
    feather: int = 2
    seed: int = 0
    margin: float = 0.3
    cause_majority: float = 0.65


@dataclass
class SensitivityConfig:
    trials: int = 100
    feather: int = 2
    band: float = 0.05          # relative change still counted as "unchanged"
    max_tries: int = 5          # donor patches tried per visual trial
    seed: int = 0
    min_rate: float = 0.8


@dataclass
class BiasConfig:
    pipeline: PipelineConfig = field(default_factory=lambda: PipelineConfig(world="pose-biased"))
    augment_class: int = 1
    augment_per_pose: int = 150
    min_gain: float = 0.05
    min_signature: float = 0.6


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def _build(cls, d: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        inner = {"discovery": DiscoveryConfig, "distill": DistillConfig, "pipeline": PipelineConfig}.get(f.name)
        if inner is not None and isinstance(v, dict):
            v = _build(inner, v)
        elif f.name == "segment" and isinstance(v, dict):
            from .vce import SegmentConfig
            v = SegmentConfig(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**kwargs)


def config_from_dict(cls, d: dict):
    return _build(cls, d)


# ---------------------------------------------------------------------------
# reports

@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    trials: list[dict]
    aggregates: dict
    checks: dict = field(default_factory=dict)        # name -> {"value", "threshold", "op", "passed"}
    flags: list[str] = field(default_factory=list)
    wall_clock: float = 0.0                           # kept out of to_json so reports hash identically

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def check(self, name: str, value: float, threshold: float, op: str = ">=") -> bool:
        ok = value >= threshold if op == ">=" else value <= threshold
        self.checks[name] = {"value": value, "threshold": threshold, "op": op, "passed": bool(ok)}
        return ok

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "config": self.config, "aggregates": self.aggregates,
                "checks": self.checks, "passed": self.passed, "flags": self.flags, "trials": self.trials}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        return cls(d["experiment"], d["config"], d["trials"], d["aggregates"], d["checks"], d.get("flags", []))

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = sorted({k for t in self.trials for k in t})
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for t in self.trials:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in t.items()})
        return buf.getvalue()

    def save(self, directory, stem: str | None = None) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = stem or self.experiment
        (d / f"{stem}.json").write_text(self.to_json())
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}.timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock}))
        return d / f"{stem}.json"


def _r(x: float) -> float:
    return float(round(float(x), 12))


# ---------------------------------------------------------------------------
# image editing

def crop(image: np.ndarray, box) -> np.ndarray:
    x0, y0, x1, y1 = (int(v) for v in box)
    return image[:, y0:y1, x0:x1].copy()


def feather_mask(h: int, w: int, feather: int) -> np.ndarray:
    if feather <= 0:
        return np.ones((h, w))
    y = np.minimum(np.arange(h), np.arange(h)[::-1])
    x = np.minimum(np.arange(w), np.arange(w)[::-1])
    d = np.minimum.outer(y, x).astype(float)
    return np.clip((d + 0.5) / feather, 0.0, 1.0)


def paste(image: np.ndarray, box, patch: np.ndarray, feather: int = 2) -> np.ndarray:
    """Blend ``patch`` (resized to the box) into ``image`` with a feathered border."""
    x0, y0, x1, y1 = (int(v) for v in box)
    h, w = y1 - y0, x1 - x0
    if patch.shape[1:] != (h, w):
        patch = resize_bilinear(patch, h, w)
    a = feather_mask(h, w, feather)[None]
    out = image.copy()
    out[:, y0:y1, x0:x1] = a * patch + (1 - a) * out[:, y0:y1, x0:x1]
    return out


@dataclass(frozen=True)
class SubstitutionPlan:
    image_id: int
    hypothesis: int
    concept_id: int
    source: str                     # "vrx-guided" | "random-patch" | "good-for-good" | "occlude"
    box: tuple[int, int, int, int]
    replacement: tuple[int, tuple[int, int, int, int]] | None   # (image id, box) or None for occlusion

    def apply(self, image: np.ndarray, pixels_by_id: dict, fill, feather: int = 2) -> np.ndarray:
        if self.replacement is None:
            return occlude_region(image, self.box, fill)
        rid, rbox = self.replacement
        return paste(image, self.box, crop(pixels_by_id[rid], rbox), feather)


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class Artifacts:
    config: PipelineConfig
    spec: WorldSpec
    train: list[LabeledImage]
    test: list[LabeledImage]
    teacher: TeacherModel
    banks: list[ConceptBank]
    model: GrnModel
    history: object
    fill: np.ndarray
    train_hyps: list[HypothesisSet]
    test_hyps: list[HypothesisSet]

    @property
    def class_ids(self) -> list[int]:
        return self.model.class_ids

    def pixels_by_id(self) -> dict[int, np.ndarray]:
        return {im.image_id: im.pixels for im in (*self.train, *self.test)}

    def hypotheses(self, images: list[np.ndarray], image_ids=None) -> list[HypothesisSet]:
        return build_hypotheses_batch(images, self.banks, self.teacher, self.config.t, image_ids)

    def teacher_logits(self, images) -> np.ndarray:
        return self.teacher.logits(np.stack(list(images)))[:, self.class_ids]

    def explain(self, images: list[np.ndarray], image_ids=None, hsets=None) -> list[Explanation]:
        hsets = hsets if hsets is not None else self.hypotheses(images, image_ids)
        return explain_batch(self.model, hsets, self.teacher_logits(images))

    def save(self, directory) -> None:
        from .vce import save_banks
        d = Path(directory)
        self.teacher.save(d / "teacher")
        save_banks(self.banks, d / "banks")
        self.model.save(d / "model", [b.digest() for b in self.banks])
        (d / "world.json").write_text(self.spec.to_json())
        (d / "config.json").write_text(json.dumps(config_to_dict(self.config), indent=2, sort_keys=True))
        if self.history is not None:
            (d / "distill_history.csv").write_text(self.history.to_csv())

    @classmethod
    def load(cls, directory) -> "Artifacts":
        """Saved models plus datasets and hypotheses regenerated from the stored config."""
        from .vce import load_banks
        d = Path(directory)
        cfg = config_from_dict(PipelineConfig, json.loads((d / "config.json").read_text()))
        spec = WorldSpec.from_json((d / "world.json").read_text())
        teacher = TeacherModel.load(d / "teacher")
        banks = load_banks(d / "banks", teacher.feature_dim)
        model = GrnModel.load(d / "model")
        train = generate_dataset(spec, cfg.train_per_class, cfg.seed)
        test = generate_dataset(spec.unbiased(), cfg.test_per_class, cfg.seed + 1, 10 ** 6)
        art = cls(cfg, spec, train, test, teacher, banks, model, None, mean_pixel(train), [], [])
        art.train_hyps = art.hypotheses([im.pixels for im in train], [im.image_id for im in train])
        art.test_hyps = art.hypotheses([im.pixels for im in test], [im.image_id for im in test])
        return art


def _stage(name, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc
    log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    return out


def _masked_variants(teacher, banks, images, hyps, fill, seed, t):
    """One masked copy per image: a random detected concept of the label's hypothesis is occluded."""
    masked, ids, has = [], [], []
    for im, h in zip(images, hyps):
        det = [n for n in h[im.label].nodes if n.detected] if im.label in [s.class_id for s in h.scgs] else []
        if det:
            rng = np.random.default_rng([seed, im.image_id, 17])
            node = det[int(rng.integers(len(det)))]
            masked.append(occlude_region(im.pixels, node.box, fill))
            has.append(True)
        else:
            masked.append(im.pixels)
            has.append(False)
        ids.append(im.image_id)
    mh = build_hypotheses_batch(masked, banks, teacher, t, ids)
    return masked, mh, np.array(has)


def run_pipeline(spec: WorldSpec | None = None, cfg: PipelineConfig | None = None,
                 train: list[LabeledImage] | None = None) -> tuple[Artifacts, ExperimentReport]:
    """Dataset, teacher, concept banks, hypotheses and the distilled student."""
    t_start = time.perf_counter()
    cfg = cfg or PipelineConfig()
    spec = spec or cfg.spec()
    n = spec.n_classes
    cids = list(range(n))
    if train is None:
        train = _stage("gen-world", generate_dataset, spec, cfg.train_per_class, cfg.seed)
    test = _stage("gen-world", generate_dataset, spec.unbiased(), cfg.test_per_class, cfg.seed + 1, 10 ** 6)
    teacher = _stage("train-teacher", train_teacher, train, n, cfg.teacher_epochs, cfg.teacher_lr, cfg.seed)
    banks = []
    for c in cids:
        imgs = [im for im in train if im.label == c][: cfg.discovery_per_class]
        banks.append(_stage("extract-concepts", discover_concepts, imgs, teacher, c, cfg.discovery))
    fill = mean_pixel(train)

    def hyps(images):
        return build_hypotheses_batch([im.pixels for im in images], banks, teacher, cfg.t,
                                      [im.image_id for im in images])

    train_h = _stage("build-scg", hyps, train)
    test_h = _stage("build-scg", hyps, test)
    nodes, locs = stack_hypotheses(train_h, cids)
    tl = teacher.logits(np.stack([im.pixels for im in train]))[:, cids]
    data = DistillData(nodes, locs, tl)
    if cfg.masked_variants:
        m_img, m_h, _ = _stage("build-scg", _masked_variants, teacher, banks, train, train_h, fill, cfg.seed, cfg.t)
        data.masked_nodes, data.masked_locs = stack_hypotheses(m_h, cids)
        data.masked_logits = teacher.logits(np.stack(m_img))[:, cids]
    gcfg = GrnConfig(n, banks[0].N, (teacher.feature_dim, *cfg.node_dims), cfg.edge_dims, cfg.edge_concat,
                     seed=cfg.seed)
    model = GrnModel(gcfg, cids)
    dcfg = DistillConfig(**{**asdict(cfg.distill), "seed": cfg.seed})
    history = _stage("distill", distill_train, model, data, dcfg)
    art = Artifacts(cfg, spec, train, test, teacher, banks, model, history, fill, train_h, test_h)

    test_px = [im.pixels for im in test]
    tl_test = teacher.logits(np.stack(test_px))[:, cids]
    tn, tloc = stack_hypotheses(test_h, cids)
    agree = agreement(model, tn, tloc, tl_test)
    rows = _fig4_rows(art, cfg.fig4_per_class)
    report = ExperimentReport(
        "pipeline", config_to_dict(cfg), rows,
        {"teacher_train_acc": _r(accuracy(teacher, train, cids)),
         "teacher_test_acc": _r(accuracy(teacher, test, cids)),
         "student_test_agreement": _r(agree),
         "student_train_agreement": _r(agreement(model, nodes, locs, tl)),
         "final_distill_loss": _r(history.loss[-1]),
         "n_train": len(train), "n_test": len(test),
         "bank_digests": [b.digest() for b in banks]})
    report.check("student_test_agreement", agree, 0.9)
    report.wall_clock = time.perf_counter() - t_start
    return art, report


def _fig4_rows(art: Artifacts, per_class: int) -> list[dict]:
    """Teacher vs student class probabilities, plus one row per masked detected concept."""
    rows = []
    cids = art.class_ids
    for c in cids:
        items = [(im, h) for im, h in zip(art.test, art.test_hyps) if im.label == c][:per_class]
        for im, h in items:
            variants = [(f"class{c}", im.pixels)]
            for node in h[c].nodes:
                if node.detected:
                    variants.append((f"class{c}_detect{node.concept_id}",
                                     occlude_region(im.pixels, node.box, art.fill)))
            imgs = [v[1] for v in variants]
            hs = art.hypotheses(imgs, [im.image_id] * len(imgs))
            n_, l_ = stack_hypotheses(hs, cids)
            sp = softmax_np(art.model.predict_logits(n_, l_))
            tp = softmax_np(art.teacher_logits(imgs))
            for (name, _), t_row, s_row in zip(variants, tp, sp):
                rows.append({"row": name, "image_id": im.image_id,
                             "teacher": [_r(v) for v in t_row], "student": [_r(v) for v in s_row],
                             "agree": bool(t_row.argmax() == s_row.argmax())})
    return rows


# ---------------------------------------------------------------------------
# logic consistency

def _node_scores(e: Explanation, section: int, hypothesis: int) -> np.ndarray:
    return np.array(e.hypothesis(section, hypothesis).node_scores)


def _meta(e: Explanation, hypothesis: int) -> dict:
    return next(m for m in e.concepts if m["hypothesis"] == hypothesis)


def _best_exemplar(bank: ConceptBank, concept_id: int, level: int | None = None):
    c = next(c for c in bank.concepts if c.concept_id == concept_id)
    ex = [x for x in c.exemplars if level is None or x["level"] == level] or c.exemplars
    return ex[0]


def _cause(e: Explanation, true_class: int, majority: float) -> str:
    """Which score family carries the negative mass of the true-class section."""
    sec = e.section(true_class)
    neg_n = sum(-v for h in sec.hypotheses for v in h.node_scores if v < 0)
    neg_e = sum(-v for h in sec.hypotheses for v in h.edge_scores if v < 0)
    total = neg_n + neg_e
    if total == 0:
        return "both"
    if neg_n / total > majority:
        return "concept"
    if neg_e / total > majority:
        return "structure"
    return "both"


def score_baselines(art: Artifacts) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Mean own-class (node, edge) scores over training images the teacher gets right."""
    expls = art.explain([im.pixels for im in art.train], hsets=art.train_hyps)
    N = art.banks[0].N
    out = {}
    for c in art.class_ids:
        hs = [e.hypothesis(c, c) for im, e in zip(art.train, expls)
              if im.label == c and e.class_ids[int(np.argmax(e.teacher_logits))] == c]
        out[c] = ((np.mean([h.node_scores for h in hs], axis=0), np.mean([h.edge_scores for h in hs], axis=0))
                  if hs else (np.zeros(N), np.zeros(N * (N - 1))))
    return out


def plan_guided(e: Explanation, true_class: int, banks: list[ConceptBank],
                baseline: np.ndarray | None = None) -> list[SubstitutionPlan]:
    """Edit the image where the explanation blames the error.

    True-class concepts scoring below their class baseline get good copies put
    in place (only the most negative one when no baseline is given, or when none
    falls below it). A detected concept is replaced in its own box; a missing one
    (dummy node) is restored where its best exemplar sits in its source image.
    The most positive detected concept of the predicted wrong class is occluded.
    """
    bank = next(b for b in banks if b.class_id == true_class)
    meta = _meta(e, true_class)
    scores = _node_scores(e, true_class, true_class)
    deficit = scores - (baseline if baseline is not None else 0.0)
    chosen = [v for v in range(len(scores)) if baseline is not None and deficit[v] < 0]
    if not chosen:
        chosen = [min(range(len(scores)), key=lambda k: (deficit[k], k))]
    plans = [_good_copy(e.image_id, true_class, bank, meta, v, "vrx-guided") for v in chosen]
    wrong = e.class_ids[int(np.argmax(e.teacher_logits))]
    if wrong != true_class:
        wmeta = _meta(e, wrong)
        ws = _node_scores(e, wrong, wrong)
        det = [v for v in range(len(ws)) if wmeta["detected"][v] and ws[v] > 0]
        if det:
            v = max(det, key=lambda k: (ws[k], -k))
            plans.append(SubstitutionPlan(e.image_id, wrong, wmeta["concept_ids"][v], "vrx-guided",
                                          tuple(wmeta["boxes"][v]), None))
    return plans


def _good_copy(image_id, true_class, bank, meta, v, source) -> SubstitutionPlan:
    cid = meta["concept_ids"][v]
    if meta["detected"][v]:
        box = tuple(meta["boxes"][v])
        ex = _best_exemplar(bank, cid, 64 // (box[2] - box[0]))
    else:
        ex = _best_exemplar(bank, cid)
        box = tuple(ex["box"])
    return SubstitutionPlan(image_id, true_class, cid, source, box, (ex["image"], tuple(ex["box"])))


def plan_random(guided: SubstitutionPlan, donors: list[LabeledImage], rng: np.random.Generator) -> SubstitutionPlan:
    donor = donors[int(rng.integers(len(donors)))]
    x0, y0, x1, y1 = guided.box
    w, h = x1 - x0, y1 - y0
    _, H, W = donor.pixels.shape
    rx = int(rng.integers(0, W - w + 1))
    ry = int(rng.integers(0, H - h + 1))
    return SubstitutionPlan(guided.image_id, guided.hypothesis, guided.concept_id, "random-patch", guided.box,
                            (donor.image_id, (rx, ry, rx + w, ry + h)))


def plan_good_for_good(e: Explanation, true_class: int, banks: list[ConceptBank], k: int = 1,
                       baseline: np.ndarray | None = None) -> list[SubstitutionPlan]:
    """Control: replace the ``k`` most helpful detected true-class concepts with their own best exemplars."""
    bank = next(b for b in banks if b.class_id == true_class)
    meta = _meta(e, true_class)
    scores = _node_scores(e, true_class, true_class) - (baseline if baseline is not None else 0.0)
    det = sorted((v for v in range(len(scores)) if meta["detected"][v]), key=lambda v: (-scores[v], v))
    return [_good_copy(e.image_id, true_class, bank, meta, v, "good-for-good") for v in det[:k]]


def apply_plans(image: np.ndarray, plans: list[SubstitutionPlan], pixels_by_id: dict, fill,
                feather: int = 2) -> np.ndarray:
    for plan in plans:
        image = plan.apply(image, pixels_by_id, fill, feather)
    return image


def run_logic_consistency(art: Artifacts, cfg: LogicConfig | None = None) -> ExperimentReport:
    t0 = time.perf_counter()
    cfg = cfg or LogicConfig()
    cids = art.class_ids
    if cfg.source == "defects":
        images = generate_defects(art.spec, cfg.defects_per_class, art.config.seed + 101, id_offset=4 * 10 ** 6)
    elif cfg.source == "test":
        images = art.test
    else:
        raise ValueError(f"unknown logic pool source {cfg.source!r}")
    tl = art.teacher_logits([im.pixels for im in images])
    pred = np.asarray(cids)[tl.argmax(1)]
    wrong = [im for im, p in zip(images, pred) if p != im.label]
    order = np.random.default_rng(cfg.seed).permutation(len(wrong))
    chosen = [wrong[k] for k in sorted(order[: cfg.pool_max])]
    pool = list(zip(chosen, art.hypotheses([im.pixels for im in chosen], [im.image_id for im in chosen])))
    report = ExperimentReport("logic-consistency", {"logic": config_to_dict(cfg),
                                                    "pipeline": config_to_dict(art.config)}, [], {})
    if not pool:
        report.flags.append("empty misclassified pool")
        report.aggregates = {"pool": 0}
        report.check("guided_minus_best_control", 0.0, cfg.margin)
        report.wall_clock = time.perf_counter() - t0
        return report
    expls = art.explain([im.pixels for im, _ in pool], hsets=[h for _, h in pool])
    pixels = art.pixels_by_id()
    donors = art.train
    baselines = {c: b[0] for c, b in score_baselines(art).items()}
    arms = ("vrx-guided", "random-patch", "good-for-good")
    edited, owners = [], []
    trials = []
    for k, ((im, _), e) in enumerate(zip(pool, expls)):
        rng = np.random.default_rng([cfg.seed, k])
        guided = plan_guided(e, im.label, art.banks, baselines[im.label])
        plans = {"vrx-guided": guided,
                 "random-patch": [plan_random(g, donors, rng) for g in guided],
                 "good-for-good": plan_good_for_good(e, im.label, art.banks, len(guided), baselines[im.label])}
        trial = {"image_id": im.image_id, "label": im.label, "teacher_pred": int(cids[int(np.argmax(e.teacher_logits))]),
                 "cause": _cause(e, im.label, cfg.cause_majority)}
        for arm in arms:
            trial[f"{arm}_slots"] = [[p.hypothesis, p.concept_id, list(p.box)] for p in plans[arm]]
            if plans[arm]:
                edited.append(apply_plans(im.pixels, plans[arm], pixels, art.fill, cfg.feather))
                owners.append((len(trials), arm))
        trials.append(trial)
    new_pred = np.asarray(cids)[art.teacher_logits(edited).argmax(1)] if edited else []
    for (k, arm), p in zip(owners, new_pred):
        trials[k][f"{arm}_pred"] = int(p)
    for t in trials:
        for arm in arms:
            t[f"{arm}_corrected"] = bool(t.get(f"{arm}_pred", -1) == t["label"])
    rates = {arm: _r(np.mean([t[f"{arm}_corrected"] for t in trials])) for arm in arms}
    census = {c: sum(t["cause"] == c for t in trials) for c in ("concept", "structure", "both")}
    report.trials = trials
    report.aggregates = {"pool": len(trials), "correction_rate": rates, "corrected": {
        arm: int(sum(t[f"{arm}_corrected"] for t in trials)) for arm in arms}, "cause_census": census}
    if len(trials) < 50:
        report.flags.append(f"pool of {len(trials)} is below 50 images")
    margin = rates["vrx-guided"] - max(rates["random-patch"], rates["good-for-good"])
    report.aggregates["guided_minus_best_control"] = _r(margin)
    report.check("guided_minus_best_control", margin, cfg.margin)
    report.check("pool_size", len(trials), 50)
    report.wall_clock = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# sensitivity

def _incident(N: int, v: int) -> list[int]:
    return [p for p, (j, i) in enumerate(edge_pairs(N)) if v in (j, i)]


def _free_box(box, occupied: list, size: int = 64):
    """Same-size grid box not overlapping any occupied box, farthest from ``box``."""
    w = box[2] - box[0]
    boxes, _ = grid_boxes(size, size, (size // w,))
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    best, best_d = None, -1.0
    for b in boxes:
        b = tuple(int(x) for x in b)
        if any(b[0] < o[2] and o[0] < b[2] and b[1] < o[3] and o[1] < b[3] for o in occupied):
            continue
        d = np.hypot((b[0] + b[2]) / 2 - cx, (b[1] + b[3]) / 2 - cy)
        if d > best_d:
            best, best_d = b, d
    return best


def _donor_patches(art: Artifacts) -> dict:
    """(class, node, grid level) -> [(feature, image id, box)] of detected training patches."""
    out: dict = {}
    for im, h in zip(art.train, art.train_hyps):
        c = im.label
        if c not in art.class_ids:
            continue
        for v, node in enumerate(h[c].nodes):
            if node.detected:
                level = 64 // (node.box[2] - node.box[0])
                out.setdefault((c, v, level), []).append((node.feature, im.image_id, tuple(node.box)))
    return out


def _rank_donors(art: Artifacts, h: HypothesisSet, c: int, v: int, donors: list) -> list[tuple[float, int]]:
    """Predicted node score of each donor placed in node ``v``'s slot, lowest first."""
    ci = art.class_ids.index(c)
    nodes, locs = stack_hypotheses([h], art.class_ids)
    nodes = np.repeat(nodes, len(donors), axis=1)
    locs = np.repeat(locs, len(donors), axis=1)
    nodes[ci, :, v] = np.stack([d[0] for d in donors])
    alpha, emb, _ = contribution_weights(art.model, nodes, locs, c)
    _, node, _ = contribution_scores(art.model, alpha, emb)
    pred = node[ci, :, v]
    return sorted((float(pred[k]), k) for k in range(len(donors)))


def _layout(h: HypothesisSet, c: int) -> list:
    return [(n.detected, n.box) for n in h[c].nodes]


def run_sensitivity(art: Artifacts, cfg: SensitivityConfig | None = None) -> ExperimentReport:
    t0 = time.perf_counter()
    cfg = cfg or SensitivityConfig()
    cids = art.class_ids
    N = art.model.config.n_concepts
    tl = art.teacher_logits([im.pixels for im in art.test])
    correct = [(im, h) for im, h, z in zip(art.test, art.test_hyps, tl) if cids[int(z.argmax())] == im.label]
    order = np.random.default_rng(cfg.seed).permutation(len(correct))
    pool = [correct[k] for k in order]
    pixels = art.pixels_by_id()
    report = ExperimentReport("sensitivity", {"sensitivity": config_to_dict(cfg),
                                              "pipeline": config_to_dict(art.config)}, [], {})
    base = art.explain([im.pixels for im, _ in pool], hsets=[h for _, h in pool]) if pool else []

    donors = _donor_patches(art) if pool else {}
    visual, structural = [], []
    for (im, h), e in zip(pool, base):
        c = im.label
        meta = _meta(e, c)
        hs = e.hypothesis(c, c)
        det = [v for v in range(N) if meta["detected"][v]]
        if not det:
            continue
        v = max(det, key=lambda k: (hs.node_scores[k], -k))
        box = tuple(meta["boxes"][v])
        level = 64 // (box[2] - box[0])
        if len(visual) < cfg.trials and donors.get((c, v, level)):
            # a pure visual change: the donor must leave this hypothesis's detected layout intact
            pool_d = donors[(c, v, level)]
            for pred, k in _rank_donors(art, h, c, v, pool_d)[: cfg.max_tries]:
                if pred >= hs.node_scores[v]:
                    break
                _, rid, rbox = pool_d[k]
                edited = paste(im.pixels, box, crop(pixels[rid], rbox), cfg.feather)
                if _layout(art.hypotheses([edited], [im.image_id])[0], c) == _layout(h, c):
                    visual.append((im, e, v, edited))
                    break
        if len(structural) < cfg.trials:
            occupied = [tuple(b) for b in meta["boxes"] if b is not None]
            dest = _free_box(box, occupied)
            if dest is not None:
                moved = occlude_region(im.pixels, box, art.fill)
                structural.append((im, e, v, paste(moved, dest, crop(im.pixels, box), 0)))
        if len(visual) >= cfg.trials and len(structural) >= cfg.trials:
            break

    def rerun(items):
        if not items:
            return []
        return art.explain([x[3] for x in items], [x[0].image_id for x in items])

    trials = []
    for arm, items in (("visual", visual), ("structural", structural)):
        for (im, e0, v, _), e1 in zip(items, rerun(items)):
            c = im.label
            h0, h1 = e0.hypothesis(c, c), e1.hypothesis(c, c)
            inc = _incident(N, v)
            n0, n1 = h0.node_scores[v], h1.node_scores[v]
            e0s = float(np.mean([h0.edge_scores[p] for p in inc]))
            e1s = float(np.mean([h1.edge_scores[p] for p in inc]))
            scale = max(abs(n0), abs(e0s), 1e-12)
            t = {"arm": arm, "image_id": im.image_id, "label": c, "node": v,
                 "node_before": _r(n0), "node_after": _r(n1), "edges_before": _r(e0s), "edges_after": _r(e1s),
                 "still_detected": bool(_meta(e1, c)["detected"][v])}
            if arm == "visual":
                t["drop"] = bool(n1 < n0)
                t["other_stable"] = bool(abs(e1s - e0s) <= cfg.band * scale)
            else:
                t["drop"] = bool(e1s < e0s)
                t["other_stable"] = bool(abs(n1 - n0) <= cfg.band * scale)
            trials.append(t)

    # control: swapping a patch for itself leaves every score unchanged
    noop_identical = True
    if base:
        im, _ = pool[0]
        e0 = base[0]
        meta = _meta(e0, im.label)
        b = next((tuple(x) for x in meta["boxes"] if x is not None), (0, 0, 32, 32))
        same = paste(im.pixels, b, crop(im.pixels, b), cfg.feather)
        e1 = art.explain([same], [im.image_id])[0]
        noop_identical = bool(np.array_equal(same, im.pixels)) and all(
            h0.node_scores == h1.node_scores and h0.edge_scores == h1.edge_scores
            for s0, s1 in zip(e0.sections, e1.sections) for h0, h1 in zip(s0.hypotheses, s1.hypotheses))

    report.trials = trials
    agg = {"pool": len(pool), "noop_identical": noop_identical}
    for arm in ("visual", "structural"):
        ts = [t for t in trials if t["arm"] == arm]
        agg[arm] = {"trials": len(ts), "drop_rate": _r(np.mean([t["drop"] for t in ts])) if ts else 0.0,
                    "stable_rate": _r(np.mean([t["other_stable"] for t in ts])) if ts else 0.0}
        report.check(f"{arm}_drop_rate", agg[arm]["drop_rate"], cfg.min_rate)
        if len(ts) < cfg.trials:
            report.flags.append(f"{arm} arm ran {len(ts)} of {cfg.trials} trials")
    report.aggregates = agg
    report.wall_clock = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# bias diagnosis

def signature(e: Explanation, true_class: int, baseline: tuple[np.ndarray, np.ndarray] | None = None) -> dict:
    """Nodes carry positive evidence while edges carry negative evidence.

    With a baseline the sums are taken relative to the class's typical scores.
    """
    h = e.hypothesis(true_class, true_class)
    node, edge = float(np.sum(h.node_scores)), float(np.sum(h.edge_scores))
    out = {"node_sum": _r(node), "edge_sum": _r(edge), "absolute_signature": bool(node > 0 and edge < 0)}
    if baseline is not None:
        dn, de = node - float(np.sum(baseline[0])), edge - float(np.sum(baseline[1]))
        out.update(node_shift=_r(dn), edge_shift=_r(de), signature=bool(dn > 0 and de < 0))
    else:
        out["signature"] = out["absolute_signature"]
    return out


def run_bias_diagnosis(cfg: BiasConfig | None = None, art: Artifacts | None = None) -> ExperimentReport:
    """Biased teacher + student diagnosis, then the two augmentation settings."""
    t0 = time.perf_counter()
    cfg = cfg or BiasConfig()
    pcfg = cfg.pipeline
    spec = pcfg.spec()
    if art is None:
        art, _ = run_pipeline(spec, pcfg)
    cids = art.class_ids
    report = ExperimentReport("bias-diagnosis", config_to_dict(cfg), [], {})

    tl = art.teacher_logits([im.pixels for im in art.test])
    pred = np.asarray(cids)[tl.argmax(1)]
    wrong = [(im, h) for im, h, p in zip(art.test, art.test_hyps, pred) if p != im.label]
    if not wrong:
        report.flags.append("inconclusive world: the biased teacher makes no errors; strengthen the pose bias")
    expls = art.explain([im.pixels for im, _ in wrong], hsets=[h for _, h in wrong]) if wrong else []
    baselines = score_baselines(art)
    for (im, _), e in zip(wrong, expls):
        report.trials.append({"kind": "diagnosis", "image_id": im.image_id, "label": im.label, "pose": im.pose,
                              "teacher_pred": int(cids[int(np.argmax(e.teacher_logits))]),
                              **signature(e, im.label, baselines[im.label])})
    sig_rate = float(np.mean([t["signature"] for t in report.trials])) if report.trials else 0.0
    abs_rate = float(np.mean([t["absolute_signature"] for t in report.trials])) if report.trials else 0.0

    # augmentation: 150 images per pose of one class (setting 1) or 450 in its training pose (setting 2)
    c = cfg.augment_class
    n_pose = len(spec.poses)
    all_poses = [list(range(n_pose)) if k == c else list(ps) for k, ps in enumerate(spec.pose_set)]
    pool1 = generate_dataset(spec.with_pose_sets(all_poses), cfg.augment_per_pose * n_pose * 2,
                             pcfg.seed + 11, id_offset=2 * 10 ** 6)
    per_pose = {q: [im for im in pool1 if im.label == c and im.pose == q][: cfg.augment_per_pose]
                for q in range(n_pose)}
    aug1 = [im for q in range(n_pose) for im in per_pose[q]]
    pool2 = generate_dataset(spec, cfg.augment_per_pose * n_pose, pcfg.seed + 12, id_offset=3 * 10 ** 6)
    aug2 = [im for im in pool2 if im.label == c][: cfg.augment_per_pose * n_pose]
    if len(aug1) != cfg.augment_per_pose * n_pose:
        raise StageError("exp-bias", RuntimeError(f"could not draw {cfg.augment_per_pose} images per pose"))

    accs = {"original": accuracy(art.teacher, art.test, cids)}
    for name, extra in (("setting1", aug1), ("setting2", aug2)):
        teacher = _stage("train-teacher", train_teacher, art.train + extra, len(cids), pcfg.teacher_epochs,
                         pcfg.teacher_lr, pcfg.seed)
        accs[name] = accuracy(teacher, art.test, cids)
    per_pose_acc = {}
    for q in range(n_pose):
        sel = [im for im in art.test if im.pose == q]
        per_pose_acc[str(q)] = _r(accuracy(art.teacher, sel, cids)) if sel else None
    gain = min(accs["setting1"] - accs["original"], accs["setting1"] - accs["setting2"])
    report.aggregates = {
        "accuracy": {k: _r(v) for k, v in accs.items()},
        "original_accuracy_by_pose": per_pose_acc,
        "misclassified": len(wrong), "signature_rate": _r(sig_rate),
        "absolute_signature_rate": _r(abs_rate),
        "augmentation": {"class": c, "setting1": len(aug1), "setting2": len(aug2),
                         "setting1_per_pose": {str(q): len(per_pose[q]) for q in range(n_pose)}},
        "setting1_gain": _r(gain)}
    report.check("setting1_gain", gain, cfg.min_gain)
    report.check("signature_rate", sig_rate, cfg.min_signature)
    report.wall_clock = time.perf_counter() - t0
    return report


def report_digest(report: ExperimentReport) -> str:
    import hashlib
    return hashlib.sha256(report.to_json().encode()).hexdigest()

