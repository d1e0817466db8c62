"""Empirical behaviour checks on full-scale runs (slow)."""

import numpy as np
import pytest

from vrx.grn import export_edge_weights
from vrx.scg import build_hypotheses_batch, mask_concept
from vrx.teacher import train_teacher
from vrx.vce import DiscoveryConfig, discover_concepts
from vrx.world import generate_dataset, occlude_region, random_world, render_image

pytestmark = pytest.mark.slow


def _iou(a, b):
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _foreground(box, provenance):
    """Largest fraction of ``box`` covered by a single part."""
    area = (box[2] - box[0]) * (box[3] - box[1])
    best = 0.0
    for p in provenance:
        q = p["box"]
        best = max(best, max(0, min(box[2], q[2]) - max(box[0], q[0])) *
                   max(0, min(box[3], q[3]) - max(box[1], q[1])) / area)
    return best


def _concept_foreground(bank, by_id):
    return {k.concept_id: float(np.mean([_foreground(e["box"], by_id[e["image"]].provenance) for e in k.exemplars]))
            for k in bank.concepts}


def test_occluding_a_part_lowers_the_true_logit(default_run):
    art, _ = default_run
    rng = np.random.default_rng(0)
    picks = rng.choice(len(art.test), size=100, replace=False)
    lowered = 0
    for k in picks:
        im = art.test[int(k)]
        part = int(rng.integers(len(im.provenance)))
        occ = occlude_region(im.pixels, im.part_box(part), art.fill)
        z = art.teacher_logits([im.pixels, occ])
        lowered += z[1, im.label] < z[0, im.label]
    assert lowered / 100 >= 0.7, f"true logit lowered on {lowered}/100 trials"


def test_biased_teacher_errs_on_unseen_poses(biased_run):
    art, _ = biased_run
    pred = np.asarray(art.class_ids)[art.teacher_logits([im.pixels for im in art.test]).argmax(1)]
    for c in art.class_ids:
        seen = set(art.spec.pose_set[c])
        err = lambda sel: float(np.mean([p != im.label for im, p in sel])) if sel else 0.0  # noqa: E731
        own = [(im, p) for im, p in zip(art.test, pred) if im.label == c]
        unseen_err = err([(im, p) for im, p in own if im.pose not in seen])
        seen_err = err([(im, p) for im, p in own if im.pose in seen])
        assert unseen_err > seen_err, f"class {c}: unseen-pose error {unseen_err:.2f} vs seen {seen_err:.2f}"
        wrong = [im for im, p in own if p != c]
        share = np.mean([im.pose not in seen for im in wrong])
        base = np.mean([im.pose not in seen for im, _ in own])
        assert share > base, f"class {c}: unseen poses hold {share:.2f} of errors vs {base:.2f} of images"


def test_background_only_image_gives_dummy_hypotheses(default_run):
    art, _ = default_run
    rng = np.random.default_rng(3)
    imgs = [render_image(art.spec, c, 0, rng, shapes=[])[0] for c in range(3)]
    for h in art.hypotheses(imgs):
        assert not any(n.detected for s in h.scgs for n in s.nodes)


def test_single_part_top_concept_matches_the_glyph(single_part):
    by_id = {im.image_id: im for im in single_part.train}
    hits = []
    for c in range(3):
        bank = discover_concepts(single_part.of_class(c)[:50], single_part.teacher, c)
        top = max(bank.concepts, key=lambda k: (k.importance, -k.concept_id))
        hits += [_iou(e["box"], by_id[e["image"]].part_box(0)) > 0.3 for e in top.exemplars]
    rate = float(np.mean(hits))
    assert rate >= 0.8, f"top-1 exemplars with IoU > 0.3: {rate:.2f}"


def test_filtering_reduces_background_concepts(default_run):
    art, _ = default_run
    by_id = {im.image_id: im for im in art.train}
    frac = {}
    for use in (True, False):
        fg = []
        for c in art.class_ids:
            bank = discover_concepts([im for im in art.train if im.label == c][:50], art.teacher, c,
                                     DiscoveryConfig(use_filter=use))
            fg += list(_concept_foreground(bank, by_id).values())
        frac[use] = float(np.mean(np.array(fg) < 0.3))
    assert frac[False] > frac[True], f"background fraction filtered {frac[True]:.2f}, unfiltered {frac[False]:.2f}"


def test_filtering_monotone_over_21_classes():
    higher = []
    for seed in range(7):
        spec = random_world(3, seed)
        train = generate_dataset(spec, 100, seed=seed)
        teacher = train_teacher(train, 3, epochs=5)
        by_id = {im.image_id: im for im in train}
        for c in range(3):
            imgs = [im for im in train if im.label == c][:50]
            score = []
            for use in (True, False):
                bank = discover_concepts(imgs, teacher, c, DiscoveryConfig(use_filter=use))
                top3 = sorted(bank.concepts, key=lambda k: (-k.importance, k.concept_id))[:3]
                fg = _concept_foreground(bank, by_id)
                score.append(np.mean([fg[k.concept_id] for k in top3]))
            higher.append(score[0] > score[1])
    assert len(higher) >= 20 and np.mean(higher) >= 0.7, f"filter wins on {sum(higher)}/{len(higher)} classes"


def test_masking_the_sole_part(single_part):
    sp = single_part
    banks = [discover_concepts(sp.of_class(c)[:50], sp.teacher, c) for c in range(3)]
    fill = np.mean([im.pixels.mean(axis=(1, 2)) for im in sp.train], axis=0)
    hs = build_hypotheses_batch([im.pixels for im in sp.test], banks, sp.teacher)
    gone = changed = total = 0
    for im, h in zip(sp.test, hs):
        c = im.label
        det = [n for n in h[c].nodes if n.detected]
        if not det:
            continue
        node = max(det, key=lambda n: _iou(n.box, im.part_box(0)))
        masked, h2 = mask_concept(im.pixels, h, c, node.concept_id, banks, sp.teacher, fill)
        total += 1
        gone += not h2[c].nodes[node.concept_id].detected
        z = sp.teacher.logits(np.stack([im.pixels, masked]))
        changed += not np.array_equal(z[0], z[1])
    assert total >= 100
    assert gone / total >= 0.9, f"sole concept became dummy on {gone}/{total}"
    assert changed == total


def test_trained_edge_weights_are_class_specific(default_run):
    model = default_run[0].model
    E = [export_edge_weights(model, c) for c in model.class_ids]
    for a in range(len(E)):
        for b in range(a + 1, len(E)):
            assert np.linalg.norm(E[a] - E[b]) > 0


def test_distillation_loss_trend(default_run):
    loss = np.asarray(default_run[0].history.loss)
    assert loss[49] < loss[0]
    assert loss[40:50].mean() < loss[:10].mean()


def test_why_section_has_positive_dominant_nodes(default_run):
    art, _ = default_run
    tl = art.teacher_logits([im.pixels for im in art.test])
    correct = [k for k, im in enumerate(art.test) if art.class_ids[int(tl[k].argmax())] == im.label]
    picks = np.random.default_rng(0).choice(correct, size=200, replace=False)
    expls = art.explain([art.test[k].pixels for k in picks], hsets=[art.test_hyps[k] for k in picks])
    ok = 0
    for e in expls:
        p = e.predicted
        own = np.mean(e.hypothesis(p, p).node_scores)
        others = [np.mean(e.hypothesis(p, i).node_scores) for i in e.class_ids if i != p]
        ok += own > 0 and all(own > o for o in others)
    assert ok / 200 >= 0.8, f"why-section node evidence dominant on {ok}/200 images"
