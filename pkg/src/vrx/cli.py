"""Command-line interface: pipeline stages, experiments and report summaries.

Exit codes: 0 success, 1 usage or input error, 2 an experiment missed its threshold.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as X
from .grn import DistillData, GrnConfig, GrnModel, agreement, distill_train, export_edge_weights, stack_hypotheses
from .scg import build_hypotheses_batch, hypotheses_to_json
from .teacher import TeacherModel, train_teacher
from .vce import discover_concepts, load_banks, save_banks
from .vdi import FormatError, explain, render_explanation
from .world import WorldSpec, export_dataset, generate_dataset, generate_defects, load_dataset, load_image

EXIT_OK, EXIT_USAGE, EXIT_THRESHOLD = 0, 1, 2
SUBCOMMANDS = ("gen-world", "train-teacher", "extract-concepts", "build-scg", "distill", "explain",
               "export-edge-weights", "pipeline", "exp-logic", "exp-sensitivity", "exp-bias", "report")

log = logging.getLogger("vrx")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON config file")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory (or file for explain)")
    p.add_argument("--format", choices=("json", "csv", "dot", "svg"), default=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="vrx", description="Visual reasoning explanations on a synthetic glyph world.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    p = add("gen-world", "render a labelled dataset")
    p.add_argument("--world", default=None, help=f"one of {sorted(X.WORLDS)}")
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--split", choices=("train", "test", "defects"), default="train")

    p = add("train-teacher", "train the CNN teacher")
    p.add_argument("--data", type=Path, required=True)

    p = add("extract-concepts", "discover the per-class concept banks")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)

    p = add("build-scg", "build one structural concept graph per class hypothesis")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path)
    src.add_argument("--data", type=Path)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--banks", type=Path, required=True)

    p = add("distill", "distill the graph reasoning network from the teacher")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--banks", type=Path, required=True)

    p = add("explain", "explain the teacher's decision on one image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--banks", type=Path, required=True)
    p.add_argument("--teacher", type=Path, default=None, help="defaults to the teacher next to the model")
    p.add_argument("--class-id", type=int, default=None, help="section to render for dot/svg")

    p = add("export-edge-weights", "dump the learned class-specific edge weights")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--class-id", type=int, default=None, help="all classes when omitted")

    add("pipeline", "run every stage and save the artifacts")
    for name, help_ in (("exp-logic", "logic-consistency experiment"),
                        ("exp-sensitivity", "visual and structural sensitivity experiment"),
                        ("exp-bias", "pose-bias diagnosis experiment")):
        p = add(name, help_)
        p.add_argument("--artifacts", type=Path, default=None, help="reuse a saved pipeline run")

    p = add("report", "summarize saved experiment reports")
    p.add_argument("paths", nargs="*", type=Path, help="report JSON files or directories")
    return parser


# ---------------------------------------------------------------------------
# configuration

def load_config(args) -> dict:
    """Config sections keyed pipeline/logic/sensitivity/bias, with the seed override applied."""
    raw = {}
    if getattr(args, "config", None) is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    unknown = set(raw) - {"pipeline", "logic", "sensitivity", "bias"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    try:
        cfg = {"pipeline": X.config_from_dict(X.PipelineConfig, raw.get("pipeline", {})),
               "logic": X.config_from_dict(X.LogicConfig, raw.get("logic", {})),
               "sensitivity": X.config_from_dict(X.SensitivityConfig, raw.get("sensitivity", {})),
               "bias": X.config_from_dict(X.BiasConfig, raw.get("bias", {}))}
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = {"pipeline": replace(cfg["pipeline"], seed=seed), "logic": replace(cfg["logic"], seed=seed),
               "sensitivity": replace(cfg["sensitivity"], seed=seed),
               "bias": replace(cfg["bias"], pipeline=replace(cfg["bias"].pipeline, seed=seed))}
    return cfg


def out_dir(args) -> Path:
    if getattr(args, "out", None) is not None:
        return Path(args.out)
    return Path(os.environ.get("VRX_OUT", "vrx-out"))


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _spec(pcfg: X.PipelineConfig, world: str | None) -> WorldSpec:
    try:
        return X.WORLDS[world]() if world else pcfg.spec()
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unknown world {world or pcfg.world!r}; choose from {sorted(X.WORLDS)}") from exc


# ---------------------------------------------------------------------------
# stage commands

def cmd_gen_world(args, cfg) -> int:
    pcfg = cfg["pipeline"]
    spec = _spec(pcfg, args.world)
    if args.split == "train":
        images = generate_dataset(spec, args.per_class or pcfg.train_per_class, pcfg.seed)
    elif args.split == "test":
        images = generate_dataset(spec.unbiased(), args.per_class or pcfg.test_per_class, pcfg.seed + 1, 10 ** 6)
    else:
        images = generate_defects(spec, args.per_class or cfg["logic"].defects_per_class, pcfg.seed + 101,
                                  4 * 10 ** 6)
    d = out_dir(args)
    export_dataset(images, d, spec)
    print(f"wrote {len(images)} images to {d}")
    return EXIT_OK


def _dataset(path: Path):
    images = load_dataset(_need(path, "dataset"))
    if not images:
        raise UsageError(f"dataset {path} is empty")
    return images


def cmd_train_teacher(args, cfg) -> int:
    pcfg = cfg["pipeline"]
    images = _dataset(args.data)
    n = max(im.label for im in images) + 1
    teacher = train_teacher(images, n, pcfg.teacher_epochs, pcfg.teacher_lr, pcfg.seed)
    d = out_dir(args)
    teacher.save(d)
    print(f"teacher saved to {d}")
    return EXIT_OK


def cmd_extract_concepts(args, cfg) -> int:
    pcfg = cfg["pipeline"]
    images = _dataset(args.data)
    teacher = TeacherModel.load(_need(args.teacher, "teacher"))
    banks = []
    for c in sorted({im.label for im in images}):
        sel = [im for im in images if im.label == c][: pcfg.discovery_per_class]
        banks.append(discover_concepts(sel, teacher, c, pcfg.discovery))
    d = out_dir(args)
    save_banks(banks, d)
    print(f"{len(banks)} concept banks saved to {d}")
    return EXIT_OK


def _banks(args, teacher):
    return load_banks(_need(args.banks, "banks"), teacher.feature_dim)


def cmd_build_scg(args, cfg) -> int:
    teacher = TeacherModel.load(_need(args.teacher, "teacher"))
    banks = _banks(args, teacher)
    if args.image is not None:
        pixels, ids = [load_image(_need(args.image, "image"))], [None]
    else:
        images = _dataset(args.data)
        pixels, ids = [im.pixels for im in images], [im.image_id for im in images]
    hsets = build_hypotheses_batch(pixels, banks, teacher, cfg["pipeline"].t, ids)
    d = out_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    (d / "hypotheses.jsonl").write_text("".join(hypotheses_to_json(h) + "\n" for h in hsets))
    print(f"{len(hsets)} hypothesis sets written to {d / 'hypotheses.jsonl'}")
    return EXIT_OK


def cmd_distill(args, cfg) -> int:
    pcfg = cfg["pipeline"]
    images = _dataset(args.data)
    teacher = TeacherModel.load(_need(args.teacher, "teacher"))
    banks = _banks(args, teacher)
    cids = [b.class_id for b in banks]
    hsets = build_hypotheses_batch([im.pixels for im in images], banks, teacher, pcfg.t,
                                   [im.image_id for im in images])
    nodes, locs = stack_hypotheses(hsets, cids)
    tl = teacher.logits(np.stack([im.pixels for im in images]))[:, cids]
    model = GrnModel(GrnConfig(len(cids), banks[0].N, (teacher.feature_dim, *pcfg.node_dims), pcfg.edge_dims,
                               pcfg.edge_concat, seed=pcfg.seed), cids)
    history = distill_train(model, DistillData(nodes, locs, tl), replace(pcfg.distill, seed=pcfg.seed))
    d = out_dir(args)
    model.save(d, [b.digest() for b in banks])
    (d / "history.csv").write_text(history.to_csv())
    print(f"student saved to {d}; train agreement {agreement(model, nodes, locs, tl):.3f}")
    return EXIT_OK


def cmd_explain(args, cfg) -> int:
    fmt = getattr(args, "format", None) or "json"
    model = GrnModel.load(_need(args.model, "model"))
    teacher = TeacherModel.load(_need(args.teacher or args.model.parent / "teacher", "teacher"))
    banks = _banks(args, teacher)
    image = load_image(_need(args.image, "image"))
    e = explain(image, model, teacher, banks, cfg["pipeline"].t)
    try:
        text = render_explanation(e, fmt, image, args.class_id)
    except FormatError as exc:
        raise UsageError(str(exc)) from exc
    out = out_dir(args)
    path = out if out.suffix else out / f"explanation.{fmt}"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"predicted class {e.predicted}; explanation written to {path}")
    return EXIT_OK


def cmd_export_edge_weights(args, cfg) -> int:
    fmt = getattr(args, "format", None) or "json"
    model = GrnModel.load(_need(args.model, "model"))
    cids = [args.class_id] if args.class_id is not None else model.class_ids
    try:
        weights = {c: export_edge_weights(model, c) for c in cids}
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unknown class id: {exc}") from exc
    d = out_dir(args)
    d.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = d / "edge_weights.json"
        path.write_text(json.dumps({str(c): w.tolist() for c, w in weights.items()}, indent=1))
    elif fmt == "csv":
        path = d / "edge_weights.csv"
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class_id", "from", "to", "weight"])
        for c, w in weights.items():
            for j in range(w.shape[0]):
                for i in range(w.shape[1]):
                    if i != j:
                        wr.writerow([c, j, i, repr(float(w[j, i]))])
        path.write_text(buf.getvalue())
    else:
        raise UsageError(f"edge weights export supports json and csv, not {fmt}")
    print(f"edge weights written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline and experiments

def _artifacts(args, pcfg: X.PipelineConfig, d: Path):
    if getattr(args, "artifacts", None) is not None:
        return X.Artifacts.load(_need(args.artifacts, "artifacts"))
    art, report = X.run_pipeline(pcfg.spec(), pcfg)
    report.save(d, "pipeline")
    return art


def _finish(report: X.ExperimentReport, d: Path) -> int:
    path = report.save(d)
    for name, c in report.checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {report.experiment}.{name}: "
              f"{c['value']:.4f} {c['op']} {c['threshold']}")
    for flag in report.flags:
        print(f"flag: {flag}")
    print(f"report written to {path}")
    return EXIT_OK if report.passed else EXIT_THRESHOLD


def cmd_pipeline(args, cfg) -> int:
    pcfg = cfg["pipeline"]
    d = out_dir(args)
    art, report = X.run_pipeline(pcfg.spec(), pcfg)
    art.save(d / "artifacts")
    return _finish(report, d)


def cmd_exp_logic(args, cfg) -> int:
    d = out_dir(args)
    return _finish(X.run_logic_consistency(_artifacts(args, cfg["pipeline"], d), cfg["logic"]), d)


def cmd_exp_sensitivity(args, cfg) -> int:
    d = out_dir(args)
    return _finish(X.run_sensitivity(_artifacts(args, cfg["pipeline"], d), cfg["sensitivity"]), d)


def cmd_exp_bias(args, cfg) -> int:
    d = out_dir(args)
    bcfg = cfg["bias"]
    art = X.Artifacts.load(_need(args.artifacts, "artifacts")) if args.artifacts is not None else None
    return _finish(X.run_bias_diagnosis(bcfg, art), d)


def cmd_report(args, cfg) -> int:
    fmt = getattr(args, "format", None) or "json"
    paths = args.paths or [out_dir(args)]
    files = []
    for p in paths:
        _need(p, "report path")
        files.extend(sorted(q for q in p.glob("*.json") if not q.name.endswith(".timing.json"))
                     if p.is_dir() else [p])
    rows = []
    for f in files:
        try:
            r = X.ExperimentReport.from_json(f.read_text())
        except (json.JSONDecodeError, KeyError):
            continue
        for name, c in r.checks.items():
            rows.append({"report": f.name, "experiment": r.experiment, "check": name, "value": c["value"],
                         "op": c["op"], "threshold": c["threshold"], "passed": c["passed"]})
    if not rows:
        raise UsageError("no experiment reports found")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    elif fmt == "json":
        print(json.dumps(rows, indent=1))
    else:
        raise UsageError(f"report supports json and csv, not {fmt}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_THRESHOLD


COMMANDS = {
    "gen-world": cmd_gen_world, "train-teacher": cmd_train_teacher, "extract-concepts": cmd_extract_concepts,
    "build-scg": cmd_build_scg, "distill": cmd_distill, "explain": cmd_explain,
    "export-edge-weights": cmd_export_edge_weights, "pipeline": cmd_pipeline, "exp-logic": cmd_exp_logic,
    "exp-sensitivity": cmd_exp_sensitivity, "exp-bias": cmd_exp_bias, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "vrx: error: a command is required")
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (X.StageError, ValueError, OSError) as exc:
        print(f"vrx: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
