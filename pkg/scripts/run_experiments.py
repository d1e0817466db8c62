#!/usr/bin/env python3
"""Run the pipeline and all three experiments, save the reports and print a results table.

    python3 scripts/run_experiments.py --out runs/all
    python3 scripts/run_experiments.py --only logic sensitivity
"""

import argparse
import logging
import sys
from pathlib import Path

from vrx.experiments import (BiasConfig, LogicConfig, PipelineConfig, SensitivityConfig, report_digest,
                             run_bias_diagnosis, run_logic_consistency, run_pipeline, run_sensitivity)

EXPERIMENTS = ("logic", "sensitivity", "bias")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/experiments"))
    ap.add_argument("--only", nargs="+", choices=EXPERIMENTS, default=list(EXPERIMENTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    reports = []
    if {"logic", "sensitivity"} & set(args.only):
        art, rep = run_pipeline(cfg=PipelineConfig(seed=args.seed))
        reports.append(rep)
        if "logic" in args.only:
            reports.append(run_logic_consistency(art, LogicConfig(seed=args.seed)))
        if "sensitivity" in args.only:
            reports.append(run_sensitivity(art, SensitivityConfig(seed=args.seed)))
    if "bias" in args.only:
        bcfg = BiasConfig(pipeline=PipelineConfig(world="pose-biased", seed=args.seed))
        b_art, b_rep = run_pipeline(cfg=bcfg.pipeline)
        b_rep.experiment = "pipeline-pose-biased"
        reports += [b_rep, run_bias_diagnosis(bcfg, b_art)]

    print("| report | check | value | threshold | result | seconds |")
    print("|---|---|---|---|---|---|")
    for r in reports:
        r.save(args.out)
        for name, c in r.checks.items():
            print(f"| {r.experiment} | {name} | {c['value']:.3f} | {c['op']} {c['threshold']} | "
                  f"{'PASS' if c['passed'] else 'FAIL'} | {r.wall_clock:.0f} |")
        for flag in r.flags:
            print(f"| {r.experiment} | flag | {flag} | | | |")
    for r in reports:
        print(f"{r.experiment}: sha256 {report_digest(r)[:16]}")
    return 0 if all(r.passed for r in reports) else 2


if __name__ == "__main__":
    sys.exit(main())
