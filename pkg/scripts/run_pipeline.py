#!/usr/bin/env python3
"""Train the teacher, discover concepts, distill the student and save everything.

    python3 scripts/run_pipeline.py --world default --out runs/default
"""

import argparse
import logging
import sys
from pathlib import Path

from vrx.experiments import WORLDS, PipelineConfig, run_pipeline


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--world", choices=sorted(WORLDS), default="default")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    art, report = run_pipeline(cfg=PipelineConfig(world=args.world, seed=args.seed))
    art.save(args.out / "artifacts")
    report.save(args.out, "pipeline")
    agg = report.aggregates
    print(f"teacher train/test accuracy {agg['teacher_train_acc']:.3f} / {agg['teacher_test_acc']:.3f}")
    print(f"student agreement train/test {agg['student_train_agreement']:.3f} / {agg['student_test_agreement']:.3f}")
    print(f"wall clock {report.wall_clock:.0f}s; artifacts in {args.out / 'artifacts'}")
    return 0 if report.passed else 2


if __name__ == "__main__":
    sys.exit(main())
