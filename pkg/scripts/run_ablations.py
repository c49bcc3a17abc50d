#!/usr/bin/env python3
"""Curate a corpus once, then encode/train/predict/evaluate each input-representation variant.

    python scripts/run_ablations.py CORPUS OUT_DIR [--splits FILE] [--epochs N]

Variants: full, no overtones, no overtones and no drum split.  Prints the
micro F1 of each and writes one run directory per variant under OUT_DIR.
"""

import argparse
import json
from pathlib import Path

from midiseg.cli import main as cli

VARIANTS = {
    "full": [],
    "no_overtones": ["--no-overtones"],
    "no_overtones_no_drums": ["--no-overtones", "--no-drum-split"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("corpus")
    ap.add_argument("out")
    ap.add_argument("--splits")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--config")
    args = ap.parse_args()

    out = Path(args.out)
    base = ["--config", args.config] if args.config else []
    curate = base + ["--run-dir", str(out / "curated"), "curate", args.corpus]
    if args.splits:
        curate += ["--splits", args.splits]
    if cli(curate):
        raise SystemExit("curation failed")
    annotations = str(out / "curated" / "annotations.jsonl")
    train_flags = ["--epochs", str(args.epochs)] if args.epochs else []

    for name, flags in VARIANTS.items():
        run = base + ["--run-dir", str(out / name)]
        for step in (["encode", args.corpus, annotations] + flags, ["train"] + train_flags,
                     ["predict"], ["evaluate"]):
            if cli(run + step):
                raise SystemExit(f"{name}: {step[0]} failed")
        micro = json.loads((out / name / "report.json").read_text())["micro"]
        print(f"{name:24s} F1 {micro['f1']:.4f}  P {micro['precision']:.4f}  R {micro['recall']:.4f}")


if __name__ == "__main__":
    main()
