#!/usr/bin/env python3
"""Write a small marker-annotated MIDI corpus for exercising the pipeline.

    python scripts/make_synthetic_corpus.py OUT_DIR [--songs 12] [--seed 0]
"""

import argparse
from pathlib import Path

from midiseg.synth import SongSpec, song_bytes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--songs", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.songs):
        spec = SongSpec(sections=(8,) * 6, seed=args.seed + i, transpose=i % 5,
                        author="Tubb" if i % 3 == 0 else "")
        (out / f"song{i:03d}.mid").write_bytes(song_bytes(spec))
    print(f"wrote {args.songs} files to {out}")


if __name__ == "__main__":
    main()
