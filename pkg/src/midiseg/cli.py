"""Command line front-end.

    midiseg inspect FILE...
    midiseg curate CORPUS [--pickup-correction [all|tubb]]
    midiseg encode CORPUS [ANNOTATIONS] [--no-overtones] [--no-drum-split]
    midiseg train
    midiseg predict [--ensemble a.ckpt,b.ckpt]
    midiseg evaluate
    midiseg render-patch FILE --measure N -o out.png

Every stage reads and writes inside ``--run-dir`` and records its config
hash and seeds in ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import curate as cur
from .config import PipelineConfig, load_config
from .encode import build_overtone_table, export_patch_image, extract_patch, render_song
from .pipeline import (MissingArtifact, parallel_map, run_curate, run_encode, run_evaluate, run_predict, run_train,
                       update_manifest)
from .smf import MidiError, read_midi, song_measures

def _bool_flag(parser, name, dest, help):
    parser.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="midiseg", description="Section-boundary detection for MIDI files.")
    p.add_argument("--config", help="JSON config file (default: $MIDISEG_CONFIG)")
    p.add_argument("--run-dir", help="directory holding all stage outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("inspect", help="summarize MIDI files and their curation decision")
    s.add_argument("files", nargs="+")
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("curate", help="dedup, filter and annotate a marker corpus")
    s.add_argument("corpus", nargs="?")
    s.add_argument("--pickup-correction", nargs="?", const="all", choices=("all", "tubb"),
                   help="move boundaries off pickup measures (all files, or Tubb files only)")
    s.add_argument("--keep-list", help="text file of file ids to retain")
    s.add_argument("--splits", help="annotation file whose split fields are reused")
    s.add_argument("--tubb-list", help="text file of file ids forming the Tubb subset (overrides detection)")
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("encode", help="render labeled patches for annotated songs")
    s.add_argument("corpus", nargs="?")
    s.add_argument("annotations", nargs="?")
    _bool_flag(s, "overtones", "overtones", "leave the overtone channel empty")
    _bool_flag(s, "drum-split", "drum_split", "merge drums into the note channel")
    s.add_argument("--k", type=int, help="overtones per note")
    s.add_argument("--seed", type=int, help="overtone table seed")
    s.add_argument("--margin-bars", type=int)
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("train", help="train a boundary classifier on encoded patches")
    s.add_argument("--checkpoint", help="output path (default RUN/model.ckpt)")
    s.add_argument("--epochs", type=int, dest="max_epochs")
    s.add_argument("--lr", type=float, dest="learning_rate")
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("predict", help="per-measure boundary probabilities")
    s.add_argument("--checkpoint", help="model checkpoint (default RUN/model.ckpt)")
    s.add_argument("--ensemble", help="comma-separated checkpoints whose probabilities are averaged")
    s.add_argument("--split", default="test", help="split to predict, or 'all'")
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("evaluate", help="score predictions against annotations")
    s.add_argument("--split", default="test", help="split to score, or 'all'")
    s.add_argument("--threshold", type=float)
    s.add_argument("--margin-bars", type=int)
    s.add_argument("--decoder", choices=("threshold", "peak_pick"))

    s = sub.add_parser("render-patch", help="write one patch as a PNG/PPM image")
    s.add_argument("file")
    s.add_argument("--measure", type=int, required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--per-channel", action="store_true")
    _bool_flag(s, "overtones", "overtones", "leave the overtone channel empty")
    _bool_flag(s, "drum-split", "drum_split", "merge drums into the note channel")
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    return p


def _split(arg):
    return None if arg == "all" else arg


def _id_list(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def inspect_report(path) -> str:
    """Text summary of one file; raises on parse errors."""
    song = read_midi(path)
    grid = song_measures(song)
    decision = cur.filter_candidates(song, grid)
    ratio = f"{decision.ratio:.2f}" if decision.ratio is not None else "n/a"
    return "\n".join([
        f"file: {path}",
        f"  ppq: {song.ppq}",
        f"  notes: {len(song.notes)}",
        f"  markers: {len(song.markers)}",
        f"  tempo changes: {len(song.tempo_map.changes)}",
        f"  time signatures: {len(song.timesig_map.changes)}",
        f"  measures: {len(grid)} (onset span {decision.n_measures})",
        f"  measures/markers: {ratio}",
        f"  subset: {'tubb' if cur.is_tubb(song) else 'non_tubb'}",
        f"  keep: {str(decision.keep).lower()}",
        f"  reasons: {', '.join(str(r) for r in decision.reasons) or '-'}",
    ])


def _inspect_safe(path):
    try:
        return True, inspect_report(path)
    except (MidiError, OSError) as exc:
        return False, f"{path}: error: {type(exc).__name__}: {exc}"


def cmd_inspect(args, config: PipelineConfig) -> int:
    status = 0
    for ok, text in parallel_map(_inspect_safe, args.files, args.jobs):
        print(text, file=sys.stdout if ok else sys.stderr)
        status |= not ok
    return status


def cmd_curate(args, config: PipelineConfig, run_dir: Path) -> int:
    corpus = args.corpus or config.paths.corpus_dir
    keep = _id_list(args.keep_list) if args.keep_list else None
    tubb = _id_list(args.tubb_list) if args.tubb_list else None
    splits = None
    if args.splits:
        splits = {r.file_id: r.split for r in cur.load_annotations(args.splits)}
    records = run_curate(corpus, run_dir, pickup=args.pickup_correction, keep_list=keep,
                         splits=splits, tubb_ids=tubb, jobs=args.jobs)
    update_manifest(run_dir, "curate", config, corpus=str(corpus), kept=len(records),
                    pickup_correction=args.pickup_correction)
    print(f"kept {len(records)} files -> {run_dir / 'annotations.jsonl'}")
    return 0


def cmd_encode(args, config: PipelineConfig, run_dir: Path) -> int:
    config = config.with_overrides("encode", overtones=args.overtones, drum_split=args.drum_split,
                                   k=args.k, seed=args.seed)
    config = config.with_overrides("eval", margin_bars=args.margin_bars)
    corpus = args.corpus or config.paths.corpus_dir
    annotations = args.annotations or config.paths.annotations or run_dir / "annotations.jsonl"
    errors = run_encode(corpus, annotations, run_dir / "patches", config, jobs=args.jobs)
    failed = sorted(k for k, v in errors.items() if v)
    update_manifest(run_dir, "encode", config, encoded=len(errors) - len(failed), failed=failed)
    print(f"encoded {len(errors) - len(failed)} songs, {len(failed)} failed")
    return 0


def cmd_train(args, config: PipelineConfig, run_dir: Path) -> int:
    config = config.with_overrides("train", max_epochs=args.max_epochs, learning_rate=args.learning_rate,
                                   weight_decay=args.weight_decay, batch_size=args.batch_size,
                                   patience=args.patience, seed=args.seed)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "model.ckpt"
    model = run_train(run_dir / "patches", ckpt, config)
    update_manifest(run_dir, "train", config, checkpoint=str(ckpt), best_epoch=model.best_epoch)
    print(f"best epoch {model.best_epoch}, checkpoint {ckpt}")
    return 0


def cmd_predict(args, config: PipelineConfig, run_dir: Path) -> int:
    if args.ensemble:
        ckpts = [c for c in args.ensemble.split(",") if c]
    else:
        ckpts = [args.checkpoint or run_dir / "model.ckpt"]
    songs = run_predict(run_dir / "patches", ckpts, run_dir / "predictions", _split(args.split), args.jobs)
    update_manifest(run_dir, "predict", config, checkpoints=[str(c) for c in ckpts], split=args.split)
    print(f"predicted {len(songs)} songs")
    return 0


def cmd_evaluate(args, config: PipelineConfig, run_dir: Path) -> int:
    config = config.with_overrides("eval", threshold=args.threshold, margin_bars=args.margin_bars,
                                   decoder=args.decoder)
    report = run_evaluate(run_dir / "patches", run_dir / "predictions", run_dir / "report.json",
                          config, _split(args.split))
    update_manifest(run_dir, "evaluate", config, split=args.split)
    m = report["micro"]
    print(f"P={m['precision']:.4f} R={m['recall']:.4f} F1={m['f1']:.4f} "
          f"(tp={m['tp']} fp={m['fp']} fn={m['fn']})")
    return 0


def cmd_render_patch(args, config: PipelineConfig) -> int:
    config = config.with_overrides("encode", overtones=args.overtones, drum_split=args.drum_split,
                                   k=args.k, seed=args.seed)
    song = read_midi(args.file)
    grid = song_measures(song)
    table = build_overtone_table(config.encode.seed, config.encode.k)
    roll = render_song(song, grid, table, config.encode.options)
    patch = extract_patch(roll, grid, args.measure)
    for path in export_patch_image(patch, args.output, per_channel=args.per_channel):
        print(path)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        run_dir = Path(args.run_dir or config.paths.run_dir)
        if args.command == "inspect":
            return cmd_inspect(args, config)
        if args.command == "render-patch":
            return cmd_render_patch(args, config)
        run_dir.mkdir(parents=True, exist_ok=True)
        handler = {"curate": cmd_curate, "encode": cmd_encode, "train": cmd_train,
                   "predict": cmd_predict, "evaluate": cmd_evaluate}[args.command]
        return handler(args, config, run_dir)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MidiError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
