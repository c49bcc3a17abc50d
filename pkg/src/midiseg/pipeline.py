"""Batch stages behind the command line: curate, encode, train, predict, evaluate."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import curate as cur
from .config import PipelineConfig
from .encode import build_overtone_table, extract_patch, load_patches, render_song, save_patches
from .evaluation import (EvalResult, SongScore, bar_tolerance_eval, build_report, exclusion_mask,
                         peak_pick, per_measure_eval, tolerance_eval, write_report)
from .model import PatchSet, TrainedModel, ensemble_predict, load_checkpoint, save_checkpoint, train
from .smf import MidiError, beats_to_seconds, read_midi, song_measures

log = logging.getLogger(__name__)

MIDI_SUFFIXES = (".mid", ".midi", ".smf")


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced what this stage needs."""

    def __init__(self, stage: str, path):
        super().__init__(f"missing output of stage '{stage}': {path}")
        self.stage = stage


def discover(corpus_dir) -> dict[str, Path]:
    """file_id (relative path without suffix) -> path for every MIDI file below ``corpus_dir``."""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise MissingArtifact("corpus", root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES:
            out[p.relative_to(root).with_suffix("").as_posix()] = p
    return out


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _load(path, stage: str):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(stage, path)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def update_manifest(run_dir, command: str, config: PipelineConfig, **extra) -> None:
    """Record, per command, the config hash and seeds that produced the run's outputs."""
    path = Path(run_dir) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest[command] = {
        "config_hash": config.digest(),
        "seeds": {"encode": config.encode.seed, "train": config.train.seed, "model": config.model.seed},
        **extra,
    }
    _dump(manifest, path)


# ---------------------------------------------------------------------------
# curate


@dataclass
class _FileInfo:
    file_id: str
    error: str = ""
    digest: str = ""
    decision: cur.CurationDecision | None = None
    record: cur.AnnotationRecord | None = None


def _curate_one(args) -> _FileInfo:
    file_id, path, pickup, tubb = args
    try:
        song = read_midi(path)
        grid = song_measures(song)
        fp = cur.fingerprint(song)
        decision = cur.filter_candidates(song, grid)
        if tubb is None:
            tubb = cur.is_tubb(song)
        apply_pickup = pickup == "all" or (pickup == "tubb" and tubb)
        record = None
        if decision.keep:
            record = cur.annotate(song, grid, file_id, pickup=apply_pickup,
                                  subset="tubb" if tubb else "non_tubb")
        return _FileInfo(file_id, digest=fp.digest, decision=decision, record=record)
    except (MidiError, cur.EmptySong, OSError, ValueError) as exc:
        return _FileInfo(file_id, error=f"{type(exc).__name__}: {exc}")


def run_curate(corpus_dir, out_dir, *, pickup: str | None = None, keep_list: Iterable[str] | None = None,
               splits: dict[str, str] | None = None, tubb_ids: Iterable[str] | None = None,
               jobs: int = 1) -> list[cur.AnnotationRecord]:
    """Dedup, filter and annotate a corpus; writes annotations.jsonl and curation_log.jsonl.

    ``tubb_ids``, when given, replaces text-based detection of the Tubb subset.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = discover(corpus_dir)
    tubb = set(tubb_ids) if tubb_ids is not None else None
    work = [(fid, str(p), pickup, None if tubb is None else fid in tubb) for fid, p in files.items()]
    infos = parallel_map(_curate_one, work, jobs)

    fingerprints = [(i.file_id, cur.Fingerprint(i.digest, 0)) for i in infos if not i.error]
    dropped = {fid for g in cur.dedup(fingerprints) for fid in g.dropped}
    keep_set = set(keep_list) if keep_list is not None else None

    records, log_rows = [], []
    for info in infos:
        row = {"file_id": info.file_id, "keep": False, "reasons": [], "error": info.error}
        if not info.error:
            d = info.decision
            if info.file_id in dropped:
                d.reasons.append(cur.Reason.DUPLICATE)
            if keep_set is not None and info.file_id not in keep_set:
                d.reasons.append(cur.Reason.NOT_IN_KEEP_LIST)
            row.update(keep=d.keep, reasons=[str(r) for r in d.reasons], n_markers=d.n_markers,
                       n_measures=d.n_measures, ratio=d.ratio, digest=info.digest)
            if d.keep:
                rec = info.record
                rec.split = (splits or {}).get(info.file_id) or cur.assign_split(info.file_id)
                records.append(rec)
        else:
            log.warning("%s: %s", info.file_id, info.error)
        log_rows.append(row)

    cur.export_annotations(records, out_dir / "annotations.jsonl")
    with open(out_dir / "curation_log.jsonl", "w", encoding="utf-8") as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return records


# ---------------------------------------------------------------------------
# encode


def _encode_one(args) -> str:
    file_id, path, record, cfg, out_dir = args
    record = cur.AnnotationRecord.from_json(record)
    cfg = PipelineConfig.from_dict(cfg)
    try:
        song = read_midi(path)
    except (MidiError, OSError) as exc:
        return f"{type(exc).__name__}: {exc}"
    grid = song_measures(song)
    boundaries = set(cur.boundary_measures(record, grid))
    mask = exclusion_mask(grid, song.notes, cfg.eval.margin_bars)
    table = build_overtone_table(cfg.encode.seed, cfg.encode.k)
    roll = render_song(song, grid, table, cfg.encode.options)
    patch_measures = [int(m) for m in np.flatnonzero(mask)]
    patches = (extract_patch(roll, grid, m, boundaries) for m in patch_measures)
    stem = _stem(file_id)
    save_patches(Path(out_dir) / f"{stem}.patches", patches)
    index = {
        "file_id": file_id,
        "split": record.split,
        "subset": record.subset,
        "patch_measures": patch_measures,
        "measures": [
            {"index": i, "start_beat": b,
             "start_seconds": beats_to_seconds(song.tempo_map, song.ppq, b),
             "label": i in boundaries, "evaluable": bool(mask[i])}
            for i, b in enumerate(grid.start_beats)
        ],
    }
    _dump(index, Path(out_dir) / f"{stem}.json")
    return ""


def _stem(file_id: str) -> str:
    """Flat, filesystem-safe name for a (possibly nested) file id."""
    safe = file_id.replace("/", "__")
    return safe if len(safe) < 120 else hashlib.sha1(file_id.encode()).hexdigest()


def run_encode(corpus_dir, annotations, out_dir, config: PipelineConfig, jobs: int = 1) -> dict[str, str]:
    """Render patches for every annotated song; returns per-file error strings (empty = ok)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not Path(annotations).exists():
        raise MissingArtifact("curate", annotations)
    records = cur.load_annotations(annotations)
    files = discover(corpus_dir)
    work, errors = [], {}
    for rec in records:
        if rec.file_id not in files:
            errors[rec.file_id] = "file not found in corpus"
            continue
        work.append((rec.file_id, str(files[rec.file_id]), rec.to_json(), config.to_dict(), str(out_dir)))
    for (fid, *_), err in zip(work, parallel_map(_encode_one, work, jobs)):
        errors[fid] = err
    for fid, err in errors.items():
        if err:
            log.warning("%s: %s", fid, err)
    return errors


@dataclass
class EncodedSong:
    index: dict
    patches_path: Path

    @property
    def file_id(self) -> str:
        return self.index["file_id"]

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        recs = load_patches(self.patches_path)
        if not recs:
            return np.zeros((0, 3, 128, 512), dtype=np.float32), np.zeros(0, dtype=bool)
        return np.stack([r[0] for r in recs]), np.array([r[1] for r in recs])


def encoded_songs(patch_dir, split: str | None = None) -> list[EncodedSong]:
    patch_dir = Path(patch_dir)
    if not patch_dir.is_dir():
        raise MissingArtifact("encode", patch_dir)
    out = []
    for idx_path in sorted(patch_dir.glob("*.json")):
        index = json.loads(idx_path.read_text(encoding="utf-8"))
        if split is None or index["split"] == split:
            out.append(EncodedSong(index, idx_path.with_suffix(".patches")))
    return out


def load_split(patch_dir, split: str) -> PatchSet:
    xs, ys = [], []
    for song in encoded_songs(patch_dir, split):
        x, y = song.load()
        xs.append(x)
        ys.append(y)
    if not xs:
        return PatchSet(np.zeros((0, 3, 128, 512), dtype=np.float32), np.zeros(0, dtype=bool))
    return PatchSet(np.concatenate(xs), np.concatenate(ys))


# ---------------------------------------------------------------------------
# train / predict


def run_train(patch_dir, checkpoint, config: PipelineConfig) -> TrainedModel:
    train_set = load_split(patch_dir, "train")
    val_set = load_split(patch_dir, "validation")
    model = train(train_set, val_set, config.model, config.train)
    save_checkpoint(model, checkpoint)
    _dump(model.history, Path(checkpoint).with_suffix(".history.json"))
    return model


def _predict_one(args) -> str:
    checkpoints, song, out_dir = args
    models = [load_checkpoint(c) for c in checkpoints]
    x, _ = song.load()
    probs = ensemble_predict(models, x) if len(x) else np.zeros(0)
    write_predictions(out_dir, song.file_id, song.index["patch_measures"], probs)
    return song.file_id


def run_predict(patch_dir, checkpoints: Sequence, out_dir, split: str | None = "test",
                jobs: int = 1) -> list[str]:
    for c in checkpoints:
        if not Path(c).exists():
            raise MissingArtifact("train", c)
    checkpoints = [str(c) for c in checkpoints]
    load_checkpoint(checkpoints[0])  # fail early on a bad file
    work = [(checkpoints, song, str(out_dir)) for song in encoded_songs(patch_dir, split)]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return parallel_map(_predict_one, work, jobs)


def write_predictions(out_dir, file_id: str, measures: Sequence[int], probs: Sequence[float]) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    _dump({"file_id": file_id, "measures": [int(m) for m in measures],
           "probs": [float(p) for p in probs]}, Path(out_dir) / f"{_stem(file_id)}.json")


# ---------------------------------------------------------------------------
# evaluate


def score_song(index: dict, pred: dict, config: PipelineConfig) -> SongScore:
    ev = config.eval
    measures = index["measures"]
    n = len(measures)
    probs = np.zeros(n)
    for m, p in zip(pred["measures"], pred["probs"]):
        if 0 <= m < n:
            probs[m] = p
    mask = np.array([m["evaluable"] for m in measures], dtype=bool)
    gt = [m["index"] for m in measures if m["label"]]
    if ev.decoder == "peak_pick":
        picked = peak_pick(probs)
        decoded = np.array([1.0 if i in picked else 0.0 for i in range(n)])
    else:
        decoded = probs
    result = per_measure_eval(decoded, gt, mask, ev.threshold)

    pred_bars = [i for i in range(n) if mask[i] and decoded[i] > ev.threshold]
    gt_bars = [i for i in gt if mask[i]]
    times = [m["start_seconds"] for m in measures]
    extra = {}
    bar = bar_tolerance_eval(pred_bars, gt_bars, ev.tolerance_bars, mask)
    extra[f"f1_{ev.tolerance_bars}bar"] = bar.f1
    extra["_counts"] = {f"{ev.tolerance_bars}bar": [bar.tp, bar.fp, bar.fn]}
    for tol in ev.tolerances_seconds:
        r = tolerance_eval([times[i] for i in pred_bars], [times[i] for i in gt_bars], tol)
        extra[f"f1_{tol:g}s"] = r.f1
        extra["_counts"][f"{tol:g}s"] = [r.tp, r.fp, r.fn]
    return SongScore(index["file_id"], result, extra)


def run_evaluate(patch_dir, pred_dir, report_path, config: PipelineConfig, split: str | None = "test") -> dict:
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise MissingArtifact("predict", pred_dir)
    scores = []
    for song in encoded_songs(patch_dir, split):
        pred = _load(pred_dir / f"{_stem(song.file_id)}.json", "predict")
        scores.append(score_song(song.index, pred, config))
    report = build_report(scores)
    # micro aggregates of the tolerance metrics from summed counts
    totals: dict[str, EvalResult] = {}
    for row in report["songs"]:
        for key, (tp, fp, fn) in row.pop("_counts").items():
            totals[key] = totals.get(key, EvalResult()) + EvalResult(tp, fp, fn)
    report["micro_tolerance"] = {k: v.summary() for k, v in sorted(totals.items())}
    report["config_hash"] = config.digest()
    write_report(report, report_path)
    return report
