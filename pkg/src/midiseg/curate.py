"""Turning marker-annotated MIDI files into a boundary dataset.

Pipeline per file: fingerprint for dedup, marker-based candidate filters,
marker to bar-line quantization, optional pickup correction, and export of
the boundary positions in beats and seconds.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .smf import GRID_TICKS_PER_BEAT, Marker, MeasureGrid, ParsedSong, beats_to_seconds, round_half_up

MIN_MARKERS = 3
MIN_RATIO = 6
MAX_RATIO = 24
SPLITS = ("train", "validation", "test")
SUBSETS = ("tubb", "non_tubb")


class EmptySong(ValueError):
    pass


class InvariantViolation(ValueError):
    pass


class Reason(str, enum.Enum):
    TOO_FEW_MARKERS = "TooFewMarkers"
    RATIO_TOO_LOW = "RatioTooLow"
    RATIO_TOO_HIGH = "RatioTooHigh"
    NO_INTERIOR_MARKERS = "NoInteriorMarkers"
    DUPLICATE = "Duplicate"
    NOT_IN_KEEP_LIST = "NotInKeepList"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Fingerprint:
    digest: str
    n_columns: int


@dataclass
class CurationDecision:
    reasons: list[Reason] = field(default_factory=list)
    n_markers: int = 0
    n_measures: int = 0

    @property
    def keep(self) -> bool:
        return not self.reasons

    @property
    def ratio(self) -> float | None:
        return self.n_measures / self.n_markers if self.n_markers else None


@dataclass
class AnnotationRecord:
    file_id: str
    boundaries_beats: list[float]
    boundaries_seconds: list[float]
    marker_texts: list[str] = field(default_factory=list)
    split: str = "train"
    subset: str = "non_tubb"

    def validate(self, grid: MeasureGrid | None = None) -> None:
        if len(self.boundaries_beats) != len(self.boundaries_seconds):
            raise InvariantViolation(f"{self.file_id}: beats and seconds differ in length")
        for name, xs in (("beats", self.boundaries_beats), ("seconds", self.boundaries_seconds)):
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise InvariantViolation(f"{self.file_id}: boundary {name} not strictly increasing")
        if self.split not in SPLITS:
            raise InvariantViolation(f"{self.file_id}: unknown split {self.split!r}")
        if self.subset not in SUBSETS:
            raise InvariantViolation(f"{self.file_id}: unknown subset {self.subset!r}")
        if grid is not None:
            starts = set(grid.start_beats)
            off = [b for b in self.boundaries_beats if b not in starts]
            if off:
                raise InvariantViolation(f"{self.file_id}: beats {off} are not measure starts")

    def to_json(self) -> str:
        obj = {
            "file_id": self.file_id,
            "subset": self.subset,
            "split": self.split,
            "boundaries_beats": list(self.boundaries_beats),
            "boundaries_seconds": list(self.boundaries_seconds),
            "marker_texts": list(self.marker_texts),
        }
        return json.dumps(obj, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "AnnotationRecord":
        obj = json.loads(line)
        return cls(
            file_id=str(obj["file_id"]),
            boundaries_beats=[float(x) for x in obj["boundaries_beats"]],
            boundaries_seconds=[float(x) for x in obj["boundaries_seconds"]],
            marker_texts=[str(x) for x in obj.get("marker_texts", [])],
            split=obj.get("split", "train"),
            subset=obj.get("subset", "non_tubb"),
        )


# ---------------------------------------------------------------------------
# dedup


def onset_chroma(song: ParsedSong) -> np.ndarray:
    """Binary 12 x N onset chroma on the 16th grid, leading/trailing silence trimmed."""
    if not song.notes:
        raise EmptySong("song has no notes")
    notes = [n for n in song.notes if not n.is_drum] or list(song.notes)
    cols = np.array([round_half_up(n.onset_tick * GRID_TICKS_PER_BEAT / song.ppq) for n in notes])
    cols -= cols.min()
    chroma = np.zeros((12, cols.max() + 1), dtype=np.uint8)
    chroma[[n.pitch % 12 for n in notes], cols] = 1
    return chroma


def fingerprint(song: ParsedSong) -> Fingerprint:
    chroma = onset_chroma(song)
    h = hashlib.sha256()
    h.update(np.array(chroma.shape, dtype="<u4").tobytes())
    h.update(np.packbits(chroma, axis=None).tobytes())
    return Fingerprint(h.hexdigest(), chroma.shape[1])


@dataclass
class DedupGroup:
    digest: str
    kept: str
    dropped: list[str] = field(default_factory=list)


def dedup(fingerprints: Iterable[tuple[str, Fingerprint]]) -> list[DedupGroup]:
    """Group by digest; the lexicographically smallest id in each group survives."""
    groups: dict[str, list[str]] = {}
    for file_id, fp in fingerprints:
        groups.setdefault(fp.digest, []).append(file_id)
    out = []
    for digest, ids in groups.items():
        ids = sorted(ids)
        out.append(DedupGroup(digest, ids[0], ids[1:]))
    out.sort(key=lambda g: g.kept)
    return out


# ---------------------------------------------------------------------------
# filters and marker handling


def onset_span_measures(song: ParsedSong, grid: MeasureGrid) -> int:
    """Number of measures from the bar of the first onset to the bar of the last."""
    if not song.notes:
        return 0
    first = grid.measure_at_tick(song.notes[0].onset_tick)
    last = grid.measure_at_tick(max(n.onset_tick for n in song.notes))
    return last - first + 1


def filter_candidates(song: ParsedSong, grid: MeasureGrid) -> CurationDecision:
    n_markers = len(song.markers)
    n_measures = onset_span_measures(song, grid)
    decision = CurationDecision(n_markers=n_markers, n_measures=n_measures)
    if n_markers < MIN_MARKERS:
        decision.reasons.append(Reason.TOO_FEW_MARKERS)
    if n_markers:
        ratio = n_measures / n_markers
        if ratio < MIN_RATIO:
            decision.reasons.append(Reason.RATIO_TOO_LOW)
        elif ratio > MAX_RATIO:
            decision.reasons.append(Reason.RATIO_TOO_HIGH)
    if song.notes:
        first = min(n.onset_tick for n in song.notes)
        last = max(n.onset_tick for n in song.notes)
        interior = any(first < m.tick < last for m in song.markers)
    else:
        interior = False
    if not interior:
        decision.reasons.append(Reason.NO_INTERIOR_MARKERS)
    return decision


def nearest_measure(grid: MeasureGrid, beat: float) -> int:
    """Nearest measure start to ``beat``; ties go to the earlier measure."""
    i = grid.measure_at_beat(beat)
    if i + 1 < len(grid) and grid.start_beats[i + 1] - beat < beat - grid.start_beats[i]:
        return i + 1
    return i


def quantize_markers_to_bars(markers: Sequence[Marker], grid: MeasureGrid) -> list[int]:
    if not len(grid):
        raise ValueError("empty measure grid")
    return sorted({nearest_measure(grid, m.tick / grid.ppq) for m in markers})


def pickup_correction(boundaries: Iterable[int], grid: MeasureGrid, min_beats: float = 2.0) -> list[int]:
    """Move boundaries sitting on a short measure (< a half note) onto the next one.

    Only applies when the following measure is at least a half note long.
    Applied once; boundaries that land on another short measure stay put.
    """
    out = set()
    for m in boundaries:
        if (m + 1 < len(grid) and grid.durations[m] < min_beats
                and grid.durations[m + 1] >= min_beats):
            out.add(m + 1)
        else:
            out.add(m)
    return sorted(out)


def marker_texts_by_bar(markers: Sequence[Marker], grid: MeasureGrid) -> dict[int, str]:
    texts: dict[int, str] = {}
    for m in markers:
        texts.setdefault(nearest_measure(grid, m.tick / grid.ppq), m.text)
    return texts


def is_tubb(song: ParsedSong) -> bool:
    return any("tubb" in t.lower() for t in song.texts)


def annotate(song: ParsedSong, grid: MeasureGrid, file_id: str, *, pickup: bool = False,
             split: str = "train", subset: str | None = None) -> AnnotationRecord:
    """Bar-quantize markers (and optionally fix pickups) into an annotation record."""
    bars = quantize_markers_to_bars(song.markers, grid)
    texts = marker_texts_by_bar(song.markers, grid)
    if pickup:
        moved = {b: pickup_correction([b], grid)[0] for b in bars}
        texts = {moved[b]: texts.get(b, "") for b in reversed(bars)}
        bars = sorted(set(moved.values()))
    beats = [grid.start_beats[b] for b in bars]
    record = AnnotationRecord(
        file_id=file_id,
        boundaries_beats=beats,
        boundaries_seconds=[beats_to_seconds(song.tempo_map, song.ppq, b) for b in beats],
        marker_texts=[texts.get(b, "") for b in bars],
        split=split,
        subset=subset if subset is not None else ("tubb" if is_tubb(song) else "non_tubb"),
    )
    record.validate(grid)
    return record


def boundary_measures(record: AnnotationRecord, grid: MeasureGrid, tol: float = 1e-6) -> list[int]:
    """Map a record's beat positions back onto measure indices of ``grid``."""
    starts = np.asarray(grid.start_beats)
    out = []
    for b in record.boundaries_beats:
        i = int(np.argmin(np.abs(starts - b)))
        if abs(starts[i] - b) > tol:
            raise InvariantViolation(f"{record.file_id}: beat {b} is not a measure start")
        out.append(i)
    return out


def assign_split(file_id: str, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> str:
    """Deterministic hash-based split for corpora without a published split."""
    u = int(hashlib.sha256(file_id.encode("utf-8")).hexdigest()[:8], 16) / 0x100000000
    acc = 0.0
    for name, frac in zip(SPLITS, fractions):
        acc += frac
        if u < acc:
            return name
    return SPLITS[-1]


# ---------------------------------------------------------------------------
# io


def export_annotations(records: Sequence[AnnotationRecord], path) -> None:
    for r in records:
        r.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_annotations(path) -> list[AnnotationRecord]:
    with open(path, encoding="utf-8") as fh:
        return [AnnotationRecord.from_json(line) for line in fh if line.strip()]
