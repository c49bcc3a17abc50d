"""Boundary scoring: per-measure hit rate, tolerance matching, peak picking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .smf import MeasureGrid, NoteEvent

DEFAULT_MARGIN_BARS = 16


@dataclass
class EvalResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    matching: list = field(default_factory=list)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "EvalResult") -> "EvalResult":
        return EvalResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def summary(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    return EvalResult(tp, fp, fn).f1


def exclusion_mask(grid: MeasureGrid, notes: Sequence[NoteEvent],
                   margin_bars: int = DEFAULT_MARGIN_BARS) -> np.ndarray:
    """True for measures at least ``margin_bars`` away from the first/last onset bars."""
    if margin_bars < 0:
        raise ValueError("margin_bars must be non-negative")
    mask = np.zeros(len(grid), dtype=bool)
    if not notes:
        return mask
    first = grid.measure_at_tick(min(n.onset_tick for n in notes))
    last = grid.measure_at_tick(max(n.onset_tick for n in notes))
    lo, hi = first + margin_bars, last - margin_bars
    if hi >= lo:
        mask[lo:hi + 1] = True
    return mask


def per_measure_eval(probs: Sequence[float], gt: Iterable[int], mask: Sequence[bool] | None = None,
                     threshold: float = 0.5) -> EvalResult:
    probs = np.asarray(probs, dtype=float)
    mask = np.ones(len(probs), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    truth = np.zeros(len(probs), dtype=bool)
    for g in gt:
        if 0 <= g < len(truth):
            truth[g] = True
    pred = probs > threshold
    tp = int(np.sum(pred & truth & mask))
    fp = int(np.sum(pred & ~truth & mask))
    fn = int(np.sum(~pred & truth & mask))
    return EvalResult(tp, fp, fn)


def match_within(pred: Sequence[float], gt: Sequence[float], tol: float) -> list[tuple[int, int]]:
    """Maximum-cardinality one-to-one matching with |pred - gt| <= tol.

    Each prediction can match a contiguous run of the sorted references and
    those runs move monotonically, so pairing every prediction with the
    earliest still-free reference in reach is optimal.  Returns index pairs.
    """
    p_order = np.argsort(pred, kind="stable")
    g_order = np.argsort(gt, kind="stable")
    pairs = []
    i = j = 0
    while i < len(p_order) and j < len(g_order):
        p, g = pred[p_order[i]], gt[g_order[j]]
        if abs(p - g) <= tol:
            pairs.append((int(p_order[i]), int(g_order[j])))
            i += 1
            j += 1
        elif g < p:
            j += 1
        else:
            i += 1
    return pairs


def tolerance_eval(pred_times: Sequence[float], gt_times: Sequence[float], tol: float) -> EvalResult:
    pred_times = [float(x) for x in pred_times]
    gt_times = [float(x) for x in gt_times]
    pairs = match_within(pred_times, gt_times, tol)
    tp = len(pairs)
    return EvalResult(tp, len(pred_times) - tp, len(gt_times) - tp,
                      matching=[(pred_times[a], gt_times[b]) for a, b in pairs])


def bar_tolerance_eval(pred_bars: Iterable[int], gt_bars: Iterable[int], tol_bars: int = 1,
                       mask: Sequence[bool] | None = None) -> EvalResult:
    def keep(bars):
        bars = sorted(set(int(b) for b in bars))
        if mask is None:
            return bars
        return [b for b in bars if 0 <= b < len(mask) and mask[b]]

    pred, gt = keep(pred_bars), keep(gt_bars)
    pairs = match_within(pred, gt, tol_bars)
    tp = len(pairs)
    return EvalResult(tp, len(pred) - tp, len(gt) - tp, matching=[(pred[a], gt[b]) for a, b in pairs])


def peak_pick(probs: Sequence[float], window_bars: int = 4, offset: float = 0.1,
              avg_window: int = 16) -> set[int]:
    """Strict local maxima within +-window_bars that clear a moving-average threshold.

    The moving average is centred, ``avg_window`` bars wide, and clipped at
    the ends of the song.
    """
    if window_bars < 1:
        raise ValueError("window_bars must be >= 1")
    probs = np.asarray(probs, dtype=float)
    n = len(probs)
    half_avg = max(avg_window // 2, 1)
    picked = set()
    for m in range(n):
        lo, hi = max(m - window_bars, 0), min(m + window_bars + 1, n)
        neighbours = np.concatenate([probs[lo:m], probs[m + 1:hi]])
        if neighbours.size and not np.all(probs[m] > neighbours):
            continue
        alo, ahi = max(m - half_avg, 0), min(m + half_avg + 1, n)
        if probs[m] > probs[alo:ahi].mean() + offset:
            picked.add(m)
    return picked


# ---------------------------------------------------------------------------
# reporting


@dataclass
class SongScore:
    file_id: str
    result: EvalResult
    extra: dict = field(default_factory=dict)


def build_report(scores: Sequence[SongScore]) -> dict:
    """Per-song rows plus micro (summed counts) and macro (mean per-song) aggregates."""
    rows = []
    total = EvalResult()
    for s in scores:
        rows.append({"file_id": s.file_id, **s.result.summary(), **s.extra})
        total = total + s.result
    macro = {}
    if scores:
        for key in ("precision", "recall", "f1"):
            macro[key] = float(np.mean([getattr(s.result, key) for s in scores]))
    return {"songs": rows, "micro": total.summary(), "macro": macro}


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=False)
        fh.write("\n")

