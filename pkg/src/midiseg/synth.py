"""Deterministic synthetic material: toy patch sets and marker-annotated songs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encode import PATCH_CENTER, PATCH_WIDTH, EncodeOptions, QuantizedNote, build_overtone_table, render_pianoroll
from .model import PatchSet
from .smf import (DRUM_CHANNEL, encode_file, encode_track, marker_event, tempo_event, text_event,
                  timesig_event)


@dataclass(frozen=True)
class Style:
    low: int  # lowest pitch
    span: int  # pitch range
    step: int  # grid ticks between onsets
    length: int  # note length in grid ticks
    voices: int  # simultaneous notes per onset
    program: int
    drums: bool
    loudness: tuple[float, float] = (0.6, 1.0)


STYLES = (
    Style(36, 18, step=16, length=12, voices=1, program=0, drums=False),  # sparse low line
    Style(60, 24, step=2, length=2, voices=3, program=73, drums=True),    # busy high figures
    Style(43, 24, step=4, length=3, voices=4, program=33, drums=True),    # driving riff
    Style(72, 12, step=32, length=24, voices=1, program=48, drums=False),  # held pad
)


def style_notes(style: Style, start: int, stop: int, rng: np.random.Generator) -> list[QuantizedNote]:
    notes = []
    for t in range(start, stop, style.step):
        for p in rng.choice(style.span, size=style.voices, replace=False):
            notes.append(QuantizedNote(t, min(style.length, stop - t), style.low + int(p),
                                       float(rng.uniform(*style.loudness)), style.program, False))
        if style.drums:
            notes.append(QuantizedNote(t, 1, 36 + 6 * ((t // 4) % 2), 0.9, 0, True))
    return notes


CALM = (0, 3)  # drumless styles
BUSY = (1, 2)  # drum-backed styles


def toy_patch(rng: np.random.Generator, boundary: bool, table=None,
              opts: EncodeOptions = EncodeOptions()) -> np.ndarray:
    """One 3x128x512 patch.

    Homogeneous patches keep one drumless style throughout; boundary patches
    switch at the centre column to a drum-backed style.
    """
    a = CALM[int(rng.integers(len(CALM)))]
    b = BUSY[int(rng.integers(len(BUSY)))] if boundary else a
    notes = style_notes(STYLES[a], 0, PATCH_CENTER, rng) + style_notes(STYLES[b], PATCH_CENTER, PATCH_WIDTH, rng)
    return render_pianoroll(notes, table, opts, length=PATCH_WIDTH).astype(np.float32)


def toy_patch_set(n_pos: int = 25, n_neg: int = 25, seed: int = 0,
                  opts: EncodeOptions = EncodeOptions()) -> PatchSet:
    """The bundled overfit set: boundary-contrast patches followed by homogeneous ones."""
    rng = np.random.default_rng(seed)
    table = build_overtone_table(seed, 3)
    x = np.stack([toy_patch(rng, True, table, opts) for _ in range(n_pos)]
                 + [toy_patch(rng, False, table, opts) for _ in range(n_neg)])
    y = np.array([True] * n_pos + [False] * n_neg)
    return PatchSet(x, y)


# ---------------------------------------------------------------------------
# songs


@dataclass
class SongSpec:
    """Blueprint for a synthetic marker-annotated song (4/4 unless ``meter`` says otherwise)."""

    sections: tuple[int, ...] = (8, 8, 8, 8)  # bars per section
    lead_in_bars: int = 0  # silent bars before the music
    marker_bars: tuple[int, ...] | None = None  # defaults to section starts
    marker_offset_beats: float = 0.0
    ppq: int = 480
    tempo: int = 500000
    seed: int = 0
    transpose: int = 0
    author: str = ""
    meter: tuple[tuple[int, int, int], ...] = ()  # (bar index, num, den) changes after bar 0
    running_status: bool = False
    zero_velocity_off: bool = False

    @property
    def n_bars(self) -> int:
        return self.lead_in_bars + sum(self.sections)

    def section_starts(self) -> list[int]:
        starts, bar = [], self.lead_in_bars
        for n in self.sections:
            starts.append(bar)
            bar += n
        return starts


def song_bytes(spec: SongSpec) -> bytes:
    """Render a SongSpec into SMF bytes: conductor track plus one track per section style."""
    rng = np.random.default_rng(spec.seed)
    ppq = spec.ppq
    # bar start ticks honouring meter changes
    meters = {0: (4, 4)}
    meters.update({bar: (n, d) for bar, n, d in spec.meter})
    bar_ticks, tick, current = [], 0, meters[0]
    for bar in range(spec.n_bars + 1):
        current = meters.get(bar, current)
        bar_ticks.append(tick)
        tick += ppq * 4 * current[0] // current[1]

    conductor = [(0, tempo_event(spec.tempo))]
    for bar, (n, d) in sorted(meters.items()):
        conductor.append((bar_ticks[bar], timesig_event(n, d)))
    if spec.author:
        conductor.append((0, text_event(f"Sequenced by {spec.author}")))
    marker_bars = spec.marker_bars if spec.marker_bars is not None else spec.section_starts()
    for i, bar in enumerate(marker_bars):
        t = bar_ticks[bar] + int(round(spec.marker_offset_beats * ppq))
        conductor.append((max(t, 0), marker_event(f"Section {chr(65 + i % 26)}")))
    conductor.sort(key=lambda e: e[0])

    music: list[tuple[int, int, bytes]] = []
    for si, (start, length) in enumerate(zip(spec.section_starts(), spec.sections)):
        style = STYLES[si % len(STYLES)]
        channel = si % 8
        begin, end = bar_ticks[start], bar_ticks[start + length]
        music.append((begin, 1, bytes([0xC0 | channel, style.program])))
        step = style.step * ppq // 4
        for t in range(begin, end, step):
            dur = min(style.length * ppq // 4, end - t)
            for p in rng.choice(style.span, size=style.voices, replace=False):
                pitch = style.low + int(p) + spec.transpose
                vel = int(rng.integers(60, 128))
                music.append((t, 2, bytes([0x90 | channel, pitch, vel])))
                off = bytes([0x90 | channel, pitch, 0]) if spec.zero_velocity_off else bytes([0x80 | channel, pitch, 64])
                music.append((t + dur, 0, off))
            if style.drums:
                music.append((t, 2, bytes([0x90 | DRUM_CHANNEL, 42, 100])))
                music.append((t + ppq // 8, 0, bytes([0x80 | DRUM_CHANNEL, 42, 0])))
    music.sort(key=lambda e: (e[0], e[1]))
    tracks = [
        encode_track(conductor),
        encode_track([(t, m) for t, _, m in music], running_status=spec.running_status),
    ]
    return encode_file(tracks, ppq)
