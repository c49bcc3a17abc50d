"""Piano-roll rendering with overtone encoding, and patch extraction.

Rolls are float64 arrays of shape (3, 128, T) on a 4-ticks-per-beat grid:

* channel 0 -- merged non-drum notes (constant velocity bars)
* channel 1 -- drums, one grid tick each
* channel 2 -- synthetic overtones, linearly decaying over the note

Row index is the MIDI pitch, so pitch 0 is row 0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .smf import GRID_TICKS_PER_BEAT, MeasureGrid, ParsedSong, round_half_up

N_CHANNELS = 3
N_PITCHES = 128
PATCH_WIDTH = 512
PATCH_CENTER = PATCH_WIDTH // 2
CANDIDATE_MULTIPLES = (2, 3, 4, 5)

NOTES, DRUMS, OVERTONES = 0, 1, 2


class InvalidK(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedNote:
    onset_q: int
    duration_q: int
    pitch: int
    velocity: float
    program: int
    is_drum: bool

    @property
    def end_q(self) -> int:
        return self.onset_q + self.duration_q


@dataclass(frozen=True)
class EncodeOptions:
    overtones: bool = True
    drum_split: bool = True


def quantize_events(song: ParsedSong) -> list[QuantizedNote]:
    scale = GRID_TICKS_PER_BEAT / song.ppq
    out = []
    for n in song.notes:
        if n.is_drum:
            duration = 1
        else:
            duration = max(round_half_up(n.duration_ticks * scale), 1)
        out.append(QuantizedNote(
            onset_q=round_half_up(n.onset_tick * scale),
            duration_q=duration,
            pitch=n.pitch,
            velocity=n.velocity,
            program=n.program,
            is_drum=n.is_drum,
        ))
    return out


# ---------------------------------------------------------------------------
# overtone table


@dataclass(frozen=True)
class OvertoneTable:
    """Per-program harmonic multiples and their (decreasing) gain factors."""

    multiples: np.ndarray  # (128, K) int
    factors: np.ndarray  # (128, K) float64
    seed: int = 0

    @property
    def k(self) -> int:
        return self.multiples.shape[1]

    def row(self, program: int) -> list[tuple[int, float]]:
        return list(zip(self.multiples[program].tolist(), self.factors[program].tolist()))

    def with_row(self, program: int, multiples: Sequence[int], factors: Sequence[float]) -> "OvertoneTable":
        if len(multiples) != self.k or len(factors) != self.k:
            raise ValueError(f"row must have exactly {self.k} entries")
        _check_row(multiples, factors)
        m, f = self.multiples.copy(), self.factors.copy()
        m[program], f[program] = multiples, factors
        return OvertoneTable(m, f, self.seed)

    def __eq__(self, other):
        return (isinstance(other, OvertoneTable) and self.seed == other.seed
                and np.array_equal(self.multiples, other.multiples)
                and np.array_equal(self.factors, other.factors))

    __hash__ = None


def _check_row(multiples, factors):
    if len(set(multiples)) != len(multiples) or not set(multiples) <= set(CANDIDATE_MULTIPLES):
        raise ValueError(f"multiples must be distinct values from {CANDIDATE_MULTIPLES}")
    if any(not 0 < f <= 1 for f in factors):
        raise ValueError("factors must lie in (0, 1]")
    if any(b >= a for a, b in zip(factors, factors[1:])):
        raise ValueError("factors must be strictly decreasing")


def build_overtone_table(seed: int, k: int = 3) -> OvertoneTable:
    if not 1 <= k <= len(CANDIDATE_MULTIPLES):
        raise InvalidK(f"K must be in [1, {len(CANDIDATE_MULTIPLES)}], got {k}")
    multiples = np.zeros((N_PITCHES, k), dtype=np.int64)
    factors = np.zeros((N_PITCHES, k))
    for program in range(N_PITCHES):
        rng = np.random.default_rng(np.random.SeedSequence([seed, program]))
        multiples[program] = np.sort(rng.choice(CANDIDATE_MULTIPLES, size=k, replace=False))
        while True:
            f = np.sort(1.0 - rng.random(k))[::-1]  # (0, 1], descending
            if np.all(np.diff(f) < 0):
                break
        factors[program] = f
    return OvertoneTable(multiples, factors, seed)


def overtone_pitch(base_pitch: int, multiple: int) -> int | None:
    pitch = base_pitch + round_half_up(12 * math.log2(multiple))
    return pitch if pitch <= 127 else None


# ---------------------------------------------------------------------------
# rendering


def roll_length(notes: Iterable[QuantizedNote]) -> int:
    return max((n.end_q for n in notes), default=0)


def render_pianoroll(
    notes: Sequence[QuantizedNote],
    table: OvertoneTable | None = None,
    opts: EncodeOptions = EncodeOptions(),
    length: int | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Render quantized notes into a (3, 128, T) roll, combining overlaps by max."""
    if length is None:
        length = roll_length(notes)
    roll = np.zeros((N_CHANNELS, N_PITCHES, length), dtype=dtype)
    for n in notes:
        start = n.onset_q
        stop = min(n.end_q, length)
        if start >= length or not 0 <= n.pitch < N_PITCHES:
            continue
        v = min(max(n.velocity, 0.0), 1.0)
        if n.is_drum:
            ch = DRUMS if opts.drum_split else NOTES
            row = roll[ch, n.pitch, start:stop]
            np.maximum(row, v, out=row)
            continue
        row = roll[NOTES, n.pitch, start:stop]
        np.maximum(row, v, out=row)
        if not opts.overtones or table is None:
            continue
        d = n.duration_q
        decay = 1.0 - np.arange(stop - start) / d
        for multiple, factor in table.row(n.program):
            p = overtone_pitch(n.pitch, multiple)
            if p is None:
                continue
            row = roll[OVERTONES, p, start:stop]
            np.maximum(row, factor * v * decay, out=row, casting="unsafe")
    np.clip(roll, 0.0, 1.0, out=roll)
    return roll


def render_song(song: ParsedSong, grid: MeasureGrid, table: OvertoneTable | None,
                opts: EncodeOptions = EncodeOptions()) -> np.ndarray:
    notes = quantize_events(song)
    length = max(roll_length(notes), grid.start_q[-1] if len(grid) else 0)
    return render_pianoroll(notes, table, opts, length=length)


# ---------------------------------------------------------------------------
# patches


@dataclass
class Patch:
    data: np.ndarray  # (3, 128, 512)
    center_measure_index: int = 0
    label: bool = False


def window(roll: np.ndarray, center: int, width: int = PATCH_WIDTH) -> np.ndarray:
    """Columns [center - width/2, center + width/2) of ``roll``, zero padded."""
    half = width // 2
    out = np.zeros(roll.shape[:-1] + (width,), dtype=roll.dtype)
    lo, hi = center - half, center + half
    src_lo, src_hi = max(lo, 0), min(hi, roll.shape[-1])
    if src_hi > src_lo:
        out[..., src_lo - lo:src_hi - lo] = roll[..., src_lo:src_hi]
    return out


def extract_patch(roll: np.ndarray, grid: MeasureGrid, measure_index: int,
                  boundaries: Iterable[int] = ()) -> Patch:
    if not 0 <= measure_index < len(grid):
        raise IndexError(f"measure {measure_index} outside grid of {len(grid)}")
    return Patch(
        data=window(roll, grid.start_q[measure_index]),
        center_measure_index=measure_index,
        label=measure_index in set(boundaries),
    )


# ---------------------------------------------------------------------------
# serialization

_HEADER = struct.Struct("<4H")


def write_patch(fh: BinaryIO, patch: Patch) -> None:
    """Append one patch record: u16 channels/height/width/label, then f32 data."""
    c, h, w = patch.data.shape
    fh.write(_HEADER.pack(c, h, w, int(bool(patch.label))))
    fh.write(np.ascontiguousarray(patch.data, dtype="<f4").tobytes())


def read_patches(fh: BinaryIO) -> Iterator[tuple[np.ndarray, bool]]:
    while True:
        head = fh.read(_HEADER.size)
        if not head:
            return
        if len(head) < _HEADER.size:
            raise ValueError("truncated patch header")
        c, h, w, label = _HEADER.unpack(head)
        n = c * h * w * 4
        buf = fh.read(n)
        if len(buf) < n:
            raise ValueError("truncated patch data")
        yield np.frombuffer(buf, dtype="<f4").reshape(c, h, w).astype(np.float32), bool(label)


def save_patches(path, patches: Iterable[Patch]) -> None:
    with open(path, "wb") as fh:
        for p in patches:
            write_patch(fh, p)


def load_patches(path) -> list[tuple[np.ndarray, bool]]:
    with open(path, "rb") as fh:
        return list(read_patches(fh))


def patch_to_image(patch: Patch | np.ndarray) -> np.ndarray:
    """(128, W, 3) uint8 RGB composite with pitch 127 on the top row."""
    data = patch.data if isinstance(patch, Patch) else patch
    img = np.rint(np.clip(data, 0, 1) * 255).astype(np.uint8)
    return np.ascontiguousarray(img[:, ::-1, :].transpose(1, 2, 0))


def export_patch_image(patch: Patch | np.ndarray, path, per_channel: bool = False) -> list[Path]:
    """Write a lossless PNG (or PPM/PGM, by suffix) of the patch.

    With ``per_channel`` one grayscale image per channel is written, with
    ``_c0``/``_c1``/``_c2`` inserted before the suffix.
    """
    from PIL import Image

    path = Path(path)
    rgb = patch_to_image(patch)
    if not per_channel:
        Image.fromarray(rgb, mode="RGB").save(path)
        return [path]
    paths = []
    for c in range(rgb.shape[-1]):
        p = path.with_name(f"{path.stem}_c{c}{path.suffix}")
        Image.fromarray(np.ascontiguousarray(rgb[..., c]), mode="L").save(p)
        paths.append(p)
    return paths


def read_patch_image(path) -> np.ndarray:
    """Inverse of :func:`export_patch_image` for RGB composites, values in [0, 1]."""
    from PIL import Image

    rgb = np.asarray(Image.open(path).convert("RGB"))
    return (rgb.transpose(2, 0, 1)[:, ::-1, :] / 255.0).astype(np.float32)
