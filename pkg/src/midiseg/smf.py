"""Standard MIDI File decoding, timing conversion and measure grids.

Only what boundary detection needs is decoded: notes (with CC-7/CC-11
gain folded into the velocity), markers, text events, tempo and time
signature changes.  A small writer is included so that tests and the
synthetic corpus generator can produce bit-exact fixtures.
"""

from __future__ import annotations

import bisect
import math
import struct
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

DEFAULT_TEMPO = 500000  # µs per quarter note (120 BPM)
GRID_TICKS_PER_BEAT = 4
DRUM_CHANNEL = 9  # channel 10 in 1-based numbering

META_TEXT_TYPES = (0x01, 0x02, 0x03, 0x04, 0x05)
META_MARKER = 0x06
META_END_OF_TRACK = 0x2F
META_TEMPO = 0x51
META_TIME_SIGNATURE = 0x58

CC_VOLUME = 7
CC_EXPRESSION = 11

# data bytes following each channel-message status nibble
_DATA_LENGTH = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


class MidiError(ValueError):
    """Base class for SMF decoding failures."""


class MalformedHeader(MidiError):
    pass


class UnsupportedDivision(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class TruncatedChunk(MidiError):
    pass


class MalformedEvent(MidiError):
    pass


class DanglingNoteOff(UserWarning):
    """A note-off arrived with no sounding note to close; it is skipped."""


@dataclass(frozen=True)
class NoteEvent:
    onset_tick: int
    duration_ticks: int
    pitch: int
    velocity: float
    program: int
    is_drum: bool
    raw_velocity: int = 127
    channel: int = 0
    track: int = 0

    @property
    def end_tick(self) -> int:
        return self.onset_tick + self.duration_ticks


@dataclass(frozen=True)
class Marker:
    tick: int
    text: str


@dataclass(frozen=True)
class TempoMap:
    """(tick, µs per quarter note) pairs; always starts at tick 0."""

    changes: tuple[tuple[int, int], ...] = ((0, DEFAULT_TEMPO),)

    def __post_init__(self):
        changes = tuple(self.changes)
        if not changes or changes[0][0] != 0:
            changes = ((0, DEFAULT_TEMPO),) + changes
        ticks = [t for t, _ in changes]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ValueError("tempo change ticks must be strictly increasing")
        if any(us <= 0 for _, us in changes):
            raise ValueError("tempo must be positive")
        object.__setattr__(self, "changes", changes)


@dataclass(frozen=True)
class TimeSigMap:
    """(tick, numerator, denominator) triples; always starts at tick 0."""

    changes: tuple[tuple[int, int, int], ...] = ((0, 4, 4),)
    ppq: int = 480

    def __post_init__(self):
        changes = tuple(self.changes)
        if not changes or changes[0][0] != 0:
            changes = ((0, 4, 4),) + changes
        ticks = [t for t, _, _ in changes]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ValueError("time signature ticks must be strictly increasing")
        for _, num, den in changes:
            if num < 1 or den not in (1, 2, 4, 8, 16, 32):
                raise ValueError(f"invalid time signature {num}/{den}")
        if self.ppq <= 0:
            raise ValueError("ppq must be positive")
        object.__setattr__(self, "changes", changes)


@dataclass(frozen=True)
class ParsedSong:
    ppq: int
    notes: tuple[NoteEvent, ...]
    markers: tuple[Marker, ...]
    tempo_map: TempoMap
    timesig_map: TimeSigMap
    texts: tuple[str, ...] = ()
    end_tick: int = 0
    controls: tuple[tuple[int, int, int, int, int], ...] = ()  # (tick, track, channel, cc, value)

    def __post_init__(self):
        if self.ppq <= 0:
            raise ValueError("ppq must be positive")

    @property
    def end_beat(self) -> float:
        last = max([self.end_tick] + [n.end_tick for n in self.notes])
        return last / self.ppq


@dataclass(frozen=True)
class MeasureGrid:
    """Measure starts in beats (quarter notes) and on the 4-per-beat grid."""

    start_beats: tuple[float, ...]
    durations: tuple[float, ...]
    ppq: int = 480
    start_q: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.start_q:
            q = tuple(round_half_up(b * GRID_TICKS_PER_BEAT) for b in self.start_beats)
            object.__setattr__(self, "start_q", q)

    def __len__(self) -> int:
        return len(self.start_beats)

    def measure_at_beat(self, beat: float) -> int:
        """Index of the measure containing ``beat`` (clamped to the grid)."""
        i = bisect.bisect_right(self.start_beats, beat) - 1
        return min(max(i, 0), len(self.start_beats) - 1)

    def measure_at_tick(self, tick: int) -> int:
        return self.measure_at_beat(tick / self.ppq)


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


# ---------------------------------------------------------------------------
# decoding


def read_vlq(data: bytes, pos: int, end: int) -> tuple[int, int]:
    """Decode a variable-length quantity, returning (value, new position)."""
    value = 0
    for _ in range(4):
        if pos >= end:
            raise TruncatedChunk("variable-length quantity runs past chunk end")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MalformedEvent("variable-length quantity longer than 4 bytes")


def _decode_text(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


@dataclass
class _TrackEvents:
    # (tick, channel, pitch, velocity) with velocity 0 meaning off
    note_msgs: list = field(default_factory=list)
    ccs: list = field(default_factory=list)  # (tick, seq, channel, controller, value)
    programs: list = field(default_factory=list)  # (tick, seq, channel, program)
    markers: list = field(default_factory=list)
    texts: list = field(default_factory=list)
    tempos: list = field(default_factory=list)  # (tick, seq, µs)
    timesigs: list = field(default_factory=list)  # (tick, seq, num, den)
    end_tick: int = 0


def _parse_track(data: bytes, pos: int, end: int, seq_base: int) -> _TrackEvents:
    ev = _TrackEvents()
    tick = 0
    status = None
    seq = seq_base
    while pos < end:
        delta, pos = read_vlq(data, pos, end)
        tick += delta
        seq += 1
        if pos >= end:
            raise TruncatedChunk("event missing after delta time")
        byte = data[pos]
        if byte == 0xFF:
            if pos + 2 > end:
                raise TruncatedChunk("meta event header truncated")
            mtype = data[pos + 1]
            length, pos = read_vlq(data, pos + 2, end)
            if pos + length > end:
                raise TruncatedChunk("meta event payload truncated")
            payload = data[pos:pos + length]
            pos += length
            if mtype == META_MARKER:
                ev.markers.append(Marker(tick, _decode_text(payload)))
            elif mtype in META_TEXT_TYPES:
                ev.texts.append(_decode_text(payload))
            elif mtype == META_TEMPO:
                if length != 3:
                    raise MalformedEvent("tempo meta event must carry 3 bytes")
                us = int.from_bytes(payload, "big")
                if us > 0:
                    ev.tempos.append((tick, seq, us))
            elif mtype == META_TIME_SIGNATURE:
                if length < 2:
                    raise MalformedEvent("time signature meta event too short")
                num, dd = payload[0], payload[1]
                if num >= 1 and dd <= 5:
                    ev.timesigs.append((tick, seq, num, 1 << dd))
                else:
                    warnings.warn(f"ignoring invalid time signature {num}/2^{dd} at tick {tick}")
            elif mtype == META_END_OF_TRACK:
                ev.end_tick = tick
                break
            continue
        if byte in (0xF0, 0xF7):
            length, pos = read_vlq(data, pos + 1, end)
            if pos + length > end:
                raise TruncatedChunk("sysex payload truncated")
            pos += length
            continue
        if byte & 0x80:
            if byte >= 0xF0:
                raise MalformedEvent(f"unexpected system message 0x{byte:02X} in file")
            status = byte
            pos += 1
        elif status is None:
            raise MalformedEvent("data byte without running status")
        kind, channel = status >> 4, status & 0x0F
        n = _DATA_LENGTH[kind]
        if pos + n > end:
            raise TruncatedChunk("channel message truncated")
        d1 = data[pos]
        d2 = data[pos + 1] if n == 2 else 0
        pos += n
        if kind == 0x9:
            ev.note_msgs.append((tick, channel, d1, d2))
        elif kind == 0x8:
            ev.note_msgs.append((tick, channel, d1, 0))
        elif kind == 0xB and d1 in (CC_VOLUME, CC_EXPRESSION):
            ev.ccs.append((tick, seq, channel, d1, d2))
        elif kind == 0xC:
            ev.programs.append((tick, seq, channel, d1))
    ev.end_tick = max(ev.end_tick, tick)
    return ev


class _ChannelState:
    """Most recent controller value at or before a tick, per channel."""

    def __init__(self, events, default):
        self.default = default
        self.ticks = defaultdict(list)
        self.values = defaultdict(list)
        for tick, _, channel, value in sorted(events, key=lambda e: (e[0], e[1])):
            self.ticks[channel].append(tick)
            self.values[channel].append(value)

    def at(self, channel: int, tick: int) -> int:
        i = bisect.bisect_right(self.ticks[channel], tick)
        return self.values[channel][i - 1] if i else self.default


def _pair_notes(track_index: int, ev: _TrackEvents):
    """FIFO-pair note-on/off per (channel, pitch); yields (onset, end, channel, pitch, vel)."""
    pending: dict[tuple[int, int], deque] = defaultdict(deque)
    out = []
    for tick, channel, pitch, velocity in ev.note_msgs:
        key = (channel, pitch)
        if velocity > 0:
            pending[key].append((tick, velocity))
        elif pending[key]:
            onset, vel = pending[key].popleft()
            out.append((onset, tick, channel, pitch, vel))
        else:
            warnings.warn(
                f"note-off without note-on (track {track_index}, channel {channel}, "
                f"pitch {pitch}, tick {tick})",
                DanglingNoteOff,
            )
    for (channel, pitch), queue in pending.items():
        for onset, vel in queue:
            out.append((onset, ev.end_tick, channel, pitch, vel))
    return out


def parse_midi(data: bytes) -> ParsedSong:
    """Decode a format 0/1 Standard MIDI File with PPQ time division."""
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd header chunk")
    hlen = struct.unpack(">I", data[4:8])[0]
    if hlen < 6 or 8 + hlen > len(data):
        raise MalformedHeader(f"bad header length {hlen}")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise UnsupportedFormat(f"SMF format {fmt} is not supported")
    if division & 0x8000:
        raise UnsupportedDivision("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("division of 0 ticks per quarter note")
    ppq = division

    pos = 8 + hlen
    tracks: list[_TrackEvents] = []
    while pos < len(data):
        if pos + 8 > len(data):
            raise TruncatedChunk("chunk header truncated")
        cid = data[pos:pos + 4]
        clen = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        start, end = pos + 8, pos + 8 + clen
        if end > len(data):
            raise TruncatedChunk(f"chunk {cid!r} declares {clen} bytes, {len(data) - start} present")
        if cid == b"MTrk":
            tracks.append(_parse_track(data, start, end, seq_base=len(tracks) << 32))
        pos = end
    if len(tracks) < ntracks:
        raise TruncatedChunk(f"header declares {ntracks} tracks, found {len(tracks)}")

    cc_events = [e for t in tracks for e in t.ccs]
    volume = _ChannelState([(t, s, c, v) for t, s, c, cc, v in cc_events if cc == CC_VOLUME], 127)
    expression = _ChannelState([(t, s, c, v) for t, s, c, cc, v in cc_events if cc == CC_EXPRESSION], 127)
    program = _ChannelState([e for t in tracks for e in t.programs], 0)

    notes = []
    for ti, ev in enumerate(tracks):
        for onset, end, channel, pitch, vel in _pair_notes(ti, ev):
            gain = volume.at(channel, onset) / 127 * expression.at(channel, onset) / 127
            notes.append(NoteEvent(
                onset_tick=onset,
                duration_ticks=max(end - onset, 1),
                pitch=pitch,
                velocity=min(max(vel / 127 * gain, 0.0), 1.0),
                program=program.at(channel, onset),
                is_drum=channel == DRUM_CHANNEL,
                raw_velocity=vel,
                channel=channel,
                track=ti,
            ))
    notes.sort(key=lambda n: (n.onset_tick, n.pitch, n.track))

    markers = sorted((m for t in tracks for m in t.markers), key=lambda m: m.tick)
    tempo_map = TempoMap(_last_per_tick((t, s, us) for tr in tracks for t, s, us in tr.tempos))
    timesig_map = TimeSigMap(
        _last_per_tick([(t, s, (n, d)) for tr in tracks for t, s, n, d in tr.timesigs], flatten=True),
        ppq=ppq,
    )
    return ParsedSong(
        ppq=ppq,
        notes=tuple(notes),
        markers=tuple(markers),
        tempo_map=tempo_map,
        timesig_map=timesig_map,
        texts=tuple(x for t in tracks for x in t.texts),
        end_tick=max((t.end_tick for t in tracks), default=0),
        controls=tuple((t, ti, c, cc, v) for ti, tr in enumerate(tracks)
                       for t, _, c, cc, v in tr.ccs if cc in (CC_VOLUME, CC_EXPRESSION)),
    )


def read_midi(path) -> ParsedSong:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


def _last_per_tick(events: Iterable, flatten: bool = False) -> tuple:
    """Keep the last event per tick (by file order), sorted by tick."""
    by_tick = {}
    for tick, seq, value in sorted(events, key=lambda e: (e[0], e[1])):
        by_tick[tick] = value
    if flatten:
        return tuple((t,) + tuple(v) for t, v in sorted(by_tick.items()))
    return tuple(sorted(by_tick.items()))


# ---------------------------------------------------------------------------
# timing


def ticks_to_seconds(tempo_map: TempoMap, ppq: int, tick: float) -> float:
    if tick < 0:
        raise ValueError("tick must be non-negative")
    seconds = 0.0
    changes = tempo_map.changes
    for i, (start, us) in enumerate(changes):
        stop = changes[i + 1][0] if i + 1 < len(changes) else None
        if stop is not None and tick > stop:
            seconds += (stop - start) / ppq * us / 1e6
            continue
        return seconds + (tick - start) / ppq * us / 1e6
    return seconds  # pragma: no cover


def beats_to_seconds(tempo_map: TempoMap, ppq: int, beat: float) -> float:
    return ticks_to_seconds(tempo_map, ppq, beat * ppq)


def compute_measures(timesig_map: TimeSigMap, end_beat: float) -> MeasureGrid:
    """Lay measures from beat 0 until a measure starts at or after ``end_beat``.

    A time-signature change that falls inside a measure truncates it.
    """
    if end_beat < 0:
        raise ValueError("end_beat must be non-negative")
    ppq = timesig_map.ppq
    changes = [(Fraction(t, ppq), Fraction(4 * n, d)) for t, n, d in timesig_map.changes]
    end = Fraction(end_beat)
    starts, durations = [], []
    pos = Fraction(0)
    ci = 0
    while True:
        while ci + 1 < len(changes) and changes[ci + 1][0] <= pos:
            ci += 1
        length = changes[ci][1]
        if ci + 1 < len(changes) and pos + length > changes[ci + 1][0]:
            length = changes[ci + 1][0] - pos
        starts.append(pos)
        durations.append(length)
        if pos >= end:
            break
        pos += length
    return MeasureGrid(
        start_beats=tuple(float(s) for s in starts),
        durations=tuple(float(d) for d in durations),
        ppq=ppq,
    )


def song_measures(song: ParsedSong) -> MeasureGrid:
    return compute_measures(song.timesig_map, song.end_beat)


# ---------------------------------------------------------------------------
# encoding


def write_vlq(value: int) -> bytes:
    if value < 0 or value > 0x0FFFFFFF:
        raise ValueError("variable-length quantity out of range")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _meta(mtype: int, payload: bytes) -> bytes:
    return bytes([0xFF, mtype]) + write_vlq(len(payload)) + payload


def encode_track(events: Sequence[tuple[int, bytes]], running_status: bool = False) -> bytes:
    """Serialize (absolute tick, raw message) pairs into an MTrk chunk.

    Events must already be in playback order.  End-of-track is appended.
    """
    body = bytearray()
    last_tick = 0
    status = None
    for tick, msg in events:
        body += write_vlq(tick - last_tick)
        last_tick = tick
        if msg[0] < 0xF0:
            if running_status and msg[0] == status:
                body += msg[1:]
            else:
                body += msg
            status = msg[0]
        else:
            body += msg
    body += write_vlq(0) + _meta(META_END_OF_TRACK, b"")
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def encode_file(tracks: Sequence[bytes], ppq: int, fmt: int | None = None) -> bytes:
    if fmt is None:
        fmt = 0 if len(tracks) == 1 else 1
    return b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), ppq) + b"".join(tracks)


def tempo_event(us_per_qn: int) -> bytes:
    return _meta(META_TEMPO, us_per_qn.to_bytes(3, "big"))


def timesig_event(numerator: int, denominator: int) -> bytes:
    return _meta(META_TIME_SIGNATURE, bytes([numerator, denominator.bit_length() - 1, 24, 8]))


def marker_event(text: str) -> bytes:
    return _meta(META_MARKER, text.encode("utf-8"))


def text_event(text: str) -> bytes:
    return _meta(0x01, text.encode("utf-8"))


def song_to_midi(song: ParsedSong, running_status: bool = False, zero_velocity_off: bool = False) -> bytes:
    """Serialize a song's notes, markers, tempo and meter back to SMF bytes.

    Notes keep their track, channel, program and raw velocity; volume and
    expression controllers are written back so the gain re-derives exactly.
    """
    ntracks = max([n.track for n in song.notes] + [c[1] for c in song.controls], default=0) + 1
    per_track: list[list[tuple[int, int, bytes]]] = [[] for _ in range(ntracks)]
    meta = per_track[0]
    for t, us in song.tempo_map.changes:
        meta.append((t, 0, tempo_event(us)))
    for t, n, d in song.timesig_map.changes:
        meta.append((t, 0, timesig_event(n, d)))
    for m in song.markers:
        meta.append((m.tick, 0, marker_event(m.text)))
    for x in song.texts:
        meta.append((0, 0, text_event(x)))

    for t, track, channel, cc, value in song.controls:
        per_track[track].append((t, 1, bytes([0xB0 | channel, cc, value])))

    current_program: dict[int, int] = {}
    for n in sorted(song.notes, key=lambda n: (n.onset_tick, n.track, n.channel, n.pitch)):
        events = per_track[n.track]
        if current_program.get(n.channel) != n.program and not n.is_drum:
            events.append((n.onset_tick, 1, bytes([0xC0 | n.channel, n.program])))
            current_program[n.channel] = n.program
        events.append((n.onset_tick, 2, bytes([0x90 | n.channel, n.pitch, n.raw_velocity])))
        off = bytes([0x90 | n.channel, n.pitch, 0]) if zero_velocity_off else bytes([0x80 | n.channel, n.pitch, 0])
        events.append((n.end_tick, 0, off))

    chunks = []
    for events in per_track:
        events.sort(key=lambda e: (e[0], e[1]))
        chunks.append(encode_track([(t, m) for t, _, m in events], running_status=running_status))
    return encode_file(chunks, song.ppq)
