"""Builders shared by the test modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from midiseg.model import BoundaryNet, ConvSpec, ModelConfig
from midiseg.smf import (DRUM_CHANNEL, encode_file, encode_track, marker_event, tempo_event, text_event,
                         timesig_event)


def random_smf(seed: int, running_status: bool | None = None, zero_velocity_off: bool | None = None) -> bytes:
    """Multi-track file with tempo/meter changes, CC7/CC11 and non-overlapping notes per key."""
    rng = np.random.default_rng(seed)
    ppq = int(rng.choice([96, 192, 480, 960]))
    rs = bool(rng.integers(2)) if running_status is None else running_status
    zv = bool(rng.integers(2)) if zero_velocity_off is None else zero_velocity_off
    length = ppq * 4 * int(rng.integers(8, 24))

    conductor = [(0, tempo_event(int(rng.integers(300000, 900000)))), (0, timesig_event(4, 4))]
    for _ in range(int(rng.integers(0, 3))):
        conductor.append((int(rng.integers(1, length)), tempo_event(int(rng.integers(300000, 900000)))))
    for bar in sorted(rng.choice(np.arange(1, length // (4 * ppq)), size=2, replace=False)):
        num, den = [(3, 4), (6, 8), (5, 4), (2, 2)][int(rng.integers(4))]
        conductor.append((int(bar) * 4 * ppq, timesig_event(num, den)))
    for i in range(int(rng.integers(1, 5))):
        conductor.append((int(rng.integers(0, length)), marker_event(f"part {i}")))
    conductor.append((0, text_event("fixture")))
    conductor.sort(key=lambda e: e[0])
    # one distinct tick per tempo/meter event type
    seen, dedup = set(), []
    for t, m in conductor:
        key = (t, m[1])
        if key not in seen:
            seen.add(key)
            dedup.append((t, m))

    tracks = [encode_track(dedup)]
    channels = rng.choice([c for c in range(16) if c != DRUM_CHANNEL], size=3, replace=False).tolist()
    n_music = int(rng.integers(1, 4))
    for ti in range(n_music):
        channel = DRUM_CHANNEL if ti == 0 and rng.random() < 0.5 else channels[ti]
        events = []
        if channel != DRUM_CHANNEL:
            events.append((0, 1, bytes([0xC0 | channel, int(rng.integers(128))])))
        for _ in range(int(rng.integers(0, 4))):
            cc = int(rng.choice([7, 11]))
            events.append((int(rng.integers(0, length)), 1, bytes([0xB0 | channel, cc, int(rng.integers(128))])))
        free = {}
        for _ in range(int(rng.integers(5, 40))):
            pitch = int(rng.integers(24, 100))
            onset = int(rng.integers(0, length)) + free.get(pitch, 0) // 2
            onset = max(onset, free.get(pitch, 0))
            dur = int(rng.integers(1, 2 * ppq))
            free[pitch] = onset + dur
            events.append((onset, 2, bytes([0x90 | channel, pitch, int(rng.integers(1, 128))])))
            off = bytes([0x90 | channel, pitch, 0]) if zv else bytes([0x80 | channel, pitch, 64])
            events.append((onset + dur, 0, off))
        events.sort(key=lambda e: (e[0], e[1]))
        tracks.append(encode_track([(t, m) for t, _, m in events], running_status=rs))
    return encode_file(tracks, ppq)


def mido_notes(path):
    """Independent note list via mido: (onset, end, channel, pitch, raw velocity, gain velocity)."""
    import mido

    mf = mido.MidiFile(path)
    ccs = []  # (tick, channel, cc, value)
    on_msgs = []
    for track in mf.tracks:
        tick = 0
        pending = {}
        for msg in track:
            tick += msg.time
            if msg.type == "control_change" and msg.control in (7, 11):
                ccs.append((tick, msg.channel, msg.control, msg.value))
            elif msg.type == "note_on" and msg.velocity > 0:
                pending.setdefault((msg.channel, msg.note), []).append((tick, msg.velocity))
            elif msg.type in ("note_off", "note_on"):
                queue = pending.get((msg.channel, msg.note))
                if queue:
                    onset, vel = queue.pop(0)
                    on_msgs.append((onset, tick, msg.channel, msg.note, vel))

    def latest(channel, cc, tick):
        vals = [(t, i, v) for i, (t, c, k, v) in enumerate(ccs) if c == channel and k == cc and t <= tick]
        return max(vals)[2] if vals else 127  # latest tick, then latest in file order

    out = []
    for onset, end, ch, pitch, vel in on_msgs:
        gain = latest(ch, 7, onset) / 127 * latest(ch, 11, onset) / 127
        out.append((onset, end, ch, pitch, vel, vel / 127 * gain))
    return sorted(out)


def curation_corpus(root) -> set[str]:
    """Write 40 synthetic files covering every reject reason; returns the ids that should survive."""
    from pathlib import Path

    from midiseg.synth import SongSpec, song_bytes

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    specs = {}
    for i in range(20):  # 6 x 8 bars, 6 markers: ratio 8
        specs[f"keep_{i:02d}"] = SongSpec(sections=(8,) * 6, seed=100 + i, transpose=i % 7)
    for i in range(4):  # 2 markers
        specs[f"few_{i}"] = SongSpec(sections=(8, 8, 8), marker_bars=(0, 8), seed=200 + i)
    for i in range(4):  # 24 bars, 6 markers: ratio 4
        specs[f"low_{i}"] = SongSpec(sections=(4,) * 6, seed=300 + i)
    for i in range(4):  # 75 bars, 3 markers: ratio 25
        specs[f"high_{i}"] = SongSpec(sections=(25, 25, 25), seed=400 + i)
    for i in range(4):  # markers only in the silent lead-in and after the last onset
        specs[f"edge_{i}"] = SongSpec(sections=(8, 8, 8), lead_in_bars=2, marker_bars=(0, 1, 26), seed=500 + i)
    for i in range(4):  # same notes as a keeper, different tempo and author
        specs[f"zdup_{i}"] = SongSpec(sections=(8,) * 6, seed=100 + i, transpose=i % 7,
                                      tempo=400000, author="someone")
    for name, spec in specs.items():
        (root / f"{name}.mid").write_bytes(song_bytes(spec))
    return {n for n in specs if n.startswith("keep_")}


# ---------------------------------------------------------------------------
# metric oracles


def exhaustive_matching(pred, gt, tol):
    """Largest one-to-one matching by trying every assignment."""
    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(pred):
            return 0
        out = best(i + 1, used)
        for j, g in enumerate(gt):
            if not used >> j & 1 and abs(pred[i] - g) <= tol:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out
    return best(0, 0)


def set_counts(probs, gt, mask, threshold):
    idx = {i for i, m in enumerate(mask) if m}
    pred = {i for i in idx if probs[i] > threshold}
    truth = set(gt) & idx
    return len(pred & truth), len(pred - truth), len(truth - pred)


# ---------------------------------------------------------------------------
# gradient check

PROBE = ModelConfig(conv=(ConvSpec(4, stride=2), ConvSpec(6)), pool=(2, 1), hidden=5,
                    input_shape=(3, 16, 32), dtype="float64", seed=3)


def probe_batch(seed=0, n=3):
    rng = np.random.default_rng(seed)
    return rng.random((n,) + PROBE.input_shape), np.array([1, 0, 1][:n], dtype=float)


def numeric_grad(net, x, y, name, idx, h=1e-4):
    p = net.params[name]
    orig = p[idx]
    p[idx] = orig + h
    up, _ = net.loss_and_grads(x, y)
    p[idx] = orig - h
    down, _ = net.loss_and_grads(x, y)
    p[idx] = orig
    return (up - down) / (2 * h)


def gradient_check(n_probe=16, seed=0):
    net = BoundaryNet(PROBE)
    x, y = probe_batch(seed)
    _, grads = net.loss_and_grads(x, y)
    rng = np.random.default_rng(seed)
    errors = []
    for name in sorted(net.params):
        for _ in range(n_probe // len(net.params) + 1):
            idx = tuple(int(rng.integers(s)) for s in net.params[name].shape)
            a, n = grads[name][idx], numeric_grad(net, x, y, name, idx)
            errors.append((name, abs(a - n) / max(abs(a), abs(n), 1e-8)))
    return errors
