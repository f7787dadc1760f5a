"""Standard MIDI File ingestion and the canonical JSON formats.

Two JSON documents are used throughout the package:

``kind = "score"``
    ``{"schema_version": 1, "kind": "score", "metre": "4/4", "anacrusis": 0,
    "tempo_spqn": 0.5, "notes": [{"onset": 0, "value": 12, "pitch": 60,
    "hand": "RH", "voice": 1}, ...]}``; an optional ``"stage"`` string
    records which pipeline stage produced it.

``kind = "performance"``
    ``{"schema_version": 1, "kind": "performance", "notes": [{"onset_sec":
    0.0, "offset_sec": 0.5, "pitch": 60, "velocity": 80}, ...]}``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .core import (
    LH,
    PIANO_HIGH,
    PIANO_LOW,
    RH,
    TATUMS_PER_BEAT,
    PerformanceNote,
    ScoreDocument,
    ScoreError,
    ScoreNote,
    get_metre,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_TEMPO = 500000  # microseconds per quarter note


class MidiParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class SchemaError(ValueError):
    def __init__(self, message: str, note_index: int | None = None):
        self.note_index = note_index
        if note_index is not None:
            message = f"note {note_index}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class NoteEvent:
    tick: int
    on: bool
    pitch: int
    velocity: int
    channel: int
    track: int = 0


@dataclass
class MidiTrackEvents:
    resolution_ppq: int
    tempo_map: list[tuple[int, int]] = field(default_factory=list)
    note_events: list[NoteEvent] = field(default_factory=list)
    sustain_events: list[tuple[int, bool]] = field(default_factory=list)
    time_signatures: list[tuple[int, int, int]] = field(default_factory=list)
    format: int = 0


# ---------------------------------------------------------------------------
# SMF parsing

_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _read_vlq(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


def _parse_track(data: bytes, start: int, end: int, track: int, out: MidiTrackEvents, seq: list):
    pos = start
    tick = 0
    status = None
    open_notes: dict[tuple[int, int], int] = {}
    saw_eot = False
    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("truncated event", pos)
        b = data[pos]
        if b == 0xFF:
            if pos + 2 > end:
                raise MidiParseError("truncated meta event", pos)
            mtype = data[pos + 1]
            length, p = _read_vlq(data, pos + 2, end)
            if p + length > end:
                raise MidiParseError("meta event overruns track", pos)
            payload = data[p : p + length]
            pos = p + length
            if mtype == 0x51 and length == 3:
                out.tempo_map.append((tick, int.from_bytes(payload, "big")))
            elif mtype == 0x58 and length >= 2:
                out.time_signatures.append((tick, payload[0], 2 ** payload[1]))
            elif mtype == 0x2F:
                saw_eot = True
                break
            continue
        if b in (0xF0, 0xF7):
            length, p = _read_vlq(data, pos + 1, end)
            if p + length > end:
                raise MidiParseError("sysex overruns track", pos)
            pos = p + length
            status = None
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiParseError("running status without a preceding status byte", pos)
        kind = status & 0xF0
        if kind not in _DATA_LEN:
            raise MidiParseError(f"unsupported status byte 0x{status:02X}", pos)
        n = _DATA_LEN[kind]
        if pos + n > end:
            raise MidiParseError("truncated channel message", pos)
        d = data[pos : pos + n]
        pos += n
        channel = status & 0x0F
        if kind in (0x80, 0x90):
            pitch, vel = d[0], d[1]
            on = kind == 0x90 and vel > 0
            key = (channel, pitch)
            if on:
                open_notes[key] = open_notes.get(key, 0) + 1
            elif open_notes.get(key):
                open_notes[key] -= 1
            seq.append((tick, track, len(seq)))
            out.note_events.append(NoteEvent(tick, kind == 0x90, pitch, vel, channel, track))
        elif kind == 0xB0 and d[0] == 64:
            out.sustain_events.append((tick, d[1] >= 64))
    dangling = [k for k, c in open_notes.items() if c > 0]
    if dangling:
        if not saw_eot:
            raise MidiParseError(
                f"track {track} ends without end-of-track while notes {sorted(dangling)} sound",
                end,
            )
        for channel, pitch in sorted(dangling):
            for _ in range(open_notes[(channel, pitch)]):
                seq.append((tick, track, len(seq)))
                out.note_events.append(NoteEvent(tick, False, pitch, 0, channel, track))


def parse_smf(data: bytes) -> MidiTrackEvents:
    """Parse a format 0 or 1 Standard MIDI File into a merged, tick-sorted event stream."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = int.from_bytes(data[4:8], "big")
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError("bad header length", 4)
    fmt = int.from_bytes(data[8:10], "big")
    ntracks = int.from_bytes(data[10:12], "big")
    division = int.from_bytes(data[12:14], "big")
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks per quarter note", 12)
    out = MidiTrackEvents(resolution_ppq=division, format=fmt)
    seq: list = []
    pos = 8 + hlen
    track = 0
    while pos < len(data) and track < ntracks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        ctype = data[pos : pos + 4]
        clen = int.from_bytes(data[pos + 4 : pos + 8], "big")
        body = pos + 8
        if body + clen > len(data):
            raise MidiParseError(f"chunk {ctype!r} overruns file", pos)
        if ctype == b"MTrk":
            _parse_track(data, body, body + clen, track, out, seq)
            track += 1
        pos = body + clen
    if track < ntracks:
        raise MidiParseError(f"header declares {ntracks} tracks, found {track}", pos)
    order = sorted(range(len(out.note_events)), key=lambda i: seq[i])
    out.note_events = [out.note_events[i] for i in order]
    out.tempo_map.sort(key=lambda x: x[0])
    out.sustain_events.sort(key=lambda x: x[0])
    out.time_signatures.sort(key=lambda x: x[0])
    return out


# ---------------------------------------------------------------------------
# ticks -> seconds


class TickClock:
    """Exact tick-to-second conversion over a piecewise-constant tempo map."""

    def __init__(self, ppq: int, tempo_map: list[tuple[int, int]]):
        tempi = [(t, u) for t, u in tempo_map if u > 0]
        if not tempi or tempi[0][0] > 0:
            tempi.insert(0, (0, DEFAULT_TEMPO))
        # later events at the same tick win
        dedup: dict[int, int] = {}
        for t, u in tempi:
            dedup[t] = u
        self.ppq = ppq
        self.ticks = sorted(dedup)
        self.tempi = [dedup[t] for t in self.ticks]
        self.starts = [Fraction(0)]
        for i in range(1, len(self.ticks)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.starts.append(self.starts[-1] + Fraction(span * self.tempi[i - 1], ppq * 10**6))

    def seconds(self, tick: int) -> Fraction:
        lo, hi = 0, len(self.ticks) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.ticks[mid] <= tick:
                lo = mid
            else:
                hi = mid - 1
        return self.starts[lo] + Fraction((tick - self.ticks[lo]) * self.tempi[lo], self.ppq * 10**6)


def _pair_notes(events: MidiTrackEvents):
    """Yield (on_tick, off_tick, pitch, velocity, track) with FIFO pairing per (channel, pitch)."""
    pending: dict[tuple[int, int], list[NoteEvent]] = {}
    pairs = []
    for ev in events.note_events:
        key = (ev.channel, ev.pitch)
        if ev.on and ev.velocity > 0:
            pending.setdefault(key, []).append(ev)
        else:
            queue = pending.get(key)
            if queue:
                start = queue.pop(0)
                pairs.append((start.tick, ev.tick, ev.pitch, start.velocity, start.track))
    return pairs


def to_performance_notes(events: MidiTrackEvents) -> list[PerformanceNote]:
    clock = TickClock(events.resolution_ppq, events.tempo_map)
    notes = []
    for on, off, pitch, vel, _track in _pair_notes(events):
        if off <= on:
            continue
        if not PIANO_LOW <= pitch <= PIANO_HIGH:
            logger.warning("dropping out-of-range pitch %d at tick %d", pitch, on)
            continue
        notes.append(
            PerformanceNote(float(clock.seconds(on)), float(clock.seconds(off)), pitch, vel)
        )
    notes.sort(key=lambda n: (n.onset_sec, n.pitch))
    return notes


def read_performance_midi(path: str | os.PathLike) -> list[PerformanceNote]:
    return to_performance_notes(parse_smf(Path(path).read_bytes()))


def cleanup(
    notes: list[PerformanceNote],
    merge_ms: float = 100.0,
    min_dur_ms: float = 30.0,
    min_vel: int = 40,
) -> list[PerformanceNote]:
    """Merge near-duplicate same-pitch onsets, then drop short and quiet notes."""
    ordered = sorted(notes, key=lambda n: (n.onset_sec, n.pitch))
    last_kept: dict[int, float] = {}
    merged = []
    for n in ordered:
        prev = last_kept.get(n.pitch)
        if prev is not None and (n.onset_sec - prev) * 1000.0 <= merge_ms:
            continue
        last_kept[n.pitch] = n.onset_sec
        merged.append(n)
    return [
        n
        for n in merged
        if n.duration * 1000.0 >= min_dur_ms and n.velocity >= min_vel
    ]


# ---------------------------------------------------------------------------
# canonical JSON


def score_to_dict(doc: ScoreDocument, stage: str | None = None) -> dict:
    d = {
        "schema_version": SCHEMA_VERSION,
        "kind": "score",
        "metre": doc.metre.label,
        "anacrusis": doc.anacrusis,
        "tempo_spqn": doc.tempo_spqn,
        "notes": [
            {"onset": n.onset_tatum, "value": n.note_value, "pitch": n.pitch,
             "hand": n.hand, "voice": n.voice}
            for n in doc.notes
        ],
    }
    if stage is not None:
        d["stage"] = stage
    return d


def _require_int(obj: dict, key: str, idx: int | None = None) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(f"field {key!r} must be an integer, got {v!r}", idx)
    return v


def score_from_dict(d: dict) -> ScoreDocument:
    if not isinstance(d, dict):
        raise SchemaError("score document must be a JSON object")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {d.get('schema_version')!r}")
    if d.get("kind", "score") != "score":
        raise SchemaError(f"expected kind 'score', got {d.get('kind')!r}")
    try:
        metre = get_metre(d.get("metre"))
    except ScoreError as exc:
        raise SchemaError(str(exc)) from None
    anacrusis = _require_int(d, "anacrusis")
    tempo = d.get("tempo_spqn")
    if isinstance(tempo, bool) or not isinstance(tempo, (int, float)):
        raise SchemaError(f"tempo_spqn must be a number, got {tempo!r}")
    raw = d.get("notes")
    if not isinstance(raw, list):
        raise SchemaError("notes must be a list")
    notes = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise SchemaError("note must be an object", i)
        try:
            notes.append(
                ScoreNote(
                    _require_int(item, "onset", i),
                    _require_int(item, "value", i),
                    _require_int(item, "pitch", i),
                    item.get("hand", RH),
                    _require_int(item, "voice", i) if "voice" in item else 1,
                )
            )
        except ScoreError as exc:
            raise SchemaError(str(exc), i) from None
    try:
        return ScoreDocument(metre, tuple(notes), float(tempo), anacrusis)
    except ScoreError as exc:
        raise SchemaError(str(exc)) from None


def performance_to_dict(notes: list[PerformanceNote]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "performance",
        "notes": [
            {"onset_sec": n.onset_sec, "offset_sec": n.offset_sec,
             "pitch": n.pitch, "velocity": n.velocity}
            for n in notes
        ],
    }


def performance_from_dict(d: dict) -> list[PerformanceNote]:
    if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "performance":
        raise SchemaError("not a version-1 performance document")
    out = []
    for i, item in enumerate(d.get("notes", [])):
        try:
            out.append(
                PerformanceNote(
                    float(item["onset_sec"]), float(item["offset_sec"]),
                    int(item["pitch"]), int(item.get("velocity", 64)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(str(exc), i) from None
    return out


def dump_json(obj: dict, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def load_json(path: str | os.PathLike) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None


def write_score_json(doc: ScoreDocument, path: str | os.PathLike, stage: str | None = None) -> None:
    dump_json(score_to_dict(doc, stage), path)


def read_score_json(path: str | os.PathLike) -> ScoreDocument:
    return score_from_dict(load_json(path))


read_corpus_score = read_score_json


# ---------------------------------------------------------------------------
# grid-aligned corpus MIDI


def score_from_midi(data: bytes, tolerance_qn: float = 1 / 24) -> ScoreDocument:
    """Read a grid-aligned (notated) MIDI file as a score.

    The first track carrying notes becomes the right hand and the second
    the left hand; a single-track file is split at middle C.  Voices are
    left at 1 and assigned downstream.
    """
    events = parse_smf(data)
    ppq = events.resolution_ppq
    if events.time_signatures:
        num, den = events.time_signatures[0][1:]
        label = f"{num}/{den}"
        if label == "2/2":
            label = "4/4"
        metre = get_metre(label)
    else:
        metre = get_metre("4/4")
    pairs = _pair_notes(events)
    tracks = sorted({p[4] for p in pairs})
    notes = []
    for i, (on, off, pitch, _vel, track) in enumerate(sorted(pairs)):
        grid = []
        for tick in (on, off):
            exact = Fraction(tick * TATUMS_PER_BEAT, ppq)
            k = round(exact)
            if abs(exact - k) > Fraction(tolerance_qn).limit_denominator(10**6) * TATUMS_PER_BEAT:
                raise SchemaError(f"tick {tick} is off the tatum grid", i)
            grid.append(int(k))
        if len(tracks) >= 2:
            hand = RH if track == tracks[0] else LH
        else:
            hand = RH if pitch >= 60 else LH
        if grid[1] <= grid[0] or not PIANO_LOW <= pitch <= PIANO_HIGH:
            raise SchemaError("degenerate or out-of-range note", i)
        notes.append(ScoreNote(grid[0], grid[1] - grid[0], pitch, hand, 1))
    tempo = (events.tempo_map[0][1] if events.tempo_map else DEFAULT_TEMPO) / 1e6
    return ScoreDocument(metre, tuple(notes), tempo, 0)


def read_corpus(directory: str | os.PathLike) -> list[ScoreDocument]:
    """Load every ``*.json`` score and grid-aligned ``*.mid`` file under ``directory``."""
    root = Path(directory)
    docs = []
    for path in sorted(root.rglob("*")):
        if path.suffix == ".json":
            docs.append(read_score_json(path))
        elif path.suffix in (".mid", ".midi"):
            docs.append(score_from_midi(path.read_bytes()))
    return docs
