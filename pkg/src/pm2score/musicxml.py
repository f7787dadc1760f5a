"""Minimal MusicXML (3.1, score-partwise) engraver for two-staff piano scores.

Divisions are fixed at 12 per quarter, so one division is one tatum and
every note value is represented exactly.  Notes crossing bar lines are
split and tied; durations with no single notated form are split
largest-first into tied pieces.
"""
from __future__ import annotations

import xml.etree.ElementTree as ET
from collections import defaultdict
from dataclasses import dataclass, field

from .core import LH, RH, TATUMS_PER_BEAT, ScoreDocument

DIVISIONS = TATUMS_PER_BEAT
STEPS = ("C", "C", "D", "D", "E", "F", "F", "G", "G", "A", "A", "B")
ALTERS = (0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 1, 0)

# duration in divisions -> (type, dots, triplet)
NOTATED = {
    48: ("whole", 0, False),
    36: ("half", 1, False),
    32: ("whole", 0, True),
    24: ("half", 0, False),
    18: ("quarter", 1, False),
    16: ("half", 0, True),
    12: ("quarter", 0, False),
    9: ("eighth", 1, False),
    8: ("quarter", 0, True),
    6: ("eighth", 0, False),
    4: ("eighth", 0, True),
    3: ("16th", 0, False),
    2: ("16th", 0, True),
    1: ("32nd", 0, True),
}
_SIZES = sorted(NOTATED, reverse=True)


def split_duration(d: int) -> list[int]:
    out = []
    for size in _SIZES:
        while d >= size:
            out.append(size)
            d -= size
    return out


@dataclass
class EngravedElement:
    duration: int
    pitches: tuple[int, ...] = ()  # empty for a rest
    tie_start: bool = False
    tie_stop: bool = False
    whole_measure_rest: bool = False

    @property
    def is_rest(self) -> bool:
        return not self.pitches


@dataclass
class EngravedMeasure:
    index: int
    start: int  # score time of the measure start, in tatums
    length: int
    implicit: bool = False
    voices: dict[tuple[str, int], list[EngravedElement]] = field(default_factory=dict)


def _measure_bounds(doc: ScoreDocument) -> list[tuple[int, int, bool]]:
    B = doc.bar_length
    end = max((n.offset_tatum for n in doc.notes), default=0)
    bounds = []
    start = 0
    first = (B - doc.anacrusis) % B
    if first and doc.notes:
        bounds.append((0, first, True))
        start = first
    while start < end or not bounds:
        bounds.append((start, start + B, False))
        start += B
    return bounds


def _streams(doc: ScoreDocument):
    """Per (hand, voice): ordered chords (onset, offset, pitches)."""
    groups: dict[tuple[str, int], dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for n in doc.notes:
        groups[(n.hand, n.voice)][n.onset_tatum].append(n)
    streams = {}
    for key, by_onset in groups.items():
        chords = []
        for onset in sorted(by_onset):
            members = by_onset[onset]
            offset = min(m.offset_tatum for m in members)
            chords.append((onset, offset, tuple(sorted({m.pitch for m in members}))))
        streams[key] = chords
    return streams


def engrave(doc: ScoreDocument) -> list[EngravedMeasure]:
    bounds = _measure_bounds(doc)
    streams = _streams(doc)
    keys = sorted(set(streams) | {(RH, 1), (LH, 1)}, key=lambda k: (k[0] != RH, k[1]))
    measures = []
    for idx, (ms, me, implicit) in enumerate(bounds):
        m = EngravedMeasure(idx, ms, me - ms, implicit)
        for key in keys:
            chords = [c for c in streams.get(key, []) if c[0] < me and c[1] > ms]
            if not chords and key[1] != 1:
                continue
            elems: list[EngravedElement] = []
            t = ms
            for on, off, pitches in chords:
                # same-voice chords never overlap after offset correction; clip defensively
                a, b = max(on, ms, t), min(off, me)
                if b <= a:
                    continue
                if a > t:
                    elems.extend(EngravedElement(d) for d in split_duration(a - t))
                parts = split_duration(b - a)
                for k, d in enumerate(parts):
                    elems.append(EngravedElement(
                        d, pitches,
                        tie_stop=(k > 0) or a > on,
                        tie_start=(k < len(parts) - 1) or b < off,
                    ))
                t = b
            if t < me:
                if not elems:
                    elems.append(EngravedElement(me - ms, whole_measure_rest=True))
                else:
                    elems.extend(EngravedElement(d) for d in split_duration(me - t))
            m.voices[key] = elems
        measures.append(m)
    return measures


def _sub(parent, tag, text=None, **attrib):
    el = ET.SubElement(parent, tag, {k.replace("_", "-"): str(v) for k, v in attrib.items()})
    if text is not None:
        el.text = str(text)
    return el


def _xml_voice(key: tuple[str, int], lh_offset: int) -> int:
    hand, voice = key
    return voice if hand == RH else voice + lh_offset


def serialize_musicxml(measures: list[EngravedMeasure], doc: ScoreDocument, title: str = "Transcription") -> str:
    beats, beat_type = doc.metre.time_signature
    rh_voices = [v for m in measures for (h, v) in m.voices if h == RH]
    lh_offset = max([4] + rh_voices)
    root = ET.Element("score-partwise", version="3.1")
    work = _sub(root, "work")
    _sub(work, "work-title", title)
    plist = _sub(root, "part-list")
    sp = _sub(plist, "score-part", id="P1")
    _sub(sp, "part-name", "Piano")
    part = _sub(root, "part", id="P1")
    number = 0 if measures and measures[0].implicit else 1
    for m in measures:
        attrs = {"number": number}
        if m.implicit:
            attrs["implicit"] = "yes"
        mel = _sub(part, "measure", **attrs)
        number += 1
        if m.index == 0:
            at = _sub(mel, "attributes")
            _sub(at, "divisions", DIVISIONS)
            key = _sub(at, "key")
            _sub(key, "fifths", 0)
            time = _sub(at, "time")
            _sub(time, "beats", beats)
            _sub(time, "beat-type", beat_type)
            _sub(at, "staves", 2)
            for num, sign, line in ((1, "G", 2), (2, "F", 4)):
                clef = _sub(at, "clef", number=num)
                _sub(clef, "sign", sign)
                _sub(clef, "line", line)
            direction = _sub(mel, "direction", placement="above")
            dt = _sub(direction, "direction-type")
            metro = _sub(dt, "metronome")
            _sub(metro, "beat-unit", "quarter")
            bpm = f"{doc.bpm:.2f}".rstrip("0").rstrip(".")
            _sub(metro, "per-minute", bpm)
            _sub(direction, "sound", tempo=bpm)
        keys = list(m.voices)
        for vi, key in enumerate(keys):
            if vi:
                backup = _sub(mel, "backup")
                _sub(backup, "duration", m.length)
            staff = 1 if key[0] == RH else 2
            for el in m.voices[key]:
                _write_element(mel, el, _xml_voice(key, lh_offset), staff)
    ET.indent(root, space=" ")
    body = ET.tostring(root, encoding="unicode")
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        '<!DOCTYPE score-partwise PUBLIC "-//Recordare//DTD MusicXML 3.1 Partwise//EN" '
        '"http://www.musicxml.org/dtds/partwise.dtd">\n' + body + "\n"
    )


def _write_element(mel, el: EngravedElement, voice: int, staff: int) -> None:
    if el.is_rest:
        note = _sub(mel, "note")
        if el.whole_measure_rest:
            _sub(note, "rest", measure="yes")
        else:
            _sub(note, "rest")
        _sub(note, "duration", el.duration)
        _sub(note, "voice", voice)
        if not el.whole_measure_rest:
            _type_elements(note, el.duration)
        _sub(note, "staff", staff)
        return
    for k, p in enumerate(el.pitches):
        note = _sub(mel, "note")
        if k:
            _sub(note, "chord")
        pitch = _sub(note, "pitch")
        _sub(pitch, "step", STEPS[p % 12])
        if ALTERS[p % 12]:
            _sub(pitch, "alter", ALTERS[p % 12])
        _sub(pitch, "octave", p // 12 - 1)
        _sub(note, "duration", el.duration)
        if el.tie_stop:
            _sub(note, "tie", type="stop")
        if el.tie_start:
            _sub(note, "tie", type="start")
        _sub(note, "voice", voice)
        _type_elements(note, el.duration)
        _sub(note, "staff", staff)
        if el.tie_start or el.tie_stop:
            notations = _sub(note, "notations")
            if el.tie_stop:
                _sub(notations, "tied", type="stop")
            if el.tie_start:
                _sub(notations, "tied", type="start")


def _type_elements(note, duration: int) -> None:
    ntype, dots, triplet = NOTATED[duration]
    _sub(note, "type", ntype)
    for _ in range(dots):
        _sub(note, "dot")
    if triplet:
        tm = _sub(note, "time-modification")
        _sub(tm, "actual-notes", 3)
        _sub(tm, "normal-notes", 2)


def to_musicxml(doc: ScoreDocument, title: str = "Transcription") -> str:
    return serialize_musicxml(engrave(doc), doc, title)
