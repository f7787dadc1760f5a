"""Domain types shared across the transcription pipeline.

Score time is measured in tatums, twelve to the quarter note, so that
a sixteenth note is three tatums and a sixteenth-note triplet member is
one.  Bar-line phase is carried by ``ScoreDocument.anacrusis`` rather
than baked into the note onsets.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

TATUMS_PER_BEAT = 12
PIANO_LOW = 21
PIANO_HIGH = 108

RH = "RH"
LH = "LH"
HANDS = (RH, LH)


class ScoreError(ValueError):
    """Raised for structurally invalid score content."""


def tatums_per_beat() -> int:
    return TATUMS_PER_BEAT


@dataclass(frozen=True)
class MetreSpec:
    label: str
    bar_length: int
    beats_per_bar: int

    def __post_init__(self):
        if self.bar_length != self.beats_per_bar * TATUMS_PER_BEAT:
            raise ScoreError(
                f"bar length {self.bar_length} != {self.beats_per_bar} beats x {TATUMS_PER_BEAT}"
            )

    @property
    def time_signature(self) -> tuple[int, int]:
        num, den = self.label.split("/")
        return int(num), int(den)


METRES = {
    "4/4": MetreSpec("4/4", 48, 4),
    "3/4": MetreSpec("3/4", 36, 3),
    "2/4": MetreSpec("2/4", 24, 2),
    # compound duple: same 36-tatum bar as 3/4
    "6/8": MetreSpec("6/8", 36, 3),
}


def get_metre(label: str | MetreSpec) -> MetreSpec:
    if isinstance(label, MetreSpec):
        return label
    try:
        return METRES[label]
    except KeyError:
        raise ScoreError(f"unsupported metre {label!r}; expected one of {sorted(METRES)}") from None


@dataclass(frozen=True)
class PerformanceNote:
    onset_sec: float
    offset_sec: float
    pitch: int
    velocity: int = 64

    def __post_init__(self):
        if not self.offset_sec > self.onset_sec:
            raise ScoreError(f"offset {self.offset_sec} must follow onset {self.onset_sec}")
        if self.onset_sec < 0:
            raise ScoreError(f"negative onset {self.onset_sec}")
        if not PIANO_LOW <= self.pitch <= PIANO_HIGH:
            raise ScoreError(f"pitch {self.pitch} outside piano range")
        if not 0 <= self.velocity <= 127:
            raise ScoreError(f"velocity {self.velocity} outside [0, 127]")

    @property
    def duration(self) -> float:
        return self.offset_sec - self.onset_sec


@dataclass(frozen=True)
class ScoreNote:
    onset_tatum: int
    note_value: int
    pitch: int
    hand: str = RH
    voice: int = 1

    def __post_init__(self):
        if self.onset_tatum < 0:
            raise ScoreError(f"negative onset tatum {self.onset_tatum}")
        if self.note_value < 1:
            raise ScoreError(f"note value must be >= 1, got {self.note_value}")
        if not PIANO_LOW <= self.pitch <= PIANO_HIGH:
            raise ScoreError(f"pitch {self.pitch} outside piano range")
        if self.hand not in HANDS:
            raise ScoreError(f"unknown hand {self.hand!r}")
        if self.voice < 1:
            raise ScoreError(f"voice must be >= 1, got {self.voice}")

    @property
    def offset_tatum(self) -> int:
        return self.onset_tatum + self.note_value


def note_sort_key(n: ScoreNote):
    return (n.onset_tatum, n.pitch, n.hand, n.voice, n.note_value)


def sort_notes(notes: Iterable[ScoreNote]) -> tuple[ScoreNote, ...]:
    return tuple(sorted(notes, key=note_sort_key))


@dataclass(frozen=True)
class ScoreDocument:
    """A quantized score: notes on the tatum grid plus global metadata.

    Notes are kept in canonical order (onset, then pitch).  ``anacrusis``
    is added to onsets before reducing modulo the bar length, so a
    note at onset 0 sits at metrical position ``anacrusis``.
    """

    metre: MetreSpec
    notes: tuple[ScoreNote, ...] = field(default_factory=tuple)
    tempo_spqn: float = 0.5
    anacrusis: int = 0

    def __post_init__(self):
        object.__setattr__(self, "metre", get_metre(self.metre))
        object.__setattr__(self, "notes", sort_notes(self.notes))
        if not 0 <= self.anacrusis < self.metre.bar_length:
            raise ScoreError(
                f"anacrusis {self.anacrusis} outside [0, {self.metre.bar_length})"
            )
        if not self.tempo_spqn > 0:
            raise ScoreError(f"tempo must be positive, got {self.tempo_spqn}")

    @property
    def bar_length(self) -> int:
        return self.metre.bar_length

    @property
    def bpm(self) -> float:
        return 60.0 / self.tempo_spqn

    def positions(self) -> list[int]:
        return [metrical_position(n.onset_tatum, self.metre, self.anacrusis) for n in self.notes]

    def part(self, hand: str | None) -> "ScoreDocument":
        """Sub-score containing only ``hand`` (``None`` keeps both hands)."""
        if hand is None or hand == "BH":
            return self
        return replace(self, notes=tuple(n for n in self.notes if n.hand == hand))

    def with_notes(self, notes: Sequence[ScoreNote]) -> "ScoreDocument":
        return replace(self, notes=tuple(notes))


def metrical_position(onset_tatum: int, metre: MetreSpec, anacrusis: int = 0) -> int:
    return (onset_tatum + anacrusis) % metre.bar_length


def shift_score(doc: ScoreDocument, shift_beats: int) -> ScoreDocument:
    """Move the bar grid so every note's metrical position advances by ``shift_beats`` beats."""
    a = (doc.anacrusis + TATUMS_PER_BEAT * shift_beats) % doc.bar_length
    return replace(doc, anacrusis=a)


def mean_note_value_qn(doc: ScoreDocument) -> float:
    if not doc.notes:
        return 0.0
    return sum(n.note_value for n in doc.notes) / len(doc.notes) / TATUMS_PER_BEAT
