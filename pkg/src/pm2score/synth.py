"""Synthetic scores and performances for tests, training and experiments.

The "designed" pieces are built so that every statistic prefers the true
bar-line phase: two contrasting bar types arranged AABB, RH rhythms whose
long notes cross a bar line under any beat shift, LH long notes on the
downbeat and pitch classes tied to metrical positions.  The LH pattern of
B bars has an onset on the last beat, so a beat shift never merely
translates the LH bar contents.  Performances are
drawn from the performance model itself (Gaussian-Markov tempo, Gaussian
onset deviations, exponential chord spreads).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import LH, METRES, RH, TATUMS_PER_BEAT, PerformanceNote, ScoreDocument, ScoreNote, get_metre
from .rhythm import PerformanceModelParams

DIATONIC = (0, 2, 4, 5, 7, 9, 11)

# bar patterns as note values; "A" and "B" bars differ at every shared onset
_DESIGNED = {
    "4/4": {
        RH: ((36, 12), (12, 36)),
        LH: ((48,), (24, 12, 12)),
        "beat_pc": (0, 2, 4, 7),
    },
    "3/4": {
        RH: ((24, 12), (12, 24)),
        LH: ((36,), (24, 12)),
        "beat_pc": (0, 4, 7),
    },
}
_OFFBEAT_PC = 11

_RH_POOL = {
    48: ((36, 12), (12, 36), (12, 12, 12, 12), (18, 6, 12, 12), (24, 12, 6, 6), (12, 6, 6, 24),
         (48,), (24, 24), (6, 6, 12, 24), (8, 8, 8, 24)),
    36: ((24, 12), (12, 24), (12, 12, 12), (18, 6, 12), (36,), (12, 6, 6, 12), (6, 6, 24)),
}
_LH_POOL = {
    48: ((48,), (24, 24), (12, 12, 12, 12), (36, 12)),
    36: ((36,), (24, 12), (12, 12, 12)),
}


def _pattern_onsets(values: Sequence[int]) -> list[tuple[int, int]]:
    out, t = [], 0
    for v in values:
        out.append((t, v))
        t += v
    return out


def _position_pc(pos: int, beat_pc: Sequence[int]) -> int:
    if pos % TATUMS_PER_BEAT == 0:
        return beat_pc[pos // TATUMS_PER_BEAT]
    return _OFFBEAT_PC


def designed_piece(
    rng: np.random.Generator, metre: str = "4/4", n_blocks: int | None = None,
) -> ScoreDocument:
    """AABB-structured piece whose statistics peak at the true downbeat.

    Each block is four bars (A, A, B, B); A/B roles, transposition,
    block count and tempo are randomized.
    """
    m = get_metre(metre)
    spec = _DESIGNED[m.label]
    B = m.bar_length
    n_blocks = n_blocks or int(rng.integers(2, 5))
    swap = bool(rng.integers(2))
    transpose = int(rng.integers(-5, 7))
    bar_types = ("A", "A", "B", "B") * n_blocks
    notes = []
    for k, kind in enumerate(bar_types):
        start = k * B
        which = (kind == "B") ^ swap
        for t, v in _pattern_onsets(spec[RH][which]):
            pc = _position_pc(t, spec["beat_pc"])
            octave_base = 84 if kind == "B" else 72
            notes.append(ScoreNote(start + t, v, octave_base + pc + transpose, RH, 1))
        lh = spec[LH][kind == "B"]
        for t, v in _pattern_onsets(lh):
            # root on the downbeat (register marks the bar type), fifth, then third
            pitch = {0: 36 if kind == "B" else 48, 24: 43}.get(t, 40)
            notes.append(ScoreNote(start + t, v, pitch + transpose, LH, 1))
    tempo = float(rng.uniform(0.45, 0.58))
    return ScoreDocument(m, tuple(notes), tempo, 0)


def random_piece(rng: np.random.Generator, metre: str = "4/4") -> ScoreDocument:
    """Loosely structured piece: random bar patterns, noisy pitches, random form."""
    m = get_metre(metre)
    B = m.bar_length
    beat_pc = _DESIGNED[m.label]["beat_pc"] if m.label in _DESIGNED else (0, 4, 7, 2)[: m.beats_per_bar]
    rh_pool, lh_pool = _RH_POOL[B], _LH_POOL[B]
    n_types = int(rng.integers(2, 4))
    rh_types = [rh_pool[i] for i in rng.integers(len(rh_pool), size=n_types)]
    lh_types = [lh_pool[i] for i in rng.integers(len(lh_pool), size=n_types)]
    form = rng.integers(n_types, size=int(rng.integers(8, 17)))
    transpose = int(rng.integers(-5, 7))
    notes = []
    for k, kind in enumerate(form):
        start = k * B
        for t, v in _pattern_onsets(rh_types[kind]):
            if rng.random() < 0.7:
                pc = _position_pc(t, beat_pc)
            else:
                pc = int(rng.choice(DIATONIC))
            pitch = 72 + pc + 12 * int(kind % 2) + transpose
            notes.append(ScoreNote(start + t, v, pitch, RH, 1))
            if t == 0 and rng.random() < 0.3:
                notes.append(ScoreNote(start + t, v, pitch - 3 - int(rng.integers(2)), RH, 1))
        for t, v in _pattern_onsets(lh_types[kind]):
            pitch = 48 if t == 0 else 43 + int(rng.choice((0, 2, 4)))
            notes.append(ScoreNote(start + t, v, pitch + transpose, LH, 1))
    return ScoreDocument(m, tuple(notes), float(rng.uniform(0.45, 0.6)), 0)


def ostinato_piece(rng: np.random.Generator, beats: int, n_bars: int = 8, metre: str | None = None) -> ScoreDocument:
    """Exact repetition of a one-bar pattern of ``beats`` mutually distinct beats."""
    sub_patterns = ((12,), (6, 6), (4, 4, 4), (9, 3), (3, 9), (6, 3, 3))
    bar = []
    lead = rng.permutation(7)[:beats]
    for j in range(beats):
        vals = sub_patterns[int(rng.integers(len(sub_patterns)))]
        for k, (t, v) in enumerate(_pattern_onsets(vals)):
            pitch = 60 + DIATONIC[int(lead[j])] if k == 0 else 60 + int(rng.choice(DIATONIC))
            bar.append((j * TATUMS_PER_BEAT + t, v, pitch))
    label = metre or ("3/4" if beats == 3 else "4/4")
    notes = []
    for b in range(n_bars):
        start = b * beats * TATUMS_PER_BEAT
        for t, v, p in bar:
            notes.append(ScoreNote(start + t, v, p + 12, RH, 1))
        notes.append(ScoreNote(start, beats * TATUMS_PER_BEAT, 48, LH, 1))
    return ScoreDocument(get_metre(label), tuple(notes), 0.5, 0)


def random_voiced_score(rng: np.random.Generator, max_notes: int = 40) -> ScoreDocument:
    """Arbitrary valid document with non-overlapping chords per (hand, voice).

    Note values are drawn from 1..60 tatums so that bar splits, odd
    durations and triplet values all occur.
    """
    metre = METRES[list(METRES)[int(rng.integers(len(METRES)))]]
    anacrusis = int(rng.integers(metre.bar_length)) if rng.random() < 0.5 else 0
    notes = []
    budget = int(rng.integers(0, max_notes + 1))
    streams = [(RH, 1), (LH, 1)] + [(RH, 2)] * int(rng.integers(2)) + [(LH, 2)] * int(rng.integers(2))
    for hand, voice in streams:
        t = 0
        base = 64 if hand == RH else 45
        while budget > 0:
            if rng.random() < 0.3:
                t += int(rng.integers(1, 25))
            value = int(rng.integers(1, 61))
            size = int(rng.integers(1, 4))
            pitches = sorted({base + int(x) for x in rng.integers(-8, 9, size=size)})
            for p in pitches:
                notes.append(ScoreNote(t, value, p, hand, voice))
            budget -= len(pitches)
            t += value
            if rng.random() < 0.25:
                break
    return ScoreDocument(metre, tuple(notes), float(rng.uniform(0.3, 1.2)), anacrusis)


def _perf_order(doc: ScoreDocument) -> list[ScoreNote]:
    return sorted(doc.notes, key=lambda n: (n.onset_tatum, n.pitch))


def render_performance(
    doc: ScoreDocument,
    rng: np.random.Generator,
    perf: PerformanceModelParams,
    articulation: float = 0.9,
    start_sec: float = 0.5,
) -> list[PerformanceNote]:
    """Sample onset times from the performance model given the score.

    Notes are played in (onset, pitch) order.  Tempo follows the
    Gaussian-Markov chain at every note; a note sharing its score onset
    with its predecessor is delayed by an exponential amount, otherwise
    its onset is Gaussian around the tempo-predicted time.
    """
    out = []
    u = max(perf.u_min, rng.normal(perf.u_ini, perf.sigma_ini_u))
    t_prev = tau_prev = u_prev = None
    for n in _perf_order(doc):
        if t_prev is None:
            t = start_sec
        else:
            u = max(perf.u_min, rng.normal(u_prev, perf.sigma_u))
            if n.onset_tatum == tau_prev:
                t = t_prev + rng.exponential(perf.lambda_t)
            else:
                gap = u_prev * (n.onset_tatum - tau_prev) / TATUMS_PER_BEAT
                t = t_prev + gap + rng.normal(0.0, perf.sigma_t)
        dur = max(0.01, articulation * u * n.note_value / TATUMS_PER_BEAT)
        out.append(PerformanceNote(float(t), float(t + dur), n.pitch, 64 + int(rng.integers(-10, 11))))
        t_prev, tau_prev, u_prev = t, n.onset_tatum, u
    return out


def metronomic_performance(doc: ScoreDocument, spqn: float | None = None, start_sec: float = 0.5) -> list[PerformanceNote]:
    """Deadpan rendering at a constant tempo (default: the document's tempo)."""
    spqn = doc.tempo_spqn if spqn is None else spqn
    sec = spqn / TATUMS_PER_BEAT
    return [
        PerformanceNote(start_sec + n.onset_tatum * sec, start_sec + n.offset_tatum * sec, n.pitch, 72)
        for n in _perf_order(doc)
    ]


def onset_accuracy(truth: ScoreDocument, decoded_onsets: Sequence[int]) -> float:
    """Fraction of notes whose onset, relative to the first note, is recovered exactly."""
    ref = [n.onset_tatum for n in _perf_order(truth)]
    if len(ref) != len(decoded_onsets):
        raise ValueError("note counts differ")
    if not ref:
        return 1.0
    return sum((r - ref[0]) == (d - decoded_onsets[0]) for r, d in zip(ref, decoded_onsets)) / len(ref)


def designed_corpus(seed: int, n: int, metres: Sequence[str] = ("4/4",)) -> list[ScoreDocument]:
    rng = np.random.default_rng(seed)
    return [designed_piece(rng, metres[i % len(metres)]) for i in range(n)]
