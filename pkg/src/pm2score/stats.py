"""Non-local score statistics used to estimate metre and bar-line phase.

Sixteen statistics are computed per score, in this fixed order::

    L_met (BH, RH, LH), L_NV (BH, RH, LH), R_tie (BH, RH, LH),
    L_rel.pc (BH, RH, LH), C_SSM (BH, RH, LH), L_p.rank

BH is the full score, RH/LH the single-hand sub-scores.  The log
probabilities come from tables trained on a reference corpus
(:class:`StatsModel`); they are evaluated at the metrical positions the
current bar grid assigns, which is what makes them sensitive to a
shifted downbeat.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    LH,
    RH,
    TATUMS_PER_BEAT,
    MetreSpec,
    ScoreDocument,
    get_metre,
    shift_score,
)
from .rhythm import RhythmModelParams, train_rhythm_model

PARTS = ("BH", RH, LH)
STAT_NAMES = (
    "L_met_BH", "L_met_RH", "L_met_LH",
    "L_NV_BH", "L_NV_RH", "L_NV_LH",
    "R_tie_BH", "R_tie_RH", "R_tie_LH",
    "L_relpc_BH", "L_relpc_RH", "L_relpc_LH",
    "C_SSM_BH", "C_SSM_RH", "C_SSM_LH",
    "L_prank",
)
N_STATS = len(STAT_NAMES)
PITCH_RANK_WINDOW = 10
PROB_FLOOR = 1e-12

# Krumhansl-Kessler probe-tone ratings, tonic first
KK_MAJOR = (6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88)
KK_MINOR = (6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17)


class StatisticsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# self-similarity


@dataclass(frozen=True)
class Segment:
    start_beat: int
    window_beats: int
    pitch_content: frozenset = frozenset()
    nv_content: frozenset = frozenset()

    @property
    def empty(self) -> bool:
        return not self.pitch_content


def _dice(a: frozenset, b: frozenset) -> float:
    if not a or not b:
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def segment_similarity(a: Segment, b: Segment) -> float:
    if a.window_beats != b.window_beats:
        raise StatisticsError("segments have different windows")
    if a.empty or b.empty:
        return 0.0
    return 0.5 * (_dice(a.pitch_content, b.pitch_content) + _dice(a.nv_content, b.nv_content))


def make_segments(doc: ScoreDocument, window: int, phase_free: bool = False) -> list[Segment]:
    """Segments of ``window`` beats starting at every beat.

    Beat ``i`` starts at bar-aligned time ``12 * i`` (onset plus
    anacrusis).  With ``phase_free`` the indexing starts at the first
    occupied beat instead of the first bar line, which makes the result
    independent of whole-beat shifts.  Contents are stored relative to
    the segment start.
    """
    if not doc.notes:
        return []
    T = [n.onset_tatum + doc.anacrusis for n in doc.notes]
    first = min(T) // TATUMS_PER_BEAT if phase_free else 0
    n_beats = max(T) // TATUMS_PER_BEAT - first + 1
    buckets: list[list[tuple[int, int, int]]] = [[] for _ in range(n_beats)]
    for t, note in zip(T, doc.notes):
        buckets[t // TATUMS_PER_BEAT - first].append((t, note.pitch, note.note_value))
    segs = []
    for i in range(n_beats):
        lo = TATUMS_PER_BEAT * (first + i)
        pitch, nv = set(), set()
        for bucket in buckets[i : i + window]:
            for t, p, r in bucket:
                pitch.add((t - lo, p))
                nv.add((t - lo, r))
        segs.append(Segment(i, window, frozenset(pitch), frozenset(nv)))
    return segs


class SelfSimilarityMatrix:
    """Lazily evaluated SSM over a list of segments."""

    def __init__(self, segments: Sequence[Segment]):
        self.segments = list(segments)
        self.size = len(self.segments)
        self.window = self.segments[0].window_beats if self.segments else 0
        self._cache: dict = {}

    def __getitem__(self, ij) -> float:
        i, j = ij
        if i > j:
            i, j = j, i
        if (i, j) not in self._cache:
            self._cache[(i, j)] = segment_similarity(self.segments[i], self.segments[j])
        return self._cache[(i, j)]

    @property
    def values(self) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        for i in range(self.size):
            for j in range(i, self.size):
                out[i, j] = out[j, i] = self[i, j]
        return out


def self_similarity_matrix(doc: ScoreDocument, window: int = 1, phase_free: bool = True) -> SelfSimilarityMatrix:
    return SelfSimilarityMatrix(make_segments(doc, window, phase_free))


def auto_similarity(ssm: SelfSimilarityMatrix, lag: int) -> float:
    if not 1 <= lag < ssm.size:
        raise StatisticsError(f"lag {lag} outside [1, {ssm.size})")
    return sum(ssm[i, i + lag] for i in range(ssm.size - lag)) / (ssm.size - lag)


def _index(ssm: SelfSimilarityMatrix, lags: Sequence[int]) -> float:
    usable = [s for s in lags if s < ssm.size]
    if not usable:
        raise StatisticsError(f"piece of {ssm.size} beats is too short for lags {tuple(lags)}")
    return sum(auto_similarity(ssm, s) for s in usable) / len(usable)


def auto_similarity_indices(ssm: SelfSimilarityMatrix) -> tuple[float, float]:
    """(A4, A3): mean auto-similarity at lags 4, 8, 12, 16 and 3, 6, 9, 12.

    Lags not shorter than the piece are left out of the mean.
    """
    return _index(ssm, (4, 8, 12, 16)), _index(ssm, (3, 6, 9, 12))


def contrast(x: float) -> float:
    return (x - 0.5) ** 2 - 0.25


def ssm_contrast_index(doc: ScoreDocument, bar_beats: int) -> float:
    M = bar_beats
    segs = make_segments(doc, M, phase_free=False)
    I = len(segs)
    J = (I - 1) // M
    if J < 2:
        raise StatisticsError(f"need at least two bar lines, got J={J}")
    total, weight = 0.0, 0
    for k in range(J - 1):
        total += contrast(segment_similarity(segs[k * M], segs[(k + 1) * M]))
        weight += 1
        if (k + 2) * M < I:
            total += contrast(segment_similarity(segs[k * M], segs[(k + 2) * M]))
            weight += 1
    return total / weight


# ---------------------------------------------------------------------------
# local keys


def key_profiles() -> np.ndarray:
    """Emission table (24, 12): rows are C..B major then C..B minor."""
    rows = []
    for prof in (KK_MAJOR, KK_MINOR):
        p = np.asarray(prof) / sum(prof)
        for tonic in range(12):
            rows.append(np.roll(p, tonic))
    return np.array(rows)


def detect_local_keys(pitches: Sequence[int], self_prob: float = 0.99) -> list[tuple[int, str]]:
    """Viterbi over 24 keys with pitch-class emissions; returns (tonic, mode) per note."""
    if not pitches:
        return []
    log_e = np.log(key_profiles())
    log_stay = np.log(self_prob)
    log_move = np.log((1.0 - self_prob) / 23.0)
    trans = np.full((24, 24), log_move)
    np.fill_diagonal(trans, log_stay)
    pcs = [p % 12 for p in pitches]
    delta = -np.log(24.0) + log_e[:, pcs[0]]
    back = []
    for pc in pcs[1:]:
        cand = delta[:, None] + trans
        arg = np.argmax(cand, axis=0)
        delta = cand[arg, np.arange(24)] + log_e[:, pc]
        back.append(arg)
    k = int(np.argmax(delta))
    path = [k]
    for arg in reversed(back):
        k = int(arg[k])
        path.append(k)
    path.reverse()
    return [(k % 12, "major" if k < 12 else "minor") for k in path]


# ---------------------------------------------------------------------------
# trained tables


def _nv_bucket(value: int, bar_length: int) -> int:
    return min(value, 2 * bar_length) - 1


def pitch_ranks(pitches: Sequence[int], K: int = PITCH_RANK_WINDOW) -> list[int]:
    """Rank (1 = lowest) of each pitch among itself and the following K-1 pitches."""
    out = []
    for n, p in enumerate(pitches):
        window = pitches[n : n + K]
        out.append(1 + sum(q < p for q in window))
    return out


def relative_pitch_classes(pitches: Sequence[int]) -> list[int]:
    keys = detect_local_keys(pitches)
    return [(p - tonic) % 12 for p, (tonic, _mode) in zip(pitches, keys)]


@dataclass
class StatsModel:
    """Per-metre probability tables for the log-probability statistics."""

    metre: MetreSpec
    rhythm: dict[str, RhythmModelParams]
    note_value: dict[str, np.ndarray]  # (B, 2B): P(r | b)
    rel_pc: dict[str, np.ndarray]  # (B, 12): P(q | b)
    pitch_rank: np.ndarray  # (B, K): P(e | b)

    def to_dict(self) -> dict:
        return {
            "metre": self.metre.label,
            "rhythm": {k: v.to_dict() for k, v in self.rhythm.items()},
            "note_value": {k: v.tolist() for k, v in self.note_value.items()},
            "rel_pc": {k: v.tolist() for k, v in self.rel_pc.items()},
            "pitch_rank": self.pitch_rank.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StatsModel":
        return cls(
            get_metre(d["metre"]),
            {k: RhythmModelParams.from_dict(v) for k, v in d["rhythm"].items()},
            {k: np.array(v) for k, v in d["note_value"].items()},
            {k: np.array(v) for k, v in d["rel_pc"].items()},
            np.array(d["pitch_rank"]),
        )


def _normalise_rows(counts: np.ndarray, smoothing: float) -> np.ndarray:
    c = counts + smoothing
    rows = c.sum(axis=1, keepdims=True)
    return np.where(rows > 0, c / np.where(rows > 0, rows, 1), 1.0 / c.shape[1])


def train_stats_model(corpus: Sequence[ScoreDocument], metre: MetreSpec | str, smoothing: float = 0.1) -> StatsModel:
    metre = get_metre(metre)
    docs = [d for d in corpus if d.bar_length == metre.bar_length]
    if not docs:
        raise StatisticsError(f"no corpus pieces with bar length {metre.bar_length}")
    B = metre.bar_length
    rhythm, nv, rel = {}, {}, {}
    for part in PARTS:
        hand = None if part == "BH" else part
        rhythm[part] = train_rhythm_model(docs, metre, smoothing, hand=hand)
        nv_counts = np.zeros((B, 2 * B))
        pc_counts = np.zeros((B, 12))
        for doc in docs:
            sub = doc.part(hand)
            pos = sub.positions()
            for b, n in zip(pos, sub.notes):
                nv_counts[b, _nv_bucket(n.note_value, B)] += 1
            for b, q in zip(pos, relative_pitch_classes([n.pitch for n in sub.notes])):
                pc_counts[b, q] += 1
        nv[part] = _normalise_rows(nv_counts, smoothing)
        rel[part] = _normalise_rows(pc_counts, smoothing)
    rank_counts = np.zeros((B, PITCH_RANK_WINDOW))
    for doc in docs:
        for b, e in zip(doc.positions(), pitch_ranks([n.pitch for n in doc.notes])):
            rank_counts[b, e - 1] += 1
    return StatsModel(metre, rhythm, nv, rel, _normalise_rows(rank_counts, smoothing))


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class StatisticVector:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.shape != (N_STATS,):
            raise ValueError(f"expected {N_STATS} statistics, got shape {arr.shape}")
        object.__setattr__(self, "values", arr)

    def __getitem__(self, name: str) -> float:
        return float(self.values[STAT_NAMES.index(name)])

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in zip(STAT_NAMES, self.values)}


def _log(p) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


@dataclass
class _PartFeatures:
    """Shift-independent per-part data reused across bar-grid shifts."""

    doc: ScoreDocument
    rel_pc: list[int] = field(default_factory=list)


def log_metrical_probability(doc: ScoreDocument, rhythm: RhythmModelParams) -> float:
    if not doc.notes:
        return 0.0
    pos = doc.positions()
    total = float(_log(rhythm.initial[pos[0]]))
    for k in range(1, len(doc.notes)):
        b0 = pos[k - 1]
        if doc.notes[k].onset_tatum == doc.notes[k - 1].onset_tatum:
            total += float(_log(rhythm.chord[b0, 0]))
        else:
            total += float(_log(rhythm.chord[b0, 1] * rhythm.transition[b0, pos[k]]))
    return total


def tie_rate(doc: ScoreDocument) -> float:
    """Negative fraction of notes whose sounding span crosses a bar line."""
    if not doc.notes:
        return 0.0
    B = doc.bar_length
    ties = 0
    for n in doc.notes:
        start = n.onset_tatum + doc.anacrusis
        if (start + n.note_value - 1) // B > start // B:
            ties += 1
    return -ties / len(doc.notes)


def _contrast_or_zero(doc: ScoreDocument) -> float:
    try:
        return ssm_contrast_index(doc, doc.metre.beats_per_bar)
    except StatisticsError:
        return 0.0


class StatisticsCalculator:
    """Computes statistic vectors for one score under any bar-grid shift."""

    def __init__(self, doc: ScoreDocument, model: StatsModel):
        if model.metre.bar_length != doc.bar_length:
            raise StatisticsError("statistics model trained for a different bar length")
        self.doc = doc
        self.model = model
        self.parts = {}
        for part in PARTS:
            sub = doc.part(None if part == "BH" else part)
            self.parts[part] = _PartFeatures(sub, relative_pitch_classes([n.pitch for n in sub.notes]))
        self.ranks = pitch_ranks([n.pitch for n in doc.notes])

    def vector(self, shift_beats: int = 0) -> StatisticVector:
        m = self.model
        B = self.doc.bar_length
        vals = {}
        for part in PARTS:
            feat = self.parts[part]
            sub = shift_score(feat.doc, shift_beats)
            pos = sub.positions()
            vals[f"L_met_{part}"] = log_metrical_probability(sub, m.rhythm[part])
            vals[f"L_NV_{part}"] = float(sum(
                _log(m.note_value[part][b, _nv_bucket(n.note_value, B)]) for b, n in zip(pos, sub.notes)
            ))
            vals[f"R_tie_{part}"] = tie_rate(sub)
            vals[f"L_relpc_{part}"] = float(sum(_log(m.rel_pc[part][b, q]) for b, q in zip(pos, feat.rel_pc)))
            vals[f"C_SSM_{part}"] = _contrast_or_zero(sub)
        bh = shift_score(self.doc, shift_beats)
        vals["L_prank"] = float(sum(_log(m.pitch_rank[b, e - 1]) for b, e in zip(bh.positions(), self.ranks)))
        return StatisticVector(np.array([vals[k] for k in STAT_NAMES]))


def compute_statistics(doc: ScoreDocument, model: StatsModel, shift_beats: int = 0) -> StatisticVector:
    return StatisticsCalculator(doc, model).vector(shift_beats)


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


STD_FLOOR = 1e-9


def fit_standardization(corpus: Sequence[ScoreDocument], model: StatsModel) -> Standardization:
    docs = [d for d in corpus if d.bar_length == model.metre.bar_length]
    if len(docs) < 2:
        raise StatisticsError("standardization needs at least two corpus pieces")
    X = np.array([compute_statistics(d, model).values for d in docs])
    return Standardization(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))


def standardize(vec: StatisticVector, std: Standardization) -> StatisticVector:
    return StatisticVector((vec.values - std.mean) / std.std)
