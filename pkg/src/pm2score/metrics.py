"""Metrical-structure metrics comparing an estimated score with a reference.

Notes are put in correspondence by the longest common subsequence of the
pitch sequences (notes ordered by onset, then pitch).  Beat and downbeat
precision/recall are computed over matched pairs only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from .core import TATUMS_PER_BEAT, ScoreDocument, ScoreNote

TEMPO_LOW, TEMPO_HIGH = 0.8, 1.2


def _ordered(doc: ScoreDocument) -> list[ScoreNote]:
    return sorted(doc.notes, key=lambda n: (n.onset_tatum, n.pitch))


def match_notes(ref: ScoreDocument, est: ScoreDocument) -> list[tuple[int, int]]:
    """Order-preserving one-to-one matching (indices into onset/pitch order).

    When skipping either note keeps the subsequence optimal, the note that
    comes first by (onset, pitch) is skipped.  The rule does not depend on
    which score is the reference, so swapping roles swaps precision and recall.
    """
    ra, rb = _ordered(ref), _ordered(est)
    a = [n.pitch for n in ra]
    b = [n.pitch for n in rb]
    n, m = len(a), len(b)
    L = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = L[i], L[i + 1]
        for j in range(m - 1, -1, -1):
            row[j] = nxt[j + 1] + 1 if a[i] == b[j] else max(nxt[j], row[j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif L[i][j + 1] > L[i + 1][j]:
            j += 1
        elif L[i][j + 1] < L[i + 1][j]:
            i += 1
        elif (rb[j].onset_tatum, rb[j].pitch) < (ra[i].onset_tatum, ra[i].pitch):
            j += 1
        else:
            i += 1
    return pairs


def _prf(tp: int, n_est: int, n_ref: int) -> tuple[float, float, float]:
    if n_est == 0 and n_ref == 0:
        return 1.0, 1.0, 1.0  # no (down)beat notes on either side: nothing missed, nothing wrong
    p = tp / n_est if n_est else 0.0
    r = tp / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def tempo_within(u_true: float, u_est: float) -> bool:
    """True when 0.8 * u_true <= u_est <= 1.2 * u_true."""
    return TEMPO_LOW * u_true <= u_est <= TEMPO_HIGH * u_true


@dataclass
class MetricalReport:
    metre_correct: bool
    tempo_correct: bool
    beat_precision: float
    beat_recall: float
    beat_f: float
    downbeat_precision: float
    downbeat_recall: float
    downbeat_f: float
    matched_pairs: int
    empty: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def perfect(self) -> bool:
        return (self.metre_correct and self.tempo_correct and self.matched_pairs > 0
                and self.beat_f == 1.0 and self.downbeat_f == 1.0)


def metrical_report(ref: ScoreDocument, est: ScoreDocument) -> MetricalReport:
    metre_ok = ref.bar_length == est.bar_length
    tempo_ok = tempo_within(ref.tempo_spqn, est.tempo_spqn)
    pairs = match_notes(ref, est) if ref.notes and est.notes else []
    if not pairs:
        return MetricalReport(metre_ok, tempo_ok, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, empty=True)
    rn, en = _ordered(ref), _ordered(est)

    def on(doc, note, period):
        return (note.onset_tatum + doc.anacrusis) % period == 0

    counts = {}
    for label, pr, pe in (("beat", TATUMS_PER_BEAT, TATUMS_PER_BEAT), ("downbeat", ref.bar_length, est.bar_length)):
        tp = n_est = n_ref = 0
        for i, j in pairs:
            r_on, e_on = on(ref, rn[i], pr), on(est, en[j], pe)
            tp += r_on and e_on
            n_est += e_on
            n_ref += r_on
        counts[label] = _prf(tp, n_est, n_ref)
    return MetricalReport(metre_ok, tempo_ok, *counts["beat"], *counts["downbeat"], len(pairs))


@dataclass
class BatchReport:
    """Per-piece reports with the corpus-level proportions and means."""

    reports: list[MetricalReport]

    @property
    def metre_accuracy(self) -> float:
        return sum(r.metre_correct for r in self.reports) / len(self.reports) if self.reports else 0.0

    @property
    def tempo_accuracy(self) -> float:
        return sum(r.tempo_correct for r in self.reports) / len(self.reports) if self.reports else 0.0

    def mean(self, field_name: str) -> float:
        return sum(getattr(r, field_name) for r in self.reports) / len(self.reports) if self.reports else 0.0

    def to_dict(self) -> dict:
        return {
            "pieces": len(self.reports),
            "metre_accuracy": self.metre_accuracy,
            "tempo_accuracy": self.tempo_accuracy,
            **{f"mean_{k}": self.mean(k) for k in (
                "beat_precision", "beat_recall", "beat_f",
                "downbeat_precision", "downbeat_recall", "downbeat_f")},
        }


def batch_report(pairs: Sequence[tuple[ScoreDocument, ScoreDocument]]) -> BatchReport:
    return BatchReport([metrical_report(r, e) for r, e in pairs])
