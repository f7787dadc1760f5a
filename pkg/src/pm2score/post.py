"""Global post-estimation on a preliminary transcription.

Three corrections run in order: tempo-scale doubling decided by a
reference-density comparison, metre identification from the
auto-similarity indices, and bar-line phase chosen by a criterion
vector over standardized statistics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import METRES, MetreSpec, ScoreDocument, ScoreNote, mean_note_value_qn, shift_score
from .stats import (
    N_STATS,
    STAT_NAMES,
    Standardization,
    StatisticsCalculator,
    StatsModel,
    auto_similarity_indices,
    self_similarity_matrix,
)

logger = logging.getLogger(__name__)

DEFAULT_CRITERION = "011-011-000-011-001-0"
DEFAULT_GATE_BPM = 100.0
DEFAULT_KERNEL_STD = 0.01


# ---------------------------------------------------------------------------
# tempo scale


def tempo_point(doc: ScoreDocument) -> tuple[float, float]:
    """(log BPM, log mean note value in quarter notes), natural logs."""
    return math.log(doc.bpm), math.log(mean_note_value_qn(doc))


@dataclass(frozen=True)
class TempoReferenceCloud:
    points: np.ndarray  # (n, 2)
    kernel_std: float = DEFAULT_KERNEL_STD

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if not len(pts):
            raise ValueError("empty reference cloud")
        if not self.kernel_std > 0:
            raise ValueError("kernel_std must be positive")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_corpus(cls, corpus: Sequence[ScoreDocument], kernel_std: float = DEFAULT_KERNEL_STD):
        return cls(np.array([tempo_point(d) for d in corpus if d.notes]), kernel_std)

    def log_density(self, x: float, y: float) -> float:
        """Log of the isotropic Gaussian KDE (constant factors included)."""
        d2 = ((self.points - (x, y)) ** 2).sum(axis=1) / (2 * self.kernel_std**2)
        m = -d2.min()
        return float(m + np.log(np.exp(-d2 - m).sum()) - np.log(len(self.points))
                     - np.log(2 * np.pi * self.kernel_std**2))

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "kernel_std": self.kernel_std}

    @classmethod
    def from_dict(cls, d: dict) -> "TempoReferenceCloud":
        return cls(np.array(d["points"]), float(d["kernel_std"]))


def double_tempo(doc: ScoreDocument) -> ScoreDocument | None:
    """Halve every onset and note value; ``None`` if any would become fractional."""
    if any(n.onset_tatum % 2 or n.note_value % 2 for n in doc.notes):
        return None
    notes = [replace(n, onset_tatum=n.onset_tatum // 2, note_value=n.note_value // 2) for n in doc.notes]
    return replace(doc, notes=tuple(notes), tempo_spqn=doc.tempo_spqn / 2, anacrusis=doc.anacrusis // 2)


def estimate_tempo_scale(
    doc: ScoreDocument, cloud: TempoReferenceCloud, gate_bpm: float = DEFAULT_GATE_BPM
) -> ScoreDocument:
    if not doc.notes or doc.bpm >= gate_bpm:
        return doc
    x, y = tempo_point(doc)
    here = cloud.log_density(x, y)
    there = cloud.log_density(x + math.log(2), y - math.log(2))
    if not there > here:
        return doc
    doubled = double_tempo(doc)
    if doubled is None:
        logger.warning("tempo doubling preferred but halving note values leaves fractions; kept as is")
        return doc
    return doubled


# ---------------------------------------------------------------------------
# metre


def identify_metre(doc: ScoreDocument) -> MetreSpec:
    """3/4 when A4 < A3, otherwise a duple metre (2/4 is kept if already chosen)."""
    a4, a3 = auto_similarity_indices(self_similarity_matrix(doc, window=1, phase_free=True))
    if a4 < a3:
        return doc.metre if doc.metre.beats_per_bar == 3 else METRES["3/4"]
    return doc.metre if doc.metre.beats_per_bar in (2, 4) else METRES["4/4"]


# ---------------------------------------------------------------------------
# downbeats


@dataclass(frozen=True)
class CriterionVector:
    bits: tuple[bool, ...]

    def __post_init__(self):
        if len(self.bits) != N_STATS:
            raise ValueError(f"criterion vector needs {N_STATS} bits")
        if not any(self.bits):
            raise ValueError("criterion vector must select at least one statistic")

    @classmethod
    def parse(cls, text: str) -> "CriterionVector":
        digits = text.replace("-", "").strip()
        if len(digits) != N_STATS or set(digits) - {"0", "1"}:
            raise ValueError(f"bad criterion vector {text!r}")
        return cls(tuple(c == "1" for c in digits))

    @classmethod
    def single(cls, name: str) -> "CriterionVector":
        return cls(tuple(n == name for n in STAT_NAMES))

    @property
    def mask(self) -> np.ndarray:
        return np.array(self.bits, dtype=float)

    @property
    def names(self) -> list[str]:
        return [n for n, b in zip(STAT_NAMES, self.bits) if b]

    def __str__(self) -> str:
        s = "".join("1" if b else "0" for b in self.bits)
        return "-".join([s[0:3], s[3:6], s[6:9], s[9:12], s[12:15], s[15]])


def candidate_shifts(metre: MetreSpec) -> range:
    return range(metre.beats_per_bar)


def shift_matrix(doc: ScoreDocument, model: StatsModel, std: Standardization) -> np.ndarray:
    """Standardized statistics for every candidate shift, shape (shifts, 16)."""
    calc = StatisticsCalculator(doc, model)
    raw = np.array([calc.vector(s).values for s in candidate_shifts(doc.metre)])
    return (raw - std.mean) / std.std


def choose_shift(Z: np.ndarray, criterion: CriterionVector) -> int:
    scores = Z @ criterion.mask
    return int(np.argmax(scores))  # first maximum: shift 0, then smaller shifts


def estimate_downbeats(
    doc: ScoreDocument, model: StatsModel, std: Standardization,
    criterion: CriterionVector | str = DEFAULT_CRITERION,
) -> ScoreDocument:
    if isinstance(criterion, str):
        criterion = CriterionVector.parse(criterion)
    if not doc.notes:
        return doc
    return shift_score(doc, choose_shift(shift_matrix(doc, model, std), criterion))
