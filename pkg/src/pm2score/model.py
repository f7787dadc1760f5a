"""Trained model bundle: per-metre tables, standardization and tempo reference cloud."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import ScoreDocument, get_metre
from .post import DEFAULT_KERNEL_STD, TempoReferenceCloud
from .rhythm import RhythmModelParams
from .stats import Standardization, StatsModel, fit_standardization, train_stats_model

MODEL_SCHEMA_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class MetreModel:
    stats: StatsModel
    standardization: Standardization | None = None

    @property
    def rhythm(self) -> RhythmModelParams:
        return self.stats.rhythm["BH"]


@dataclass
class ModelParams:
    metres: dict[str, MetreModel] = field(default_factory=dict)
    tempo_cloud: TempoReferenceCloud | None = None
    smoothing: float = 0.1

    def metre_model(self, label: str) -> MetreModel:
        try:
            return self.metres[label]
        except KeyError:
            raise ModelError(f"model has no tables for metre {label}") from None

    @property
    def rhythm_models(self) -> dict[str, RhythmModelParams]:
        return {k: v.rhythm for k, v in self.metres.items()}

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "smoothing": self.smoothing,
            "metres": {
                k: {
                    "stats": v.stats.to_dict(),
                    "standardization": v.standardization.to_dict() if v.standardization else None,
                }
                for k, v in self.metres.items()
            },
            "tempo_cloud": self.tempo_cloud.to_dict() if self.tempo_cloud else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ModelError(f"unsupported model schema_version {d.get('schema_version')!r}")
        metres = {}
        for k, v in d["metres"].items():
            st = v.get("standardization")
            metres[k] = MetreModel(StatsModel.from_dict(v["stats"]),
                                   Standardization.from_dict(st) if st else None)
        cloud = d.get("tempo_cloud")
        return cls(metres, TempoReferenceCloud.from_dict(cloud) if cloud else None, d.get("smoothing", 0.1))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelParams":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ModelError(f"cannot load model {path}: {exc}") from None


def train_model(
    corpus: Sequence[ScoreDocument],
    metres: Sequence[str] | None = None,
    smoothing: float = 0.1,
    kernel_std: float = DEFAULT_KERNEL_STD,
) -> ModelParams:
    """Train tables for each requested metre (default: every metre in the corpus)."""
    if not corpus:
        raise ModelError("empty training corpus")
    if metres is None:
        metres = sorted({d.metre.label for d in corpus})
    out = ModelParams(smoothing=smoothing)
    for label in metres:
        metre = get_metre(label)
        docs = [d for d in corpus if d.bar_length == metre.bar_length]
        if not docs:
            raise ModelError(f"corpus has no pieces in {label}")
        stats = train_stats_model(docs, metre, smoothing)
        std = fit_standardization(docs, stats) if len(docs) >= 2 else None
        out.metres[metre.label] = MetreModel(stats, std)
    out.tempo_cloud = TempoReferenceCloud.from_corpus(corpus, kernel_std)
    return out
