"""Performance-to-score pipeline: preliminary transcription plus global post-estimation.

Stages run in a fixed order::

    performance -> quantized -> tempo_scale -> metre -> final

Each stage's output can be dumped to JSON and fed back in; the run then
resumes with the following stage.  Score dumps embed the performance
notes because a metre correction re-quantizes from them.
"""
from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .core import MetreSpec, PerformanceNote, ScoreDocument, get_metre
from .midi_io import (
    SchemaError,
    cleanup,
    dump_json,
    load_json,
    performance_from_dict,
    performance_to_dict,
    score_from_dict,
    score_to_dict,
)
from .model import ModelParams
from .post import (
    DEFAULT_CRITERION,
    DEFAULT_GATE_BPM,
    CriterionVector,
    TempoReferenceCloud,
    estimate_downbeats,
    estimate_tempo_scale,
    identify_metre,
)
from .rhythm import (
    PerformanceModelParams,
    anacrusis_of,
    decode,
    global_tempo,
    order_notes,
    quantize_offsets,
    select_metre,
)
from .stats import StatisticsError
from .voices import VoiceCostParams, assign_voices, split_hands

logger = logging.getLogger(__name__)

STAGES = ("performance", "quantized", "tempo_scale", "metre", "final")
CANDIDATE_ORDER = ("4/4", "3/4", "2/4", "6/8")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class PipelineConfig:
    """Run settings.

    The config file is ``key = value`` text (``#`` comments, optional
    ``[pipeline]`` header).  Keys match the field names; ``voice_lambdas``
    and ``candidates`` are comma-separated.
    """

    model: str | None = None
    preset: str = "classical"
    criterion: str = DEFAULT_CRITERION
    tempo_scale: bool = True
    metre_id: bool = True
    downbeat: bool = True
    kde_std: float | None = None
    gate_bpm: float = DEFAULT_GATE_BPM
    voice_lambdas: tuple[float, ...] = (3.0, 1.0, 1.0, 5.0, 0.2, 1.0)
    v_max: int = 2
    cleanup: bool = False
    candidates: tuple[str, ...] | None = None
    title: str = "Transcription"

    def __post_init__(self):
        try:
            PerformanceModelParams.preset(self.preset)
            CriterionVector.parse(self.criterion)
            self.voice_params()
            for c in self.candidates or ():
                get_metre(c)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.kde_std is not None and not self.kde_std > 0:
            raise ConfigError("kde_std must be positive")
        if not self.gate_bpm > 0:
            raise ConfigError("gate_bpm must be positive")

    def perf_params(self) -> PerformanceModelParams:
        return PerformanceModelParams.preset(self.preset)

    def voice_params(self) -> VoiceCostParams:
        return VoiceCostParams.from_tuple(self.voice_lambdas, self.v_max)

    @classmethod
    def from_text(cls, text: str, base_dir: str | os.PathLike | None = None) -> "PipelineConfig":
        if not text.lstrip().startswith("["):
            text = "[pipeline]\n" + text
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        if "pipeline" not in parser:
            raise ConfigError("config needs a [pipeline] section")
        sec = parser["pipeline"]
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for key, raw in sec.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kwargs[key] = _convert(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        if kwargs.get("model") and base_dir is not None and not os.path.isabs(kwargs["model"]):
            kwargs["model"] = str(Path(base_dir) / kwargs["model"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "PipelineConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, Path(path).parent)


def _convert(key: str, raw: str):
    raw = raw.strip()
    if key in ("tempo_scale", "metre_id", "downbeat", "cleanup"):
        return _bool(raw)
    if key in ("kde_std", "gate_bpm"):
        return float(raw)
    if key == "v_max":
        return int(raw)
    if key == "voice_lambdas":
        return tuple(float(x) for x in raw.split(","))
    if key == "candidates":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


@dataclass
class PipelineState:
    """Output of one stage: the performance plus the score so far."""

    stage: str
    performance: list[PerformanceNote]
    score: ScoreDocument | None = None

    def to_dict(self) -> dict:
        perf = performance_to_dict(self.performance)
        if self.score is None:
            perf["stage"] = self.stage
            return perf
        d = score_to_dict(self.score, self.stage)
        d["performance"] = perf["notes"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineState":
        if not isinstance(d, dict):
            raise SchemaError("pipeline dump must be a JSON object")
        if d.get("kind") == "performance":
            return cls("performance", performance_from_dict(d))
        stage = d.get("stage")
        if stage not in STAGES[1:]:
            raise SchemaError(f"score dump has no resumable stage tag (got {stage!r})")
        perf = performance_from_dict({"schema_version": d.get("schema_version"), "kind": "performance",
                                      "notes": d.get("performance", [])})
        return cls(stage, perf, score_from_dict(d))

    def save(self, path: str | os.PathLike) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineState":
        return cls.from_dict(load_json(path))


@dataclass
class PipelineResult:
    score: ScoreDocument
    states: list[PipelineState] = field(default_factory=list)


def preliminary_transcription(
    notes: Sequence[PerformanceNote],
    model: ModelParams,
    perf: PerformanceModelParams,
    candidates: Sequence[str],
    voice_params: VoiceCostParams,
    metre: MetreSpec | None = None,
) -> ScoreDocument:
    """Quantize onsets (choosing the metre unless given), then hands, voices and offsets."""
    ordered = order_notes(notes)
    if not ordered:
        raise ValueError("no notes to transcribe")
    if metre is None:
        metre, res = select_metre(ordered, candidates, model.rhythm_models, perf)
    else:
        res = decode(ordered, metre, model.metre_model(metre.label).rhythm, perf)
    quantized = quantize_offsets(ordered, res)
    notes_out = assign_voices(split_hands(quantized), voice_params)
    return ScoreDocument(metre, tuple(notes_out), global_tempo(ordered, res), anacrusis_of(res))


class Pipeline:
    def __init__(self, model: ModelParams, config: PipelineConfig | None = None):
        self.model = model
        self.config = config or PipelineConfig()
        self.perf = self.config.perf_params()
        self.voice_params = self.config.voice_params()
        self.criterion = CriterionVector.parse(self.config.criterion)
        if self.config.candidates:
            self.candidates = [get_metre(c).label for c in self.config.candidates]
        else:
            self.candidates = [m for m in CANDIDATE_ORDER if m in model.metres]
        missing = [c for c in self.candidates if c not in model.metres]
        if missing or not self.candidates:
            raise ConfigError(f"model lacks tables for candidate metres {missing or 'any'}")

    def _cloud(self) -> TempoReferenceCloud:
        cloud = self.model.tempo_cloud
        if cloud is None:
            raise ValueError("model has no tempo reference cloud")
        if self.config.kde_std is not None:
            cloud = TempoReferenceCloud(cloud.points, self.config.kde_std)
        return cloud

    def _tempo_scale(self, doc: ScoreDocument) -> ScoreDocument:
        return estimate_tempo_scale(doc, self._cloud(), self.config.gate_bpm)

    def stage_quantized(self, state: PipelineState) -> ScoreDocument:
        notes = state.performance
        if self.config.cleanup:
            notes = cleanup(notes)
            state.performance = notes
        return preliminary_transcription(notes, self.model, self.perf, self.candidates, self.voice_params)

    def stage_tempo_scale(self, state: PipelineState) -> ScoreDocument:
        if not self.config.tempo_scale:
            return state.score
        return self._tempo_scale(state.score)

    def stage_metre(self, state: PipelineState) -> ScoreDocument:
        doc = state.score
        if not self.config.metre_id:
            return doc
        try:
            metre = identify_metre(doc)
        except StatisticsError as exc:
            logger.warning("metre identification skipped: %s", exc)
            return doc
        if metre.bar_length == doc.bar_length:
            return doc
        if metre.label not in self.model.metres:
            logger.warning("metre %s preferred but the model has no tables for it; kept %s",
                           metre.label, doc.metre.label)
            return doc
        if not state.performance:
            raise ValueError("re-quantization needs the performance notes, absent from the input dump")
        requantized = preliminary_transcription(
            state.performance, self.model, self.perf, [metre.label], self.voice_params, metre
        )
        return self._tempo_scale(requantized) if self.config.tempo_scale else requantized

    def stage_final(self, state: PipelineState) -> ScoreDocument:
        doc = state.score
        if not self.config.downbeat:
            return doc
        mm = self.model.metre_model(doc.metre.label)
        if mm.standardization is None:
            raise ValueError(f"model has no standardization for {doc.metre.label}")
        return estimate_downbeats(doc, mm.stats, mm.standardization, self.criterion)

    def run(self, start: PipelineState | Sequence[PerformanceNote],
            dump_dir: str | os.PathLike | None = None) -> PipelineResult:
        if not isinstance(start, PipelineState):
            start = PipelineState("performance", list(start))
        state = replace(start, performance=list(start.performance))
        states = [state]
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            state.save(Path(dump_dir) / f"{state.stage}.json")
        for stage in STAGES[STAGES.index(state.stage) + 1:]:
            try:
                doc = getattr(self, f"stage_{stage}")(state)
            except PipelineError:
                raise
            except (ValueError, KeyError) as exc:
                raise PipelineError(stage, str(exc)) from exc
            state = PipelineState(stage, state.performance, doc)
            states.append(state)
            if dump_dir is not None:
                state.save(Path(dump_dir) / f"{stage}.json")
        if state.score is None:
            raise PipelineError("quantized", "no score produced")
        return PipelineResult(state.score, states)


def run_pipeline(
    notes: Sequence[PerformanceNote] | PipelineState,
    model: ModelParams,
    config: PipelineConfig | None = None,
    dump_dir: str | os.PathLike | None = None,
) -> ScoreDocument:
    return Pipeline(model, config).run(notes, dump_dir).score

