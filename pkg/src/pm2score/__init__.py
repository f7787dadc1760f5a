"""Piano performance MIDI to score transcription.

Onsets are quantized with a metrical HMM, notes are split into hands and
voices, and three global post-estimators correct the tempo scale, the
metre and the bar-line phase using non-local score statistics.
"""
from .core import METRES, MetreSpec, PerformanceNote, ScoreDocument, ScoreNote
from .model import ModelParams, train_model
from .musicxml import to_musicxml
from .pipeline import Pipeline, PipelineConfig, run_pipeline

__all__ = [
    "METRES", "MetreSpec", "ModelParams", "PerformanceNote", "Pipeline", "PipelineConfig",
    "ScoreDocument", "ScoreNote", "run_pipeline", "to_musicxml", "train_model",
]
__version__ = "0.1.0"
