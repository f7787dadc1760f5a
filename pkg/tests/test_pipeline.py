import dataclasses
import json

import numpy as np
import pytest

from pm2score.core import LH, RH, PerformanceNote, ScoreDocument, ScoreNote
from pm2score.midi_io import performance_to_dict, dump_json
from pm2score.pipeline import (
    STAGES,
    ConfigError,
    Pipeline,
    PipelineConfig,
    PipelineError,
    PipelineState,
    preliminary_transcription,
    run_pipeline,
)
from pm2score.post import TempoReferenceCloud, tempo_point
from pm2score.rhythm import PerformanceModelParams
from pm2score.synth import designed_piece, metronomic_performance, render_performance


def rel_onsets(doc):
    first = min(n.onset_tatum for n in doc.notes)
    return sorted((n.onset_tatum - first, n.pitch) for n in doc.notes)


def test_config_text_parsing(tmp_path):
    cfg = PipelineConfig.from_text("""
        # comment
        model = models/m.json
        preset = popular
        criterion = 100-001-010-000-000-1
        tempo_scale = off
        voice_lambdas = 3, 1, 1, 5, 0.2, 1
        candidates = 4/4, 3/4
        kde_std = 0.05   # wider kernel
    """, base_dir=tmp_path)
    assert cfg.model == str(tmp_path / "models/m.json")
    assert cfg.preset == "popular" and cfg.tempo_scale is False and cfg.kde_std == 0.05
    assert cfg.candidates == ("4/4", "3/4")
    assert cfg.perf_params().sigma_t == 0.03
    assert PipelineConfig.from_text("[pipeline]\ndownbeat = no\n").downbeat is False


@pytest.mark.parametrize("text", [
    "bogus = 1", "tempo_scale = maybe", "preset = jazz", "criterion = 0000",
    "voice_lambdas = 1, 2", "candidates = 5/4", "kde_std = -1", "v_max = x", "[other]\na = 1",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        PipelineConfig.from_text(text)


def test_config_file_missing(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_file(tmp_path / "none.cfg")


def test_metronomic_end_to_end(designed_model):
    rng = np.random.default_rng(12)
    for label in ("4/4", "3/4"):
        for _ in range(3):
            doc = designed_piece(rng, label)
            out = run_pipeline(metronomic_performance(doc), designed_model)
            assert out.metre.label == label
            assert rel_onsets(out) == rel_onsets(doc)
            assert out.anacrusis == doc.anacrusis
            assert out.tempo_spqn == pytest.approx(doc.tempo_spqn)


def test_disabled_stages_reproduce_preliminary(designed_model):
    rng = np.random.default_rng(13)
    doc = designed_piece(rng, "4/4")
    perf = render_performance(doc, rng, PerformanceModelParams.preset("classical"))
    cfg = PipelineConfig(tempo_scale=False, metre_id=False, downbeat=False)
    out = run_pipeline(perf, designed_model, cfg)
    pipe = Pipeline(designed_model, cfg)
    prelim = preliminary_transcription(perf, designed_model, pipe.perf, pipe.candidates, pipe.voice_params)
    assert out == prelim


def test_reentry_from_every_dump(designed_model, tmp_path):
    rng = np.random.default_rng(14)
    doc = designed_piece(rng, "3/4")
    perf = render_performance(doc, rng, PerformanceModelParams.preset("classical"))
    pipe = Pipeline(designed_model)
    full = pipe.run(perf, tmp_path / "dumps")
    assert sorted(p.stem for p in (tmp_path / "dumps").iterdir()) == sorted(STAGES)
    for stage in STAGES:
        state = PipelineState.load(tmp_path / "dumps" / f"{stage}.json")
        assert state.stage == stage
        assert pipe.run(state).score == full.score
    quantized = json.loads((tmp_path / "dumps" / "quantized.json").read_text())
    assert quantized["kind"] == "score" and len(quantized["performance"]) == len(perf)


def waltz(n_bars=8):
    notes = []
    for b in range(n_bars):
        notes += [ScoreNote(36 * b + 12 * j, 12, p, RH) for j, p in enumerate((72, 76, 79))]
        notes.append(ScoreNote(36 * b, 36, 48, LH))
    return ScoreDocument("3/4", tuple(notes), 0.5, 0)


def test_metre_identification_requantizes(designed_model):
    doc = waltz()
    perf = metronomic_performance(doc)
    cfg = PipelineConfig(candidates=("4/4",))
    result = Pipeline(designed_model, cfg).run(perf)
    stages = {s.stage: s.score for s in result.states if s.score is not None}
    assert stages["quantized"].metre.label == "4/4"
    assert result.score.metre.label == "3/4"
    assert rel_onsets(result.score) == rel_onsets(doc)


def test_metre_identification_skips_short_piece(designed_model, caplog):
    # three beats: too short for lag-4 auto-similarity
    perf = [PerformanceNote(0.5 * k, 0.5 * k + 0.4, 60 + 2 * k) for k in range(3)]
    out = run_pipeline(perf, designed_model, PipelineConfig(downbeat=False))
    assert out.notes and "metre identification skipped" in caplog.text


def test_tempo_scale_fixes_halved_decode(designed_model):
    rng = np.random.default_rng(16)
    doc = designed_piece(rng, "4/4")
    perf = metronomic_performance(doc, 0.5)
    # a grid that cannot express the true tempo forces a half-speed reading; its middle point is exactly 1.0
    narrow = PerformanceModelParams(u_min=0.8, u_max=1.25, n_tempo=3, u_ini=1.0)
    pipe = Pipeline(designed_model, PipelineConfig(tempo_scale=False, metre_id=False, downbeat=False))
    pipe.perf = narrow
    quantized = pipe.run(perf).score
    assert quantized.bpm == pytest.approx(60)
    # reference cloud concentrated at the doubled point: twice the BPM, half the mean value
    x, y = tempo_point(quantized)
    cloud = TempoReferenceCloud(np.array([[x + np.log(2), y - np.log(2)]]), 0.01)
    pipe = Pipeline(dataclasses.replace(designed_model, tempo_cloud=cloud),
                    PipelineConfig(metre_id=False, downbeat=False))
    pipe.perf = narrow
    out = pipe.run(perf).score
    assert out.bpm == pytest.approx(120)
    assert [(2 * n.onset_tatum, 2 * n.note_value) for n in out.notes] == [
        (n.onset_tatum, n.note_value) for n in quantized.notes]


def test_stage_tagged_errors(designed_model, tmp_path):
    with pytest.raises(PipelineError, match=r"^\[quantized\]"):
        run_pipeline([], designed_model)
    with pytest.raises(ConfigError):
        Pipeline(designed_model, PipelineConfig(candidates=("2/4",)))
    state = PipelineState("quantized", [], designed_piece(np.random.default_rng(0), "4/4"))
    path = tmp_path / "q.json"
    state.save(path)
    # a score dump without performance notes cannot be re-quantized, but still finishes when the metre holds
    assert Pipeline(designed_model).run(PipelineState.load(path)).score.notes


def test_cleanup_toggle(designed_model):
    doc = designed_piece(np.random.default_rng(17), "4/4", n_blocks=1)
    perf = metronomic_performance(doc)
    noisy = perf + [dataclasses.replace(perf[0], onset_sec=perf[0].onset_sec + 0.03, offset_sec=perf[0].onset_sec + 0.05)]
    cleaned = run_pipeline(noisy, designed_model, PipelineConfig(cleanup=True, downbeat=False))
    assert len(cleaned.notes) == len(perf)
