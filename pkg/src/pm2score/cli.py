"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 input parse
error, 3 pipeline error, 4 model error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ScoreDocument, shift_score
from .metrics import batch_report, metrical_report
from .midi_io import (
    MidiParseError,
    SchemaError,
    dump_json,
    performance_to_dict,
    read_corpus,
    read_performance_midi,
    read_score_json,
    write_score_json,
)
from .model import ModelError, ModelParams, train_model
from .musicxml import to_musicxml
from .pipeline import ConfigError, Pipeline, PipelineConfig, PipelineError, PipelineState
from .post import shift_matrix
from .stats import N_STATS, StatisticsError, compute_statistics, standardize

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_PIPELINE, EXIT_MODEL = 0, 1, 2, 3, 4

logger = logging.getLogger("pm2score")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_model(path: str | None) -> ModelParams:
    if not path:
        raise ConfigError("no model given (use --model or set 'model' in the config)")
    return ModelParams.load(path)


def _read_performance_input(path: str) -> PipelineState:
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"{path}: no such file")
    if p.suffix.lower() in (".mid", ".midi"):
        return PipelineState("performance", read_performance_midi(p))
    return PipelineState.load(p)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    corpus = read_corpus(args.corpus_dir)
    if not corpus:
        raise SchemaError(f"{args.corpus_dir}: no score files found")
    model = train_model(corpus, args.metre or None, args.smoothing, args.kde_std)
    model.save(args.out)
    print(f"trained {', '.join(model.metres)} on {len(corpus)} pieces -> {args.out}")
    return EXIT_OK


def _transcribe_config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.model:
        overrides["model"] = args.model
    if args.preset:
        overrides["preset"] = args.preset
    if args.criterion:
        overrides["criterion"] = args.criterion
    for flag, key in (("no_tempo_scale", "tempo_scale"), ("no_metre_id", "metre_id"), ("no_downbeat", "downbeat")):
        if getattr(args, flag):
            overrides[key] = False
    if args.cleanup:
        overrides["cleanup"] = True
    if overrides:
        try:
            config = dataclasses.replace(config, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return config


def cmd_transcribe(args) -> int:
    config = _transcribe_config(args)
    model = _load_model(config.model)
    start = _read_performance_input(args.input)
    result = Pipeline(model, config).run(start, args.dump_intermediates)
    xml = to_musicxml(result.score, config.title)
    if args.out:
        Path(args.out).write_text(xml, encoding="utf-8")
    else:
        sys.stdout.write(xml)
    return EXIT_OK


def cmd_stats(args) -> int:
    doc = read_score_json(args.score)
    model = _load_model(args.model)
    mm = model.metre_model(doc.metre.label)
    vec = compute_statistics(doc, mm.stats, args.shift)
    if args.standardize:
        if mm.standardization is None:
            raise ModelError(f"model has no standardization for {doc.metre.label}")
        vec = standardize(vec, mm.standardization)
    print(json.dumps(vec.as_dict(), indent=1))
    return EXIT_OK


def _paired_files(ref_dir: Path, est_dir: Path) -> list[tuple[Path, Path]]:
    refs = {p.stem: p for p in sorted(ref_dir.glob("*.json"))}
    ests = {p.stem: p for p in sorted(est_dir.glob("*.json"))}
    common = sorted(set(refs) & set(ests))
    if not common:
        raise SchemaError(f"no matching file names between {ref_dir} and {est_dir}")
    return [(refs[k], ests[k]) for k in common]


def cmd_eval(args) -> int:
    ref, est = Path(args.ref), Path(args.est)
    if ref.is_dir() != est.is_dir():
        raise UsageError("ref and est must both be files or both be directories")
    if ref.is_dir():
        files = _paired_files(ref, est)
        batch = batch_report([(read_score_json(r), read_score_json(e)) for r, e in files])
        out = batch.to_dict()
        out["per_piece"] = {r.stem: rep.to_dict() for (r, _), rep in zip(files, batch.reports)}
    else:
        out = metrical_report(read_score_json(ref), read_score_json(est)).to_dict()
    print(json.dumps(out, indent=1))
    return EXIT_OK


def all_criterion_masks() -> np.ndarray:
    """(65536, 16) 0/1 matrix; row k encodes k with the first statistic as the top bit."""
    k = np.arange(2**N_STATS)[:, None]
    return ((k >> np.arange(N_STATS - 1, -1, -1)[None, :]) & 1).astype(float)


def format_bits(row: np.ndarray) -> str:
    s = "".join(str(int(b)) for b in row)
    return "-".join([s[0:3], s[3:6], s[6:9], s[9:12], s[12:15], s[15]])


def criterion_search(pairs: Sequence[tuple[ScoreDocument, ScoreDocument]], model: ModelParams) -> list[tuple[str, float]]:
    """Mean downbeat F over pieces for every criterion vector, best first.

    ``pairs`` are (reference, estimate); each estimate's statistics are
    computed once per shift and reused by all vectors.  Ties keep the
    vector order (all-zero vector first).
    """
    masks = all_criterion_masks()
    total = np.zeros(len(masks))
    for ref, est in pairs:
        mm = model.metre_model(est.metre.label)
        if mm.standardization is None:
            raise ModelError(f"model has no standardization for {est.metre.label}")
        Z = shift_matrix(est, mm.stats, mm.standardization)
        f = np.array([metrical_report(ref, shift_score(est, s)).downbeat_f for s in range(len(Z))])
        choice = np.argmax(Z @ masks.T, axis=0)  # first maximum per vector
        total += f[choice]
    mean = total / max(1, len(pairs))
    order = np.argsort(-mean, kind="stable")
    return [(format_bits(masks[k]), float(mean[k])) for k in order]


def cmd_criterion_search(args) -> int:
    model = _load_model(args.model)
    ref_dir = Path(args.ref_dir)
    est_dir = Path(args.est_dir) if args.est_dir else ref_dir
    pairs = [(read_score_json(r), read_score_json(e)) for r, e in _paired_files(ref_dir, est_dir)]
    rows = criterion_search(pairs, model)
    text = "".join(f"{bits}\t{f:.6f}\n" for bits, f in rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .rhythm import PerformanceModelParams
    from .synth import designed_piece, metronomic_performance, random_piece, render_performance

    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    (out / "performances").mkdir(parents=True, exist_ok=True)
    perf = PerformanceModelParams.preset(args.preset)
    for i in range(args.n):
        metre = args.metre[i % len(args.metre)]
        doc = designed_piece(rng, metre) if args.kind == "designed" else random_piece(rng, metre)
        name = f"piece{i:03d}"
        write_score_json(doc, out / "scores" / f"{name}.json")
        if args.deadpan:
            notes = metronomic_performance(doc)
        else:
            # start the tempo chain at the score's own tempo
            notes = render_performance(doc, rng, dataclasses.replace(perf, u_ini=doc.tempo_spqn))
        dump_json(performance_to_dict(notes), out / "performances" / f"{name}.json")
    print(f"wrote {args.n} scores and performances to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pm2score", description="Performance MIDI to piano score transcription.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train model tables from a score corpus")
    t.add_argument("corpus_dir")
    t.add_argument("-o", "--out", required=True, help="model JSON path")
    t.add_argument("--metre", action="append", help="metre to train (repeatable; default: all in corpus)")
    t.add_argument("--smoothing", type=float, default=0.1)
    t.add_argument("--kde-std", type=float, default=0.01)
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transcribe", help="transcribe a performance (MIDI, performance JSON or stage dump)")
    x.add_argument("input")
    x.add_argument("-o", "--out", help="MusicXML output path (default: stdout)")
    x.add_argument("--model")
    x.add_argument("--config")
    x.add_argument("--preset", choices=("classical", "popular"))
    x.add_argument("--criterion", help="16-bit criterion vector, dashes optional")
    x.add_argument("--no-tempo-scale", action="store_true")
    x.add_argument("--no-metre-id", action="store_true")
    x.add_argument("--no-downbeat", action="store_true")
    x.add_argument("--cleanup", action="store_true", help="merge/filter notes before quantization")
    x.add_argument("--dump-intermediates", metavar="DIR", help="write every stage's JSON to DIR")
    x.set_defaults(func=cmd_transcribe)

    s = sub.add_parser("stats", help="print the 16 statistics of a score")
    s.add_argument("score")
    s.add_argument("--model", required=True)
    s.add_argument("--shift", type=int, default=0, help="bar-grid shift in beats")
    s.add_argument("--standardize", action="store_true")
    s.set_defaults(func=cmd_stats)

    e = sub.add_parser("eval", help="metrical metrics of estimate(s) against reference(s)")
    e.add_argument("ref")
    e.add_argument("est")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("criterion-search", help="rank all 65536 criterion vectors by mean downbeat F")
    c.add_argument("ref_dir")
    c.add_argument("est_dir", nargs="?", help="estimates matched by file name (default: ref_dir)")
    c.add_argument("--model", required=True)
    c.add_argument("-o", "--out", help="TSV output (default: stdout)")
    c.set_defaults(func=cmd_criterion_search)

    g = sub.add_parser("synth", help="write a synthetic corpus of scores and performances")
    g.add_argument("out_dir")
    g.add_argument("-n", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--metre", action="append", default=None)
    g.add_argument("--kind", choices=("designed", "random"), default="designed")
    g.add_argument("--preset", choices=("classical", "popular"), default="classical")
    g.add_argument("--deadpan", action="store_true", help="metronomic performances")
    g.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "metre", None) is None and args.command == "synth":
            args.metre = ["4/4"]
    except UsageError as exc:
        print(f"pm2score: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        # reader went away (e.g. piped into head); nothing left to report
        sys.stderr.close()
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"pm2score: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MidiParseError, SchemaError, OSError) as exc:
        print(f"pm2score: input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except PipelineError as exc:
        print(f"pm2score: pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (ModelError, StatisticsError) as exc:
        print(f"pm2score: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
