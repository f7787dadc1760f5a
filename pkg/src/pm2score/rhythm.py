"""Metrical HMM for onset rhythm quantization.

The hidden state for note ``n`` is its metrical position ``b_n`` inside
the bar together with a local tempo ``u_n`` drawn from a log-spaced
grid (seconds per quarter note).  A chord flag ``g_n`` distinguishes a
note that shares the previous onset (CH) from one that advances (NC).
Decoding is an exact Viterbi pass over (position, tempo) pairs, with the
CH/NC choice maximised inside the transition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    TATUMS_PER_BEAT,
    MetreSpec,
    PerformanceNote,
    ScoreDocument,
    ScoreNote,
    get_metre,
    metrical_position,
)

CH = "CH"
NC = "NC"
NEG_INF = -np.inf
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class RhythmModelParams:
    """Score model for one metre: P(b_1), chord probabilities and NC transitions."""

    metre: MetreSpec
    initial: np.ndarray  # (B,)
    chord: np.ndarray  # (B, 2): columns CH, NC
    transition: np.ndarray  # (B, B), rows sum to 1

    def __post_init__(self):
        object.__setattr__(self, "metre", get_metre(self.metre))
        B = self.metre.bar_length
        for name, shape in (("initial", (B,)), ("chord", (B, 2)), ("transition", (B, B))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    @property
    def bar_length(self) -> int:
        return self.metre.bar_length

    def to_dict(self) -> dict:
        return {
            "metre": self.metre.label,
            "initial": self.initial.tolist(),
            "chord": self.chord.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RhythmModelParams":
        return cls(get_metre(d["metre"]), np.array(d["initial"]), np.array(d["chord"]),
                   np.array(d["transition"]))


@dataclass(frozen=True)
class PerformanceModelParams:
    u_min: float = 0.3
    u_max: float = 1.5
    n_tempo: int = 50
    sigma_u: float = 3.32e-2
    u_ini: float = math.sqrt(0.3 * 1.5)
    sigma_ini_u: float = 3 * 3.32e-2
    sigma_t: float = 0.02
    lambda_t: float = 0.0101

    def __post_init__(self):
        if not 0 < self.u_min < self.u_max:
            raise ValueError("need 0 < u_min < u_max")
        if self.n_tempo < 2:
            raise ValueError("tempo grid needs at least two points")
        for name in ("sigma_u", "sigma_ini_u", "sigma_t", "lambda_t"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def preset(cls, name: str) -> "PerformanceModelParams":
        if name == "classical":
            sigma_u, sigma_t = 3.32e-2, 0.02
        elif name == "popular":
            sigma_u, sigma_t = 3.32e-3, 0.03
        else:
            raise ValueError(f"unknown preset {name!r}")
        return cls(sigma_u=sigma_u, sigma_ini_u=3 * sigma_u, sigma_t=sigma_t)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DecodeResult:
    onset_tatums: list[int]
    metrical_positions: list[int]
    chord_flags: list[str]
    tempo_path: list[float]
    log_joint: float
    metre: MetreSpec | None = None
    tempo_indices: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# training


def count_rhythm(docs: Sequence[ScoreDocument], metre: MetreSpec):
    B = metre.bar_length
    init = np.zeros(B)
    chord = np.zeros((B, 2))
    trans = np.zeros((B, B))
    for doc in docs:
        if not doc.notes:
            continue
        pos = doc.positions()
        init[pos[0]] += 1
        for k in range(1, len(doc.notes)):
            prev = pos[k - 1]
            if doc.notes[k].onset_tatum == doc.notes[k - 1].onset_tatum:
                chord[prev, 0] += 1
            else:
                chord[prev, 1] += 1
                trans[prev, pos[k]] += 1
    return init, chord, trans


def train_rhythm_model(
    corpus: Sequence[ScoreDocument], metre: MetreSpec | str, smoothing: float = 0.1,
    hand: str | None = None,
) -> RhythmModelParams:
    """Additively smoothed relative frequencies of positions, chord flags and NC moves."""
    metre = get_metre(metre)
    if not corpus:
        raise ValueError("empty training corpus")
    if smoothing < 0:
        raise ValueError("smoothing must be non-negative")
    for i, doc in enumerate(corpus):
        if doc.bar_length != metre.bar_length:
            raise ValueError(
                f"corpus piece {i} has bar length {doc.bar_length}, model expects {metre.bar_length}"
            )
    docs = [d.part(hand) for d in corpus]
    init, chord, trans = count_rhythm(docs, metre)
    B = metre.bar_length
    a = smoothing
    init = (init + a) / (init.sum() + B * a) if init.sum() + B * a > 0 else np.full(B, 1 / B)
    chord = chord + a
    rows = chord.sum(axis=1, keepdims=True)
    chord = np.where(rows > 0, chord / np.where(rows > 0, rows, 1), 0.5)
    trans = trans + a
    rows = trans.sum(axis=1, keepdims=True)
    trans = np.where(rows > 0, trans / np.where(rows > 0, rows, 1), 1.0 / B)
    return RhythmModelParams(metre, init, chord, trans)


# ---------------------------------------------------------------------------
# model terms


def tempo_grid(params: PerformanceModelParams) -> np.ndarray:
    return np.geomspace(params.u_min, params.u_max, params.n_tempo)


def _discrete_gauss_logrow(grid: np.ndarray, mean, sigma: float) -> np.ndarray:
    """Gaussian log-density at grid values, renormalised over the grid."""
    mean = np.asarray(mean, dtype=float)[..., None]
    z = -0.5 * ((grid - mean) / sigma) ** 2
    m = z.max(axis=-1, keepdims=True)
    return z - (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))


def tempo_log_initial(params: PerformanceModelParams) -> np.ndarray:
    return _discrete_gauss_logrow(tempo_grid(params), params.u_ini, params.sigma_ini_u)


def tempo_log_transition(params: PerformanceModelParams) -> np.ndarray:
    grid = tempo_grid(params)
    return _discrete_gauss_logrow(grid, grid, params.sigma_u)


def score_transition_logprob(b_prev: int, b: int, g: str, model: RhythmModelParams) -> float:
    if g == CH:
        return float(_log(model.chord[b_prev, 0])) if b == b_prev else -math.inf
    return float(_log(model.chord[b_prev, 1] * model.transition[b_prev, b]))


def tatum_gap(b_prev: int, b: int, g: str, bar_length: int) -> int:
    if g == CH:
        return 0
    return b - b_prev if b > b_prev else b - b_prev + bar_length


def onset_time_loglik(t_prev, t, tau_prev, tau, u_prev, g, params: PerformanceModelParams) -> float:
    if g == CH:
        if t < t_prev:
            return -math.inf
        return -math.log(params.lambda_t) - (t - t_prev) / params.lambda_t
    mean_gap = u_prev * (tau - tau_prev) / TATUMS_PER_BEAT
    z = ((t - t_prev) - mean_gap) / params.sigma_t
    return -0.5 * z * z - math.log(params.sigma_t) - _LOG_SQRT_2PI


# ---------------------------------------------------------------------------
# decoding


def order_notes(notes: Sequence[PerformanceNote]) -> list[PerformanceNote]:
    """Onset-ascending order; notes within 1 ms count as simultaneous and go low to high."""
    ordered = sorted(notes, key=lambda n: (n.onset_sec, n.pitch))
    out: list[PerformanceNote] = []
    group: list[PerformanceNote] = []
    for n in ordered:
        if group and n.onset_sec - group[0].onset_sec > 1e-3:
            out.extend(sorted(group, key=lambda x: (x.pitch, x.onset_sec)))
            group = []
        group.append(n)
    out.extend(sorted(group, key=lambda x: (x.pitch, x.onset_sec)))
    return out


def decode(
    notes: Sequence[PerformanceNote],
    metre: MetreSpec | str,
    rhythm: RhythmModelParams,
    perf: PerformanceModelParams,
) -> DecodeResult:
    """Joint Viterbi over metrical positions and grid tempi.

    ``notes`` are used in the given order (see :func:`order_notes`).
    """
    metre = get_metre(metre)
    if not notes:
        raise ValueError("cannot decode an empty note sequence")
    if rhythm.bar_length != metre.bar_length:
        raise ValueError("rhythm model bar length does not match metre")
    B = metre.bar_length
    grid = tempo_grid(perf)
    U = len(grid)
    log_init_b = _log(rhythm.initial)
    log_ch = _log(rhythm.chord[:, 0])
    # NC score term S[b', b]
    log_nc = _log(rhythm.chord[:, 1])[:, None] + _log(rhythm.transition)
    log_q = tempo_log_transition(perf)
    idx = np.arange(B)
    gap = (idx[None, :] - idx[:, None]) % B
    gap[gap == 0] = B
    # predicted inter-onset interval per (b', b, u')
    pred = gap[:, :, None] * grid[None, None, :] / TATUMS_PER_BEAT
    log_norm = -math.log(perf.sigma_t) - _LOG_SQRT_2PI
    t = np.array([n.onset_sec for n in notes], dtype=float)

    delta = log_init_b[:, None] + tempo_log_initial(perf)[None, :]
    back_u, back_b, back_g = [], [], []
    for n in range(1, len(notes)):
        dt = t[n] - t[n - 1]
        z = (dt - pred) / perf.sigma_t
        nc = delta[:, None, :] + log_nc[:, :, None] + (log_norm - 0.5 * z * z)  # (b', b, u')
        best_b = np.argmax(nc, axis=0)  # (b, u')
        m = np.take_along_axis(nc, best_b[None], axis=0)[0]
        if dt >= 0:
            ch_time = -math.log(perf.lambda_t) - dt / perf.lambda_t
            ch = delta + log_ch[:, None] + ch_time  # b' = b
            use_ch = ch >= m
            m = np.where(use_ch, ch, m)
            best_b = np.where(use_ch, idx[:, None], best_b)
        else:
            use_ch = np.zeros((B, U), dtype=bool)
        # tempo move u' -> u
        cand = m[:, :, None] + log_q[None, :, :]  # (b, u', u)
        bu = np.argmax(cand, axis=1)  # (b, u)
        delta = np.take_along_axis(cand, bu[:, None, :], axis=1)[:, 0, :]
        back_u.append(bu)
        back_b.append(best_b)
        back_g.append(use_ch)

    flat = int(np.argmax(delta))
    b, u = divmod(flat, U)
    log_joint = float(delta[b, u])
    bs, us, gs = [b], [u], []
    for k in range(len(notes) - 2, -1, -1):
        u_prev = int(back_u[k][b, u])
        b_prev = int(back_b[k][b, u_prev])
        gs.append(CH if back_g[k][b, u_prev] else NC)
        b, u = b_prev, u_prev
        bs.append(b)
        us.append(u)
    bs.reverse()
    us.reverse()
    gs.reverse()
    flags = [NC] + gs
    taus = [0]
    for k in range(1, len(bs)):
        taus.append(taus[-1] + tatum_gap(bs[k - 1], bs[k], flags[k], B))
    return DecodeResult(
        onset_tatums=taus,
        metrical_positions=bs,
        chord_flags=flags,
        tempo_path=[float(grid[i]) for i in us],
        log_joint=log_joint,
        metre=metre,
        tempo_indices=us,
    )


def path_log_joint(
    notes: Sequence[PerformanceNote],
    positions: Sequence[int],
    flags: Sequence[str],
    tempo_indices: Sequence[int],
    rhythm: RhythmModelParams,
    perf: PerformanceModelParams,
) -> float:
    """Log joint probability of one explicit path (used for re-scoring and checks)."""
    B = rhythm.bar_length
    grid = tempo_grid(perf)
    log_q = tempo_log_transition(perf)
    total = float(_log(rhythm.initial[positions[0]])) + float(tempo_log_initial(perf)[tempo_indices[0]])
    tau_prev = 0
    for n in range(1, len(notes)):
        b0, b1, g = positions[n - 1], positions[n], flags[n]
        total += score_transition_logprob(b0, b1, g, rhythm)
        tau = tau_prev + tatum_gap(b0, b1, g, B)
        total += onset_time_loglik(notes[n - 1].onset_sec, notes[n].onset_sec, tau_prev, tau,
                                   grid[tempo_indices[n - 1]], g, perf)
        total += float(log_q[tempo_indices[n - 1], tempo_indices[n]])
        tau_prev = tau
    return total


def select_metre(
    notes: Sequence[PerformanceNote],
    candidates: Sequence[MetreSpec | str],
    models: dict,
    perf: PerformanceModelParams,
) -> tuple[MetreSpec, DecodeResult]:
    """Decode under each candidate metre and keep the most probable (first wins ties)."""
    if not candidates:
        raise ValueError("no candidate metres")
    best = None
    for cand in candidates:
        metre = get_metre(cand)
        model = models[metre.label]
        res = decode(notes, metre, model, perf)
        if best is None or res.log_joint > best[1].log_joint:
            best = (metre, res)
    return best


def quantize_offsets(notes: Sequence[PerformanceNote], result: DecodeResult) -> list[ScoreNote]:
    """Round each duration to whole tatums at the decoded local tempo (at least one tatum)."""
    out = []
    for note, tau, u in zip(notes, result.onset_tatums, result.tempo_path):
        r = math.floor((note.offset_sec - note.onset_sec) / u * TATUMS_PER_BEAT + 0.5)
        out.append(ScoreNote(tau, max(1, r), note.pitch))
    return out


def global_tempo(notes: Sequence[PerformanceNote], result: DecodeResult) -> float:
    """Seconds per quarter note over the whole span; falls back to the mean decoded tempo."""
    span_tau = result.onset_tatums[-1] - result.onset_tatums[0]
    if span_tau > 0:
        return (notes[-1].onset_sec - notes[0].onset_sec) / (span_tau / TATUMS_PER_BEAT)
    return float(np.mean(result.tempo_path))


def anacrusis_of(result: DecodeResult) -> int:
    return result.metrical_positions[0] % result.metre.bar_length


def check_positions(result: DecodeResult) -> bool:
    return all(
        metrical_position(t, result.metre, anacrusis_of(result)) == b
        for t, b in zip(result.onset_tatums, result.metrical_positions)
    )
