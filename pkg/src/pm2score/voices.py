"""Hand-part split, cost-based voice separation, and offset correction.

Voice separation works per hand on clusters: the notes starting at one
onset plus the earlier notes still sounding there ("sustained" notes).
Every cluster gets a voice configuration, and the configuration
sequence minimising the summed vertical and horizontal costs is found
by Viterbi.  Voice 1 is the highest line.
"""
from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import LH, RH, ScoreNote, sort_notes

logger = logging.getLogger(__name__)

MAX_CONFIGS = 4096


@dataclass(frozen=True)
class VoiceCostParams:
    lambda2: float = 3.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 5.0
    lambda6: float = 0.2
    lambda7: float = 1.0
    v_max: int = 2

    @classmethod
    def from_tuple(cls, lambdas: Sequence[float], v_max: int = 2) -> "VoiceCostParams":
        if len(lambdas) != 6:
            raise ValueError("expected six costs (lambda2..lambda7)")
        return cls(*map(float, lambdas), v_max=int(v_max))

    def __post_init__(self):
        if self.v_max < 1:
            raise ValueError("v_max must be >= 1")
        if min(self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6, self.lambda7) < 0:
            raise ValueError("costs must be non-negative")


@dataclass(frozen=True)
class NoteCluster:
    onset_tatum: int
    member_notes: tuple[int, ...]
    sustained_notes: tuple[int, ...] = ()

    @property
    def notes(self) -> tuple[int, ...]:
        return self.member_notes + self.sustained_notes


@dataclass(frozen=True)
class VoiceConfig:
    labels: dict = field(default_factory=dict)

    def __getitem__(self, idx):
        return self.labels[idx]


# ---------------------------------------------------------------------------
# hands


def split_hands(
    notes: Sequence[ScoreNote],
    rh_start: float = 72.0,
    lh_start: float = 48.0,
    smoothing: float = 0.3,
    crossing_penalty: float = 10.0,
    max_span: int = 15,
    span_penalty: float = 2.0,
) -> list[ScoreNote]:
    """Assign hands by dynamic programming over per-onset split points.

    At every onset the pitch-sorted chord is cut once: the lowest ``s``
    notes go to the left hand.  The cost of a cut is the distance of each
    note to its hand's running pitch centroid, a penalty for hand spans
    wider than ``max_span`` semitones, and ``crossing_penalty`` when the
    left-hand centroid ends up above the right-hand one.  Centroids are
    exponential moving averages carried along each DP state's best path.
    Ties prefer putting fewer notes in the left hand.
    """
    notes = list(sort_notes(notes))
    if not notes:
        return []
    if len(notes) == 1:
        return [replace(notes[0], hand=RH)]
    groups: list[list[int]] = []
    for i, n in enumerate(notes):
        if groups and notes[groups[-1][0]].onset_tatum == n.onset_tatum:
            groups[-1].append(i)
        else:
            groups.append([i])

    def local(pitches, s, rh_c, lh_c):
        lh, rh = pitches[:s], pitches[s:]
        cost = sum(abs(p - lh_c) for p in lh) + sum(abs(p - rh_c) for p in rh)
        for part in (lh, rh):
            if part:
                cost += span_penalty * max(0, part[-1] - part[0] - max_span)
        new_lh = lh_c + smoothing * (np.mean(lh) - lh_c) if lh else lh_c
        new_rh = rh_c + smoothing * (np.mean(rh) - rh_c) if rh else rh_c
        if new_lh > new_rh:
            cost += crossing_penalty
        return cost, float(new_rh), float(new_lh)

    # each state: (cost, rh centroid, lh centroid)
    states = [(0.0, rh_start, lh_start)]
    back: list[list[int]] = []
    for g in groups:
        pitches = sorted(notes[i].pitch for i in g)
        new_states, ptr = [], []
        for s in range(len(pitches) + 1):
            best = None
            for j, (c0, rc, lc) in enumerate(states):
                c, nr, nl = local(pitches, s, rc, lc)
                if best is None or c0 + c < best[0]:
                    best = (c0 + c, nr, nl, j)
            new_states.append(best[:3])
            ptr.append(best[3])
        states = new_states
        back.append(ptr)
    s = min(range(len(states)), key=lambda k: (states[k][0], k))
    cuts = []
    for ptr in reversed(back):
        cuts.append(s)
        s = ptr[s]
    cuts.reverse()
    out = list(notes)
    for g, cut in zip(groups, cuts):
        order = sorted(g, key=lambda i: (notes[i].pitch, i))
        for rank, i in enumerate(order):
            out[i] = replace(notes[i], hand=LH if rank < cut else RH)
    return out


# ---------------------------------------------------------------------------
# clusters and costs


def build_clusters(notes: Sequence[ScoreNote]) -> list[NoteCluster]:
    """One cluster per distinct onset; ``notes`` must be in canonical order."""
    clusters = []
    by_onset: dict[int, list[int]] = defaultdict(list)
    for i, n in enumerate(notes):
        by_onset[n.onset_tatum].append(i)
    active: list[int] = []
    for onset in sorted(by_onset):
        active = [i for i in active if notes[i].offset_tatum > onset]
        clusters.append(NoteCluster(onset, tuple(by_onset[onset]), tuple(sorted(active))))
        active.extend(by_onset[onset])
    return clusters


def vertical_cost(
    cluster: NoteCluster, config: VoiceConfig, notes: Sequence[ScoreNote], params: VoiceCostParams
) -> float:
    idx = cluster.notes
    sustained = set(cluster.sustained_notes)
    cost = float(sum(config[i] for i in idx))
    for a, b in itertools.combinations(idx, 2):
        na, nb = notes[a], notes[b]
        sa, sb = config[a], config[b]
        if (na.pitch - nb.pitch) * (sa - sb) > 0:
            cost += params.lambda2
        if sa == sb:
            if na.offset_tatum != nb.offset_tatum:
                cost += params.lambda3
            if (a in sustained) != (b in sustained):
                cost += params.lambda4
    return cost


def horizontal_cost(
    prev_config: VoiceConfig,
    config: VoiceConfig,
    prev_cluster: NoteCluster,
    cluster: NoteCluster,
    notes: Sequence[ScoreNote],
    params: VoiceCostParams,
) -> float:
    cost = 0.0
    for i in cluster.sustained_notes:
        if i in prev_config.labels and prev_config[i] != config[i]:
            cost += params.lambda5
    onset = cluster.onset_tatum
    for a in prev_cluster.notes:
        end = notes[a].offset_tatum
        for c in cluster.member_notes:
            if prev_config[a] != config[c]:
                continue
            if end < onset:
                cost += params.lambda6
            elif end > onset:
                cost += params.lambda7
    return cost


def _configs(n: int, v_max: int) -> np.ndarray:
    return np.array(list(itertools.product(range(1, v_max + 1), repeat=n)), dtype=int).reshape(-1, n)


def _greedy_config(cluster: NoteCluster, notes, v_max: int) -> np.ndarray:
    idx = cluster.notes
    order = sorted(range(len(idx)), key=lambda k: (-notes[idx[k]].pitch, k))
    labels = np.ones(len(idx), dtype=int)
    for rank, k in enumerate(order):
        labels[k] = min(v_max, 1 + rank * v_max // len(idx))
    return labels[None, :]


def _vertical_costs(cluster: NoteCluster, L: np.ndarray, notes, params: VoiceCostParams) -> np.ndarray:
    idx = cluster.notes
    n_sus = set(cluster.sustained_notes)
    cost = L.sum(axis=1).astype(float)
    for a, b in itertools.combinations(range(len(idx)), 2):
        na, nb = notes[idx[a]], notes[idx[b]]
        dp = na.pitch - nb.pitch
        if dp:
            cost += params.lambda2 * ((dp * (L[:, a] - L[:, b])) > 0)
        same = L[:, a] == L[:, b]
        w = 0.0
        if na.offset_tatum != nb.offset_tatum:
            w += params.lambda3
        if (idx[a] in n_sus) != (idx[b] in n_sus):
            w += params.lambda4
        if w:
            cost += w * same
    return cost


def _horizontal_costs(prev: NoteCluster, Lp: np.ndarray, cur: NoteCluster, Lc: np.ndarray,
                      notes, params: VoiceCostParams) -> np.ndarray:
    cost = np.zeros((Lp.shape[0], Lc.shape[0]))
    pcol = {i: k for k, i in enumerate(prev.notes)}
    ccol = {i: k for k, i in enumerate(cur.notes)}
    for i in cur.sustained_notes:
        if i in pcol:
            cost += params.lambda5 * (Lp[:, pcol[i]][:, None] != Lc[:, ccol[i]][None, :])
    onset = cur.onset_tatum
    for a in prev.notes:
        end = notes[a].offset_tatum
        if end < onset:
            w = params.lambda6
        elif end > onset:
            w = params.lambda7
        else:
            continue
        if not w:
            continue
        for c in cur.member_notes:
            cost += w * (Lp[:, pcol[a]][:, None] == Lc[:, ccol[c]][None, :])
    return cost


def separate_voices(
    notes: Sequence[ScoreNote], clusters: Sequence[NoteCluster], params: VoiceCostParams = VoiceCostParams()
) -> list[VoiceConfig]:
    """Exact Viterbi over per-cluster voice configurations.

    Among equal-cost alternatives the lexicographically smallest label
    vector wins at every step.  Clusters whose configuration space would
    exceed ``MAX_CONFIGS`` get a single pitch-ordered labelling.
    """
    if not clusters:
        return []
    spaces = []
    for cl in clusters:
        n = len(cl.notes)
        if params.v_max ** n > MAX_CONFIGS:
            logger.warning("cluster at tatum %d too large (%d notes); greedy voices", cl.onset_tatum, n)
            spaces.append(_greedy_config(cl, notes, params.v_max))
        else:
            spaces.append(_configs(n, params.v_max))
    cost = _vertical_costs(clusters[0], spaces[0], notes, params)
    back = []
    for k in range(1, len(clusters)):
        h = _horizontal_costs(clusters[k - 1], spaces[k - 1], clusters[k], spaces[k], notes, params)
        tot = cost[:, None] + h
        arg = np.argmin(tot, axis=0)
        cost = tot[arg, np.arange(tot.shape[1])] + _vertical_costs(clusters[k], spaces[k], notes, params)
        back.append(arg)
    j = int(np.argmin(cost))
    choice = [j]
    for arg in reversed(back):
        j = int(arg[j])
        choice.append(j)
    choice.reverse()
    return [
        VoiceConfig(dict(zip(cl.notes, map(int, space[c]))))
        for cl, space, c in zip(clusters, spaces, choice)
    ]


def total_cost(notes, clusters, configs, params: VoiceCostParams = VoiceCostParams()) -> float:
    total = sum(vertical_cost(cl, cf, notes, params) for cl, cf in zip(clusters, configs))
    for k in range(1, len(clusters)):
        total += horizontal_cost(configs[k - 1], configs[k], clusters[k - 1], clusters[k], notes, params)
    return total


def apply_voices(notes: Sequence[ScoreNote], clusters, configs) -> list[ScoreNote]:
    out = list(notes)
    for cl, cf in zip(clusters, configs):
        for i in cl.member_notes:
            out[i] = replace(out[i], voice=cf[i])
    return out


def correct_offsets(notes: Sequence[ScoreNote]) -> list[ScoreNote]:
    """Unify chord values within a voice (minimum) and clip at the voice's next onset."""
    notes = list(sort_notes(notes))
    streams: dict[tuple[str, int], list[int]] = defaultdict(list)
    for i, n in enumerate(notes):
        streams[(n.hand, n.voice)].append(i)
    out = list(notes)
    for idx in streams.values():
        onsets = sorted({notes[i].onset_tatum for i in idx})
        nxt = dict(zip(onsets, onsets[1:] + [None]))
        groups: dict[int, list[int]] = defaultdict(list)
        for i in idx:
            groups[notes[i].onset_tatum].append(i)
        for onset, members in groups.items():
            value = min(notes[i].note_value for i in members)
            if nxt[onset] is not None:
                value = min(value, nxt[onset] - onset)
            for i in members:
                out[i] = replace(notes[i], note_value=max(1, value))
    return list(sort_notes(out))


def assign_voices(notes: Sequence[ScoreNote], params: VoiceCostParams = VoiceCostParams()) -> list[ScoreNote]:
    """Voice-separate each hand independently, then correct offsets."""
    out: list[ScoreNote] = []
    for hand in (RH, LH):
        part = list(sort_notes(n for n in notes if n.hand == hand))
        if not part:
            continue
        clusters = build_clusters(part)
        configs = separate_voices(part, clusters, params)
        out.extend(apply_voices(part, clusters, configs))
    return correct_offsets(out)
