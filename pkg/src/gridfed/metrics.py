"""Navigation metrics (SR, SPL, OSR, NE, nDTW, CLS) and corpus BLEU."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .agent import AgentParams, Trajectory, rollout
from .errors import ValidationError
from .gridworld import Cell, Environment, Episode, Instruction, Path, distance
from .speaker import SpeakerParams, speaker_generate

SPLITS = ("seen_val", "unseen_val")


def geodesic(env: Environment, a: Cell, b: Cell) -> int:
    return distance(env, a, b)


def success(traj: Trajectory, env: Environment, goal: Cell, d_success: float = 1.0) -> bool:
    """Stopped (explicit STOP) within ``d_success`` moves of the goal."""
    return traj.terminated and geodesic(env, traj.final, goal) <= d_success


def osr(traj: Trajectory, env: Environment, goal: Cell, d_success: float = 1.0) -> bool:
    """Some visited cell, start included, lies within ``d_success`` of the goal."""
    return any(geodesic(env, c, goal) <= d_success for c in set(traj.cells))


def spl(results: Sequence[tuple[bool, float, float]]) -> float:
    """Mean of ``S_i * l_i / max(p_i, l_i)``; a zero-length success counts 1."""
    if not results:
        raise ValidationError("spl needs at least one result")
    total = 0.0
    for succeeded, shortest, traveled in results:
        if shortest < 0 or traveled < 0:
            raise ValidationError("path lengths must be non-negative")
        if not succeeded:
            continue
        denom = max(traveled, shortest)
        total += 1.0 if denom == 0 else shortest / denom
    return total / len(results)


def _cells(path) -> np.ndarray:
    cells = path.cells if hasattr(path, "cells") else path
    if len(cells) == 0:
        raise ValidationError("path must be non-empty")
    return np.asarray(cells, dtype=np.float64).reshape(-1, 2)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def dtw(reference, predicted) -> float:
    """Dynamic time warping with Euclidean cell-centre costs."""
    cost = _pairwise(_cells(reference), _cells(predicted))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def ndtw(reference, predicted, d_th: float = 1.0) -> float:
    if d_th <= 0:
        raise ValidationError("d_th must be positive")
    return math.exp(-dtw(reference, predicted) / (len(_cells(reference)) * d_th))


def _length(cells: np.ndarray) -> float:
    if len(cells) < 2:
        return 0.0
    return float(np.sqrt((np.diff(cells, axis=0) ** 2).sum(axis=1)).sum())


def cls(reference, predicted, d_th: float = 1.0) -> float:
    """Coverage weighted by length score."""
    if d_th <= 0:
        raise ValidationError("d_th must be positive")
    R, Q = _cells(reference), _cells(predicted)
    coverage = float(np.mean(np.exp(-_pairwise(R, Q).min(axis=1) / d_th)))
    len_r, len_q = _length(R), _length(Q)
    expected = coverage * len_r
    denom = expected + abs(expected - len_q)
    if denom == 0:
        return coverage
    return coverage * expected / denom


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


ZERO_MATCH_FLOOR = 0.1


def bleu(candidates: Sequence[Instruction], references: Sequence[Instruction], max_n: int = 4) -> float:
    """Corpus BLEU-4 against a single reference per candidate.

    Unigram precision is unsmoothed except that a zero match count is floored
    at ``0.1`` matches; higher orders use add-one smoothing on both counts.
    """
    if len(candidates) != len(references):
        raise ValidationError("candidate and reference corpora differ in size")
    if not candidates:
        raise ValidationError("bleu needs a non-empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c = cand.tokens if isinstance(cand, Instruction) else tuple(cand)
        r = ref.tokens if isinstance(ref, Instruction) else tuple(ref)
        cand_len += len(c)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            cg, rg = _ngrams(c, n), _ngrams(r, n)
            matches[n - 1] += sum(min(k, rg[g]) for g, k in cg.items())
            totals[n - 1] += sum(cg.values())
    log_p = 0.0
    for n in range(max_n):
        if n == 0:
            if totals[0] == 0:
                return 0.0
            p = (matches[0] or ZERO_MATCH_FLOOR) / totals[0]
        else:
            p = (matches[n] + 1) / (totals[n] + 1)
        log_p += math.log(p) / max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def speaker_bleu(speaker: SpeakerParams, episodes: Sequence[Episode]) -> float:
    """Corpus BLEU of the speaker's instructions against the episodes' own."""
    cands = [speaker_generate(speaker, ep.path, ep.env) for ep in episodes]
    return bleu(cands, [ep.instruction for ep in episodes])


@dataclass(frozen=True)
class EvalReport:
    split: str
    sr: float
    spl: float
    osr: float
    ne: float
    ndtw: float
    cls: float
    count: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**d)


Policy = Union[AgentParams, Mapping[str, AgentParams], Callable[[Episode], Trajectory]]


def _resolve(agents: Policy, episode: Episode) -> Callable[[Episode], Trajectory]:
    if isinstance(agents, AgentParams):
        agent = agents
    elif isinstance(agents, Mapping):
        try:
            agent = agents[episode.env_id]
        except KeyError:
            raise ValidationError(f"no agent for environment {episode.env_id!r}") from None
    else:
        return agents
    return lambda ep: rollout(agent, ep.env, ep.instruction, ep.start)


def episode_metrics(traj: Trajectory, episode: Episode, d_success: float = 1.0, d_th: float = 1.0) -> dict:
    env, goal = episode.env, episode.goal
    shortest = geodesic(env, episode.start, goal)
    ok = success(traj, env, goal, d_success)
    return {
        "success": ok,
        "oracle": osr(traj, env, goal, d_success),
        "ne": geodesic(env, traj.final, goal),
        "spl": (ok, shortest, traj.steps_taken),
        "ndtw": ndtw(episode.path, Path(traj.cells), d_th),
        "cls": cls(episode.path, Path(traj.cells), d_th),
    }


def evaluate(
    agents: Policy,
    episodes: Sequence[Episode],
    split: str,
    d_success: float = 1.0,
    d_th: float = 1.0,
) -> EvalReport:
    """Roll out every episode and average the navigation metrics.

    ``agents`` is a single model, a mapping from environment id to model (for
    per-client local models), or any callable returning a trajectory.
    """
    if not episodes:
        raise ValidationError("evaluate needs at least one episode")
    rows = []
    for ep in episodes:
        traj = _resolve(agents, ep)(ep)
        rows.append(episode_metrics(traj, ep, d_success, d_th))
    n = len(rows)
    return EvalReport(
        split=split,
        sr=sum(r["success"] for r in rows) / n,
        spl=spl([r["spl"] for r in rows]),
        osr=sum(r["oracle"] for r in rows) / n,
        ne=sum(r["ne"] for r in rows) / n,
        ndtw=math.fsum(r["ndtw"] for r in rows) / n,
        cls=math.fsum(r["cls"] for r in rows) / n,
        count=n,
    )


def success_rate(agents: Policy, episodes: Sequence[Episode], d_success: float = 1.0) -> float:
    """SR alone; cheaper than a full :func:`evaluate`."""
    hits = 0
    for ep in episodes:
        traj = _resolve(agents, ep)(ep)
        hits += success(traj, ep.env, ep.goal, d_success)
    return hits / len(episodes)
