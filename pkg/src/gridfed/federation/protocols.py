"""Client-side protocol engine: training rounds, speaker federation, augmentation.

Randomness is derived per round as ``SeededRng(seed).child(phase, t)``; inside
a round, participant sampling uses the ``"sample"`` child and client ``i``
(position in the client list) trains with the ``("client", i)`` child. Pooled
centralised training behaves like client 0 of a one-client federation, which
is what makes the single-client equivalence exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from ..errors import ProtocolError, ValidationError
from ..gridworld import Environment, Episode, sample_episode
from ..metrics import speaker_bleu
from ..params import (
    AGENT_SEGMENTS,
    Upload,
    extract_segments,
    insert_segments,
    model_delta,
    participant_count,
    sample_participants,
)
from ..rng import SeededRng
from ..speaker import SpeakerParams, speaker_generate
from ..training import local_sgd
from .server import Server

EvalHook = Callable[[object], dict]


@dataclass(frozen=True)
class FederationConfig:
    eta: float = 1.0
    lr: float = 0.5
    tau: int = 3
    tau1: int = 1
    r: float = 0.2
    r1_unseen: float = 0.5
    r2_seen: float = 0.18
    rounds: int = 100
    pre_rounds: int = 30
    shared_segments: frozenset = frozenset({"lang_encoder"})
    seed: int = 0
    eval_every: int = 5
    pre_lr: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "shared_segments", frozenset(self.shared_segments))
        for name in ("r", "r1_unseen", "r2_seen"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if not self.eta > 0:
            raise ValidationError(f"eta must be positive, got {self.eta}")
        if self.lr < 0 or (self.pre_lr is not None and self.pre_lr < 0):
            raise ValidationError("learning rates must be non-negative")
        for name in ("tau", "tau1", "eval_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("rounds", "pre_rounds"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    def round_rng(self, phase: str, t: int) -> SeededRng:
        return SeededRng(self.seed).child(phase, t)


@dataclass(frozen=True)
class ClientState:
    client_id: str
    env: Environment
    dataset: tuple = ()
    local: object = None
    augmented: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "dataset", tuple(self.dataset))
        object.__setattr__(self, "augmented", tuple(self.augmented))

    @property
    def episodes(self) -> tuple[Episode, ...]:
        return self.dataset + self.augmented

    @property
    def n(self) -> int:
        return len(self.dataset) + len(self.augmented)


@dataclass
class RoundRecord:
    round: int
    participants: list[str]
    mean_loss: float
    cum_steps: int
    wall_clock: float = 0.0
    metrics: dict = field(default_factory=dict)

    def to_log(self) -> dict:
        """Deterministic log record (wall-clock time is omitted)."""
        rec = {
            "round": self.round,
            "participants": list(self.participants),
            "mean_loss": self.mean_loss,
            "cum_steps": self.cum_steps,
            "sr_seen": self.metrics.get("sr_seen"),
            "sr_unseen": self.metrics.get("sr_unseen"),
        }
        for k, v in sorted(self.metrics.items()):
            rec.setdefault(k, v)
        return rec


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    server: Server
    best_weights: np.ndarray
    best_score: float
    best_round: int
    cum_steps: int


class RoundOutcome(NamedTuple):
    server: Server
    clients: list
    participants: list
    mean_loss: float
    steps: int


class TrainResult(NamedTuple):
    best: object
    log: list
    state: TrainState


def matched_rounds(rounds: int, rate: float, population: int) -> int:
    """Pooled-training blocks giving the same gradient steps as a federation."""
    if rounds == 0:
        return 0
    k = participant_count(rate, population)
    return max(1, round(rounds * k / population))


def _check_clients(clients: Sequence[ClientState]) -> None:
    if not clients:
        raise ProtocolError("federation needs at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids: {ids}")
    specs = {c.local.spec for c in clients}
    if len(specs) != 1:
        raise ProtocolError("clients hold models with different partitions")


def federated_round(
    server: Server,
    clients: Sequence[ClientState],
    selected: Iterable[str],
    shared: frozenset,
    epochs: int,
    lr: float,
    eta: float,
    rng: SeededRng,
):
    """One broadcast / local-train / upload / aggregate cycle.

    Each selected client overwrites its ``shared`` segments with the server
    payload, trains every segment locally and uploads only the difference in
    the shared segments. Returns ``(server, clients, mean_loss, steps)``; the
    inputs are never mutated, so a failure leaves no partial state behind.
    """
    selected = set(selected)
    payload = server.broadcast()
    uploads, losses, steps = [], [], 0
    new_clients = list(clients)
    for i, client in enumerate(clients):
        if client.client_id not in selected:
            continue
        spec = client.local.spec
        start = client.local.with_params(insert_segments(client.local.params, spec, shared, payload))
        trained, stats = local_sgd(start, client.episodes, epochs, lr, rng.child("client", i))
        delta = model_delta(extract_segments(trained.params, spec, shared), payload)
        uploads.append(Upload(delta, client.n, client.client_id))
        losses.append(stats.mean_loss)
        steps += stats.steps
        new_clients[i] = replace(client, local=trained)
    if not uploads:
        return server.skip(), new_clients, float("nan"), 0
    return server.apply(uploads, eta), new_clients, float(np.mean(losses)), steps


def run_fed_round(server: Server, clients: Sequence[ClientState], cfg: FederationConfig, rng: SeededRng):
    """Full-model round over all clients with participation rate ``cfg.r``."""
    _check_clients(clients)
    ids = [c.client_id for c in clients]
    selected = sample_participants(ids, cfg.r, rng.child("sample"))
    shared = frozenset(clients[0].local.spec.names)
    server, clients, loss, steps = federated_round(
        server, clients, selected, shared, cfg.tau, cfg.lr, cfg.eta, rng
    )
    return RoundOutcome(server, clients, selected, loss, steps)


def _maybe_eval(t: int, total: int, cfg: FederationConfig, eval_hook, model) -> dict:
    if eval_hook is None:
        return {}
    if t == 0 or t % cfg.eval_every == 0 or t == total:
        return dict(eval_hook(model))
    return {}


def _better(score, best) -> bool:
    return score is not None and (best is None or score > best)


def run_federated_training(
    clients: Sequence[ClientState],
    cfg: FederationConfig,
    eval_hook: Optional[EvalHook] = None,
    select_key: str = "sr_unseen",
    phase: str = "train",
    resume: Optional[TrainState] = None,
) -> TrainResult:
    """``cfg.rounds`` full-model rounds, keeping the best global model.

    Every client's ``local`` must hold the same initial model. The best model
    is chosen by ``eval_hook(model)[select_key]`` (ties keep the earlier
    one); round 0, the initial model, is a candidate. Passing the ``state`` of
    an earlier result as ``resume`` continues that run bit-exactly.
    """
    _check_clients(clients)
    template = clients[0].local
    log: list[RoundRecord] = []
    if resume is None:
        server = Server(template.params)
        metrics = _maybe_eval(0, cfg.rounds, cfg, eval_hook, template)
        state = TrainState(server, template.params, metrics.get(select_key), 0, 0)
    else:
        state = replace(resume)
        server = state.server
    for t in range(server.round + 1, cfg.rounds + 1):
        t0 = time.perf_counter()
        server, clients, selected, loss, steps = run_fed_round(
            server, clients, cfg, cfg.round_rng(phase, t)
        )
        state.cum_steps += steps
        model = template.with_params(server.weights)
        metrics = _maybe_eval(t, cfg.rounds, cfg, eval_hook, model)
        if _better(metrics.get(select_key), state.best_score):
            state.best_score, state.best_weights, state.best_round = metrics[select_key], server.weights, t
        state.server = server
        log.append(RoundRecord(t, selected, loss, state.cum_steps, time.perf_counter() - t0, metrics))
    return TrainResult(template.with_params(state.best_weights), log, state)


def run_centralized_training(
    episodes: Sequence[Episode],
    init,
    cfg: FederationConfig,
    eval_hook: Optional[EvalHook] = None,
    rounds: Optional[int] = None,
    select_key: str = "sr_unseen",
    phase: str = "train",
    label: str = "centralized",
    resume: Optional[TrainState] = None,
) -> TrainResult:
    """Pooled-data baseline: ``rounds`` blocks of ``tau`` epochs.

    Block ``t`` shuffles with the same stream a one-client federation gives
    its only client in round ``t``. ``rounds`` defaults to ``cfg.rounds``;
    :func:`matched_rounds` gives the step-matched count for larger federations.
    """
    if not episodes:
        raise ValidationError("centralized training needs data")
    rounds = cfg.rounds if rounds is None else rounds
    if resume is None:
        model = init
        metrics = _maybe_eval(0, rounds, cfg, eval_hook, model)
        state = TrainState(Server(init.params), init.params, metrics.get(select_key), 0, 0)
    else:
        state = replace(resume)
        model = init.with_params(state.server.weights)
    log = []
    for t in range(state.server.round + 1, rounds + 1):
        t0 = time.perf_counter()
        rng = cfg.round_rng(phase, t)
        model, stats = local_sgd(model, episodes, cfg.tau, cfg.lr, rng.child("client", 0))
        state.cum_steps += stats.steps
        metrics = _maybe_eval(t, rounds, cfg, eval_hook, model)
        if _better(metrics.get(select_key), state.best_score):
            state.best_score, state.best_weights, state.best_round = metrics[select_key], model.params, t
        state.server = Server(model.params, t)
        log.append(RoundRecord(t, [label], stats.mean_loss, state.cum_steps, time.perf_counter() - t0, metrics))
    return TrainResult(init.with_params(state.best_weights), log, state)


def run_federated_speaker_training(
    clients: Sequence[ClientState],
    cfg: FederationConfig,
    val_set: Sequence[Episode],
    extra_eval: Optional[EvalHook] = None,
) -> TrainResult:
    """Federated speaker training with best-BLEU selection on ``val_set``.

    ``cfg.tau`` and ``cfg.lr`` are used as given; callers pass the speaker's
    own values. Clients' ``local`` must hold the initial :class:`SpeakerParams`.
    """
    def hook(speaker: SpeakerParams) -> dict:
        out = {"bleu_seen": speaker_bleu(speaker, val_set)}
        if extra_eval is not None:
            out.update(extra_eval(speaker))
        return out

    return run_federated_training(clients, cfg, hook, select_key="bleu_seen", phase="speaker")


def augment_client(
    client: ClientState,
    speaker: SpeakerParams,
    count: int,
    rng: SeededRng,
    min_moves: int,
    max_moves: int,
) -> ClientState:
    """Append ``count`` sampled routes with speaker-generated instructions."""
    if count < 0:
        raise ValidationError("augmentation count must be >= 0")
    if count == 0:
        return client
    new = []
    for _ in range(count):
        ep = sample_episode(client.env, rng, min_moves, max_moves)
        new.append(replace(ep, instruction=speaker_generate(speaker, ep.path, client.env)))
    return replace(client, augmented=client.augmented + tuple(new))


def make_clients(
    envs: Sequence[Environment],
    episodes_by_env: dict,
    init,
) -> list[ClientState]:
    return [ClientState(env.id, env, tuple(episodes_by_env.get(env.id, ())), init) for env in envs]


__all__ = [
    "AGENT_SEGMENTS",
    "ClientState",
    "FederationConfig",
    "RoundOutcome",
    "RoundRecord",
    "Server",
    "TrainResult",
    "TrainState",
    "augment_client",
    "federated_round",
    "make_clients",
    "matched_rounds",
    "run_centralized_training",
    "run_fed_round",
    "run_federated_speaker_training",
    "run_federated_training",
]
