"""Pre-exploration on unseen environments and its baseline strategies.

Unseen clients train on routes they sampled themselves, labelled by the
speaker. In the federated variants the server keeps only the shared segments
(by default the language encoder); the trajectory encoder and decision head of
each client never leave it and persist across rounds.
"""

from __future__ import annotations

import time
from dataclasses import replace
from typing import NamedTuple, Optional, Sequence

from ..errors import ProtocolError, ValidationError
from ..params import extract_segments, sample_participants, shared_fraction
from ..rng import SeededRng
from ..training import local_sgd
from .protocols import (
    ClientState,
    EvalHook,
    FederationConfig,
    RoundRecord,
    _check_clients,
    _maybe_eval,
    federated_round,
    matched_rounds,
    run_centralized_training,
)
from .server import Server

STRATEGIES = ("centralized", "env_based", "fed_full", "fed_lan", "fed_lan_seen")
PHASE = "pre"


class PreRoundOutcome(NamedTuple):
    server: Server
    seen: list
    unseen: list
    participants: list
    mean_loss: float
    steps: int


class PreExplorationResult(NamedTuple):
    models: dict
    log: list
    shared_fraction: float


def run_pre_exploration_round(
    server: Server,
    seen_clients: Sequence[ClientState],
    unseen_clients: Sequence[ClientState],
    cfg: FederationConfig,
    rng: SeededRng,
    shared: Optional[frozenset] = None,
) -> PreRoundOutcome:
    """Sample seen and unseen participants, train locally, aggregate shared segments.

    Seen clients are drawn at ``cfg.r2_seen`` and unseen ones at
    ``cfg.r1_unseen``; every participant trains its full model for
    ``cfg.tau1`` epochs.
    """
    shared = cfg.shared_segments if shared is None else frozenset(shared)
    clients = list(seen_clients) + list(unseen_clients)
    _check_clients(clients)
    spec = clients[0].local.spec
    if len(server.weights) != spec.shared_length(shared):
        raise ProtocolError(
            f"server payload has {len(server.weights)} values, "
            f"shared segments {sorted(shared)} need {spec.shared_length(shared)}"
        )
    selected = []
    if seen_clients:
        selected += sample_participants([c.client_id for c in seen_clients], cfg.r2_seen, rng.child("sample-seen"))
    if unseen_clients:
        selected += sample_participants([c.client_id for c in unseen_clients], cfg.r1_unseen, rng.child("sample"))
    server, clients, loss, steps = federated_round(
        server, clients, selected, shared, cfg.tau1, cfg.lr, cfg.eta, rng
    )
    n_seen = len(seen_clients)
    return PreRoundOutcome(server, clients[:n_seen], clients[n_seen:], selected, loss, steps)


def _with_init(clients: Sequence[ClientState], init) -> list[ClientState]:
    if init is None:
        return list(clients)
    return [replace(c, local=init) for c in clients]


def run_pre_exploration(
    strategy: str,
    seen_clients: Sequence[ClientState],
    unseen_clients: Sequence[ClientState],
    cfg: FederationConfig,
    init=None,
    eval_hook: Optional[EvalHook] = None,
) -> PreExplorationResult:
    """Adapt to the unseen environments with one of :data:`STRATEGIES`.

    Returns one model per unseen environment: the local model after its last
    local training (the single pooled model for ``centralized``). Local
    training uses ``cfg.pre_lr`` when set, else ``cfg.lr``.
    """
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if not unseen_clients:
        raise ValidationError("pre-exploration needs at least one unseen client")
    if cfg.pre_lr is not None:
        cfg = replace(cfg, lr=cfg.pre_lr)
    unseen = _with_init(unseen_clients, init)
    for c in unseen:
        if c.n == 0:
            raise ValidationError(f"unseen client {c.client_id} holds no data")
    template = unseen[0].local
    spec = template.spec
    T = cfg.pre_rounds
    log: list[RoundRecord] = []

    def hook(models: dict, t: int, total: int) -> dict:
        return _maybe_eval(t, total, cfg, eval_hook, models)

    if strategy == "centralized":
        pooled = [ep for c in unseen for ep in c.episodes]
        rounds = matched_rounds(T, cfg.r1_unseen, len(unseen))
        ids = [c.env.id for c in unseen]
        ccfg = replace(cfg, tau=cfg.tau1)
        per_env = lambda m: {i: m for i in ids}  # noqa: E731
        result = run_centralized_training(
            pooled,
            template,
            ccfg,
            eval_hook=None if eval_hook is None else (lambda m: eval_hook(per_env(m))),
            rounds=rounds,
            select_key="__final__",
            phase=PHASE,
        )
        final = template.with_params(result.state.server.weights)
        return PreExplorationResult(per_env(final), result.log, 1.0)

    if strategy == "env_based":
        rounds = matched_rounds(T, cfg.r1_unseen, len(unseen))
        models = {c.env.id: c.local for c in unseen}
        cum = 0
        hook(models, 0, rounds)
        for t in range(1, rounds + 1):
            t0 = time.perf_counter()
            rng = cfg.round_rng(PHASE, t)
            losses = []
            for i, c in enumerate(unseen):
                trained, stats = local_sgd(models[c.env.id], c.episodes, cfg.tau1, cfg.lr, rng.child("client", i))
                models[c.env.id] = trained
                losses.append(stats.mean_loss)
                cum += stats.steps
            metrics = hook(models, t, rounds)
            ids = [c.client_id for c in unseen]
            log.append(RoundRecord(t, ids, sum(losses) / len(losses), cum, time.perf_counter() - t0, metrics))
        return PreExplorationResult(models, log, 0.0)

    if strategy == "fed_full":
        shared, seen = frozenset(spec.names), []
    elif strategy == "fed_lan":
        shared, seen = cfg.shared_segments, []
    else:
        shared, seen = cfg.shared_segments, _with_init(seen_clients, init)
        if not seen:
            raise ValidationError("fed_lan_seen needs seen clients")
    server = Server(extract_segments(template.params, spec, shared))
    models = {c.env.id: c.local for c in unseen}
    hook(models, 0, T)
    cum = 0
    for t in range(1, T + 1):
        t0 = time.perf_counter()
        server, seen, unseen, selected, loss, steps = run_pre_exploration_round(
            server, seen, unseen, cfg, cfg.round_rng(PHASE, t), shared
        )
        cum += steps
        models = {c.env.id: c.local for c in unseen}
        metrics = hook(models, t, T)
        log.append(RoundRecord(t, selected, loss, cum, time.perf_counter() - t0, metrics))
    return PreExplorationResult(models, log, shared_fraction(spec, shared))
