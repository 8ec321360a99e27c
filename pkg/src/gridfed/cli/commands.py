"""Subcommand implementations. Each takes a validated :class:`RunConfig`.

All artifacts live under ``cfg.out``::

    data/               environments.txt, train_seen.txt, val_seen.txt,
                        val_unseen.txt, aug_seen.txt, manifest.txt
    agent-<mode>-<kind>.ckpt, log-train-<mode>-<kind>.jsonl, ...
    speaker-<mode>.ckpt, log-speaker-<mode>.jsonl, ...
    pre-<strategy>/client-<env>.ckpt, log-pre-<strategy>.jsonl, ...
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path as FsPath
from typing import Sequence

from ..agent import AgentParams, init_agent
from ..errors import GridFedError, ValidationError
from ..federation import (
    STRATEGIES,
    ClientState,
    RoundRecord,
    Server,
    TrainState,
    augment_client,
    make_clients,
    matched_rounds,
    run_centralized_training,
    run_federated_speaker_training,
    run_federated_training,
    run_pre_exploration,
)
from ..gridworld import make_clients_envs, sample_episode
from ..metrics import evaluate, speaker_bleu, success_rate
from ..rng import SeededRng
from ..speaker import SpeakerParams, init_speaker
from . import storage
from .config import RunConfig

MODES = ("centralized", "federated")
DATA_KINDS = ("original", "augmented")
EPISODE_FILES = ("train_seen", "val_seen", "val_unseen")


class MissingArtifactError(GridFedError):
    """A required input file is absent; the message says how to create it."""


def _out(cfg: RunConfig) -> FsPath:
    return FsPath(cfg.out)


def _require(path: FsPath, hint: str) -> FsPath:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; {hint}")
    return path


class Dataset:
    def __init__(self, envs: dict, episodes: dict):
        self.envs = envs
        self.episodes = episodes

    @property
    def seen(self):
        return [e for e in self.envs.values() if e.split == "seen"]

    @property
    def unseen(self):
        return [e for e in self.envs.values() if e.split == "unseen"]

    def by_env(self, name: str) -> dict:
        out: dict = {}
        for ep in self.episodes.get(name, ()):
            out.setdefault(ep.env_id, []).append(ep)
        return out


def load_dataset(cfg: RunConfig, with_aug: bool = False) -> Dataset:
    data = _out(cfg) / "data"
    hint = "run `gridfed gen-data` first"
    envs = storage.read_environments(_require(data / "environments.txt", hint))
    episodes = {n: storage.read_episodes(_require(data / f"{n}.txt", hint), envs) for n in EPISODE_FILES}
    if with_aug:
        path = _require(data / "aug_seen.txt", "run `gridfed train-speaker` then `gridfed augment`")
        episodes["aug_seen"] = storage.read_episodes(path, envs)
    return Dataset(envs, episodes)


def _load_model(path: FsPath, kind: type, hint: str):
    model = storage.load_checkpoint(_require(path, hint))
    if not isinstance(model, kind):
        raise ValidationError(f"{path} holds a {type(model).__name__}, expected {kind.__name__}")
    return model


# gen-data


def cmd_gen_data(cfg: RunConfig) -> dict:
    """Generate environments and episode splits; deterministic per seed."""
    seen = make_clients_envs(cfg.seed, cfg.seen_envs, cfg.width, cfg.height, cfg.obstacle_density, "seen", "s")
    unseen = make_clients_envs(cfg.seed, cfg.unseen_envs, cfg.width, cfg.height, cfg.obstacle_density, "unseen", "u")
    rng = SeededRng(cfg.seed).child("episodes")
    lo, hi = cfg.min_moves, cfg.max_moves
    train = [sample_episode(e, rng, lo, hi) for e in seen for _ in range(cfg.episodes_per_env)]
    val_seen = [sample_episode(e, rng, lo, hi) for e in seen for _ in range(cfg.val_seen_per_env)]
    val_unseen = [sample_episode(e, rng, lo, hi) for e in unseen for _ in range(cfg.val_unseen_per_env)]
    data = _out(cfg) / "data"
    data.mkdir(parents=True, exist_ok=True)
    storage.write_environments(data / "environments.txt", seen + unseen)
    counts = {}
    for name, eps in zip(EPISODE_FILES, (train, val_seen, val_unseen)):
        storage.write_episodes(data / f"{name}.txt", eps)
        counts[name] = len(eps)
    manifest = {
        "seed": cfg.seed,
        "seen_envs": ",".join(e.id for e in seen),
        "unseen_envs": ",".join(e.id for e in unseen),
        **counts,
    }
    write_manifest(data / "manifest.txt", manifest)
    return manifest


def write_manifest(path: FsPath, values: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def read_manifest(path: FsPath) -> dict:
    out = {}
    for line in FsPath(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


# navigation training


def nav_hook(ds: Dataset, cfg: RunConfig):
    vseen, vun = ds.episodes["val_seen"], ds.episodes["val_unseen"]

    def hook(model) -> dict:
        return {
            "sr_seen": success_rate(model, vseen, cfg.d_success),
            "sr_unseen": success_rate(model, vun, cfg.d_success),
        }

    return hook


def final_reports(model, ds: Dataset, cfg: RunConfig) -> dict:
    return {
        "seen_val": evaluate(model, ds.episodes["val_seen"], "seen_val", cfg.d_success, cfg.d_th).to_dict(),
        "unseen_val": evaluate(model, ds.episodes["val_unseen"], "unseen_val", cfg.d_success, cfg.d_th).to_dict(),
    }


def _state_dict(state: TrainState) -> dict:
    return {
        "round": state.server.round,
        "best_score": state.best_score,
        "best_round": state.best_round,
        "cum_steps": state.cum_steps,
    }


def _save_state(out: FsPath, tag: str, template, state: TrainState) -> None:
    storage.save_checkpoint(out / f"last-{tag}.ckpt", template.with_params(state.server.weights))
    (out / f"state-{tag}.json").write_text(json.dumps(_state_dict(state), sort_keys=True) + "\n")


def _load_state(out: FsPath, tag: str, best_path: FsPath) -> TrainState:
    hint = f"run without --resume to start {tag} from scratch"
    info = json.loads(_require(out / f"state-{tag}.json", hint).read_text())
    last = storage.load_checkpoint(_require(out / f"last-{tag}.ckpt", hint))
    best = storage.load_checkpoint(_require(best_path, hint))
    return TrainState(
        Server(last.params, info["round"]),
        best.params,
        info["best_score"],
        info["best_round"],
        info["cum_steps"],
    )


def _write_log(path: FsPath, log: Sequence[RoundRecord], append: bool) -> None:
    storage.write_jsonl(path, (r.to_log() for r in log), append=append)


def cmd_train(cfg: RunConfig, mode: str = "federated", data_kind: str = "original", resume: bool = False) -> dict:
    """Train the navigation agent centrally or federated, on original or augmented data."""
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; choose from {MODES}")
    if data_kind not in DATA_KINDS:
        raise ValidationError(f"unknown data kind {data_kind!r}; choose from {DATA_KINDS}")
    ds = load_dataset(cfg, with_aug=data_kind == "augmented")
    out = _out(cfg)
    tag = f"train-{mode}-{data_kind}"
    best_path = out / f"agent-{mode}-{data_kind}.ckpt"
    init = init_agent(SeededRng(cfg.seed).child("init"), cfg.dims(), cfg.init_scale)
    fcfg = cfg.federation()
    hook = nav_hook(ds, cfg)
    state = _load_state(out, tag, best_path) if resume else None
    train = ds.by_env("train_seen")
    aug = ds.by_env("aug_seen")
    if mode == "federated":
        clients = [replace(c, augmented=tuple(aug.get(c.client_id, ()))) for c in make_clients(ds.seen, train, init)]
        result = run_federated_training(clients, fcfg, hook, resume=state)
    else:
        pooled = ds.episodes["train_seen"] + ds.episodes.get("aug_seen", [])
        rounds = matched_rounds(fcfg.rounds, fcfg.r, len(ds.seen))
        result = run_centralized_training(pooled, init, fcfg, hook, rounds=rounds, resume=state)
    _write_log(out / f"log-{tag}.jsonl", result.log, append=resume)
    storage.save_checkpoint(best_path, result.best)
    _save_state(out, tag, init, result.state)
    report = {
        "mode": mode,
        "data_kind": data_kind,
        **_state_dict(result.state),
        **final_reports(result.best, ds, cfg),
    }
    storage.write_json(out / f"report-{tag}.json", report)
    return report


# speaker


def cmd_train_speaker(cfg: RunConfig, mode: str = "federated") -> dict:
    """Train the speaker, keeping the round with the best seen-validation BLEU."""
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; choose from {MODES}")
    ds = load_dataset(cfg)
    out = _out(cfg)
    init = init_speaker(SeededRng(cfg.seed).child("speaker"), scale=cfg.init_scale)
    scfg = cfg.speaker_federation()
    vseen, vun = ds.episodes["val_seen"], ds.episodes["val_unseen"]
    unseen_bleu = lambda s: {"bleu_unseen": speaker_bleu(s, vun)}  # noqa: E731
    if mode == "federated":
        clients = make_clients(ds.seen, ds.by_env("train_seen"), init)
        result = run_federated_speaker_training(clients, scfg, vseen, unseen_bleu)
    else:
        rounds = matched_rounds(scfg.rounds, scfg.r, len(ds.seen))
        hook = lambda s: {"bleu_seen": speaker_bleu(s, vseen), **unseen_bleu(s)}  # noqa: E731
        result = run_centralized_training(
            ds.episodes["train_seen"], init, scfg, hook, rounds=rounds, select_key="bleu_seen", phase="speaker"
        )
    _write_log(out / f"log-speaker-{mode}.jsonl", result.log, append=False)
    storage.save_checkpoint(out / f"speaker-{mode}.ckpt", result.best)
    report = {
        "mode": mode,
        "best_round": result.state.best_round,
        "bleu_seen": speaker_bleu(result.best, vseen),
        "bleu_unseen": speaker_bleu(result.best, vun),
    }
    storage.write_json(out / f"report-speaker-{mode}.json", report)
    return report


def cmd_augment(cfg: RunConfig, speaker_path: str | None = None) -> dict:
    """Label freshly sampled seen-environment routes with the speaker."""
    ds = load_dataset(cfg)
    out = _out(cfg)
    path = FsPath(speaker_path) if speaker_path else out / "speaker-federated.ckpt"
    speaker = _load_model(path, SpeakerParams, "run `gridfed train-speaker` first")
    rng = SeededRng(cfg.seed).child("aug-seen")
    episodes = []
    for env in ds.seen:
        client = augment_client(ClientState(env.id, env), speaker, cfg.aug_count, rng.child(env.id), cfg.min_moves, cfg.max_moves)
        episodes.extend(client.augmented)
    data = out / "data"
    storage.write_episodes(data / "aug_seen.txt", episodes)
    manifest = read_manifest(data / "manifest.txt")
    manifest["aug_seen"] = len(episodes)
    write_manifest(data / "manifest.txt", manifest)
    return {"aug_seen": len(episodes)}


# pre-exploration


def pre_explore_clients(cfg: RunConfig, ds: Dataset, agent: AgentParams, speaker: SpeakerParams):
    """Seen clients with their labelled data and unseen clients with speaker-labelled routes."""
    rng = SeededRng(cfg.seed).child("aug")
    unseen = [
        augment_client(ClientState(e.id, e, (), agent), speaker, cfg.pre_aug_count, rng.child(e.id), cfg.min_moves, cfg.max_moves)
        for e in ds.unseen
    ]
    seen = make_clients(ds.seen, ds.by_env("train_seen"), agent)
    return seen, unseen


def cmd_pre_explore(
    cfg: RunConfig,
    strategy: str,
    agent_path: str | None = None,
    speaker_path: str | None = None,
) -> dict:
    """Adapt to the unseen environments and evaluate the per-client models."""
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    ds = load_dataset(cfg)
    out = _out(cfg)
    agent = _load_model(
        FsPath(agent_path) if agent_path else out / "agent-federated-original.ckpt",
        AgentParams,
        "run `gridfed train --mode federated` first",
    )
    speaker = _load_model(
        FsPath(speaker_path) if speaker_path else out / "speaker-federated.ckpt",
        SpeakerParams,
        "run `gridfed train-speaker` first",
    )
    if agent.dims != cfg.dims():
        raise ValidationError(f"agent checkpoint dims {agent.dims} differ from config {cfg.dims()}")
    seen, unseen = pre_explore_clients(cfg, ds, agent, speaker)
    result = run_pre_exploration(strategy, seen, unseen, cfg.federation(), init=agent)
    folder = out / f"pre-{strategy}"
    folder.mkdir(exist_ok=True)
    for env_id, model in sorted(result.models.items()):
        storage.save_checkpoint(folder / f"client-{env_id}.ckpt", model)
    _write_log(out / f"log-pre-{strategy}.jsonl", result.log, append=False)
    report = {
        "strategy": strategy,
        "shared_fraction": result.shared_fraction,
        "clients": sorted(result.models),
        "unseen_val": evaluate(result.models, ds.episodes["val_unseen"], "unseen_val", cfg.d_success, cfg.d_th).to_dict(),
    }
    storage.write_json(out / f"report-pre-{strategy}.json", report)
    return report


# evaluation


def load_policy(path: FsPath):
    """A single agent checkpoint, or a directory of ``client-<env>.ckpt`` files."""
    path = _require(FsPath(path), "pass an agent checkpoint or a pre-exploration folder")
    if path.is_dir():
        models = {}
        for f in sorted(path.glob("client-*.ckpt")):
            models[f.stem[len("client-"):]] = _load_model(f, AgentParams, "")
        if not models:
            raise MissingArtifactError(f"no client-*.ckpt files in {path}")
        return models
    return _load_model(path, AgentParams, "")


def cmd_evaluate(cfg: RunConfig, checkpoint: str, split: str = "unseen_val") -> dict:
    ds = load_dataset(cfg)
    policy = load_policy(FsPath(checkpoint))
    files = {"seen_val": "val_seen", "unseen_val": "val_unseen"}
    if split not in files:
        raise ValidationError(f"unknown split {split!r}; choose from {tuple(files)}")
    report = evaluate(policy, ds.episodes[files[split]], split, cfg.d_success, cfg.d_th).to_dict()
    name = FsPath(checkpoint).name.removesuffix(".ckpt")
    storage.write_json(_out(cfg) / f"eval-{name}-{split}.json", report)
    return report


# local-epoch sweep


def rounds_to_target(log: Sequence[dict], target: float, key: str = "sr_unseen") -> int | None:
    """First logged round whose ``key`` reaches ``target``, or None."""
    for rec in log:
        v = rec.get(key)
        if v is not None and v >= target:
            return rec["round"]
    return None


def format_sweep(table: dict, targets: Sequence[float]) -> str:
    head = ["E"] + [f"SR>={t:g}" for t in targets]
    rows = [head] + [[str(e)] + ["--" if r is None else str(r) for r in row] for e, row in table.items()]
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in rows)


def cmd_sweep_epochs(cfg: RunConfig, epochs: Sequence[int], targets: Sequence[float]) -> dict:
    """Rounds needed to reach each unseen-SR target, one federated run per E."""
    if not epochs or any(e < 1 for e in epochs):
        raise ValidationError("epochs must be a non-empty list of positive integers")
    if not targets or any(not 0 <= t <= 1 for t in targets):
        raise ValidationError("targets must be a non-empty list of rates in [0, 1]")
    ds = load_dataset(cfg)
    out = _out(cfg)
    init = init_agent(SeededRng(cfg.seed).child("init"), cfg.dims(), cfg.init_scale)
    vun = ds.episodes["val_unseen"]
    hook = lambda m: {"sr_unseen": success_rate(m, vun, cfg.d_success)}  # noqa: E731
    clients = make_clients(ds.seen, ds.by_env("train_seen"), init)
    table = {}
    for e in epochs:
        result = run_federated_training(clients, cfg.federation(tau=e, eval_every=1), hook)
        log = [r.to_log() for r in result.log]
        storage.write_jsonl(out / f"log-sweep-E{e}.jsonl", log)
        table[e] = [rounds_to_target(log, t) for t in targets]
    (out / "sweep-epochs.txt").write_text(format_sweep(table, targets))
    return table


# comparison


def cmd_compare(cfg: RunConfig) -> str:
    """Collect every train and pre-exploration report into one text table."""
    out = _out(cfg)
    rows = [("run", "split", "SR", "SPL", "OSR", "NE", "nDTW", "CLS")]
    for f in sorted(out.glob("report-train-*.json")) + sorted(out.glob("report-pre-*.json")):
        rep = storage.read_json(f)
        name = f.stem.removeprefix("report-")
        for split in ("seen_val", "unseen_val"):
            if split in rep:
                r = rep[split]
                rows.append((name, split) + tuple(_fmt(r[k]) for k in ("sr", "spl", "osr", "ne", "ndtw", "cls")))
    if len(rows) == 1:
        raise MissingArtifactError(f"no reports in {out}; run `gridfed train` or `gridfed pre-explore` first")
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    text = "".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n" for r in rows)
    (out / "compare.txt").write_text(text)
    return text


def _fmt(v) -> str:
    return "--" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"
