import ast
import importlib
import importlib.util
import inspect
from dataclasses import replace
from pathlib import Path as FsPath

import numpy as np
import pytest

import gridfed.federation.protocols as protocols
from gridfed.agent import init_agent
from gridfed.errors import ProtocolError, ValidationError
from gridfed.federation import (
    STRATEGIES,
    ClientState,
    FederationConfig,
    Server,
    augment_client,
    federated_round,
    make_clients,
    matched_rounds,
    run_centralized_training,
    run_fed_round,
    run_federated_speaker_training,
    run_federated_training,
    run_pre_exploration,
    run_pre_exploration_round,
)
from gridfed.gridworld import generate_environment, is_well_formed, sample_episode, shortest_path
from gridfed.metrics import evaluate, speaker_bleu, success_rate
from gridfed.params import Upload, aggregate, extract_segments, insert_segments, model_delta, shared_fraction
from gridfed.rng import SeededRng
from gridfed.speaker import init_speaker
from gridfed.training import client_update


def world(seed=0, n_envs=3, per_env=10, split="seen", prefix="s"):
    rng = SeededRng(seed)
    envs = [generate_environment(rng.child("env", i).seed, 5, 5, 0.2, f"{prefix}{i}", split) for i in range(n_envs)]
    data = {e.id: [sample_episode(e, rng, 1, 4) for _ in range(per_env)] for e in envs}
    return envs, data


@pytest.fixture
def agent():
    return init_agent(SeededRng(42))


@pytest.fixture
def clients(agent):
    envs, data = world()
    return make_clients(envs, data, agent)


# server and privacy contract

FORBIDDEN = ("gridworld", "agent", "speaker", "training", "metrics", "protocols", "preexplore", "cli")


def _imported_modules(path: FsPath, package: str) -> set:
    tree = ast.parse(path.read_text())
    out = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            out.update(a.name for a in node.names)
        elif isinstance(node, ast.ImportFrom):
            base = importlib.util.resolve_name("." * node.level + (node.module or ""), package) if node.level else node.module
            out.add(base)
    return out


def _closure(module_name: str) -> set:
    """Every gridfed module reachable through imports from ``module_name``."""
    seen, todo = set(), [module_name]
    while todo:
        name = todo.pop()
        if name in seen:
            continue
        seen.add(name)
        mod = importlib.import_module(name)
        pkg = name if FsPath(mod.__file__).name == "__init__.py" else name.rpartition(".")[0]
        for dep in _imported_modules(FsPath(mod.__file__), pkg):
            if dep.startswith("gridfed"):
                todo.append(dep)
    return seen


def test_server_cannot_see_client_data_types():
    reachable = _closure("gridfed.federation.server")
    assert reachable <= {"gridfed.federation.server", "gridfed.params", "gridfed.errors", "gridfed.rng"}
    for name in reachable:
        assert not any(name.endswith("." + f) for f in FORBIDDEN), name
    import gridfed.federation.server as server_mod

    names = set(vars(server_mod))
    assert not names & {"Environment", "Episode", "Observation", "Path", "Instruction"}


def test_server_accepts_only_uploads():
    s = Server(np.zeros(3))
    with pytest.raises(ProtocolError):
        s.apply([(np.ones(3), 1, "a")], 1.0)
    envs, data = world()
    with pytest.raises(ProtocolError):
        s.apply([data[envs[0].id][0]], 1.0)
    out = s.apply([Upload(np.ones(3), 2, "a")], 1.0)
    assert out.round == 1 and np.array_equal(out.weights, np.ones(3))
    assert np.array_equal(s.weights, np.zeros(3))
    b = s.broadcast()
    b[0] = 9
    assert s.weights[0] == 0
    assert s.skip().round == 1
    fields = set(Upload._fields)
    assert fields == {"delta", "n", "client_id"}
    assert list(inspect.signature(Server.apply).parameters) == ["self", "uploads", "eta"]


# config and schedules


def test_config_validation():
    for bad in ({"r": 1.5}, {"eta": 0}, {"tau": 0}, {"r2_seen": -0.1}, {"rounds": -1}, {"lr": -1}):
        with pytest.raises(ValidationError):
            FederationConfig(**bad)
    cfg = FederationConfig()
    assert (cfg.r, cfg.tau, cfg.tau1, cfg.r2_seen, cfg.r1_unseen) == (0.2, 3, 1, 0.18, 0.5)


def test_matched_rounds():
    assert matched_rounds(200, 0.2, 12) == 33  # 2 of 12 clients per round
    assert matched_rounds(20, 1.0, 1) == 20
    assert matched_rounds(30, 0.5, 4) == 15
    assert matched_rounds(1, 0.1, 50) == 1
    assert matched_rounds(0, 0.5, 4) == 0


# one federated round


def test_single_client_round_equals_local_training(agent):
    envs, data = world(n_envs=1)
    cs = make_clients(envs, data, agent)
    cfg = FederationConfig(r=1.0, eta=1.0, tau=2, lr=0.3)
    out = run_fed_round(Server(agent.params), cs, cfg, cfg.round_rng("train", 1))
    trained = client_update(agent, data[envs[0].id], 2, 0.3, cfg.round_rng("train", 1).child("client", 0))
    assert np.array_equal(out.server.weights, trained.params)
    assert np.array_equal(out.clients[0].local.params, trained.params)
    assert out.server.round == 1 and out.participants == [envs[0].id]


def test_zero_server_rate_keeps_global(clients, agent):
    shared = frozenset(agent.spec.names)
    ids = [c.client_id for c in clients]
    server, new, _, _ = federated_round(Server(agent.params), clients, ids, shared, 1, 0.3, 0.0, SeededRng(0))
    assert np.array_equal(server.weights, agent.params)
    assert all(not np.array_equal(c.local.params, agent.params) for c in new)


def test_two_client_round_matches_hand_average(agent):
    envs, data = world(n_envs=2)
    data = {k: v[:6] for k, v in data.items()}  # equal n
    cs = make_clients(envs, data, agent)
    cfg = FederationConfig(r=1.0, eta=1.0, tau=1, lr=0.2)
    rng = cfg.round_rng("train", 1)
    out = run_fed_round(Server(agent.params), cs, cfg, rng)
    locals_ = [client_update(agent, data[e.id], 1, 0.2, rng.child("client", i)) for i, e in enumerate(envs)]
    hand = agent.params + 0.5 * ((locals_[0].params - agent.params) + (locals_[1].params - agent.params))
    np.testing.assert_allclose(out.server.weights, hand, atol=1e-12)


def test_non_selected_clients_untouched(clients, agent):
    cfg = FederationConfig(r=0.34, lr=0.2)
    out = run_fed_round(Server(agent.params), clients, cfg, cfg.round_rng("train", 1))
    assert len(out.participants) == 1
    for before, after in zip(clients, out.clients):
        if before.client_id not in out.participants:
            assert after is before


def test_round_failure_is_atomic(agent):
    envs, data = world(n_envs=2)
    data[envs[1].id] = []
    cs = make_clients(envs, data, agent)
    server = Server(agent.params)
    cfg = FederationConfig(r=1.0)
    with pytest.raises(ValidationError):
        run_fed_round(server, cs, cfg, cfg.round_rng("train", 1))
    assert server.round == 0 and np.array_equal(server.weights, agent.params)
    assert all(c.local is agent for c in cs)


def test_clients_must_be_consistent(agent):
    envs, data = world(n_envs=2)
    cs = make_clients(envs, data, agent)
    with pytest.raises(ProtocolError):
        run_fed_round(Server(agent.params), [cs[0], cs[0]], FederationConfig(), SeededRng(0))
    with pytest.raises(ProtocolError):
        run_fed_round(Server(agent.params), [], FederationConfig(), SeededRng(0))


# training loops


def _hook(val):
    return lambda m: {"sr_seen": success_rate(m, val), "sr_unseen": success_rate(m, val)}


def test_zero_rounds_returns_initial(clients, agent):
    res = run_federated_training(clients, FederationConfig(rounds=0))
    assert np.array_equal(res.best.params, agent.params) and res.log == []


def test_training_deterministic_with_log_per_round(clients):
    cfg = FederationConfig(rounds=6, lr=0.5, r=0.5, eval_every=2)
    val = [ep for c in clients for ep in c.dataset[:3]]
    a = run_federated_training(clients, cfg, _hook(val))
    b = run_federated_training(clients, cfg, _hook(val))
    assert [r.to_log() for r in a.log] == [r.to_log() for r in b.log]
    assert np.array_equal(a.best.params, b.best.params)
    assert [r.round for r in a.log] == list(range(1, 7))
    assert a.state.server.round == 6
    assert np.all(np.diff([r.cum_steps for r in a.log]) > 0)
    assert "sr_unseen" in a.log[1].metrics and not a.log[0].metrics


def test_best_model_selection(clients):
    cfg = FederationConfig(rounds=8, lr=0.5, r=0.5, eval_every=1)
    val = [ep for c in clients for ep in c.dataset]
    res = run_federated_training(clients, cfg, _hook(val))
    scores = [r.metrics["sr_unseen"] for r in res.log]
    assert success_rate(res.best, val) == res.state.best_score
    assert res.state.best_score >= max(scores)


def test_single_client_equivalence(agent):
    envs, data = world(n_envs=1, per_env=12)
    cfg = FederationConfig(rounds=20, r=1.0, eta=1.0, tau=1, lr=0.5)
    fed = run_federated_training(make_clients(envs, data, agent), cfg)
    rounds = matched_rounds(cfg.rounds, cfg.r, 1)
    cen = run_centralized_training(data[envs[0].id], agent, cfg, rounds=rounds)
    assert np.array_equal(fed.state.server.weights, cen.state.server.weights)
    assert [r.mean_loss for r in fed.log] == [r.mean_loss for r in cen.log]


def test_centralized_one_epoch_equals_client_update(agent):
    envs, data = world(n_envs=1)
    ep = data[envs[0].id][:1]
    cfg = FederationConfig(rounds=1, tau=1, lr=0.4)
    cen = run_centralized_training(ep, agent, cfg)
    ref = client_update(agent, ep, 1, 0.4, cfg.round_rng("train", 1).child("client", 0))
    assert np.array_equal(cen.state.server.weights, ref.params)


def test_resume_is_bit_exact(clients):
    val = [ep for c in clients for ep in c.dataset[:2]]
    full = run_federated_training(clients, FederationConfig(rounds=8, lr=0.5, r=0.5), _hook(val))
    half = run_federated_training(clients, FederationConfig(rounds=4, lr=0.5, r=0.5), _hook(val))
    rest = run_federated_training(clients, FederationConfig(rounds=8, lr=0.5, r=0.5), _hook(val), resume=half.state)
    assert np.array_equal(rest.state.server.weights, full.state.server.weights)
    assert [r.mean_loss for r in half.log + rest.log] == [r.mean_loss for r in full.log]


# speaker


def test_speaker_training(agent):
    envs, data = world(n_envs=3, per_env=20)
    val = [sample_episode(e, SeededRng(9), 1, 4) for e in envs for _ in range(5)]
    init = init_speaker(SeededRng(1))
    cs = make_clients(envs, data, init)
    zero = run_federated_speaker_training(cs, FederationConfig(rounds=0), val)
    assert np.array_equal(zero.best.params, init.params)
    cfg = FederationConfig(rounds=12, tau=2, lr=1.0, r=0.5, eval_every=1)
    res = run_federated_speaker_training(cs, cfg, val)
    logged = [r.metrics["bleu_seen"] for r in res.log]
    assert speaker_bleu(res.best, val) >= speaker_bleu(init, val)
    assert speaker_bleu(res.best, val) == max([speaker_bleu(init, val)] + logged)
    # Offline re-scoring of every round's global reproduces the logged BLEU.
    server = Server(init.params)
    for t in range(1, 13):
        out = run_fed_round(server, cs, cfg, cfg.round_rng("speaker", t))
        server, cs = out.server, out.clients
        assert speaker_bleu(init.with_params(server.weights), val) == logged[t - 1]


def test_augment_client(agent):
    envs, data = world(n_envs=1)
    client = ClientState(envs[0].id, envs[0], data[envs[0].id], agent)
    spk = init_speaker(SeededRng(0))
    assert augment_client(client, spk, 0, SeededRng(0), 1, 4) is client
    aug = augment_client(client, spk, 15, SeededRng(0), 2, 4)
    assert len(aug.augmented) == 15 and aug.n == client.n + 15
    for ep in aug.augmented:
        assert is_well_formed(ep.instruction)
        assert ep.path == shortest_path(envs[0], ep.start, ep.goal)
    with pytest.raises(ValidationError):
        augment_client(client, spk, -1, SeededRng(0), 1, 4)


# pre-exploration


def pre_world(agent, n_unseen=3, n_seen=2, aug=12):
    spk = init_speaker(SeededRng(5), scale=1.0)
    u_envs, _ = world(seed=1, n_envs=n_unseen, per_env=0, split="unseen", prefix="u")
    unseen = [augment_client(ClientState(e.id, e, (), agent), spk, aug, SeededRng(6).child(e.id), 1, 4) for e in u_envs]
    s_envs, s_data = world(seed=2, n_envs=n_seen, per_env=8)
    return make_clients(s_envs, s_data, agent), unseen


def test_fed_full_round_reduces_to_fed_round(agent):
    _, unseen = pre_world(agent)
    cfg = FederationConfig(r=0.67, r1_unseen=0.67, tau=2, tau1=2, lr=0.4)
    rng = cfg.round_rng("pre", 3)
    full = frozenset(agent.spec.names)
    pre = run_pre_exploration_round(Server(agent.params), [], unseen, cfg, rng, shared=full)
    fed = run_fed_round(Server(agent.params), unseen, cfg, rng)
    assert np.array_equal(pre.server.weights, fed.server.weights)
    assert pre.participants == fed.participants
    for a, b in zip(pre.unseen, fed.clients):
        assert np.array_equal(a.local.params, b.local.params)


def test_pre_round_payload_checked(agent):
    _, unseen = pre_world(agent)
    with pytest.raises(ProtocolError):
        run_pre_exploration_round(Server(agent.params), [], unseen, FederationConfig(), SeededRng(0))


def test_pre_round_matches_scripted_trace(agent):
    _, unseen = pre_world(agent, n_unseen=2)
    spec = agent.spec
    lang = frozenset({"lang_encoder"})
    cfg = FederationConfig(r1_unseen=1.0, tau1=1, lr=0.3, eta=0.7)
    # Give the clients distinct local models first.
    unseen = [replace(c, local=init_agent(SeededRng(20 + i))) for i, c in enumerate(unseen)]
    E0 = extract_segments(agent.params, spec, lang)
    rng = cfg.round_rng("pre", 1)
    out = run_pre_exploration_round(Server(E0), [], unseen, cfg, rng)
    # Scripted steps: overwrite E_L, train the full model, upload Delta E_L, weighted server step.
    uploads, trained = [], []
    for i, c in enumerate(unseen):
        start = c.local.with_params(insert_segments(c.local.params, spec, lang, E0))
        t = client_update(start, c.episodes, 1, 0.3, rng.child("client", i))
        trained.append(t)
        uploads.append(Upload(model_delta(extract_segments(t.params, spec, lang), E0), c.n, c.client_id))
    assert np.array_equal(out.server.weights, aggregate(E0, uploads, 0.7))
    for c, t in zip(out.unseen, trained):
        assert np.array_equal(c.local.params, t.params)
    assert len(out.server.weights) == spec["lang_encoder"].length


def test_partial_sharing_keeps_local_segments(agent, monkeypatch):
    seen, unseen = pre_world(agent)
    cfg = FederationConfig(r1_unseen=0.67, r2_seen=0.5, tau1=1, lr=0.5, pre_rounds=3)
    spec = agent.spec
    lang = frozenset({"lang_encoder"})
    starts = []
    real = protocols.local_sgd

    def spy(model, *a, **k):
        starts.append(np.array(model.params))
        return real(model, *a, **k)

    monkeypatch.setattr(protocols, "local_sgd", spy)
    server = Server(extract_segments(agent.params, spec, lang))
    for t in range(1, 4):
        payload = server.broadcast()
        starts.clear()
        out = run_pre_exploration_round(server, seen, unseen, cfg, cfg.round_rng("pre", t))
        assert len(starts) == len(out.participants)
        for s in starts:
            assert np.array_equal(extract_segments(s, spec, lang), payload)
        server, seen, unseen = out.server, out.seen, out.unseen
        assert len(server.weights) == spec.shared_length(lang)
    tr = [extract_segments(c.local.params, spec, {"traj_encoder"}) for c in unseen]
    assert not np.array_equal(tr[0], tr[1])


def test_env_based_equals_single_client_fed_full(agent):
    _, unseen = pre_world(agent, n_unseen=1)
    cfg = FederationConfig(r1_unseen=1.0, eta=1.0, tau1=1, lr=0.3, pre_rounds=5)
    a = run_pre_exploration("env_based", [], unseen, cfg, init=agent)
    b = run_pre_exploration("fed_full", [], unseen, cfg, init=agent)
    (ka, ma), = a.models.items()
    (kb, mb), = b.models.items()
    assert ka == kb and np.array_equal(ma.params, mb.params)
    assert [r.mean_loss for r in a.log] == [r.mean_loss for r in b.log]


def test_all_strategies_emit_reports(agent):
    seen, unseen = pre_world(agent)
    val = [sample_episode(c.env, SeededRng(3), 1, 4) for c in unseen for _ in range(4)]
    cfg = FederationConfig(pre_rounds=4, lr=0.3)
    fractions = {}
    for s in STRATEGIES:
        res = run_pre_exploration(s, seen, unseen, cfg, init=agent)
        assert sorted(res.models) == sorted(c.client_id for c in unseen)
        report = evaluate(res.models, val, "unseen_val")
        assert report.count == len(val)
        fractions[s] = res.shared_fraction
    assert fractions["fed_lan"] == fractions["fed_lan_seen"] == shared_fraction(agent.spec, {"lang_encoder"})
    assert fractions["fed_full"] == 1.0 and fractions["env_based"] == 0.0
    with pytest.raises(ValidationError):
        run_pre_exploration("bogus", seen, unseen, cfg)
