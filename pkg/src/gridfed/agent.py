"""Toy differentiable navigation agent.

Three parameter blocks, laid out contiguously in one flat vector:

* ``lang_encoder``: token embeddings ``(V, d_e)``, projection ``(d_e, d_h)``
  and bias ``(d_h,)``. The instruction vector is
  ``tanh(mean_embedding @ W_L + b_L)``.
* ``traj_encoder``: ``(d_o + A, d_h)`` weights and ``(d_h,)`` bias applied to
  the observation features concatenated with the one-hot previous action.
* ``decision_head``: ``(2 d_h, A)`` weights and ``(A,)`` bias mapping the
  concatenated language and trajectory vectors to action logits.

Gradients are derived by hand and verified against finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .gridworld import (
    NUM_ACTIONS,
    OBS_DIM,
    STOP,
    VOCAB_SIZE,
    Cell,
    Environment,
    Episode,
    Instruction,
    Observation,
    obs_features,
)
from .params import AGENT_SEGMENTS, PartitionSpec, as_param_vector
from .rng import SeededRng


@dataclass(frozen=True)
class AgentDims:
    vocab: int = VOCAB_SIZE
    embed: int = 8
    obs: int = OBS_DIM
    actions: int = NUM_ACTIONS
    hidden: int = 16

    def segment_lengths(self) -> dict[str, int]:
        V, de, do, A, dh = self.vocab, self.embed, self.obs, self.actions, self.hidden
        return {
            "lang_encoder": V * de + de * dh + dh,
            "traj_encoder": (do + A) * dh + dh,
            "decision_head": 2 * dh * A + A,
        }

    def partition(self) -> PartitionSpec:
        lengths = self.segment_lengths()
        return PartitionSpec.from_lengths((name, lengths[name]) for name in AGENT_SEGMENTS)

    def as_tuple(self) -> tuple[int, ...]:
        return (self.vocab, self.embed, self.obs, self.actions, self.hidden)


@dataclass(frozen=True)
class AgentParams:
    params: np.ndarray
    dims: AgentDims = AgentDims()

    def __post_init__(self):
        vec = as_param_vector(self.params)
        self.spec.check_vector(vec)
        vec.setflags(write=False)
        object.__setattr__(self, "params", vec)

    @property
    def spec(self) -> PartitionSpec:
        return _partition(self.dims)

    def with_params(self, vec) -> "AgentParams":
        return replace(self, params=vec)

    def unpack(self) -> dict[str, np.ndarray]:
        return _unpack(self.params, self.dims)

    def batch_loss_grad(self, episodes: Sequence[Episode]):
        return batch_imitation_loss_grad(self, episodes)


@lru_cache(maxsize=None)
def _partition(dims: AgentDims) -> PartitionSpec:
    return dims.partition()


def _unpack(vec: np.ndarray, dims: AgentDims) -> dict[str, np.ndarray]:
    V, de, do, A, dh = dims.as_tuple()
    shapes = [
        ("emb", (V, de)),
        ("W_L", (de, dh)),
        ("b_L", (dh,)),
        ("W_T", (do + A, dh)),
        ("b_T", (dh,)),
        ("W_M", (2 * dh, A)),
        ("b_M", (A,)),
    ]
    out, offset = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        out[name] = vec[offset : offset + size].reshape(shape)
        offset += size
    return out


def init_agent(rng: SeededRng, dims: AgentDims = AgentDims(), scale: float = 0.1) -> AgentParams:
    """Uniform initialisation in ``[-scale, scale]``."""
    total = dims.partition().total
    return AgentParams(rng.uniform(-scale, scale, total), dims)


def zero_agent(dims: AgentDims = AgentDims()) -> AgentParams:
    return AgentParams(np.zeros(dims.partition().total), dims)


def _bag_of_words(tokens: Sequence[int], vocab: int) -> np.ndarray:
    bow = np.zeros(vocab)
    for t in tokens:
        bow[t] += 1.0
    return bow / len(tokens)


def encode_instruction(agent: AgentParams, instr: Instruction) -> np.ndarray:
    if not instr.tokens:
        raise ValidationError("cannot encode an empty instruction")
    p = agent.unpack()
    mean_emb = _bag_of_words(instr.tokens, agent.dims.vocab) @ p["emb"]
    return np.tanh(mean_emb @ p["W_L"] + p["b_L"])


def _step_input(features: np.ndarray, prev_action: int | None, actions: int) -> np.ndarray:
    x = np.zeros(len(features) + actions)
    x[: len(features)] = features
    if prev_action is not None:
        x[len(features) + prev_action] = 1.0
    return x


def policy_step(
    agent: AgentParams,
    lang_vec: np.ndarray,
    obs: Observation | np.ndarray,
    prev_action: int | None,
) -> np.ndarray:
    """Action logits for one step; ``prev_action=None`` means no previous action."""
    p = agent.unpack()
    feats = obs.features() if isinstance(obs, Observation) else np.asarray(obs)
    x = _step_input(feats, prev_action, agent.dims.actions)
    traj_vec = np.tanh(x @ p["W_T"] + p["b_T"])
    return np.concatenate([lang_vec, traj_vec]) @ p["W_M"] + p["b_M"]


@lru_cache(maxsize=200_000)
def _episode_arrays(episode: Episode, vocab: int, actions: int):
    """Teacher-forcing inputs: bag of words, per-step inputs and expert actions."""
    env = episode.env
    cells = episode.path.cells
    expert = episode.path.actions() + [STOP]
    prev = [None] + expert[:-1]
    X = np.stack([_step_input(obs_features(env, c), a, actions) for c, a in zip(cells, prev)])
    y = np.array(expert)
    bow = _bag_of_words(episode.instruction.tokens, vocab)
    for arr in (X, y, bow):
        arr.setflags(write=False)
    return bow, X, y


def batch_imitation_loss_grad(agent: AgentParams, episodes: Sequence[Episode]):
    """Mean over episodes of the per-episode teacher-forced cross-entropy.

    Each episode's loss is itself the mean over its expert steps, the final
    STOP included. Returns ``(loss, grad)`` with ``grad`` as a flat vector.
    """
    dims = agent.dims
    dh = dims.hidden
    p = agent.unpack()
    B = len(episodes)
    bows, Xs, ys, ep_idx, weights = [], [], [], [], []
    for i, ep in enumerate(episodes):
        bow, X, y = _episode_arrays(ep, dims.vocab, dims.actions)
        bows.append(bow)
        Xs.append(X)
        ys.append(y)
        ep_idx.append(np.full(len(y), i))
        weights.append(np.full(len(y), 1.0 / (B * len(y))))
    bow = np.stack(bows)
    X = np.concatenate(Xs)
    y = np.concatenate(ys)
    idx = np.concatenate(ep_idx)
    w = np.concatenate(weights)

    mean_emb = bow @ p["emb"]
    lang = np.tanh(mean_emb @ p["W_L"] + p["b_L"])
    hid = np.tanh(X @ p["W_T"] + p["b_T"])
    Z = np.concatenate([lang[idx], hid], axis=1)
    logits = Z @ p["W_M"] + p["b_M"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    loss = float(np.sum(w * (log_norm - shifted[rows, y])))

    probs = np.exp(shifted - log_norm[:, None])
    g_logits = probs
    g_logits[rows, y] -= 1.0
    g_logits *= w[:, None]

    g = {}
    g["W_M"] = Z.T @ g_logits
    g["b_M"] = g_logits.sum(axis=0)
    gZ = g_logits @ p["W_M"].T
    g_hid = gZ[:, dh:] * (1.0 - hid**2)
    g["W_T"] = X.T @ g_hid
    g["b_T"] = g_hid.sum(axis=0)
    g_lang = np.zeros((B, dh))
    np.add.at(g_lang, idx, gZ[:, :dh])
    g_zl = g_lang * (1.0 - lang**2)
    g["W_L"] = mean_emb.T @ g_zl
    g["b_L"] = g_zl.sum(axis=0)
    g["emb"] = bow.T @ (g_zl @ p["W_L"].T)

    order = ("emb", "W_L", "b_L", "W_T", "b_T", "W_M", "b_M")
    grad = np.concatenate([g[k].ravel() for k in order])
    return loss, grad


def imitation_loss_grad(agent: AgentParams, episode: Episode):
    return batch_imitation_loss_grad(agent, [episode])


@dataclass(frozen=True)
class Trajectory:
    cells: tuple[Cell, ...]
    actions: tuple[int, ...]
    terminated: bool

    @property
    def final(self) -> Cell:
        return self.cells[-1]

    @property
    def steps_taken(self) -> int:
        """Consumed move actions, blocked moves included."""
        return len(self.actions) - (1 if self.terminated else 0)


def rollout(
    agent: AgentParams,
    env: Environment,
    instr: Instruction,
    start: Cell,
    max_steps: int | None = None,
) -> Trajectory:
    """Greedy execution; ties go to the lowest action id."""
    if max_steps is None:
        max_steps = 4 * (env.width + env.height)
    if max_steps < 1:
        raise ValidationError("max_steps must be at least 1")
    if not env.is_free(start):
        raise ValidationError(f"start {start} is not free")
    p = agent.unpack()
    dh, A = agent.dims.hidden, agent.dims.actions
    lang = encode_instruction(agent, instr)
    base_logits = lang @ p["W_M"][:dh] + p["b_M"]
    W_obs, W_prev = p["W_T"][: agent.dims.obs], p["W_T"][agent.dims.obs :]
    W_hid = p["W_M"][dh:]

    cells = [tuple(start)]
    actions: list[int] = []
    prev = None
    for _ in range(max_steps):
        z = obs_features(env, cells[-1]) @ W_obs + p["b_T"]
        if prev is not None:
            z = z + W_prev[prev]
        logits = base_logits + np.tanh(z) @ W_hid
        action = int(np.argmax(logits))
        actions.append(action)
        if action == STOP:
            return Trajectory(tuple(cells), tuple(actions), True)
        cells.append(env.step(cells[-1], action))
        prev = action
    return Trajectory(tuple(cells), tuple(actions), False)
