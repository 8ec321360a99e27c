"""Route-to-instruction speaker used for data augmentation.

A route is split into macro-segments; each segment fills two template slots
(direction word, count word) of ``go <dir> <count> steps``. Both slots share
one ``(8, V)`` weight matrix over the segment features; the count slot adds its
own ``(V,)`` logit offset. Total parameter count is ``8 V + V``.

Segment features: one-hot direction (4), length / 10, normalised start
position (2) and a constant bias input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .gridworld import (
    COUNT_IDS,
    DIRECTION_IDS,
    GO,
    MAX_SEGMENT,
    STEPS,
    STOP_WORD,
    VOCAB_SIZE,
    Environment,
    Episode,
    Instruction,
    Path,
    segments_of,
)
from .params import PartitionSpec, as_param_vector
from .rng import SeededRng

FEATURES = 8
SPEAKER_SEGMENTS = ("slot_weights", "count_offset")


@dataclass(frozen=True)
class SpeakerParams:
    params: np.ndarray
    vocab: int = VOCAB_SIZE

    def __post_init__(self):
        vec = as_param_vector(self.params)
        self.spec.check_vector(vec)
        vec.setflags(write=False)
        object.__setattr__(self, "params", vec)

    @property
    def spec(self) -> PartitionSpec:
        return speaker_partition(self.vocab)

    @property
    def dims(self) -> tuple[int, int]:
        return (FEATURES, self.vocab)

    def with_params(self, vec) -> "SpeakerParams":
        return replace(self, params=vec)

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        V = self.vocab
        return self.params[: FEATURES * V].reshape(FEATURES, V), self.params[FEATURES * V :]

    def batch_loss_grad(self, episodes: Sequence[Episode]):
        return batch_speaker_loss_grad(self, episodes)


@lru_cache(maxsize=None)
def speaker_partition(vocab: int = VOCAB_SIZE) -> PartitionSpec:
    return PartitionSpec.from_lengths(
        [("slot_weights", FEATURES * vocab), ("count_offset", vocab)]
    )


def init_speaker(rng: SeededRng, vocab: int = VOCAB_SIZE, scale: float = 0.1) -> SpeakerParams:
    return SpeakerParams(rng.uniform(-scale, scale, speaker_partition(vocab).total), vocab)


def zero_speaker(vocab: int = VOCAB_SIZE) -> SpeakerParams:
    return SpeakerParams(np.zeros(speaker_partition(vocab).total), vocab)


def segment_features(path: Path, width: int, height: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    segs = segments_of(path)
    feats = np.zeros((len(segs), FEATURES))
    i_cell = 0
    for row, (direction, count) in enumerate(segs):
        cursor = path.cells[i_cell]
        feats[row, direction] = 1.0
        feats[row, 4] = count / MAX_SEGMENT
        feats[row, 5] = cursor[0] / width
        feats[row, 6] = cursor[1] / height
        feats[row, 7] = 1.0
        i_cell += count
    return feats, segs


def speaker_generate(speaker: SpeakerParams, path: Path, env: Environment) -> Instruction:
    """Greedy slot filling; argmax ties resolve to the lowest token id."""
    W, offset = speaker.weights()
    feats, _ = segment_features(path, env.width, env.height)
    tokens = []
    for f in feats:
        logits = f @ W
        tokens += [GO, int(np.argmax(logits)), int(np.argmax(logits + offset)), STEPS]
    tokens.append(STOP_WORD)
    return Instruction(tuple(tokens))


@lru_cache(maxsize=200_000)
def _slot_arrays(episode: Episode):
    feats, segs = segment_features(episode.path, episode.env.width, episode.env.height)
    F = np.repeat(feats, 2, axis=0)
    is_count = np.tile([0.0, 1.0], len(segs))
    targets = np.array(
        [tok for d, n in segs for tok in (DIRECTION_IDS[d], COUNT_IDS[n - 1])], dtype=int
    )
    for arr in (F, is_count, targets):
        arr.setflags(write=False)
    return F, is_count, targets


def batch_speaker_loss_grad(speaker: SpeakerParams, episodes: Sequence[Episode]):
    """Mean over episodes of the per-episode mean slot cross-entropy.

    Routes with no moves have no slots and contribute zero loss and gradient.
    """
    W, offset = speaker.weights()
    B = len(episodes)
    Fs, cs, ts, ws = [], [], [], []
    for ep in episodes:
        F, is_count, targets = _slot_arrays(ep)
        if len(targets) == 0:
            continue
        Fs.append(F)
        cs.append(is_count)
        ts.append(targets)
        ws.append(np.full(len(targets), 1.0 / (B * len(targets))))
    grad = np.zeros_like(speaker.params)
    if not Fs:
        return 0.0, grad
    F = np.concatenate(Fs)
    is_count = np.concatenate(cs)
    t = np.concatenate(ts)
    w = np.concatenate(ws)

    logits = F @ W + is_count[:, None] * offset
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    loss = float(np.sum(w * (log_norm - shifted[rows, t])))

    g = np.exp(shifted - log_norm[:, None])
    g[rows, t] -= 1.0
    g *= w[:, None]
    V = speaker.vocab
    grad[: FEATURES * V] = (F.T @ g).ravel()
    grad[FEATURES * V :] = is_count @ g
    return loss, grad


def speaker_loss_grad(speaker: SpeakerParams, episode: Episode):
    return batch_speaker_loss_grad(speaker, [episode])
