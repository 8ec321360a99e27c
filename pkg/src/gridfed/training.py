"""Local mini-batch gradient descent shared by agents and speakers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TypeVar

import numpy as np

from .errors import ValidationError
from .gridworld import Episode
from .rng import SeededRng

BATCH_SIZE = 8

M = TypeVar("M")


@dataclass
class LocalStats:
    mean_loss: float
    steps: int


def local_sgd(
    model: M,
    episodes: Sequence[Episode],
    epochs: int,
    lr: float,
    rng: SeededRng,
    batch_size: int = BATCH_SIZE,
) -> tuple[M, LocalStats]:
    """``epochs`` passes of shuffled mini-batch SGD.

    ``model`` is anything exposing ``params``, ``with_params`` and
    ``batch_loss_grad`` (an agent or a speaker). The last batch of an epoch
    may be smaller than ``batch_size``. The input model is left untouched.
    """
    if not episodes:
        raise ValidationError("local training needs a non-empty dataset")
    if epochs < 1:
        raise ValidationError(f"epochs must be >= 1, got {epochs}")
    if lr < 0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    vec = np.array(model.params)
    losses = []
    for _ in range(epochs):
        order = rng.shuffle(range(len(episodes)))
        for start in range(0, len(order), batch_size):
            batch = [episodes[i] for i in order[start : start + batch_size]]
            loss, grad = model.with_params(vec).batch_loss_grad(batch)
            losses.append(loss)
            vec = vec - lr * grad
    return model.with_params(vec), LocalStats(float(np.mean(losses)), len(losses))


def client_update(agent: M, dataset: Sequence[Episode], epochs: int, lr: float, rng: SeededRng) -> M:
    """Local training of one client; returns the updated model only."""
    return local_sgd(agent, dataset, epochs, lr, rng)[0]
