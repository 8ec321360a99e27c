"""Procedural gridworld "houses", expert routes and templated instructions.

Coordinates are ``(x, y)`` with x growing east and y growing south, so
``north`` is ``y - 1``. Actions are ``N, E, S, W, STOP`` with ids 0..4.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import NoPathError, SamplingExhaustedError, ValidationError
from .rng import SeededRng

Cell = tuple[int, int]

NORTH, EAST, SOUTH, WEST, STOP = range(5)
NUM_ACTIONS = 5
MOVES: tuple[Cell, ...] = ((0, -1), (1, 0), (0, 1), (-1, 0))
DIRECTION_WORDS = ("north", "east", "south", "west")
COUNT_WORDS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
VOCAB: tuple[str, ...] = ("go",) + DIRECTION_WORDS + ("steps", "stop") + COUNT_WORDS
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
GO, STEPS, STOP_WORD = WORD_ID["go"], WORD_ID["steps"], WORD_ID["stop"]
DIRECTION_IDS = tuple(WORD_ID[w] for w in DIRECTION_WORDS)
COUNT_IDS = tuple(WORD_ID[w] for w in COUNT_WORDS)
MAX_SEGMENT = len(COUNT_WORDS)
OBS_DIM = 6


@dataclass(frozen=True)
class Environment:
    id: str
    width: int
    height: int
    obstacles: frozenset = frozenset()
    split: str = "seen"

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.obstacles

    @property
    def free_cells(self) -> tuple[Cell, ...]:
        return _free_cells(self)

    def step(self, cell: Cell, action: int) -> Cell:
        """Cell reached by ``action``; blocked moves and STOP stay put."""
        if action == STOP:
            return cell
        dx, dy = MOVES[action]
        nxt = (cell[0] + dx, cell[1] + dy)
        return nxt if self.is_free(nxt) else cell


@lru_cache(maxsize=4096)
def _free_cells(env: Environment) -> tuple[Cell, ...]:
    return tuple(
        (x, y) for y in range(env.height) for x in range(env.width) if (x, y) not in env.obstacles
    )


@dataclass(frozen=True)
class Path:
    cells: tuple[Cell, ...]

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(tuple(c) for c in self.cells))
        if not self.cells:
            raise ValidationError("a path needs at least one cell")

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def moves(self) -> int:
        return len(self.cells) - 1

    def actions(self) -> list[int]:
        """Move actions along the path (no trailing STOP)."""
        out = []
        for (x0, y0), (x1, y1) in zip(self.cells, self.cells[1:]):
            try:
                out.append(MOVES.index((x1 - x0, y1 - y0)))
            except ValueError:
                raise ValidationError(f"cells {(x0, y0)} and {(x1, y1)} are not 4-adjacent") from None
        return out

    def validate(self, env: Environment) -> None:
        for c in self.cells:
            if not env.is_free(c):
                raise ValidationError(f"path cell {c} is not free in {env.id}")
        self.actions()


@dataclass(frozen=True)
class Instruction:
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValidationError("instruction must contain at least one token")
        if any(not 0 <= t < VOCAB_SIZE for t in self.tokens):
            raise ValidationError(f"token id out of range in {self.tokens}")
        if self.tokens[-1] != STOP_WORD:
            raise ValidationError("instruction must end with the stop word")

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Instruction":
        return cls(tuple(WORD_ID[w] for w in words))

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(VOCAB[t] for t in self.tokens)

    def __str__(self) -> str:
        return " ".join(self.words)


@dataclass(frozen=True)
class Episode:
    """An instruction-route pair inside one environment."""

    env: Environment = field(repr=False)
    instruction: Instruction
    path: Path

    @property
    def env_id(self) -> str:
        return self.env.id

    @property
    def start(self) -> Cell:
        return self.path.cells[0]

    @property
    def goal(self) -> Cell:
        return self.path.cells[-1]


@dataclass(frozen=True)
class Observation:
    wall_bits: tuple[bool, bool, bool, bool]
    pos: tuple[float, float]

    def features(self) -> np.ndarray:
        return np.array([*map(float, self.wall_bits), *self.pos])


def is_connected(width: int, height: int, obstacles: Iterable[Cell]) -> bool:
    """Flood fill: do the free cells form one 4-connected component?"""
    blocked = set(obstacles)
    free = [(x, y) for y in range(height) for x in range(width) if (x, y) not in blocked]
    if not free:
        return False
    seen = {free[0]}
    queue = deque([free[0]])
    while queue:
        x, y = queue.popleft()
        for dx, dy in MOVES:
            nxt = (x + dx, y + dy)
            if (
                0 <= nxt[0] < width
                and 0 <= nxt[1] < height
                and nxt not in blocked
                and nxt not in seen
            ):
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(free)


def generate_environment(
    seed: int,
    width: int,
    height: int,
    obstacle_density: float,
    env_id: str | None = None,
    split: str = "seen",
) -> Environment:
    """Random obstacle layout whose free cells stay connected.

    ``round(density * width * height)`` obstacle cells are drawn without
    replacement; while the free region is disconnected the obstacle with the
    highest row-major index is removed.
    """
    if width < 4 or height < 4:
        raise ValidationError(f"grid must be at least 4x4, got {width}x{height}")
    if not 0.0 <= obstacle_density <= 0.4:
        raise ValidationError(f"obstacle density must lie in [0, 0.4], got {obstacle_density}")
    if split not in ("seen", "unseen"):
        raise ValidationError(f"split must be 'seen' or 'unseen', got {split!r}")
    rng = SeededRng(seed)
    cells = [(x, y) for y in range(height) for x in range(width)]
    count = round(obstacle_density * width * height)
    obstacles = sorted(rng.choose(cells, count), key=lambda c: c[1] * width + c[0])
    while obstacles and not is_connected(width, height, obstacles):
        obstacles.pop()
    return Environment(
        id=env_id if env_id is not None else f"env{seed}",
        width=width,
        height=height,
        obstacles=frozenset(obstacles),
        split=split,
    )


@lru_cache(maxsize=65536)
def _bfs(env: Environment, source: Cell) -> tuple[dict, dict]:
    dist = {source: 0}
    parent: dict = {source: None}
    queue = deque([source])
    while queue:
        cell = queue.popleft()
        for dx, dy in MOVES:
            nxt = (cell[0] + dx, cell[1] + dy)
            if nxt not in dist and env.is_free(nxt):
                dist[nxt] = dist[cell] + 1
                parent[nxt] = cell
                queue.append(nxt)
    return dist, parent


def distance(env: Environment, a: Cell, b: Cell) -> int:
    """Shortest-path move count between two free cells."""
    for c in (a, b):
        if not env.is_free(c):
            raise ValidationError(f"cell {c} is not free in {env.id}")
    dist, _ = _bfs(env, tuple(a))
    if tuple(b) not in dist:
        raise NoPathError(f"{b} unreachable from {a} in {env.id}")
    return dist[tuple(b)]


def shortest_path(env: Environment, start: Cell, goal: Cell) -> Path:
    """BFS shortest path; ties resolved by expanding neighbours N, E, S, W."""
    start, goal = tuple(start), tuple(goal)
    distance(env, start, goal)
    _, parent = _bfs(env, start)
    cells = [goal]
    while cells[-1] != start:
        cells.append(parent[cells[-1]])
    return Path(tuple(reversed(cells)))


def segments_of(path: Path) -> list[tuple[int, int]]:
    """Run-length ``(direction, count)`` macro-segments, each count <= 10."""
    segs: list[list[int]] = []
    for a in path.actions():
        if segs and segs[-1][0] == a and segs[-1][1] < MAX_SEGMENT:
            segs[-1][1] += 1
        else:
            segs.append([a, 1])
    return [(d, n) for d, n in segs]


def render_instruction(path: Path) -> Instruction:
    tokens = []
    for direction, count in segments_of(path):
        tokens += [GO, DIRECTION_IDS[direction], COUNT_IDS[count - 1], STEPS]
    tokens.append(STOP_WORD)
    return Instruction(tuple(tokens))


def is_well_formed(instr: Instruction) -> bool:
    """Structural grammar: ``(go <word> <word> steps)* stop``."""
    toks = instr.tokens
    body = toks[:-1]
    if toks[-1] != STOP_WORD or len(body) % 4:
        return False
    return all(body[i] == GO and body[i + 3] == STEPS for i in range(0, len(body), 4))


def parse_instruction(instr: Instruction) -> list[tuple[int, int]]:
    """Decode a templated instruction back into ``(direction, count)`` segments."""
    if not is_well_formed(instr):
        raise ValidationError(f"instruction does not follow the template: {instr}")
    segs = []
    for i in range(0, len(instr.tokens) - 1, 4):
        d_tok, c_tok = instr.tokens[i + 1], instr.tokens[i + 2]
        if d_tok not in DIRECTION_IDS or c_tok not in COUNT_IDS:
            raise ValidationError(f"bad slot words in {instr}")
        segs.append((DIRECTION_IDS.index(d_tok), COUNT_IDS.index(c_tok) + 1))
    return segs


def sample_episode(
    env: Environment,
    rng: SeededRng,
    min_moves: int,
    max_moves: int,
    max_attempts: int = 1000,
) -> Episode:
    """Rejection-sample a start/goal pair whose distance lies in the range."""
    if min_moves < 1 or max_moves < min_moves:
        raise ValidationError(f"bad move range [{min_moves}, {max_moves}]")
    free = env.free_cells
    if len(free) < 2:
        raise ValidationError(f"{env.id} has fewer than two free cells")
    for _ in range(max_attempts):
        start = free[rng.below(len(free))]
        goal = free[rng.below(len(free))]
        d = _bfs(env, start)[0].get(goal)
        if d is not None and min_moves <= d <= max_moves:
            path = shortest_path(env, start, goal)
            return Episode(env, render_instruction(path), path)
    raise SamplingExhaustedError(
        f"no start/goal pair with {min_moves}..{max_moves} moves in {env.id} "
        f"after {max_attempts} attempts"
    )


def observe(env: Environment, cell: Cell) -> Observation:
    if not env.is_free(cell):
        raise ValidationError(f"cannot observe from blocked cell {cell}")
    x, y = cell
    walls = tuple(not env.is_free((x + dx, y + dy)) for dx, dy in MOVES)
    return Observation(walls, (x / env.width, y / env.height))


@lru_cache(maxsize=65536)
def obs_features(env: Environment, cell: Cell) -> np.ndarray:
    """Cached read-only feature vector of :func:`observe`."""
    feats = observe(env, cell).features()
    feats.setflags(write=False)
    return feats


def execute_instruction(env: Environment, start: Cell, instr: Instruction) -> list[Cell]:
    """Reference decoder: walk the templated instruction from ``start``."""
    cells = [tuple(start)]
    for direction, count in parse_instruction(instr):
        for _ in range(count):
            cells.append(env.step(cells[-1], direction))
    return cells


def make_clients_envs(
    seed: int,
    count: int,
    width: int,
    height: int,
    density: float,
    split: str,
    prefix: str,
) -> list[Environment]:
    return [
        generate_environment(
            SeededRng(seed).child("env", split, i).seed,
            width,
            height,
            density,
            env_id=f"{prefix}{i:02d}",
            split=split,
        )
        for i in range(count)
    ]


def adjacent(a: Sequence[int], b: Sequence[int]) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1
