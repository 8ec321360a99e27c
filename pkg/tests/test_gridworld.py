import itertools

import numpy as np
import pytest

from gridfed.errors import NoPathError, SamplingExhaustedError, ValidationError
from gridfed.gridworld import (
    EAST,
    MOVES,
    NORTH,
    SOUTH,
    STOP,
    WEST,
    Environment,
    Instruction,
    Path,
    execute_instruction,
    generate_environment,
    is_connected,
    is_well_formed,
    observe,
    parse_instruction,
    render_instruction,
    sample_episode,
    segments_of,
    shortest_path,
)
from gridfed.rng import SeededRng


def floyd_warshall(env: Environment) -> dict:
    """All-pairs distances by relaxation; independent of the BFS under test."""
    cells = env.free_cells
    idx = {c: i for i, c in enumerate(cells)}
    n = len(cells)
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0)
    for c in cells:
        for dx, dy in MOVES:
            nb = (c[0] + dx, c[1] + dy)
            if nb in idx:
                d[idx[c], idx[nb]] = 1
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return {(a, b): d[idx[a], idx[b]] for a in cells for b in cells}


def flood_fill_free(env: Environment) -> set:
    free = env.free_cells
    seen, stack = {free[0]}, [free[0]]
    while stack:
        x, y = stack.pop()
        for dx, dy in MOVES:
            nb = (x + dx, y + dy)
            if env.is_free(nb) and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen


def test_generate_examples():
    env = generate_environment(7, 8, 8, 0.0)
    assert len(env.free_cells) == 64 and not env.obstacles
    assert generate_environment(7, 8, 8, 0.2) == generate_environment(7, 8, 8, 0.2)
    small = generate_environment(7, 4, 4, 0.2)
    assert flood_fill_free(small) == set(small.free_cells)


@pytest.mark.parametrize("seed", range(40))
def test_generated_environments_are_connected(seed):
    env = generate_environment(seed, 4 + seed % 5, 4 + seed % 3, 0.4)
    assert flood_fill_free(env) == set(env.free_cells)
    assert len(env.free_cells) >= 0.25 * env.width * env.height
    assert is_connected(env.width, env.height, env.obstacles)


def test_generate_rejects_bad_parameters():
    for args in [(0, 3, 8, 0.1), (0, 8, 3, 0.1), (0, 8, 8, 0.5), (0, 8, 8, -0.1)]:
        with pytest.raises(ValidationError):
            generate_environment(*args)
    with pytest.raises(ValidationError):
        generate_environment(0, 5, 5, 0.1, split="test")


def test_shortest_path_examples():
    env = Environment("e", 3, 3)
    assert shortest_path(env, (1, 1), (1, 1)).cells == ((1, 1),)
    assert len(shortest_path(env, (0, 0), (2, 2))) == 5
    # Ties expand N, E, S, W: from (0,0) east comes before south.
    assert shortest_path(env, (0, 0), (1, 1)).cells[1] == (1, 0)
    wall = Environment("w", 3, 3, frozenset({(1, 0), (1, 1)}))
    assert len(shortest_path(wall, (0, 0), (2, 0))) == 7


def test_shortest_path_unreachable():
    env = Environment("split", 4, 4, frozenset({(1, y) for y in range(4)}))
    with pytest.raises(NoPathError):
        shortest_path(env, (0, 0), (3, 3))


def test_shortest_path_exhaustive_small_grids():
    # Every 4x4 grid with at most 4 obstacles, every ordered pair of free cells.
    cells = [(x, y) for y in range(4) for x in range(4)]
    checked = 0
    for k in range(5):
        for obs in itertools.combinations(cells, k):
            env = Environment("g", 4, 4, frozenset(obs))
            oracle = floyd_warshall(env)
            for (a, b), d in oracle.items():
                if np.isinf(d):
                    with pytest.raises(NoPathError):
                        shortest_path(env, a, b)
                    continue
                p = shortest_path(env, a, b)
                assert p.moves == d and p.cells[0] == a and p.cells[-1] == b
                p.validate(env)
                checked += 1
    assert checked > 100_000


def test_render_examples():
    assert render_instruction(Path(((0, 0),))).words == ("stop",)
    assert render_instruction(Path(((0, 0), (1, 0), (2, 0)))).words == ("go", "east", "two", "steps", "stop")
    assert render_instruction(Path(((0, 0), (0, 1), (1, 1)))).words == (
        "go", "south", "one", "steps", "go", "east", "one", "steps", "stop",
    )


def test_long_straight_runs_split_at_ten():
    path = Path(tuple((x, 0) for x in range(13)))
    assert segments_of(path) == [(EAST, 10), (EAST, 2)]
    assert str(render_instruction(path)) == "go east ten steps go east two steps stop"


def _canonical_sequences(max_len: int):
    segs = [(d, n) for d in range(4) for n in range(1, 11)]
    for length in range(max_len + 1):
        for seq in itertools.product(segs, repeat=length):
            # Equal consecutive directions only appear after a full segment of ten.
            if all(a[0] != b[0] or a[1] == 10 for a, b in zip(seq, seq[1:])):
                yield seq


def _path_from(seq, start=(30, 30)) -> Path:
    cells = [start]
    for d, n in seq:
        for _ in range(n):
            dx, dy = MOVES[d]
            cells.append((cells[-1][0] + dx, cells[-1][1] + dy))
    return Path(tuple(cells))


def test_render_injective_on_segment_sequences():
    seen = {}
    for seq in _canonical_sequences(2):
        path = _path_from(seq)
        assert segments_of(path) == list(seq)
        toks = render_instruction(path).tokens
        assert toks not in seen, (seq, seen.get(toks))
        seen[toks] = seq
        assert parse_instruction(Instruction(toks)) == list(seq)


@pytest.mark.parametrize("seed", range(10))
def test_parse_back_reproduces_path(seed):
    env = generate_environment(seed, 7, 6, 0.25)
    rng = SeededRng(seed)
    for _ in range(30):
        ep = sample_episode(env, rng, 1, 8)
        assert execute_instruction(env, ep.start, ep.instruction) == list(ep.path.cells)
        assert ep.instruction == render_instruction(ep.path)
        assert (ep.start, ep.goal) == (ep.path.cells[0], ep.path.cells[-1])
        ep.path.validate(env)


def test_sample_episode_adjacent():
    env = Environment("e", 5, 5)
    rng = SeededRng(2)
    for _ in range(50):
        ep = sample_episode(env, rng, 1, 1)
        (x0, y0), (x1, y1) = ep.start, ep.goal
        assert abs(x0 - x1) + abs(y0 - y1) == 1


def test_sample_episode_covers_all_qualifying_pairs():
    env = Environment("e", 4, 4)
    qualifying = {
        (a, b)
        for a in env.free_cells
        for b in env.free_cells
        if 2 <= abs(a[0] - b[0]) + abs(a[1] - b[1]) <= 3
    }
    rng = SeededRng(0)
    drawn = set()
    for _ in range(10_000):
        ep = sample_episode(env, rng, 2, 3)
        drawn.add((ep.start, ep.goal))
    assert drawn == qualifying


def test_sample_episode_errors():
    env = Environment("e", 4, 4)
    with pytest.raises(SamplingExhaustedError):
        sample_episode(env, SeededRng(0), 7, 9)
    with pytest.raises(ValidationError):
        sample_episode(env, SeededRng(0), 0, 2)


def test_observe_examples():
    env = Environment("e", 5, 5, frozenset({(3, 2)}))
    corner = observe(env, (0, 0))
    assert corner.wall_bits == (True, False, False, True)
    assert observe(env, (1, 1)).wall_bits == (False, False, False, False)
    assert observe(env, (2, 2)).wall_bits == (False, True, False, False)
    assert observe(env, (2, 2)).pos == (2 / 5, 2 / 5)
    with pytest.raises(ValidationError):
        observe(env, (3, 2))


def test_step_convention():
    env = Environment("e", 4, 4)
    assert env.step((1, 1), NORTH) == (1, 0)
    assert env.step((1, 1), EAST) == (2, 1)
    assert env.step((1, 1), SOUTH) == (1, 2)
    assert env.step((1, 1), WEST) == (0, 1)
    assert env.step((1, 1), STOP) == (1, 1)
    assert env.step((0, 0), NORTH) == (0, 0)


def test_instruction_validation():
    with pytest.raises(ValidationError):
        Instruction(())
    with pytest.raises(ValidationError):
        Instruction((0, 1))
    with pytest.raises(ValidationError):
        Instruction((99, 6))
    assert not is_well_formed(Instruction.from_words(["go", "stop"]))
    with pytest.raises(ValidationError):
        parse_instruction(Instruction.from_words(["go", "one", "east", "steps", "stop"]))
