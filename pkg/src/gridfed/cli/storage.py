"""On-disk formats: environments, episode sets, checkpoints and JSONL logs.

Environment file (one environment per line)::

    env <id> <split> <width> <height> <x,y;x,y;...|->

Episode file (tab separated, one episode per line)::

    <env_id>\\t<x,y;x,y;...>\\t<space separated instruction words>

Checkpoint (all integers little-endian)::

    b"FVLNCKPT1"
    u8   kind                 0 = agent, 1 = speaker
    u32  n_dims, n_dims * u32 model dimensions
    u32  n_segments, per segment: u16 name length, utf-8 name, u64 offset, u64 length
    u64  n_params, n_params * f64 parameters
    u64  checksum             first 8 bytes (LE) of BLAKE2b over everything above
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path as FsPath
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..agent import AgentDims, AgentParams
from ..errors import ChecksumError, ValidationError
from ..gridworld import Environment, Episode, Instruction, Path
from ..params import PartitionSpec, Segment
from ..speaker import FEATURES, SpeakerParams

MAGIC = b"FVLNCKPT1"
KINDS = {"agent": 0, "speaker": 1}


def _cells_text(cells: Iterable[tuple[int, int]]) -> str:
    return ";".join(f"{x},{y}" for x, y in cells)


def _parse_cells(text: str) -> list[tuple[int, int]]:
    if text == "-":
        return []
    return [tuple(int(v) for v in item.split(",")) for item in text.split(";")]


def write_environments(path: FsPath, envs: Sequence[Environment]) -> None:
    lines = []
    for env in envs:
        obstacles = sorted(env.obstacles, key=lambda c: (c[1], c[0]))
        lines.append(
            f"env {env.id} {env.split} {env.width} {env.height} {_cells_text(obstacles) or '-'}"
        )
    FsPath(path).write_text("\n".join(lines) + "\n")


def read_environments(path: FsPath) -> dict[str, Environment]:
    envs = {}
    for lineno, line in enumerate(FsPath(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6 or parts[0] != "env":
            raise ValidationError(f"{path}:{lineno}: malformed environment line")
        _, env_id, split, w, h, obs = parts
        envs[env_id] = Environment(env_id, int(w), int(h), frozenset(_parse_cells(obs)), split)
    return envs


def write_episodes(path: FsPath, episodes: Sequence[Episode]) -> None:
    lines = [f"{ep.env_id}\t{_cells_text(ep.path.cells)}\t{ep.instruction}" for ep in episodes]
    FsPath(path).write_text("".join(line + "\n" for line in lines))


def read_episodes(path: FsPath, envs: Mapping[str, Environment]) -> list[Episode]:
    out = []
    for lineno, line in enumerate(FsPath(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            env_id, cells, words = line.split("\t")
            env = envs[env_id]
        except (ValueError, KeyError):
            raise ValidationError(f"{path}:{lineno}: malformed episode line") from None
        path_obj = Path(tuple(_parse_cells(cells)))
        path_obj.validate(env)
        out.append(Episode(env, Instruction.from_words(words.split()), path_obj))
    return out


def checkpoint_bytes(model: AgentParams | SpeakerParams) -> bytes:
    if isinstance(model, AgentParams):
        kind, dims = KINDS["agent"], model.dims.as_tuple()
    elif isinstance(model, SpeakerParams):
        kind, dims = KINDS["speaker"], model.dims
    else:
        raise ValidationError(f"cannot checkpoint {type(model).__name__}")
    buf = bytearray(MAGIC)
    buf += struct.pack("<B", kind)
    buf += struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    segs = model.spec.segments
    buf += struct.pack("<I", len(segs))
    for s in segs:
        name = s.name.encode("utf-8")
        buf += struct.pack("<H", len(name)) + name + struct.pack("<QQ", s.offset, s.length)
    params = np.ascontiguousarray(model.params, dtype="<f8")
    buf += struct.pack("<Q", len(params)) + params.tobytes()
    buf += _checksum(bytes(buf))
    return bytes(buf)


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_checkpoint(path: FsPath, model) -> None:
    FsPath(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes):
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise ValidationError("not a checkpoint file (bad magic)")
    body, tail = data[:-8], data[-8:]
    if _checksum(body) != tail:
        raise ChecksumError("checkpoint checksum mismatch")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise ValidationError("truncated checkpoint")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    (kind,) = take("<B")
    (n_dims,) = take("<I")
    dims = take(f"<{n_dims}I")
    (n_segs,) = take("<I")
    segs = []
    for _ in range(n_segs):
        (n,) = take("<H")
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        offset, length = take("<QQ")
        segs.append(Segment(name, offset, length))
    (n_params,) = take("<Q")
    if pos + 8 * n_params != len(body):
        raise ValidationError("checkpoint payload length mismatch")
    params = np.frombuffer(body, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    table = PartitionSpec(tuple(segs))
    if kind == KINDS["agent"]:
        V, de, do, A, dh = dims
        model = AgentParams(params, AgentDims(V, de, do, A, dh))
    elif kind == KINDS["speaker"]:
        if dims[0] != FEATURES:
            raise ValidationError(f"speaker feature size {dims[0]} != {FEATURES}")
        model = SpeakerParams(params, dims[1])
    else:
        raise ValidationError(f"unknown checkpoint kind {kind}")
    if model.spec != table:
        raise ValidationError("checkpoint partition table does not match its dimensions")
    return model


def load_checkpoint(path: FsPath):
    return parse_checkpoint(FsPath(path).read_bytes())


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def write_jsonl(path: FsPath, records: Iterable[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec)) + "\n")


def read_jsonl(path: FsPath) -> list[dict]:
    return [json.loads(line) for line in FsPath(path).read_text().splitlines() if line.strip()]


def write_json(path: FsPath, obj) -> None:
    FsPath(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def read_json(path: FsPath):
    return json.loads(FsPath(path).read_text())
