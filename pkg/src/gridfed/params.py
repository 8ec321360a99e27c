"""Flat parameter vectors, named partitions and weighted aggregation.

A parameter vector is a plain 1-D ``float64`` numpy array. Architectural
blocks (language encoder, trajectory encoder, decision head) are contiguous
named slices described by a :class:`PartitionSpec`, which is what makes
partial federation possible: only some segments are exchanged with the
server.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, ProtocolError, ValidationError
from .rng import SeededRng

AGENT_SEGMENTS = ("lang_encoder", "traj_encoder", "decision_head")


def as_param_vector(values) -> np.ndarray:
    """Validate and copy ``values`` into a finite 1-D float64 array."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"parameter vector must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("parameter vector contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


@dataclass(frozen=True)
class PartitionSpec:
    """Ordered, disjoint segments that tile ``[0, total)`` exactly."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(*s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        names = [s.name for s in segs]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate segment names in {names}")
        cursor = 0
        for s in segs:
            if s.length < 0:
                raise ValidationError(f"segment {s.name!r} has negative length")
            if s.offset != cursor:
                raise ValidationError(
                    f"segment {s.name!r} starts at {s.offset}, expected {cursor}"
                )
            cursor = s.stop

    @classmethod
    def from_lengths(cls, pairs: Iterable[tuple[str, int]]) -> "PartitionSpec":
        segs, offset = [], 0
        for name, length in pairs:
            segs.append(Segment(name, offset, int(length)))
            offset += int(length)
        return cls(tuple(segs))

    @property
    def total(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.segments)

    def __getitem__(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise ValidationError(f"unknown segment {name!r}; known: {self.names}")

    def check_names(self, names: Iterable[str]) -> frozenset[str]:
        names = frozenset(names)
        unknown = names - set(self.names)
        if unknown:
            raise ValidationError(f"unknown segment(s) {sorted(unknown)}; known: {self.names}")
        return names

    def shared_length(self, shared: Iterable[str]) -> int:
        shared = self.check_names(shared)
        return sum(s.length for s in self.segments if s.name in shared)

    def check_vector(self, vec: np.ndarray) -> None:
        if len(vec) != self.total:
            raise DimensionError(f"vector length {len(vec)} != partition total {self.total}")


def mask_to_segments(delta, spec: PartitionSpec, shared: Iterable[str]) -> np.ndarray:
    """Copy of ``delta`` with every coordinate outside ``shared`` set to 0."""
    delta = np.asarray(delta, dtype=np.float64)
    spec.check_vector(delta)
    shared = spec.check_names(shared)
    out = np.zeros_like(delta)
    for seg in spec.segments:
        if seg.name in shared:
            out[seg.slice] = delta[seg.slice]
    return out


def extract_segments(vec, spec: PartitionSpec, shared: Iterable[str]) -> np.ndarray:
    """Concatenate the ``shared`` segments of ``vec`` in partition order."""
    vec = np.asarray(vec, dtype=np.float64)
    spec.check_vector(vec)
    shared = spec.check_names(shared)
    parts = [vec[s.slice] for s in spec.segments if s.name in shared]
    return np.concatenate(parts) if parts else np.zeros(0)


def insert_segments(vec, spec: PartitionSpec, shared: Iterable[str], values) -> np.ndarray:
    """Inverse of :func:`extract_segments`: overwrite ``shared`` segments with ``values``."""
    vec = np.array(vec, dtype=np.float64)
    spec.check_vector(vec)
    shared = spec.check_names(shared)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != spec.shared_length(shared):
        raise ProtocolError(
            f"shared payload has length {len(values)}, "
            f"segments {sorted(shared)} need {spec.shared_length(shared)}"
        )
    cursor = 0
    for s in spec.segments:
        if s.name in shared:
            vec[s.slice] = values[cursor : cursor + s.length]
            cursor += s.length
    return vec


def shared_fraction(spec: PartitionSpec, shared: Iterable[str]) -> float:
    if spec.total == 0:
        raise ValidationError("empty partition")
    return spec.shared_length(shared) / spec.total


@dataclass(frozen=True)
class Delta:
    """A parameter difference kept as the unevaluated sum ``head + tail``.

    ``head`` is the rounded difference and ``tail`` its exact rounding error,
    so the server can reconstruct ``new`` from ``old + delta`` without loss.
    """

    head: np.ndarray
    tail: np.ndarray

    def __len__(self) -> int:
        return len(self.head)

    def to_array(self) -> np.ndarray:
        return self.head + self.tail


def model_delta(new, old) -> Delta:
    """Error-free difference ``new - old`` (Knuth's TwoSum)."""
    a = np.asarray(new, dtype=np.float64)
    b = -np.asarray(old, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot subtract shapes {b.shape} and {a.shape}")
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return Delta(s, err)


class Upload(NamedTuple):
    """What a client sends to the server: a delta, its sample count and its id."""

    delta: Delta | np.ndarray
    n: int
    client_id: str = ""


def _delta_parts(delta) -> list[np.ndarray]:
    if isinstance(delta, Delta):
        return [np.asarray(delta.head, dtype=np.float64), np.asarray(delta.tail, dtype=np.float64)]
    return [np.asarray(delta, dtype=np.float64)]


def aggregate(base, updates: Sequence, eta: float) -> np.ndarray:
    """Server step ``base + eta * sum_i (n_i / sum_j n_j) * delta_i``.

    Updates are summed in ascending ``client_id`` order and every coordinate is
    accumulated with :func:`math.fsum`, so the result is independent of the
    order in which uploads arrived. With ``eta == 1`` and one upload the result
    is exactly the client's model.
    """
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 1:
        raise DimensionError("base must be 1-D")
    if len(updates) == 0:
        raise ProtocolError("aggregate needs at least one update")
    ups = [u if isinstance(u, Upload) else Upload(*u) for u in updates]
    for u in ups:
        if len(u.delta) != len(base):
            raise DimensionError(f"delta length {len(u.delta)} != base length {len(base)}")
        if not u.n > 0:
            raise ValidationError(f"sample count must be positive, got {u.n}")
    if not math.isfinite(eta):
        raise ValidationError("eta must be finite")
    ups = sorted(ups, key=lambda u: u.client_id)

    total = sum(u.n for u in ups)
    rows = [base]
    with np.errstate(over="ignore", invalid="ignore"):
        for u in ups:
            scale = eta * (u.n / total)
            rows.extend(scale * part for part in _delta_parts(u.delta))
    terms = np.vstack(rows)
    try:
        out = np.fromiter((math.fsum(col) for col in terms.T), dtype=np.float64, count=len(base))
    except OverflowError:
        raise ValidationError("aggregation overflowed") from None
    if not np.all(np.isfinite(out)):
        raise ValidationError("aggregation produced non-finite parameters")
    return out


def participant_count(rate: float, population: int) -> int:
    if rate <= 0:
        return 0
    return min(population, max(1, round(rate * population)))


def sample_participants(ids: Sequence, rate: float, rng: SeededRng) -> list:
    """Pick ``max(1, round(rate * len(ids)))`` distinct ids uniformly.

    The chosen ids are returned in their original order.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValidationError(f"participation rate must lie in [0, 1], got {rate}")
    if rate == 0:
        return []
    if len(ids) == 0:
        raise ProtocolError("cannot sample participants from an empty client list")
    k = participant_count(rate, len(ids))
    picked = set(rng.choose(range(len(ids)), k))
    return [cid for i, cid in enumerate(ids) if i in picked]
