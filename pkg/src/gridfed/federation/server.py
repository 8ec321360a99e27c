"""Server half of the federation protocol.

The server only ever sees parameter payloads and sample counts. This module
deliberately imports nothing but the parameter layer, so no environment,
episode or observation type can reach it; an architectural test enforces this.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ProtocolError
from ..params import Upload, aggregate, as_param_vector


@dataclass(frozen=True)
class Server:
    """Authoritative shared payload plus the completed-round counter.

    During full-model training the payload is the whole parameter vector;
    during partial sharing it is the concatenation of the shared segments.
    """

    weights: np.ndarray
    round: int = 0
    participants: tuple[tuple[str, ...], ...] = field(default=())

    def __post_init__(self):
        vec = as_param_vector(self.weights)
        vec.setflags(write=False)
        object.__setattr__(self, "weights", vec)

    def broadcast(self) -> np.ndarray:
        return self.weights.copy()

    def apply(self, uploads: Sequence[Upload], eta: float) -> "Server":
        """Aggregate one round's uploads and advance the round counter."""
        for u in uploads:
            if not isinstance(u, Upload):
                raise ProtocolError(f"server accepts Upload records only, got {type(u).__name__}")
        new = aggregate(self.weights, uploads, eta)
        ids = tuple(sorted(u.client_id for u in uploads))
        return Server(new, self.round + 1, self.participants + (ids,))

    def skip(self) -> "Server":
        """Close a round nobody participated in."""
        return Server(self.weights, self.round + 1, self.participants + ((),))
