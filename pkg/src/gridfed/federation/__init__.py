"""Federated training, speaker federation and pre-exploration."""

from .preexplore import (
    STRATEGIES,
    PreExplorationResult,
    run_pre_exploration,
    run_pre_exploration_round,
)
from .protocols import (
    ClientState,
    FederationConfig,
    RoundOutcome,
    RoundRecord,
    TrainResult,
    TrainState,
    augment_client,
    federated_round,
    make_clients,
    matched_rounds,
    run_centralized_training,
    run_fed_round,
    run_federated_speaker_training,
    run_federated_training,
)
from .server import Server

__all__ = [
    "STRATEGIES",
    "ClientState",
    "FederationConfig",
    "PreExplorationResult",
    "RoundOutcome",
    "RoundRecord",
    "Server",
    "TrainResult",
    "TrainState",
    "augment_client",
    "federated_round",
    "make_clients",
    "matched_rounds",
    "run_centralized_training",
    "run_fed_round",
    "run_federated_speaker_training",
    "run_federated_training",
    "run_pre_exploration",
    "run_pre_exploration_round",
]
