"""Federated instruction-following agents on a synthetic gridworld.

Decentralised federated training with weighted server aggregation, federated
speaker training for augmentation, and federated pre-exploration that shares
only the language encoder.
"""

__version__ = "0.1.0"
