"""Federated-learning simulator with relevance-aware update auditing.

Trains a shared classifier across simulated nodes, logs per-layer cosine
distances between each node's uploads and the aggregated model, explains any
inference-time decision with layer-wise relevance propagation, and contracts
the two into a per-node suspicion score that pinpoints the training nodes
most responsible for that decision.
"""

__version__ = "0.1.0"
