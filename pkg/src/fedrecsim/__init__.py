"""Deterministic federated-recommendation simulator.

Implements a small NCF recommender trained federatedly, a subgroup
promotion attack mounted from fake clients, Byzantine-robust aggregation
rules, and exposure/accuracy metrics, all seedable end to end.
"""

__version__ = "0.1.0"
