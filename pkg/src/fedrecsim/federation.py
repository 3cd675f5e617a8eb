"""Federated training rounds over user-partitioned interaction data.

Each client privately owns one user embedding and that user's positives.
A round broadcasts the global parameters, lets every selected client run
local mini-batch SGD (with freshly sampled negatives per local epoch), and
collects pseudo-gradient uploads. Because local training is plain SGD at
the shared learning rate, (broadcast - locally_trained) / lr equals the
sum of per-step gradients, which is what clients accumulate and upload
directly. The server applies the (optionally defended) summed update with
the same learning rate, so a single client with a single local step
reduces exactly to centralized SGD.

Determinism contract: every client draws from an rng derived from
(master seed, round, client id), aggregation always runs in ascending
client-id order, and clients never share mutable state, so threaded and
serial execution produce bit-identical parameters.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import defense as defense_mod
from .data import draw_negatives
from .model import (GlobalParams, ItemGrads, ModelGrads, bce_sum, init_user_embedding,
                    mlp_backward, mlp_forward, sigmoid)

logger = logging.getLogger(__name__)

# rng stream tags namespacing the master seed
STREAM_GLOBAL_INIT = 0
STREAM_USER_INIT = 1
STREAM_ROUND = 2
STREAM_SELECTION = 3
STREAM_SETUP = 4


def round_rng(master_seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """Per-(round, client) stream; independent of scheduling order."""
    return np.random.default_rng([master_seed, STREAM_ROUND, round_index, client_id])


@dataclass(frozen=True)
class RoundPlan:
    """What one federated round should do."""

    round_index: int
    selected_client_ids: tuple[int, ...]
    learning_rate: float
    local_epochs: int = 1
    batch_size: int = 256

    def __post_init__(self):
        if self.round_index < 0:
            raise ValueError("round_index must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(set(self.selected_client_ids)) != len(self.selected_client_ids):
            raise ValueError("selected client ids must be unique")


@dataclass
class ClientUpdate:
    """Uploaded pseudo-gradients; never carries the user embedding."""

    client_id: int
    d_items: ItemGrads
    d_model: ModelGrads
    train_loss: float | None = None

    def all_finite(self) -> bool:
        arrays = [self.d_items.vecs, *self.d_model.d_weights, *self.d_model.d_biases]
        return all(np.isfinite(a).all() for a in arrays)

    def norm(self) -> float:
        total = float(np.sum(self.d_items.vecs ** 2))
        total += sum(float(np.sum(w ** 2)) for w in self.d_model.d_weights)
        total += sum(float(np.sum(b ** 2)) for b in self.d_model.d_biases)
        return float(np.sqrt(total))


@dataclass
class RoundLog:
    round_index: int
    client_norms: dict[int, float]
    dropped_clients: list[int]
    defense_info: dict
    mean_train_loss: float | None
    wall_ms: float

    def mean_norm(self) -> float:
        return float(np.mean(list(self.client_norms.values()))) if self.client_norms else 0.0

    def max_norm(self) -> float:
        return float(max(self.client_norms.values())) if self.client_norms else 0.0


class BenignClient:
    """Honest participant: trains the shared model on its own positives."""

    def __init__(self, client_id: int, positives, num_items: int, embed_dim: int,
                 init_rng: np.random.Generator, negatives_per_positive: int = 4):
        if not positives:
            raise ValueError(f"client {client_id} has no training positives")
        self.client_id = client_id
        self.embedding = init_user_embedding(embed_dim, init_rng)
        self.positives = np.fromiter(sorted(positives), dtype=np.int64)
        self.negatives_per_positive = negatives_per_positive
        # items this user never interacted with, precomputed once
        self._candidates = np.setdiff1d(np.arange(num_items, dtype=np.int64), self.positives)

    def _draw_epochs(self, rng: np.random.Generator, plan: RoundPlan):
        """Sample negatives and shuffle order for every local epoch upfront,
        so the batch walk below touches the rng only through this list."""
        n_pos = self.positives.size
        epochs = []
        for _ in range(plan.local_epochs):
            negs = draw_negatives(self._candidates, self.negatives_per_positive * n_pos, rng)
            ids = np.concatenate([self.positives, negs])
            labels = np.concatenate([np.ones(n_pos), np.zeros(negs.size)])
            order = rng.permutation(ids.size)
            epochs.append((ids[order], labels[order]))
        return epochs

    def train_round(self, params: GlobalParams, rng: np.random.Generator,
                    plan: RoundPlan) -> ClientUpdate:
        """Local SGD over positives plus sampled negatives.

        The upload is the accumulated sum of per-step gradients for the
        touched item rows and the model parameters; the private user
        embedding is updated in place and never leaves the client.
        """
        d = params.embed_dim
        lr = plan.learning_rate
        epochs = self._draw_epochs(rng, plan)
        if not epochs:
            return zero_update(self.client_id, params)

        touched = np.unique(np.concatenate([ids for ids, _ in epochs]))
        local_items = params.item_embeddings[touched].copy()
        weights = [w.copy() for w in params.weights]
        biases = [b.copy() for b in params.biases]
        u = self.embedding.copy()

        acc_items = np.zeros_like(local_items)
        acc_w = [np.zeros_like(w) for w in weights]
        acc_b = [np.zeros_like(b) for b in biases]
        first_epoch_loss = None

        for epoch_index, (ids, labels) in enumerate(epochs):
            epoch_loss = 0.0
            for start in range(0, ids.size, plan.batch_size):
                batch_ids = ids[start: start + plan.batch_size]
                batch_y = labels[start: start + plan.batch_size]
                rows = np.searchsorted(touched, batch_ids)
                x = np.concatenate(
                    [np.broadcast_to(u, (batch_ids.size, d)), local_items[rows]], axis=1)
                z, acts = mlp_forward(x, weights, biases)
                probs = sigmoid(z)
                if epoch_index == 0:
                    epoch_loss += bce_sum(probs, batch_y)
                dz = probs - batch_y
                dx, d_ws, d_bs = mlp_backward(dz, acts, weights)

                du = dx[:, :d].sum(axis=0)
                d_batch_items = np.zeros_like(local_items)
                np.add.at(d_batch_items, rows, dx[:, d:])

                u -= lr * du
                local_items -= lr * d_batch_items
                for w, dw in zip(weights, d_ws):
                    w -= lr * dw
                for b, db in zip(biases, d_bs):
                    b -= lr * db
                acc_items += d_batch_items
                for acc, g in zip(acc_w, d_ws):
                    acc += g
                for acc, g in zip(acc_b, d_bs):
                    acc += g
            if epoch_index == 0:
                first_epoch_loss = epoch_loss / max(ids.size, 1)

        self.embedding = u  # persists across rounds
        return ClientUpdate(
            client_id=self.client_id,
            d_items=ItemGrads(touched, acc_items),
            d_model=ModelGrads(acc_w, acc_b),
            train_loss=first_epoch_loss,
        )


def select_clients(client_ids, fraction: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform sample without replacement of ceil(fraction * n) clients."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"participation fraction must be in (0, 1], got {fraction}")
    ids = sorted(int(c) for c in client_ids)
    if fraction == 1.0:
        return tuple(ids)
    count = int(np.ceil(fraction * len(ids)))
    picked = rng.choice(np.asarray(ids, dtype=np.int64), size=count, replace=False)
    return tuple(int(c) for c in np.sort(picked))


def zero_update(client_id: int, params: GlobalParams) -> ClientUpdate:
    return ClientUpdate(client_id, ItemGrads.empty(params.embed_dim),
                        ModelGrads.zeros_like(params), train_loss=None)


def flatten_client_update(update: ClientUpdate, params: GlobalParams) -> defense_mod.FlatUpdate:
    return defense_mod.flatten_update(
        update.client_id, update.d_items.ids, update.d_items.vecs,
        update.d_model.d_weights, update.d_model.d_biases,
        params.num_items, params.embed_dim)


def _apply_summed_update(params: GlobalParams, item_grad_sum: np.ndarray,
                         w_sums, b_sums, lr: float) -> GlobalParams:
    out = params.copy()
    out.item_embeddings -= lr * item_grad_sum
    for w, dw in zip(out.weights, w_sums):
        w -= lr * dw
    for b, db in zip(out.biases, b_sums):
        b -= lr * db
    return out


def run_round(params: GlobalParams, plan: RoundPlan, clients: dict, master_seed: int,
              defense_config: defense_mod.DefenseConfig | None = None,
              parallel: bool = False, max_workers: int = 8) -> tuple[GlobalParams, RoundLog]:
    """One federated round: broadcast, local training, defense, apply.

    Args:
        clients: client_id -> object exposing train_round(params, rng, plan).
        defense_config: None or kind "none" keeps the plain sparse sum and
            skips flattening to dense vectors entirely.

    Returns the post-round parameters (input params untouched) and a RoundLog.
    """
    t0 = time.perf_counter()
    selected = sorted(plan.selected_client_ids)

    def run_one(cid: int) -> ClientUpdate:
        return clients[cid].train_round(params, round_rng(master_seed, plan.round_index, cid), plan)

    if parallel and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            updates = list(pool.map(run_one, selected))
    else:
        updates = [run_one(cid) for cid in selected]

    dropped = [u.client_id for u in updates if not u.all_finite()]
    if dropped:
        logger.warning("round %d: dropping non-finite updates from clients %s",
                       plan.round_index, dropped)
        updates = [u for u in updates if u.all_finite()]

    norms = {u.client_id: u.norm() for u in updates}
    losses = [u.train_loss for u in updates if u.train_loss is not None]
    mean_loss = float(np.mean(losses)) if losses else None

    defense_info: dict = {"kind": "none"}
    if updates:
        use_defense = defense_config is not None and defense_config.kind != "none"
        if use_defense:
            flats = [flatten_client_update(u, params) for u in updates]
            total_vec, defense_info = defense_mod.aggregate(flats, defense_config)
            layer_shapes = [(w.shape, b.shape) for w, b in zip(params.weights, params.biases)]
            item_sum, w_sums, b_sums = defense_mod.unflatten_vector(
                total_vec, params.num_items, params.embed_dim, layer_shapes)
        else:
            item_sum = np.zeros_like(params.item_embeddings)
            w_sums = [np.zeros_like(w) for w in params.weights]
            b_sums = [np.zeros_like(b) for b in params.biases]
            for u in updates:  # already in ascending client-id order
                if len(u.d_items):
                    np.add.at(item_sum, u.d_items.ids, u.d_items.vecs)
                for acc, g in zip(w_sums, u.d_model.d_weights):
                    acc += g
                for acc, g in zip(b_sums, u.d_model.d_biases):
                    acc += g
        params = _apply_summed_update(params, item_sum, w_sums, b_sums, plan.learning_rate)

    log = RoundLog(
        round_index=plan.round_index,
        client_norms=norms,
        dropped_clients=dropped,
        defense_info=defense_info,
        mean_train_loss=mean_loss,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    return params, log
