"""Neural collaborative filtering scorer with hand-derived gradients.

A (user, item) pair is scored as sigmoid(MLP([u ; v])) where the MLP has
ReLU hidden layers and a linear output unit. Everything here is a pure
function over plain numpy arrays: forward, loss, exact analytic gradients
of the summed binary cross-entropy, and SGD steps. Keeping this layer
side-effect free is what makes federated rounds deterministic and safe to
run from worker threads.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# Predicted probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] before
# any log so the loss stays finite; gradients use the unclamped sigmoid,
# which is exact everywhere the clamp is inactive.
PROB_EPS = 1e-7

GRAD_GROUPS = frozenset({"user", "items", "model"})


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimizer hyperparameters."""

    embed_dim: int = 8
    mlp_hidden_dims: tuple[int, ...] = (8,)
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if any(h < 1 for h in self.mlp_hidden_dims):
            raise ValueError(f"hidden dims must be >= 1, got {self.mlp_hidden_dims}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        # MLP input is the concatenated user and item embedding.
        return (2 * self.embed_dim, *self.mlp_hidden_dims, 1)


@dataclass
class GlobalParams:
    """Server-side state: the item table and the MLP weights."""

    item_embeddings: np.ndarray  # (num_items, embed_dim)
    weights: list[np.ndarray]  # layer l: (fan_in, fan_out)
    biases: list[np.ndarray]  # layer l: (fan_out,)

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.item_embeddings.shape[1]

    def copy(self) -> "GlobalParams":
        return GlobalParams(
            item_embeddings=self.item_embeddings.copy(),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def all_finite(self) -> bool:
        arrays = [self.item_embeddings, *self.weights, *self.biases]
        return all(np.isfinite(a).all() for a in arrays)


@dataclass
class ItemGrads:
    """Sparse item-table gradient: one row per touched item id."""

    ids: np.ndarray  # (t,) int64, sorted unique
    vecs: np.ndarray  # (t, embed_dim)

    @classmethod
    def empty(cls, embed_dim: int) -> "ItemGrads":
        return cls(np.empty(0, dtype=np.int64), np.empty((0, embed_dim)))

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(i): self.vecs[k] for k, i in enumerate(self.ids)}

    def get(self, item_id: int) -> np.ndarray | None:
        pos = np.searchsorted(self.ids, item_id)
        if pos < len(self.ids) and self.ids[pos] == item_id:
            return self.vecs[pos]
        return None

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ModelGrads:
    """Dense MLP gradient with the same layer layout as GlobalParams."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: GlobalParams) -> "ModelGrads":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
        )

    def add_(self, other: "ModelGrads") -> None:
        for a, b in zip(self.d_weights, other.d_weights):
            a += b
        for a, b in zip(self.d_biases, other.d_biases):
            a += b


@dataclass
class GradientBundle:
    """Gradients grouped by parameter family; unrequested groups are None."""

    d_user: np.ndarray | None = None
    d_items: ItemGrads | None = None
    d_model: ModelGrads | None = None


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clamp_probs(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def init_global_params(num_items: int, config: ModelConfig, rng: np.random.Generator) -> GlobalParams:
    """Seeded init: N(0, 0.01) embeddings, uniform(+-0.5/sqrt(fan_in)) weights, zero biases."""
    if num_items < 1:
        raise ValueError("num_items must be >= 1")
    item_embeddings = rng.normal(0.0, 0.01, size=(num_items, config.embed_dim))
    weights, biases = [], []
    dims = config.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 0.5 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return GlobalParams(item_embeddings, weights, biases)


def init_user_embedding(embed_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 0.01, size=embed_dim)


def mlp_forward(x: np.ndarray, weights: list[np.ndarray], biases: list[np.ndarray]):
    """Run the MLP on a batch of concatenated embeddings.

    Args:
        x: (batch, 2 * embed_dim) inputs.
    Returns:
        (logits, activations) where logits has shape (batch,) and
        activations[l] is the input seen by layer l (needed for backprop).
    """
    acts = [x]
    h = x
    last = len(weights) - 1
    for idx, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        h = z if idx == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts[-1][:, 0], acts


def mlp_backward(d_logits: np.ndarray, acts: list[np.ndarray], weights: list[np.ndarray]):
    """Exact backprop through the MLP given dL/dlogit per pair.

    Returns (d_x, d_weights, d_biases). The ReLU derivative at exactly 0 is
    taken as 0.
    """
    g = d_logits[:, None]
    d_ws: list[np.ndarray] = [np.empty(0)] * len(weights)
    d_bs: list[np.ndarray] = [np.empty(0)] * len(weights)
    for idx in reversed(range(len(weights))):
        inp = acts[idx]
        d_ws[idx] = inp.T @ g
        d_bs[idx] = g.sum(axis=0)
        g = g @ weights[idx].T
        if idx > 0:
            g = g * (acts[idx] > 0)
    return g, d_ws, d_bs


def predict(user_embedding: np.ndarray, item_id: int, params: GlobalParams) -> float:
    """Predicted interaction probability, clamped into [eps, 1 - eps]."""
    item_id = int(item_id)
    if not 0 <= item_id < params.num_items:
        raise IndexError(f"item id {item_id} outside [0, {params.num_items})")
    x = np.concatenate([user_embedding, params.item_embeddings[item_id]])[None, :]
    z, _ = mlp_forward(x, params.weights, params.biases)
    return float(clamp_probs(sigmoid(z))[0])


def predict_pairs(user_vecs: np.ndarray, item_vecs: np.ndarray, weights, biases) -> np.ndarray:
    """Clamped probabilities for row-aligned (user, item) embedding pairs."""
    x = np.concatenate([user_vecs, item_vecs], axis=1)
    z, _ = mlp_forward(x, weights, biases)
    return clamp_probs(sigmoid(z))


def score_items(user_embedding: np.ndarray, params: GlobalParams,
                item_ids: np.ndarray | None = None) -> np.ndarray:
    """Logits for one user against the whole item table (or a subset).

    Logits are a strictly monotone proxy for the predicted probability, so
    rankings computed on them match rankings on predict() while staying
    immune to float sigmoid saturation collapsing distinct scores.
    """
    vecs = params.item_embeddings if item_ids is None else params.item_embeddings[item_ids]
    u = np.broadcast_to(user_embedding, vecs.shape)
    x = np.concatenate([u, vecs], axis=1)
    z, _ = mlp_forward(x, params.weights, params.biases)
    return z


def bce_sum(probs: np.ndarray, labels: np.ndarray) -> float:
    """Summed (not averaged) binary cross-entropy over clamped probabilities."""
    p = clamp_probs(np.asarray(probs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_loss(pairs) -> float:
    """Summed BCE over a sequence of (predicted probability, label) pairs."""
    pairs = list(pairs)
    if not pairs:
        logger.debug("bce_loss called with an empty pair sequence; returning 0.0")
        return 0.0
    probs = np.array([p for p, _ in pairs], dtype=np.float64)
    labels = np.array([y for _, y in pairs], dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return bce_sum(probs, labels)


def backward(user_embedding: np.ndarray, item_ids, labels, params: GlobalParams,
             wrt=GRAD_GROUPS) -> GradientBundle:
    """Analytic gradients of the summed BCE loss for one user's pair batch.

    Args:
        user_embedding: (embed_dim,) private user vector.
        item_ids: item ids, one per training pair (duplicates allowed).
        labels: 0/1 labels aligned with item_ids.
        wrt: subset of {"user", "items", "model"} to differentiate.

    Returns a GradientBundle whose unrequested groups are None. d_items only
    carries rows for items present in item_ids.
    """
    wrt = frozenset(wrt)
    unknown = wrt - GRAD_GROUPS
    if unknown:
        raise ValueError(f"unknown gradient groups: {sorted(unknown)}")
    item_ids = np.asarray(item_ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    if item_ids.size == 0:
        raise ValueError("item_ids must be nonempty")
    if item_ids.shape != labels.shape:
        raise ValueError("item_ids and labels must be aligned")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if item_ids.min() < 0 or item_ids.max() >= params.num_items:
        raise IndexError("item id outside the item table")

    d = params.embed_dim
    item_vecs = params.item_embeddings[item_ids]
    u = np.broadcast_to(user_embedding, item_vecs.shape)
    x = np.concatenate([u, item_vecs], axis=1)
    z, acts = mlp_forward(x, params.weights, params.biases)
    # dL/dz of the summed BCE through the sigmoid head.
    dz = sigmoid(z) - labels
    dx, d_ws, d_bs = mlp_backward(dz, acts, params.weights)

    bundle = GradientBundle()
    if "user" in wrt:
        bundle.d_user = dx[:, :d].sum(axis=0)
    if "items" in wrt:
        unique, inverse = np.unique(item_ids, return_inverse=True)
        vecs = np.zeros((unique.size, d))
        np.add.at(vecs, inverse, dx[:, d:])
        bundle.d_items = ItemGrads(unique, vecs)
    if "model" in wrt:
        bundle.d_model = ModelGrads(d_ws, d_bs)
    return bundle


def sgd_step(params, grads, lr: float):
    """One plain SGD step: out = in - lr * grad.

    Accepts either (GlobalParams, GradientBundle) or a plain ndarray/scalar
    with a same-shaped gradient. Only coordinates present in a sparse
    gradient are touched; inputs are never mutated.
    """
    if not lr >= 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if isinstance(params, GlobalParams):
        if not isinstance(grads, GradientBundle):
            raise TypeError("GlobalParams updates need a GradientBundle")
        if grads.d_user is not None:
            raise ValueError("d_user cannot be applied to global parameters")
        out = params.copy()
        if grads.d_items is not None and len(grads.d_items):
            out.item_embeddings[grads.d_items.ids] -= lr * grads.d_items.vecs
        if grads.d_model is not None:
            for w, dw in zip(out.weights, grads.d_model.d_weights):
                w -= lr * dw
            for b, db in zip(out.biases, grads.d_model.d_biases):
                b -= lr * db
        return out
    return params - lr * grads
