"""Subgroup promotion attack built on approximated group embeddings.

The malicious client never sees real interactions. Each round it
1. augments its interested-item set with the top-k most similar items
   (cosine to the interested-centroid) to form the relevant set,
2. approximates target-group and non-target-group user embeddings by
   local training against relevant items (positives) and target items
   (negatives), with a hinge repulsion term pushing the two groups apart,
3. derives adaptive loss coefficients from where target items currently
   rank for each approximated group,
4. locally optimizes target-item embeddings and the MLP to promote
   target items to the approximated target group and demote them for the
   rest, plus a cosine alignment pull toward the (frozen) relevant items,
and uploads the resulting pseudo-gradient. Each of the four enhancements
(repulsion, relevant-item construction, alignment, adaptive tuning) can
be toggled off independently, which with all four off reduces the client
to the plain approximate-and-promote scheme.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (GlobalParams, ItemGrads, ModelGrads, bce_sum, mlp_backward,
                    mlp_forward, score_items, sigmoid)
from .federation import ClientUpdate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    """Attacker knowledge and knobs; items are referenced by public id."""

    target_items: frozenset[int]
    interested_items: frozenset[int]
    margin: float = 10.0  # hinge margin for the repulsion term
    alignment_weight: float = 0.5
    relevant_top_k: int = 10
    approx_count: int = 8  # approximated embeddings per group
    approx_steps: int = 20
    approx_lr: float = 0.01
    promo_steps: int = 20
    promo_lr: float = 0.01
    # step size for the MLP in the promotion loop; None means promo_lr
    promo_model_lr: float | None = None
    # multiplier on the crafted pseudo-gradient before upload. Benign
    # updates are bounded by one local pass at the server's learning rate,
    # so scaling up is what makes a 0.2% malicious minority stick between
    # its own aggregation turns.
    upload_scale: float = 1.0
    # L2 cap on the crafted upload (same norm the server-side clipping
    # defense measures). An unbounded upload can kick the shared model
    # hard enough that benign clients react with huge corrective updates
    # and the whole system blows up, which serves nobody, least of all
    # the attacker. None disables the cap.
    update_clip: float | None = None
    # epochs to sit out before uploading anything. Poisoning a model that
    # has not broken symmetry yet can freeze it at the no-signal plateau,
    # and the early broadcast is too uninformative to approximate users
    # from anyway, so a patient attacker waits a few epochs.
    warmup_rounds: int = 0
    # probe-based self-calibration of the crafted update's magnitude.
    # Real user embeddings are trained toward the item directions they
    # like, so random mixtures of item rows (popularity-weighted, rescaled
    # to plausible user norms) stand in for the hidden user population.
    # The upload is scaled down (binary search) until at most exposure_cap
    # of the probes expose a target item, which keeps the promotion
    # taste-specific instead of an indiscriminate popularity blast.
    # probe_count=0 disables it.
    probe_count: int = 0
    exposure_cap: float = 0.1
    probe_top_k: int = 5
    repulsion: bool = True
    relevant_items: bool = True
    alignment: bool = True
    adaptive_tuning: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_items",
                           frozenset(int(i) for i in self.target_items))
        object.__setattr__(self, "interested_items",
                           frozenset(int(i) for i in self.interested_items))
        if not self.target_items:
            raise ValueError("target_items must be nonempty")
        if not self.interested_items:
            raise ValueError("interested_items must be nonempty")
        if self.target_items & self.interested_items:
            raise ValueError("target_items and interested_items must be disjoint")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alignment_weight < 0:
            raise ValueError("alignment_weight must be >= 0")
        if self.relevant_top_k < 0:
            raise ValueError("relevant_top_k must be >= 0")
        if self.approx_count < 1:
            raise ValueError("approx_count must be >= 1")
        if self.approx_steps < 0 or self.promo_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.approx_lr <= 0 or self.promo_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.promo_model_lr is not None and self.promo_model_lr < 0:
            raise ValueError("promo_model_lr must be >= 0 or None")
        if self.upload_scale <= 0:
            raise ValueError("upload_scale must be positive")
        if self.update_clip is not None and self.update_clip <= 0:
            raise ValueError("update_clip must be positive or None")
        if self.warmup_rounds < 0:
            raise ValueError("warmup_rounds must be >= 0")
        if self.probe_count < 0:
            raise ValueError("probe_count must be >= 0")
        if not 0.0 <= self.exposure_cap <= 1.0:
            raise ValueError("exposure_cap must be in [0, 1]")
        if self.probe_top_k < 1:
            raise ValueError("probe_top_k must be >= 1")
        if self.probe_sigma <= 0:
            raise ValueError("probe_sigma must be positive")


@dataclass
class AttackState:
    """Per-malicious-client mutable state, persisted across rounds."""

    target_group_embeddings: np.ndarray  # (m, d)
    non_target_group_embeddings: np.ndarray  # (m, d)
    relevant_items: frozenset[int]
    sampled_non_target: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64))
    gamma_target: float = 0.5
    gamma_non_target: float = 0.5

    @classmethod
    def fresh(cls, config: AttackConfig, embed_dim: int,
              rng: np.random.Generator) -> "AttackState":
        m = config.approx_count
        return cls(
            target_group_embeddings=rng.normal(0.0, 0.01, size=(m, embed_dim)),
            non_target_group_embeddings=rng.normal(0.0, 0.01, size=(m, embed_dim)),
            relevant_items=config.interested_items,
        )


def _sorted_ids(ids) -> np.ndarray:
    return np.fromiter(sorted(ids), dtype=np.int64) if ids else np.empty(0, dtype=np.int64)


def build_relevant_items(params: GlobalParams, interested_items, target_items,
                         k: int) -> frozenset[int]:
    """Interested items plus the k nearest others by cosine to their centroid.

    Candidates exclude both the interested and the target items; ties in
    cosine break toward the smaller item id. A zero-norm centroid cannot be
    compared against anything, so the set stays unaugmented.
    """
    interested = frozenset(int(i) for i in interested_items)
    if k == 0:
        return interested
    centroid = params.item_embeddings[_sorted_ids(interested)].mean(axis=0)
    c_norm = np.linalg.norm(centroid)
    if c_norm == 0.0:
        logger.warning("interested-item centroid has zero norm; "
                       "skipping relevant-item augmentation")
        return interested
    excluded = interested | frozenset(int(i) for i in target_items)
    candidates = np.array([i for i in range(params.num_items) if i not in excluded],
                          dtype=np.int64)
    if candidates.size == 0:
        return interested
    vecs = params.item_embeddings[candidates]
    norms = np.linalg.norm(vecs, axis=1)
    cosines = np.full(candidates.size, -np.inf)
    ok = norms > 0
    cosines[ok] = (vecs[ok] @ centroid) / (norms[ok] * c_norm)
    # descending cosine, ties toward the smaller id
    order = np.lexsort((candidates, -cosines))
    top = candidates[order[: min(k, candidates.size)]]
    return interested | frozenset(int(i) for i in top)


def resample_non_target_items(params: GlobalParams, config: AttackConfig,
                              relevant: frozenset[int],
                              rng: np.random.Generator) -> np.ndarray:
    """Fresh uniform sample standing in for non-target-group positives.

    Matches the interested-item count and avoids everything the attacker
    already treats as target-group signal (relevant and target items).
    """
    excluded = relevant | config.target_items
    pool = np.array([i for i in range(params.num_items) if i not in excluded],
                    dtype=np.int64)
    want = len(config.interested_items)
    if pool.size < want:
        logger.debug("non-target sample pool has only %d items, wanted %d",
                     pool.size, want)
        want = pool.size
    if want == 0:
        return np.empty(0, dtype=np.int64)
    picked = rng.choice(pool, size=want, replace=False)
    return np.sort(picked)


def _pair_batch(user_vecs: np.ndarray, item_vecs: np.ndarray) -> np.ndarray:
    """All (user, item) crossings as MLP input rows, users outermost."""
    m, t = user_vecs.shape[0], item_vecs.shape[0]
    return np.concatenate(
        [np.repeat(user_vecs, t, axis=0), np.tile(item_vecs, (m, 1))], axis=1)


def _group_bce_grads(user_vecs: np.ndarray, item_vecs: np.ndarray,
                     labels_per_item: np.ndarray, weights, biases):
    """Summed BCE over the user x item cross product and its gradient with
    respect to the user embeddings. Returns (loss, d_users)."""
    m, d = user_vecs.shape
    t = item_vecs.shape[0]
    if t == 0:
        return 0.0, np.zeros_like(user_vecs)
    x = _pair_batch(user_vecs, item_vecs)
    labels = np.tile(labels_per_item, m)
    z, acts = mlp_forward(x, weights, biases)
    probs = sigmoid(z)
    loss = bce_sum(probs, labels)
    dz = probs - labels
    dx, _, _ = mlp_backward(dz, acts, weights)
    return loss, dx[:, :d].reshape(m, t, d).sum(axis=1)


def repulsion_loss_and_grads(target_emb: np.ndarray, non_target_emb: np.ndarray,
                             margin: float):
    """Mean hinge-squared separation over all cross-group embedding pairs.

    A pair at distance zero sits at the symmetric stationary point, so it
    contributes margin^2 / 2 to the loss but no gradient.
    """
    diff = target_emb[:, None, :] - non_target_emb[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    slack = np.maximum(0.0, margin - dist)
    pairs = dist.size
    loss = float(np.sum(0.5 * slack ** 2)) / pairs
    factor = np.divide(slack, dist, out=np.zeros_like(dist), where=dist > 0) / pairs
    pushed = factor[:, :, None] * diff
    return loss, -pushed.sum(axis=1), pushed.sum(axis=0)


def approximation_loss_and_grads(target_emb: np.ndarray, non_target_emb: np.ndarray,
                                 params: GlobalParams, config: AttackConfig,
                                 relevant_ids: np.ndarray, sampled_ids: np.ndarray):
    """Full approximation objective and its gradients for both embedding
    groups: relevant items as target-group positives, target items as their
    hard negatives, the sampled set as non-target positives, plus the
    optional repulsion term."""
    target_ids = _sorted_ids(config.target_items)
    ids_t = np.concatenate([relevant_ids, target_ids])
    labels_t = np.concatenate([np.ones(relevant_ids.size), np.zeros(target_ids.size)])
    loss_t, d_target = _group_bce_grads(
        target_emb, params.item_embeddings[ids_t], labels_t,
        params.weights, params.biases)
    loss_n, d_non = _group_bce_grads(
        non_target_emb, params.item_embeddings[sampled_ids],
        np.ones(sampled_ids.size), params.weights, params.biases)
    loss = loss_t + loss_n
    if config.repulsion:
        loss_dis, g_t, g_n = repulsion_loss_and_grads(
            target_emb, non_target_emb, config.margin)
        loss += loss_dis
        d_target += g_t
        d_non += g_n
    return loss, d_target, d_non


def approximation_stage(params: GlobalParams, config: AttackConfig,
                        state: AttackState) -> float:
    """Gradient descent on the approximated embeddings only; item table and
    MLP stay fixed. Returns the last evaluated loss."""
    relevant_ids = _sorted_ids(state.relevant_items)
    ut = state.target_group_embeddings
    un = state.non_target_group_embeddings
    loss = float("nan")
    for _ in range(config.approx_steps):
        loss, d_ut, d_un = approximation_loss_and_grads(
            ut, un, params, config, relevant_ids, state.sampled_non_target)
        ut = ut - config.approx_lr * d_ut
        un = un - config.approx_lr * d_un
    state.target_group_embeddings = ut
    state.non_target_group_embeddings = un
    return loss


def compute_gamma(params: GlobalParams, state: AttackState,
                  target_items) -> tuple[float, float]:
    """Ranking-based loss weights for the promotion stage.

    Ranks every item per approximated embedding (rank 1 = highest score,
    score ties toward the smaller id) and normalizes by the catalog size.
    The target-group weight grows with how poorly target items still rank
    for the target group, asking for more promotion effort. The non-target
    weight grows once target items sink in the non-target lists, and the
    (1 - gamma) coefficient then releases demotion pressure; while they
    still rank high there it stays near zero, keeping demotion at full
    strength. Both weights sum to one.
    """
    target_ids = _sorted_ids(frozenset(int(i) for i in target_items))
    nv = params.num_items

    def mean_normalized_rank(embeddings: np.ndarray) -> float:
        total = 0.0
        for emb in embeddings:
            scores = score_items(emb, params)
            order = np.argsort(-scores, kind="stable")
            ranks = np.empty(nv, dtype=np.float64)
            ranks[order] = np.arange(1, nv + 1)
            total += float(ranks[target_ids].mean())
        return total / (embeddings.shape[0] * nv)

    rank_target_group = mean_normalized_rank(state.target_group_embeddings)
    rank_non_target = mean_normalized_rank(state.non_target_group_embeddings)
    denom = rank_target_group + rank_non_target
    if denom == 0.0:
        return 0.5, 0.5
    gamma_target = rank_target_group / denom
    return gamma_target, 1.0 - gamma_target


def alignment_loss_and_grad(target_vecs: np.ndarray, relevant_vecs: np.ndarray):
    """Mean (1 - cosine) between every relevant/target item pair, with the
    gradient flowing to the target-item embeddings only. Zero-norm vectors
    cannot be compared, so their pairs contribute a constant 1."""
    r_norms = np.linalg.norm(relevant_vecs, axis=1)
    t_norms = np.linalg.norm(target_vecs, axis=1)
    denom = np.outer(r_norms, t_norms)
    dots = relevant_vecs @ target_vecs.T
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    count = cos.size
    loss = float(np.sum(1.0 - cos)) / count

    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    # d cos(r, t)/dt = r / (|r||t|) - cos * t / |t|^2
    toward_relevant = inv.T @ relevant_vecs
    t_sq = t_norms ** 2
    shrink = np.divide(cos.sum(axis=0), t_sq, out=np.zeros(t_sq.shape), where=t_sq > 0)
    grad = -(toward_relevant - shrink[:, None] * target_vecs) / count
    return loss, grad


def promotion_coefficients(state: AttackState, config: AttackConfig,
                           round_index: int, total_rounds: int) -> tuple[float, float]:
    """(target, non-target) loss weights; the quadratic schedule keeps the
    unreliable early-round rankings from steering the attack."""
    if not config.adaptive_tuning:
        return 1.0, 1.0
    progress = (round_index / total_rounds) ** 2
    return 1.0 + state.gamma_target * progress, 1.0 - state.gamma_non_target * progress


def promotion_loss_and_grads(target_vecs: np.ndarray, state: AttackState,
                             config: AttackConfig, weights, biases,
                             relevant_vecs: np.ndarray,
                             coeff_target: float, coeff_non_target: float):
    """Weighted promotion objective and gradients for the trainable pieces
    (target-item embeddings and MLP). Approximated user embeddings and
    relevant-item embeddings are constants here."""
    d = target_vecs.shape[1]
    t = target_vecs.shape[0]
    ut = state.target_group_embeddings
    un = state.non_target_group_embeddings
    x = np.concatenate([_pair_batch(ut, target_vecs), _pair_batch(un, target_vecs)])
    labels = np.concatenate([np.ones(ut.shape[0] * t), np.zeros(un.shape[0] * t)])
    pair_weights = np.concatenate([np.full(ut.shape[0] * t, coeff_target),
                                   np.full(un.shape[0] * t, coeff_non_target)])
    z, acts = mlp_forward(x, weights, biases)
    probs = sigmoid(z)
    split = ut.shape[0] * t
    loss = coeff_target * bce_sum(probs[:split], labels[:split]) \
        + coeff_non_target * bce_sum(probs[split:], labels[split:])
    dz = (probs - labels) * pair_weights
    dx, d_ws, d_bs = mlp_backward(dz, acts, weights)
    d_vecs = np.zeros_like(target_vecs)
    np.add.at(d_vecs, np.tile(np.arange(t), ut.shape[0] + un.shape[0]), dx[:, d:])

    if config.alignment and config.alignment_weight > 0 and relevant_vecs.size:
        sim_loss, sim_grad = alignment_loss_and_grad(target_vecs, relevant_vecs)
        loss += config.alignment_weight * sim_loss
        d_vecs += config.alignment_weight * sim_grad
    return loss, d_vecs, d_ws, d_bs


def _cold_probe_exposure(params: GlobalParams, target_ids: np.ndarray,
                         bent_rows: np.ndarray, bent_weights, bent_biases,
                         probes: np.ndarray, top_k: int) -> float:
    """Fraction of probe users whose top-k would contain a target item."""
    items = params.item_embeddings.copy()
    items[target_ids] = bent_rows
    bent = GlobalParams(items, bent_weights, bent_biases)
    k = min(top_k, bent.num_items)
    hits = 0
    for probe in probes:
        scores = score_items(probe, bent)
        top = np.argpartition(-scores, k - 1)[:k]
        if np.isin(target_ids, top).any():
            hits += 1
    return hits / len(probes)


def calibrate_upload_scale(params: GlobalParams, target_ids: np.ndarray,
                           local_vecs: np.ndarray, weights, biases,
                           config: AttackConfig, rng: np.random.Generator) -> float:
    """Largest update scale whose cold-probe exposure stays under the cap.

    Models the server state after this upload lands as an interpolation
    between the broadcast and the locally optimized parameters, then
    binary-searches the interpolation factor. Returns 0 when even the
    untouched broadcast over-exposes the target; the attacker then skips
    a turn and lets organic training pull the target back down.
    """
    probes = rng.normal(0.0, config.probe_sigma,
                        size=(config.probe_count, params.embed_dim))

    def exposure(s: float) -> float:
        rows = (1.0 - s) * params.item_embeddings[target_ids] + s * local_vecs
        ws = [(1.0 - s) * w0 + s * w for w0, w in zip(params.weights, weights)]
        bs = [(1.0 - s) * b0 + s * b for b0, b in zip(params.biases, biases)]
        return _cold_probe_exposure(params, target_ids, rows, ws, bs,
                                    probes, config.probe_top_k)

    hi = config.upload_scale
    if exposure(hi) <= config.exposure_cap:
        return hi
    if exposure(0.0) > config.exposure_cap:
        return 0.0
    lo = 0.0
    for _ in range(8):
        mid = 0.5 * (lo + hi)
        if exposure(mid) <= config.exposure_cap:
            lo = mid
        else:
            hi = mid
    return lo


def promotion_stage(params: GlobalParams, state: AttackState, config: AttackConfig,
                    round_index: int, total_rounds: int, server_lr: float,
                    client_id: int, rng: np.random.Generator | None = None) -> ClientUpdate:
    """Local SGD on target-item rows and the MLP, then conversion of the
    achieved displacement into a pseudo-gradient at the server's learning
    rate. The upload touches exactly the target-item rows."""
    target_ids = _sorted_ids(config.target_items)
    relevant_only = state.relevant_items - config.target_items
    relevant_vecs = params.item_embeddings[_sorted_ids(relevant_only)] \
        if relevant_only else np.empty((0, params.embed_dim))
    coeff_target, coeff_non_target = promotion_coefficients(
        state, config, round_index, total_rounds)

    local_vecs = params.item_embeddings[target_ids].copy()
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    model_lr = config.promo_lr if config.promo_model_lr is None else config.promo_model_lr
    for _ in range(config.promo_steps):
        _, d_vecs, d_ws, d_bs = promotion_loss_and_grads(
            local_vecs, state, config, weights, biases, relevant_vecs,
            coeff_target, coeff_non_target)
        local_vecs -= config.promo_lr * d_vecs
        for w, dw in zip(weights, d_ws):
            w -= model_lr * dw
        for b, db in zip(biases, d_bs):
            b -= model_lr * db

    boost = config.upload_scale / server_lr
    if config.probe_count > 0 and rng is not None:
        boost = calibrate_upload_scale(params, target_ids, local_vecs,
                                       weights, biases, config, rng) / server_lr
    d_items = ItemGrads(target_ids,
                        (params.item_embeddings[target_ids] - local_vecs) * boost)
    d_model = ModelGrads(
        [(w0 - w) * boost for w0, w in zip(params.weights, weights)],
        [(b0 - b) * boost for b0, b in zip(params.biases, biases)])
    update = ClientUpdate(client_id, d_items, d_model, train_loss=None)
    if config.update_clip is not None:
        norm = update.norm()
        if norm > config.update_clip:
            shrink = config.update_clip / norm
            d_items.vecs *= shrink
            for w in d_model.d_weights:
                w *= shrink
            for b in d_model.d_biases:
                b *= shrink
    return update


def malicious_client_round(params: GlobalParams, config: AttackConfig,
                           state: AttackState, round_index: int, total_rounds: int,
                           rng: np.random.Generator, server_lr: float,
                           client_id: int) -> ClientUpdate:
    """One full attack round: rebuild the relevant set against the current
    broadcast, refresh the non-target sample, update the approximated
    embeddings, re-derive ranking weights, and craft the promotion upload."""
    if config.relevant_items:
        state.relevant_items = build_relevant_items(
            params, config.interested_items, config.target_items, config.relevant_top_k)
    else:
        state.relevant_items = config.interested_items
    state.sampled_non_target = resample_non_target_items(
        params, config, state.relevant_items, rng)
    approximation_stage(params, config, state)
    if config.adaptive_tuning:
        state.gamma_target, state.gamma_non_target = compute_gamma(
            params, state, config.target_items)
    if round_index < config.warmup_rounds:
        target_ids = _sorted_ids(config.target_items)
        return ClientUpdate(
            client_id,
            ItemGrads(target_ids, np.zeros((target_ids.size, params.embed_dim))),
            ModelGrads([np.zeros_like(w) for w in params.weights],
                       [np.zeros_like(b) for b in params.biases]),
            train_loss=None)
    return promotion_stage(params, state, config, round_index, total_rounds,
                           server_lr, client_id, rng=rng)


class SubgroupAttackClient:
    """Drop-in federated client whose uploads implement the attack."""

    def __init__(self, client_id: int, config: AttackConfig, embed_dim: int,
                 total_rounds: int, init_rng: np.random.Generator):
        if total_rounds < 1:
            raise ValueError("total_rounds must be >= 1")
        self.client_id = client_id
        self.config = config
        self.total_rounds = total_rounds
        self.state = AttackState.fresh(config, embed_dim, init_rng)

    def train_round(self, params: GlobalParams, rng: np.random.Generator,
                    plan) -> ClientUpdate:
        return malicious_client_round(
            params, self.config, self.state, plan.round_index, self.total_rounds,
            rng, plan.learning_rate, self.client_id)
