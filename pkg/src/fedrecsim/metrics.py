"""Ranking and exposure metrics over full (unsampled) candidate sets.

Top-K lists rank every item the user has not interacted with in train;
the held-out test item is always a candidate. Ranking uses the model's
logits, which order items exactly like the predicted probability but
cannot collapse distinct scores through float sigmoid saturation. Exact
score ties break toward the smaller item id so every ranking is a pure
function of the parameters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset
from .model import GlobalParams, score_items

logger = logging.getLogger(__name__)


def ger_name(alpha: float, k: int) -> str:
    return f"{alpha:g}-GER@{k}"


@dataclass(frozen=True)
class TopKList:
    """Ranked recommendation slate for one user."""

    user_id: int
    items: tuple[int, ...]


@dataclass
class MetricsReport:
    """Eval snapshot for one round: exposure by group plus accuracy."""

    round_index: int
    # group name -> K -> exposure ratio; groups are "target", "non_target", "all"
    er: dict[str, dict[int, float]]
    # alpha -> K -> combined group exposure
    alpha_ger: dict[float, dict[int, float]]
    hit_ratio: dict[int, float]
    ndcg: dict[int, float]

    def to_rows(self) -> list[tuple[int, str, str, float]]:
        """Flatten into (round, group, metric, value) rows in a stable order."""
        rows = []
        for group in sorted(self.er):
            for k in sorted(self.er[group]):
                rows.append((self.round_index, group, f"ER@{k}", self.er[group][k]))
        for alpha in sorted(self.alpha_ger):
            for k in sorted(self.alpha_ger[alpha]):
                rows.append((self.round_index, "all", ger_name(alpha, k),
                             self.alpha_ger[alpha][k]))
        for k in sorted(self.hit_ratio):
            rows.append((self.round_index, "all", f"HR@{k}", self.hit_ratio[k]))
        for k in sorted(self.ndcg):
            rows.append((self.round_index, "all", f"NDCG@{k}", self.ndcg[k]))
        return rows

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "er": {g: {str(k): v for k, v in by_k.items()} for g, by_k in self.er.items()},
            "alpha_ger": {str(a): {str(k): v for k, v in by_k.items()}
                          for a, by_k in self.alpha_ger.items()},
            "hit_ratio": {str(k): v for k, v in self.hit_ratio.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }


def top_k(user_embedding: np.ndarray, interacted: set[int], params: GlobalParams,
          k: int) -> TopKList:
    """Top-k non-interacted items by descending score, ties to smaller id."""
    return rank_candidates(0, user_embedding, interacted, params, k)


def rank_candidates(user_id: int, user_embedding: np.ndarray, interacted: set[int],
                    params: GlobalParams, k: int) -> TopKList:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = score_items(user_embedding, params)
    if interacted:
        banned = np.fromiter(interacted, dtype=np.int64, count=len(interacted))
        scores[banned] = -np.inf
    # stable argsort on negated scores == descending score, ties by item id
    order = np.argsort(-scores, kind="stable")
    top = order[:k]
    kept = top[np.isfinite(scores[top])]
    if kept.size < k:
        logger.warning("user %d has only %d candidates for a top-%d list",
                       user_id, kept.size, k)
    return TopKList(user_id=user_id, items=tuple(int(i) for i in kept))


def top_k_lists(user_embeddings: np.ndarray, dataset: InteractionDataset,
                params: GlobalParams, k: int) -> list[TopKList]:
    """Per-user top-k slates for every user in the dataset."""
    return [rank_candidates(u, user_embeddings[u], dataset.train[u], params, k)
            for u in range(dataset.num_users)]


def exposure_ratio(group, target_items, topk_by_user: dict[int, TopKList],
                   dataset: InteractionDataset, k: int) -> float:
    """Mean per-target-item fraction of eligible group users whose top-k
    list contains the item; users who already interacted with an item (in
    train) are not eligible for it."""
    targets = sorted(int(v) for v in target_items)
    if not targets:
        raise ValueError("target_items must be nonempty")
    group = sorted(int(u) for u in group)
    per_item = []
    any_eligible = False
    for v in targets:
        eligible = [u for u in group if v not in dataset.train[u]]
        if not eligible:
            logger.warning("target item %d has no eligible users in a %d-user group; "
                           "counting its exposure as 0", v, len(group))
            per_item.append(0.0)
            continue
        any_eligible = True
        hits = sum(1 for u in eligible if v in topk_by_user[u].items[:k])
        per_item.append(hits / len(eligible))
    if not any_eligible:
        raise ValueError("no target item has any eligible user in the group")
    return float(np.mean(per_item))


def alpha_ger(er_target: float, er_non_target: float, alpha: float) -> float:
    """Combined group exposure: alpha * ER_t + (1 - alpha) * (1 - ER_n)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    for name, v in (("er_target", er_target), ("er_non_target", er_non_target)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    return alpha * er_target + (1.0 - alpha) * (1.0 - er_non_target)


def hit_ratio_ndcg(test_items: list[int | None], topk_by_user: dict[int, TopKList],
                   k: int) -> tuple[float, float]:
    """Leave-one-out HR@k and NDCG@k over users holding a test item."""
    hits, gain, n = 0, 0.0, 0
    for u, held_out in enumerate(test_items):
        if held_out is None:
            continue
        n += 1
        slate = topk_by_user[u].items[:k]
        if held_out in slate:
            hits += 1
            rank = slate.index(held_out) + 1
            gain += 1.0 / math.log2(rank + 1)
    if n == 0:
        raise ValueError("no user holds a test item")
    return hits / n, gain / n


def evaluate(round_index: int, user_embeddings: np.ndarray, dataset: InteractionDataset,
             params: GlobalParams, labeling, target_items, k_values, alphas) -> MetricsReport:
    """Full evaluation pass producing one MetricsReport.

    Reads but never mutates the model state; slates are computed once at
    the largest K and reused as prefixes for the smaller ones.
    """
    k_values = sorted(set(int(k) for k in k_values))
    if not k_values:
        raise ValueError("need at least one K")
    k_max = k_values[-1]
    slates = {tk.user_id: tk for tk in top_k_lists(user_embeddings, dataset, params, k_max)}
    groups = {
        "target": labeling.target_users,
        "non_target": labeling.non_target_users,
        "all": sorted(labeling.target_users | labeling.non_target_users),
    }
    er: dict[str, dict[int, float]] = {g: {} for g in groups}
    for gname, users in groups.items():
        for k in k_values:
            er[gname][k] = (exposure_ratio(users, target_items, slates, dataset, k)
                            if users else float("nan"))
    ger = {float(a): {k: alpha_ger(er["target"][k], er["non_target"][k], a)
                      for k in k_values}
           for a in alphas}
    hr, nd = {}, {}
    for k in k_values:
        hr[k], nd[k] = hit_ratio_ndcg(dataset.test, slates, k)
    return MetricsReport(round_index=round_index, er=er, alpha_ger=ger,
                         hit_ratio=hr, ndcg=nd)
