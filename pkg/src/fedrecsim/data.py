"""Implicit-feedback dataset loading, splitting, and user-group labeling.

Loaders parse MovieLens tab/`::` files and Steam-style CSV into a dense
0-indexed interaction dataset (ids keep first-appearance order, duplicate
user/item pairs collapse to one implicit positive). Splitting follows the
usual leave-one-out protocol: the latest interaction per user is held out
when timestamps exist, otherwise a seeded uniform pick.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

DATASET_FORMATS = ("ml100k", "ml1m", "steam-csv")


class DatasetError(ValueError):
    """Raised for unreadable or malformed dataset files."""


@dataclass
class InteractionDataset:
    """Per-user positive item sets plus an optional held-out test item."""

    num_users: int
    num_items: int
    train: list[set[int]]
    test: list[int | None]
    raw_interaction_count: int
    # item -> latest timestamp per user, kept only when the source had one
    timestamps: list[dict[int, int]] | None = None

    def full_interactions(self, user_id: int) -> set[int]:
        """Pre-split interaction set: train plus the held-out item, if any."""
        items = set(self.train[user_id])
        if self.test[user_id] is not None:
            items.add(self.test[user_id])
        return items

    def item_frequencies(self) -> np.ndarray:
        """Train-interaction count per item id."""
        freq = np.zeros(self.num_items, dtype=np.int64)
        for items in self.train:
            for i in items:
                freq[i] += 1
        return freq


@dataclass(frozen=True)
class GroupLabeling:
    """Partition of users into the target group and its complement."""

    interested_items: frozenset[int]
    target_users: frozenset[int]
    non_target_users: frozenset[int]


def _parse_ml(path: str, sep: str):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 fields separated by {sep!r}")
            try:
                user, item, ts = parts[0], parts[1], int(parts[3])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: bad integer field ({exc})") from exc
            rows.append((user, item, ts))
    return rows


def _parse_steam_csv(path: str):
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, parts in enumerate(csv.reader(fh), start=1):
            if not parts:
                continue
            if len(parts) < 4:
                raise DatasetError(f"{path}:{lineno}: expected at least 4 CSV fields")
            user, game, behavior = parts[0].strip(), parts[1], parts[2].strip().lower()
            if not user or not game:
                raise DatasetError(f"{path}:{lineno}: empty user or game field")
            if behavior not in ("play", "purchase"):
                # other event kinds carry no extra interaction signal
                continue
            rows.append((user, game, None))
    return rows


def load_dataset(path: str, fmt: str) -> InteractionDataset:
    """Load a raw interaction file into a densely re-indexed dataset.

    Args:
        path: interaction file location.
        fmt: one of "ml100k" (tab-separated), "ml1m" ("::"-separated), or
            "steam-csv" (user_id,game_name,behavior,value rows).
    """
    if fmt == "ml100k":
        rows = _parse_ml(path, "\t")
    elif fmt == "ml1m":
        rows = _parse_ml(path, "::")
    elif fmt == "steam-csv":
        rows = _parse_steam_csv(path)
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}; expected one of {DATASET_FORMATS}")
    if not rows:
        raise DatasetError(f"{path}: no interactions found")

    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    # (user, item) -> latest timestamp (or None when the format has none)
    dedup: dict[tuple[int, int], int | None] = {}
    has_ts = rows[0][2] is not None
    for user_raw, item_raw, ts in rows:
        u = user_ids.setdefault(user_raw, len(user_ids))
        i = item_ids.setdefault(item_raw, len(item_ids))
        key = (u, i)
        if has_ts:
            prev = dedup.get(key)
            if prev is None or ts > prev:
                dedup[key] = ts
        else:
            dedup[key] = None

    num_users, num_items = len(user_ids), len(item_ids)
    train: list[set[int]] = [set() for _ in range(num_users)]
    timestamps: list[dict[int, int]] | None = [dict() for _ in range(num_users)] if has_ts else None
    for (u, i), ts in dedup.items():
        train[u].add(i)
        if has_ts:
            timestamps[u][i] = ts
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=train,
        test=[None] * num_users,
        raw_interaction_count=len(dedup),
        timestamps=timestamps,
    )


def dataset_from_interactions(per_user_items, num_items: int,
                              timestamps: list[dict[int, int]] | None = None) -> InteractionDataset:
    """Build an unsplit dataset from in-memory per-user item collections."""
    train = [set(int(i) for i in items) for items in per_user_items]
    total = sum(len(s) for s in train)
    if total == 0:
        raise DatasetError("no interactions")
    for u, items in enumerate(train):
        if items and (min(items) < 0 or max(items) >= num_items):
            raise DatasetError(f"user {u} references an item outside [0, {num_items})")
    return InteractionDataset(
        num_users=len(train),
        num_items=num_items,
        train=train,
        test=[None] * len(train),
        raw_interaction_count=total,
        timestamps=timestamps,
    )


def leave_one_out_split(dataset: InteractionDataset, rng_seed: int) -> InteractionDataset:
    """Hold out one test item per user with at least two interactions.

    The held-out item is the latest by timestamp (timestamp ties broken by
    the larger item id); without timestamps it is a seeded uniform pick.
    Users with a single interaction keep it in train and get no test item.
    """
    if any(t is not None for t in dataset.test):
        raise ValueError("dataset is already split")
    train = [set(s) for s in dataset.train]
    test: list[int | None] = [None] * dataset.num_users
    for u in range(dataset.num_users):
        if len(train[u]) < 2:
            continue
        if dataset.timestamps is not None:
            ts = dataset.timestamps[u]
            held = max(train[u], key=lambda i: (ts[i], i))
        else:
            user_rng = np.random.default_rng([rng_seed, u])
            held = int(user_rng.choice(sorted(train[u])))
        train[u].remove(held)
        test[u] = held
    return replace(dataset, train=train, test=test)


def sample_negatives(dataset: InteractionDataset, user_id: int, count: int,
                     rng: np.random.Generator, exclude=()) -> np.ndarray:
    """Uniform non-interacted item sample without replacement.

    Draws from items outside the user's train set and `exclude`; returns
    fewer than `count` ids when the candidate pool is smaller.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    banned = np.fromiter(set(dataset.train[user_id]) | set(exclude), dtype=np.int64,
                         count=-1) if (dataset.train[user_id] or exclude) else np.empty(0, np.int64)
    candidates = np.setdiff1d(np.arange(dataset.num_items, dtype=np.int64), banned)
    return draw_negatives(candidates, count, rng)


def draw_negatives(candidates: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sampling core shared with the per-client fast path; candidates sorted."""
    k = min(count, candidates.size)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(candidates, size=k, replace=False)


def label_groups(dataset: InteractionDataset, interested_items) -> GroupLabeling:
    """Split users by whether their full pre-split history covers every
    interested item."""
    interested = frozenset(int(i) for i in interested_items)
    if not interested:
        raise ValueError("interested_items must be nonempty")
    for i in interested:
        if not 0 <= i < dataset.num_items:
            raise ValueError(f"interested item {i} outside the item table")
    target, non_target = [], []
    for u in range(dataset.num_users):
        if interested <= dataset.full_interactions(u):
            target.append(u)
        else:
            non_target.append(u)
    if not target:
        logger.warning("no user interacted with all %d interested items; target group is empty",
                       len(interested))
    return GroupLabeling(interested, frozenset(target), frozenset(non_target))


def _band_items(freq: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    lo, hi = band
    if not (0.0 <= lo <= hi <= 1.0):
        raise ValueError(f"popularity band must satisfy 0 <= lo <= hi <= 1, got {band}")
    lo_v, hi_v = np.quantile(freq, [lo, hi])
    return np.flatnonzero((freq >= lo_v) & (freq <= hi_v))


def select_interested_items(dataset: InteractionDataset, size: int, rng: np.random.Generator,
                            popularity_band: tuple[float, float] = (0.5, 0.9),
                            max_attempts: int = 100) -> frozenset[int]:
    """Sample the interested-item set from a popularity band.

    Resamples until at least one user qualifies for the target group, and
    errors out when `max_attempts` draws cannot produce one.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if size > dataset.num_items:
        raise ValueError(f"cannot select {size} items from {dataset.num_items}")
    freq = dataset.item_frequencies()
    eligible = _band_items(freq, popularity_band)
    if eligible.size < size:
        raise ValueError(
            f"popularity band {popularity_band} holds {eligible.size} items, need {size}")
    for _ in range(max_attempts):
        picked = rng.choice(eligible, size=size, replace=False)
        labeling = label_groups(dataset, picked)
        if labeling.target_users:
            return frozenset(int(i) for i in picked)
    raise ValueError(
        f"no {size}-item draw from band {popularity_band} yields a nonempty target group "
        f"after {max_attempts} attempts")


def select_target_items(dataset: InteractionDataset, count: int, rng: np.random.Generator,
                        exclude=(), popularity_band: tuple[float, float] = (0.0, 0.1)) -> frozenset[int]:
    """Sample promotion targets from the cold end of the popularity range,
    never overlapping `exclude` (normally the interested items)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    freq = dataset.item_frequencies()
    eligible = np.setdiff1d(_band_items(freq, popularity_band),
                            np.fromiter((int(i) for i in exclude), dtype=np.int64, count=-1)
                            if exclude else np.empty(0, np.int64))
    if eligible.size < count:
        raise ValueError(
            f"popularity band {popularity_band} holds {eligible.size} selectable items, need {count}")
    picked = rng.choice(eligible, size=count, replace=False)
    return frozenset(int(i) for i in picked)
