"""Synthetic implicit-feedback data with MovieLens-like statistics.

Generates interaction tables with exact user/item/interaction counts, a
Zipf-style popularity skew, and a soft latent-cluster structure (users
over-sample items from their own cluster). That is enough texture for the
attack and defense dynamics studied here: popular items dominate untreated
top-K lists, cold items start deeply demoted, and item co-interaction
carries a real group signal. Writers emit the same file formats the
loaders in fedrecsim.data consume.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SynthSpec:
    num_users: int
    num_items: int
    num_interactions: int
    min_per_user: int = 20
    zipf_exponent: float = 1.0
    num_clusters: int = 4
    cluster_boost: float = 5.0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("need at least one user and one item")
        if self.num_interactions < max(self.num_users * self.min_per_user, self.num_items):
            raise ValueError("interaction budget cannot cover the per-user minimum and item coverage")
        if self.num_interactions > self.num_users * self.num_items:
            raise ValueError("more interactions than user-item pairs")


# MovieLens-100K-shaped corpus: 943 users, 1682 items, 100000 interactions.
ML100K_SPEC = SynthSpec(943, 1682, 100_000)
# Steam-shaped corpus: 3753 users, 5134 games, 114713 deduplicated pairs.
STEAM_SPEC = SynthSpec(3753, 5134, 114_713, min_per_user=2)


def _user_counts(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-user interaction counts: skewed, bounded, summing exactly."""
    lo, hi = spec.min_per_user, spec.num_items
    raw = rng.lognormal(mean=0.0, sigma=0.8, size=spec.num_users)
    spare = spec.num_interactions - lo * spec.num_users
    counts = lo + np.floor(raw / raw.sum() * spare).astype(np.int64)
    counts = np.minimum(counts, hi)
    while counts.sum() != spec.num_interactions:
        diff = spec.num_interactions - counts.sum()
        if diff > 0:
            room = np.flatnonzero(counts < hi)
            picks = rng.choice(room, size=min(diff, room.size), replace=False)
            counts[picks] += 1
        else:
            room = np.flatnonzero(counts > lo)
            picks = rng.choice(room, size=min(-diff, room.size), replace=False)
            counts[picks] -= 1
    return counts


def synthesize_interactions(spec: SynthSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Sample per-user item id arrays (sorted, no duplicates).

    Every user gets at least spec.min_per_user items and every item appears
    at least once, so leave-one-out splitting and popularity statistics
    behave like they do on the real corpora.
    """
    counts = _user_counts(spec, rng)
    # popularity rank decoupled from item id
    rank = rng.permutation(spec.num_items) + 1
    log_pop = -spec.zipf_exponent * np.log(rank.astype(np.float64))
    user_cluster = rng.integers(0, spec.num_clusters, size=spec.num_users)
    item_cluster = rng.integers(0, spec.num_clusters, size=spec.num_items)
    log_boost = np.log(spec.cluster_boost)

    per_user: list[np.ndarray] = []
    occurrences = np.zeros(spec.num_items, dtype=np.int64)
    for u in range(spec.num_users):
        logits = log_pop + np.where(item_cluster == user_cluster[u], log_boost, 0.0)
        # Gumbel top-k == weighted sampling without replacement
        keys = logits + rng.gumbel(size=spec.num_items)
        picked = np.argpartition(-keys, counts[u] - 1)[:counts[u]]
        picked = np.sort(picked)
        per_user.append(picked)
        occurrences[picked] += 1

    # swap duplicates out so every item is covered
    missing = list(np.flatnonzero(occurrences == 0))
    user_order = rng.permutation(spec.num_users)
    cursor = 0
    for item in missing:
        placed = False
        for _ in range(spec.num_users):
            u = int(user_order[cursor % spec.num_users])
            cursor += 1
            items = per_user[u]
            dup_mask = occurrences[items] > 1
            if not dup_mask.any():
                continue
            drop = items[dup_mask][int(np.argmax(occurrences[items[dup_mask]]))]
            keep = items[items != drop]
            per_user[u] = np.sort(np.append(keep, item))
            occurrences[drop] -= 1
            occurrences[item] += 1
            placed = True
            break
        if not placed:
            raise RuntimeError("could not place an uncovered item; spec too tight")
    return per_user


def write_ml100k(path: str, per_user_items: list[np.ndarray], rng: np.random.Generator) -> None:
    """Write tab-separated user/item/rating/timestamp lines with 1-based ids."""
    _write_ml(path, per_user_items, rng, "\t")


def write_ml1m(path: str, per_user_items: list[np.ndarray], rng: np.random.Generator) -> None:
    _write_ml(path, per_user_items, rng, "::")


def _write_ml(path, per_user_items, rng, sep):
    base_ts = 880_000_000
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in enumerate(per_user_items):
            stamps = np.sort(rng.integers(0, 20_000_000, size=len(items))) + base_ts
            ratings = rng.integers(1, 6, size=len(items))
            order = rng.permutation(len(items))
            for k in order:
                fh.write(f"{u + 1}{sep}{int(items[k]) + 1}{sep}{int(ratings[k])}{sep}{int(stamps[k])}\n")


def write_steam_csv(path: str, per_user_items: list[np.ndarray], rng: np.random.Generator,
                    play_fraction: float = 0.74) -> None:
    """Write purchase rows for every pair plus play rows for a fraction,
    mimicking the raw behaviour log the steam loader deduplicates."""
    names = [f"Game {i:04d}" if i % 23 else f"Game {i:04d}, Director's Cut" for i in range(
        max((int(it.max()) + 1 for it in per_user_items if len(it)), default=0))]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for u, items in enumerate(per_user_items):
            plays = rng.random(len(items)) < play_fraction
            for k, item in enumerate(items):
                writer.writerow([u + 1_000_000, names[int(item)], "purchase", "1.0", "0"])
                if plays[k]:
                    hours = round(float(rng.uniform(0.1, 200.0)), 1)
                    writer.writerow([u + 1_000_000, names[int(item)], "play", str(hours), "0"])


def make_ml100k_file(path: str, seed: int, spec: SynthSpec = ML100K_SPEC) -> str:
    """Convenience: synthesize and write an ml100k-format corpus."""
    rng = np.random.default_rng([seed, 100])
    write_ml100k(path, synthesize_interactions(spec, rng), rng)
    return path


def make_steam_file(path: str, seed: int, spec: SynthSpec = STEAM_SPEC) -> str:
    rng = np.random.default_rng([seed, 200])
    write_steam_csv(path, synthesize_interactions(spec, rng), rng)
    return path
