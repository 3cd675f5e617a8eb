"""Byzantine-robust aggregation rules over flattened client updates.

Every rule sees each client's update as one dense vector: the full item
table gradient (zero rows for untouched items) followed by the MLP
gradient in layer order. Zero-filling is deliberate; it is what makes
sparse benign updates and dense crafted ones comparable coordinate by
coordinate, which is exactly the regime the robustness literature
analyses.

Aggregate-style rules (median, trimmed mean, krum selection, bulyan)
return a single representative vector. The server applies updates in
summation form, so `aggregate` rescales those representatives by the
round's client count: with every client honest and similar, n * median ~=
sum, keeping the learning-rate semantics identical across defenses.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DEFENSE_KINDS = ("none", "norm_bound", "median", "trimmed_mean", "krum", "multi_krum", "bulyan")


@dataclass(frozen=True)
class DefenseConfig:
    """Which rule runs at the server and its knobs.

    norm_threshold None means "calibrate from a defense-free warmup"
    (handled by the runner); byzantine_count None defaults to
    ceil(assumed_malicious_fraction * n) at aggregation time; multi_m None
    defaults to n - f - 2.
    """

    kind: str = "none"
    norm_threshold: float | None = None
    trim_fraction: float = 0.1
    byzantine_count: int | None = None
    multi_m: int | None = None
    assumed_malicious_fraction: float = 0.002

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValueError(f"trim_fraction must be in [0, 0.5), got {self.trim_fraction}")
        if self.norm_threshold is not None and not self.norm_threshold > 0:
            raise ValueError("norm_threshold must be positive")
        if self.byzantine_count is not None and self.byzantine_count < 0:
            raise ValueError("byzantine_count must be >= 0")


@dataclass
class FlatUpdate:
    """One client's update as a dense vector in the canonical layout."""

    client_id: int
    vector: np.ndarray


def flatten_update(client_id: int, item_ids: np.ndarray, item_vecs: np.ndarray,
                   d_weights, d_biases, num_items: int, embed_dim: int) -> FlatUpdate:
    """Dense canonical layout: item table rows in id order, then W/b per layer."""
    model_parts = []
    for w, b in zip(d_weights, d_biases):
        model_parts.append(w.ravel())
        model_parts.append(b.ravel())
    vec = np.zeros(num_items * embed_dim + sum(p.size for p in model_parts))
    items_block = vec[: num_items * embed_dim].reshape(num_items, embed_dim)
    items_block[item_ids] = item_vecs
    offset = num_items * embed_dim
    for part in model_parts:
        vec[offset: offset + part.size] = part
        offset += part.size
    return FlatUpdate(client_id=client_id, vector=vec)


def unflatten_vector(vector: np.ndarray, num_items: int, embed_dim: int, layer_shapes):
    """Inverse of flatten_update; layer_shapes is [(w_shape, b_shape), ...]."""
    items = vector[: num_items * embed_dim].reshape(num_items, embed_dim)
    offset = num_items * embed_dim
    d_weights, d_biases = [], []
    for w_shape, b_shape in layer_shapes:
        size = int(np.prod(w_shape))
        d_weights.append(vector[offset: offset + size].reshape(w_shape))
        offset += size
        size = int(np.prod(b_shape))
        d_biases.append(vector[offset: offset + size].reshape(b_shape))
        offset += size
    if offset != vector.size:
        raise ValueError("vector length does not match the declared layout")
    return items, d_weights, d_biases


def _sorted_by_client(updates: list[FlatUpdate]) -> list[FlatUpdate]:
    out = sorted(updates, key=lambda u: u.client_id)
    if any(a.client_id == b.client_id for a, b in zip(out, out[1:])):
        raise ValueError("duplicate client ids in one round")
    return out


def _as_matrix(updates: list[FlatUpdate]) -> np.ndarray:
    if not updates:
        raise ValueError("no updates to aggregate")
    return np.stack([u.vector for u in updates])


def norm_bound(updates: list[FlatUpdate], tau: float) -> list[FlatUpdate]:
    """Scale any update with L2 norm above tau back onto the tau sphere."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    out = []
    for u in _sorted_by_client(updates):
        n = float(np.linalg.norm(u.vector))
        if n > tau:
            out.append(FlatUpdate(u.client_id, u.vector * (tau / n)))
        else:
            out.append(FlatUpdate(u.client_id, u.vector.copy()))
    return out


def coordinate_median(updates: list[FlatUpdate]) -> np.ndarray:
    """Per-coordinate median; even counts average the two middle values."""
    return np.median(_as_matrix(_sorted_by_client(updates)), axis=0)


def trimmed_mean(updates: list[FlatUpdate], beta: float) -> np.ndarray:
    """Per-coordinate mean after dropping floor(beta * n) values per tail."""
    if not 0.0 <= beta < 0.5:
        raise ValueError(f"beta must be in [0, 0.5), got {beta}")
    mat = _as_matrix(_sorted_by_client(updates))
    n = mat.shape[0]
    t = int(math.floor(beta * n))
    if n - 2 * t < 1:
        raise ValueError(f"trimming {t} per tail leaves no values out of {n}")
    ordered = np.sort(mat, axis=0)
    kept = ordered[t: n - t] if t else ordered
    return kept.mean(axis=0)


def _squared_distances(mat: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", mat, mat)
    d = sq[:, None] + sq[None, :] - 2.0 * (mat @ mat.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def krum_scores(mat: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances to each row's n - f - 2 nearest other rows.

    Pools too small for a positive neighbour count score 0 across the
    board (ties then resolve by client id); this degenerate case only
    arises inside bulyan's final selections at small f.
    """
    n = mat.shape[0]
    keep = n - f - 2
    if keep <= 0:
        return np.zeros(n)
    d = _squared_distances(mat)
    off_diag = d[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    nearest = np.sort(off_diag, axis=1)[:, :keep]
    return nearest.sum(axis=1)


def krum(updates: list[FlatUpdate], f: int, multi_m: int = 1) -> list[FlatUpdate]:
    """Lowest-score update(s) under the krum distance score.

    Returns the multi_m selected updates in score order (client id breaks
    ties). Requires n >= 2f + 3 so every row has a meaningful neighbour
    set.
    """
    ups = _sorted_by_client(updates)
    n = len(ups)
    if f < 0:
        raise ValueError("f must be >= 0")
    if n < 2 * f + 3:
        raise ValueError(f"krum needs n >= 2f + 3, got n={n}, f={f}")
    if not 1 <= multi_m <= n:
        raise ValueError(f"multi_m must be in [1, {n}], got {multi_m}")
    scores = krum_scores(_as_matrix(ups), f)
    order = np.argsort(scores, kind="stable")  # rows already in client-id order
    return [ups[i] for i in order[:multi_m]]


def bulyan(updates: list[FlatUpdate], f: int) -> np.ndarray:
    """Iterated-krum selection followed by a trimmed coordinate average.

    Runs krum selection n - 2f times, removing the pick from the pool each
    time, then per coordinate keeps the n - 4f selected values closest to
    the selected set's coordinate median (ties by position) and averages
    them. Requires n >= 4f + 3.
    """
    ups = _sorted_by_client(updates)
    n = len(ups)
    if n < 4 * f + 3:
        raise ValueError(f"bulyan needs n >= 4f + 3, got n={n}, f={f}")
    pool = list(range(n))
    mat = _as_matrix(ups)
    chosen: list[int] = []
    for _ in range(n - 2 * f):
        scores = krum_scores(mat[pool], f)
        pick = int(np.argmin(scores))  # stable: first minimum = lowest client id
        chosen.append(pool[pick])
        pool.pop(pick)
    chosen.sort()  # client-id order for the coordinate stage
    sel = mat[chosen]
    med = np.median(sel, axis=0)
    keep = n - 4 * f
    dist = np.abs(sel - med)
    order = np.argsort(dist, axis=0, kind="stable")[:keep]
    return np.take_along_axis(sel, order, axis=0).mean(axis=0)


def resolve_byzantine_count(config: DefenseConfig, n: int) -> int:
    if config.byzantine_count is not None:
        return config.byzantine_count
    return math.ceil(config.assumed_malicious_fraction * n)


def aggregate(updates: list[FlatUpdate], config: DefenseConfig) -> tuple[np.ndarray, dict]:
    """Effective summed update for the round plus bookkeeping for the log."""
    ups = _sorted_by_client(updates)
    n = len(ups)
    info: dict = {"kind": config.kind, "num_updates": n}
    if config.kind == "none":
        total = np.sum(_as_matrix(ups), axis=0)
    elif config.kind == "norm_bound":
        if config.norm_threshold is None:
            raise ValueError("norm_bound needs a calibrated norm_threshold")
        clipped = norm_bound(ups, config.norm_threshold)
        info["clipped_clients"] = [
            u.client_id for u, c in zip(ups, clipped) if not np.array_equal(u.vector, c.vector)]
        total = np.sum(_as_matrix(clipped), axis=0)
    elif config.kind == "median":
        total = n * coordinate_median(ups)
    elif config.kind == "trimmed_mean":
        total = n * trimmed_mean(ups, config.trim_fraction)
    elif config.kind in ("krum", "multi_krum"):
        f = resolve_byzantine_count(config, n)
        multi_m = 1 if config.kind == "krum" else (
            config.multi_m if config.multi_m is not None else n - f - 2)
        selected = krum(ups, f, multi_m=multi_m)
        info["selected_clients"] = [u.client_id for u in selected]
        info["byzantine_count"] = f
        total = n * np.mean(_as_matrix(selected), axis=0)
    elif config.kind == "bulyan":
        f = resolve_byzantine_count(config, n)
        info["byzantine_count"] = f
        total = n * bulyan(ups, f)
    else:  # unreachable due to config validation
        raise ValueError(f"unknown defense kind {config.kind!r}")
    return total, info
