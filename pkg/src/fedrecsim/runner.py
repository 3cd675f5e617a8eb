"""Experiment orchestration: one federated run from config to artifacts.

A run loads its dataset, resolves the attacked subgroup, builds the benign
population plus injected malicious clients, trains for the configured
number of rounds, and persists everything needed to reproduce or inspect
the result:

    <output_dir>/<config-hash>_seed<N>/
        manifest.json     resolved config snapshot, checksums, final metrics
        metrics.csv       (round, group, metric, value) evaluation rows
        rounds.jsonl      one diagnostic record per training round
        embeddings/       optional per-eval-round attack embedding dumps

Re-running never touches an existing run directory; a numeric suffix is
appended instead. Given the same config (or a manifest's config snapshot),
a run is bit-reproducible including metrics.csv bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, SubgroupAttackClient
from .config import ExperimentConfig, config_from_dict, config_hash, config_to_dict
from .data import (InteractionDataset, label_groups, leave_one_out_split, load_dataset,
                   select_interested_items, select_target_items)
from .defense import DefenseConfig
from .federation import (STREAM_GLOBAL_INIT, STREAM_SELECTION, STREAM_SETUP,
                         STREAM_USER_INIT, BenignClient, RoundPlan, run_round,
                         select_clients)
from .metrics import MetricsReport, evaluate
from .model import init_global_params

logger = logging.getLogger(__name__)

METRICS_HEADER = ("round", "group", "metric", "value")
WARMUP_ROUNDS = 3


class RunError(RuntimeError):
    """A run aborted; the failure manifest has already been written."""

    def __init__(self, message: str, manifest: "RunManifest"):
        super().__init__(message)
        self.manifest = manifest


@dataclass
class RunManifest:
    run_dir: str
    status: str  # "completed" | "failed"
    config: dict
    dataset_sha256: str
    code_version: str
    resolved: dict
    round_wall_ms: list[float] = field(default_factory=list)
    final_report: dict | None = None
    error: str | None = None
    failure_round: int | None = None

    def save(self):
        path = Path(self.run_dir) / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def dataset_checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def malicious_count(fraction: float, num_users: int) -> int:
    """Injected fake clients: ceil of the fraction, at least one when attacking."""
    if fraction <= 0:
        return 0
    return max(1, math.ceil(fraction * num_users))


def resolve_groups(dataset: InteractionDataset, config: ExperimentConfig,
                   rng: np.random.Generator) -> tuple[frozenset[int], frozenset[int]]:
    """Fix the interested and target item sets, sampling any left unset."""
    group = config.group
    if group.interested_items is not None:
        interested = frozenset(int(i) for i in group.interested_items)
    else:
        interested = select_interested_items(
            dataset, group.interested_size, rng,
            popularity_band=tuple(group.interested_band))
    if group.target_items is not None:
        targets = frozenset(int(i) for i in group.target_items)
    else:
        targets = select_target_items(
            dataset, group.target_size, rng, exclude=interested,
            popularity_band=tuple(group.target_band))
    if interested & targets:
        raise ValueError("interested and target item sets overlap")
    return interested, targets


def build_attack_config(config: ExperimentConfig, interested: frozenset[int],
                        targets: frozenset[int]) -> AttackConfig:
    a = config.attack
    return AttackConfig(
        target_items=targets, interested_items=interested, margin=a.margin,
        alignment_weight=a.alignment_weight, relevant_top_k=a.relevant_top_k,
        approx_count=a.approx_count, approx_steps=a.approx_steps,
        approx_lr=a.approx_lr, promo_steps=a.promo_steps, promo_lr=a.promo_lr,
        promo_model_lr=a.promo_model_lr, upload_scale=a.upload_scale,
        update_clip=a.update_clip, warmup_rounds=a.warmup_rounds,
        probe_count=a.probe_count, exposure_cap=a.exposure_cap,
        probe_top_k=a.probe_top_k, probe_sigma=a.probe_sigma,
        repulsion=a.repulsion, relevant_items=a.relevant_items,
        alignment=a.alignment, adaptive_tuning=a.adaptive_tuning)


def _benign_population(dataset: InteractionDataset, config: ExperimentConfig) -> dict:
    clients = {}
    for u in range(dataset.num_users):
        if not dataset.train[u]:
            continue
        clients[u] = BenignClient(
            u, dataset.train[u], dataset.num_items, config.model.embed_dim,
            init_rng=np.random.default_rng([config.master_seed, STREAM_USER_INIT, u]),
            negatives_per_positive=config.negatives_per_positive)
    return clients


def _epoch_schedule(all_ids, config: ExperimentConfig, seed: int, epoch: int,
                    always_ids=()):
    """Who trains this epoch, partitioned into aggregation batches.

    The server applies one summed update per batch (a shuffled slice of
    the epoch's participants), so every participant still trains exactly
    once per epoch while each update stays small enough for stable
    sum-aggregation. Selection and partition share one seeded stream.
    Ids in ``always_ids`` (adversaries control their own availability and
    timing, so they answer every offer and straggle deliberately) are
    selected unconditionally and aggregated in the epoch's final batch;
    the participation rate and the shuffle apply to the rest.
    """
    rng = np.random.default_rng([seed, STREAM_SELECTION, epoch])
    always = tuple(sorted(frozenset(always_ids)))
    pool = [i for i in all_ids if i not in frozenset(always)]
    if config.participation < 1.0:
        sampled = select_clients(pool, config.participation, rng)
    else:
        sampled = tuple(pool)
    selected = tuple(sorted(set(sampled) | set(always)))
    size = config.clients_per_round
    if size is None or size >= len(selected):
        return selected, [selected]
    order = rng.permutation(np.array(sampled, dtype=np.int64))
    batches = [tuple(sorted(int(i) for i in order[s: s + size]))
               for s in range(0, order.size, size)]
    if always:
        if batches:
            batches[-1] = tuple(sorted(batches[-1] + always))
        else:
            batches = [always]
    return selected, batches


def _run_epoch(params, epoch: int, batches, clients, config: ExperimentConfig,
               defense) -> tuple:
    """One full pass: run_round per batch, merged into an epoch record."""
    norms: dict[int, float] = {}
    dropped: list[int] = []
    losses: list[float] = []
    wall_ms = 0.0
    defense_info: dict = {}
    for batch in batches:
        plan = RoundPlan(epoch, batch, learning_rate=config.model.learning_rate,
                         local_epochs=config.local_epochs,
                         batch_size=config.batch_size)
        params, log = run_round(params, plan, clients, config.master_seed,
                                defense_config=defense, parallel=config.parallel)
        norms.update(log.client_norms)
        dropped.extend(log.dropped_clients)
        if log.mean_train_loss is not None:
            losses.append(log.mean_train_loss)
        wall_ms += log.wall_ms
        defense_info = log.defense_info
    record = {
        "round": epoch,
        "num_updates": len(batches),
        "wall_ms": wall_ms,
        "mean_norm": float(np.mean(list(norms.values()))) if norms else 0.0,
        "max_norm": float(max(norms.values())) if norms else 0.0,
        "mean_train_loss": float(np.mean(losses)) if losses else None,
        "dropped_clients": sorted(dropped),
        "defense": _jsonable(defense_info),
    }
    return params, norms, record


def calibrate_norm_threshold(dataset: InteractionDataset, config: ExperimentConfig,
                             params) -> float:
    """Median benign update norm over a short defense-free warmup.

    The warmup uses throwaway client instances and the same epoch schedule
    as the real run, so the real run still starts from untouched state;
    with everything seed-derived the result is deterministic.
    """
    clients = _benign_population(dataset, config)
    all_ids = sorted(clients)
    warm_params = params.copy()
    norms: list[float] = []
    for r in range(WARMUP_ROUNDS):
        _, batches = _epoch_schedule(all_ids, config, config.master_seed, r)
        warm_params, epoch_norms, _ = _run_epoch(
            warm_params, r, batches, clients, config, defense=None)
        norms.extend(epoch_norms[c] for c in sorted(epoch_norms))
    tau = float(np.median(np.array(norms)))
    if tau <= 0:
        raise ValueError("norm-threshold calibration produced a non-positive value")
    return tau


def _fresh_run_dir(root: Path, stem: str) -> Path:
    candidate = root / stem
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = root / f"{stem}_{suffix}"
    candidate.mkdir(parents=True)
    return candidate


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def _write_metrics_csv(path: Path, reports: list[MetricsReport]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for report in reports:
            for round_index, group, metric, value in report.to_rows():
                writer.writerow([round_index, group, metric, repr(float(value))])


def _dump_embeddings(run_dir: Path, round_label: int, params, attackers: list):
    if not attackers:
        return
    state = attackers[0].state
    out = run_dir / "embeddings"
    out.mkdir(exist_ok=True)
    rows = []
    for kind, mat in (("approx_target", state.target_group_embeddings),
                      ("approx_non_target", state.non_target_group_embeddings)):
        for i, vec in enumerate(mat):
            rows.append([kind, i, *[repr(float(x)) for x in vec]])
    for kind, ids in (("target_item", sorted(attackers[0].config.target_items)),
                      ("relevant_item", sorted(state.relevant_items))):
        for i in ids:
            rows.append([kind, i, *[repr(float(x)) for x in params.item_embeddings[i]]])
    with open(out / f"round_{round_label}.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "id", *[f"dim{j}" for j in range(params.embed_dim)]])
        writer.writerows(rows)


def run_experiment(config: ExperimentConfig, out_root: str | None = None) -> RunManifest:
    """Execute one configured run end to end; see the module docstring for
    the artifact layout. Raises RunError after persisting a failure manifest
    if any round or evaluation blows up."""
    config.validate()
    seed = config.master_seed
    root = Path(out_root if out_root is not None else config.output_dir)
    run_dir = _fresh_run_dir(root, f"{config_hash(config)[:12]}_seed{seed}")

    dataset = load_dataset(config.dataset.path, config.dataset.format)
    dataset = leave_one_out_split(dataset, rng_seed=seed)
    group_rng = np.random.default_rng([seed, STREAM_SETUP])
    interested, targets = resolve_groups(dataset, config, group_rng)
    labeling = label_groups(dataset, interested)

    params = init_global_params(
        dataset.num_items, config.model,
        np.random.default_rng([seed, STREAM_GLOBAL_INIT]))

    defense = config.defense
    calibrated_tau = None
    if defense.kind == "norm_bound" and defense.norm_threshold is None:
        calibrated_tau = calibrate_norm_threshold(dataset, config, params)
        defense = DefenseConfig(**{**asdict(defense), "norm_threshold": calibrated_tau})
        logger.info("calibrated norm threshold to %.6g", calibrated_tau)

    clients = _benign_population(dataset, config)
    n_malicious = malicious_count(config.malicious_fraction, dataset.num_users)
    attack_config = build_attack_config(config, interested, targets)
    attackers = []
    for j in range(n_malicious):
        cid = dataset.num_users + j
        attackers.append(SubgroupAttackClient(
            cid, attack_config, config.model.embed_dim, config.global_epochs,
            init_rng=np.random.default_rng([seed, STREAM_USER_INIT, cid])))
        clients[cid] = attackers[-1]

    snapshot = config_to_dict(config)
    snapshot["group"]["interested_items"] = sorted(interested)
    snapshot["group"]["target_items"] = sorted(targets)
    if calibrated_tau is not None:
        snapshot["defense"]["norm_threshold"] = calibrated_tau
    manifest = RunManifest(
        run_dir=str(run_dir), status="failed", config=snapshot,
        dataset_sha256=dataset_checksum(config.dataset.path),
        code_version=__version__,
        resolved={
            "num_users": dataset.num_users,
            "num_items": dataset.num_items,
            "num_malicious": n_malicious,
            "num_target_users": len(labeling.target_users),
            "interested_items": sorted(interested),
            "target_items": sorted(targets),
            "calibrated_norm_threshold": calibrated_tau,
        })

    reports: list[MetricsReport] = []
    round_records = []
    current_round = 0
    try:
        all_ids = sorted(clients)
        malicious_ids = tuple(sorted(c for c in clients if c >= dataset.num_users))
        for r in range(config.global_epochs):
            current_round = r
            selected, batches = _epoch_schedule(all_ids, config, seed, r,
                                                always_ids=malicious_ids)
            t0 = time.perf_counter()
            params, _, record = _run_epoch(params, r, batches, clients, config,
                                           defense)
            manifest.round_wall_ms.append((time.perf_counter() - t0) * 1e3)
            record["num_selected"] = len(selected)
            round_records.append(record)
            if (r + 1) % config.eval_every == 0 or r == config.global_epochs - 1:
                embeddings = np.stack([
                    clients[u].embedding if u in clients
                    else np.zeros(config.model.embed_dim)
                    for u in range(dataset.num_users)])
                reports.append(evaluate(r + 1, embeddings, dataset, params, labeling,
                                        targets, config.k_values, config.alphas))
                if config.dump_embeddings:
                    _dump_embeddings(run_dir, r + 1, params, attackers)
    except Exception as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.failure_round = current_round
        if reports:
            manifest.final_report = reports[-1].to_dict()
            _write_metrics_csv(run_dir / "metrics.csv", reports)
        _write_rounds(run_dir, round_records)
        manifest.save()
        raise RunError(manifest.error, manifest) from exc

    manifest.status = "completed"
    manifest.final_report = reports[-1].to_dict()
    _write_metrics_csv(run_dir / "metrics.csv", reports)
    _write_rounds(run_dir, round_records)
    manifest.save()
    return manifest


def _write_rounds(run_dir: Path, records: list[dict]):
    with open(run_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def apply_patch(data: dict, patch: dict) -> dict:
    """Apply {dotted.key: value} entries to a nested config dictionary."""
    for key, value in patch.items():
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return data


def _flatten_report(report: dict) -> dict[str, float]:
    """Final-report dict -> {"metric(group)": value} comparison columns."""
    out = {}
    for group, by_k in report["er"].items():
        for k, v in by_k.items():
            out[f"ER@{k}({group})"] = v
    for alpha, by_k in report["alpha_ger"].items():
        for k, v in by_k.items():
            out[f"{float(alpha):g}-GER@{k}(all)"] = v
    for k, v in report["hit_ratio"].items():
        out[f"HR@{k}(all)"] = v
    for k, v in report["ndcg"].items():
        out[f"NDCG@{k}(all)"] = v
    return out


def run_matrix(base_config: ExperimentConfig, entries: list[dict],
               out_root: str | None = None) -> list[RunManifest]:
    """Run the base config once per entry (or once, when entries is empty),
    each with its dotted-key patch applied, and write a side-by-side
    comparison CSV. Individual failures are recorded and skipped."""
    if not entries:
        entries = [{"name": "base", "set": {}}]
    root = Path(out_root if out_root is not None else base_config.output_dir)
    manifests: list[RunManifest] = []
    rows = []
    for index, entry in enumerate(entries):
        name = str(entry.get("name", f"entry{index}"))
        data = apply_patch(config_to_dict(base_config), dict(entry.get("set", {})))
        patched = config_from_dict(data)
        try:
            manifest = run_experiment(patched, out_root=str(root))
        except RunError as err:
            logger.error("matrix entry %r failed: %s", name, err)
            manifest = err.manifest
        manifests.append(manifest)
        row = {"name": name, "seed": patched.master_seed, "status": manifest.status,
               "run_dir": manifest.run_dir}
        if manifest.final_report:
            row.update(_flatten_report(manifest.final_report))
        rows.append(row)

    columns = ["name", "seed", "status", "run_dir"]
    metric_columns = sorted({c for row in rows for c in row} - set(columns))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns + metric_columns)
        for row in rows:
            writer.writerow([row.get(c, "") for c in columns]
                            + [repr(float(row[c])) if c in row else ""
                               for c in metric_columns])
    return manifests
