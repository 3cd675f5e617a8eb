"""Experiment configuration: nested dataclasses with a flat JSON form.

Config files are plain JSON documents mirroring the dataclass tree;
command-line overrides use dotted keys ("attack.margin=5"). Values on the
right of an override are parsed as JSON, falling back to a bare string, so
booleans, numbers, lists, and null all work unquoted.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DATASET_FORMATS
from .defense import DEFENSE_KINDS, DefenseConfig
from .model import ModelConfig


@dataclass
class DataSection:
    path: str = ""
    format: str = "ml100k"

    def validate(self):
        if self.format not in DATASET_FORMATS:
            raise ValueError(f"unknown dataset format {self.format!r}")
        if not self.path:
            raise ValueError("dataset.path is required")


@dataclass
class GroupSection:
    """How the attacked subgroup is defined. Explicit item ids win; otherwise
    items are sampled from popularity bands of the loaded dataset."""

    interested_items: tuple[int, ...] | None = None
    interested_size: int = 2
    interested_band: tuple[float, float] = (0.75, 0.97)
    target_items: tuple[int, ...] | None = None
    target_size: int = 1
    target_band: tuple[float, float] = (0.0, 0.1)

    def validate(self):
        for name in ("interested", "target"):
            size = getattr(self, f"{name}_size")
            if size < 1:
                raise ValueError(f"group.{name}_size must be >= 1")
            lo, hi = getattr(self, f"{name}_band")
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"group.{name}_band must satisfy 0 <= lo < hi <= 1")
        explicit_interested = self.interested_items or ()
        explicit_target = self.target_items or ()
        if set(explicit_interested) & set(explicit_target):
            raise ValueError("explicit interested and target items overlap")


@dataclass
class AttackSection:
    """Attack knobs; the resolved item sets come from GroupSection."""

    margin: float = 10.0
    alignment_weight: float = 0.5
    relevant_top_k: int = 10
    approx_count: int = 8
    approx_steps: int = 20
    approx_lr: float = 0.01
    promo_steps: int = 20
    promo_lr: float = 0.01
    # separate step size for the MLP inside the promotion loop; None falls
    # back to promo_lr. A smaller value forces the objective to be satisfied
    # through the item rows instead of transient model-weight bends.
    promo_model_lr: float | None = None
    # multiplier on the crafted upload; a tiny malicious minority needs it
    # to out-shout the benign mass between its own aggregation turns.
    upload_scale: float = 1.0
    # L2 cap on the crafted upload; keeps the attack from destabilizing
    # the model it is trying to steer. None disables the cap.
    update_clip: float | None = None
    # epochs the attacker sits out before its first real upload.
    warmup_rounds: int = 0
    # cold-probe upload calibration: number of probe users drawn from the
    # embedding init distribution (0 disables), the tolerated fraction of
    # probes exposing the target, the list size probed, and the probe
    # draw's standard deviation.
    probe_count: int = 0
    exposure_cap: float = 0.1
    probe_top_k: int = 5
    probe_sigma: float = 0.01
    repulsion: bool = True
    relevant_items: bool = True
    alignment: bool = True
    adaptive_tuning: bool = True


@dataclass
class ExperimentConfig:
    dataset: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    group: GroupSection = field(default_factory=GroupSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    global_epochs: int = 30
    batch_size: int = 256
    local_epochs: int = 1
    negatives_per_positive: int = 4
    participation: float = 1.0
    # aggregation granularity: participating clients are shuffled into
    # batches of this size each epoch and the server applies one summed
    # update per batch. None aggregates everyone at once, which is only
    # stable for small populations (the per-update gradient sum scales
    # with the total pair count).
    clients_per_round: int | None = 8
    malicious_fraction: float = 0.0
    k_values: tuple[int, ...] = (5, 10)
    alphas: tuple[float, ...] = (0.5,)
    eval_every: int = 5
    master_seed: int = 0
    output_dir: str = "runs"
    dump_embeddings: bool = False
    parallel: bool = False

    def validate(self, check_paths: bool = True):
        self.dataset.validate()
        self.group.validate()
        if check_paths and not Path(self.dataset.path).is_file():
            raise FileNotFoundError(f"dataset file not found: {self.dataset.path}")
        if self.global_epochs < 1:
            raise ValueError("global_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.negatives_per_positive < 0:
            raise ValueError("negatives_per_positive must be >= 0")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must be in (0, 1]")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1 or None")
        if not 0.0 <= self.malicious_fraction < 0.5:
            raise ValueError("malicious_fraction must be in [0, 0.5)")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ValueError("k_values must be positive")
        if not self.alphas or any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alphas must lie in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.defense.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.defense.kind!r}")
        return self


def _to_jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (tuple, list)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, frozenset):
        return sorted(value)
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _to_jsonable(config)


def _coerce(f: dataclasses.Field, raw):
    """Rebuild one dataclass field from its JSON form."""
    if raw is None:
        return None
    nested = {
        "dataset": DataSection, "model": ModelConfig, "group": GroupSection,
        "attack": AttackSection, "defense": DefenseConfig,
    }
    if f.name in nested:
        cls = nested[f.name]
        known = {x.name for x in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown keys in {f.name!r}: {sorted(unknown)}")
        kwargs = dict(raw)
        for sub in fields(cls):
            if sub.name in kwargs and isinstance(kwargs[sub.name], list):
                kwargs[sub.name] = tuple(kwargs[sub.name])
        return cls(**kwargs)
    if isinstance(raw, list):
        return tuple(raw)
    return raw


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(ExperimentConfig):
        if f.name in data:
            kwargs[f.name] = _coerce(f, data[f.name])
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(config: ExperimentConfig, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_overrides(data: dict, assignments) -> dict:
    """Apply "dotted.key=json_value" strings to a config dictionary.

    Returns the same dictionary, mutated. Intermediate objects must already
    exist (every dotted path starts from a dataclass default, so they do).
    """
    for assignment in assignments:
        key, sep, raw = assignment.partition("=")
        if not sep:
            raise ValueError(f"override {assignment!r} is missing '='")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return data


def config_hash(config: ExperimentConfig) -> str:
    """Stable fingerprint of everything that affects results (not output_dir)."""
    import hashlib
    data = config_to_dict(config)
    data.pop("output_dir", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
