"""Command line front end.

    fedrecsim run --config CONFIG.json [--set key=value ...] [--seed N] [--out DIR]
    fedrecsim matrix --config CONFIG.json --overrides MATRIX.json [--out DIR]
    fedrecsim inspect --manifest RUN_DIR/manifest.json

`--set` takes dotted keys into the config tree, values parsed as JSON with
a bare-string fallback (`--set attack.repulsion=false`,
`--set dataset.path=data/u.data`). The default output root is `./runs`,
overridable via --out or the FEDRECSIM_OUTPUT_DIR environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ExperimentConfig, apply_overrides, config_from_dict
from .runner import RunError, RunManifest, run_experiment, run_matrix


def _load_patched(args) -> ExperimentConfig:
    with open(args.config, encoding="utf-8") as fh:
        data = json.load(fh)
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"master_seed={args.seed}")
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def _out_root(args) -> str | None:
    if getattr(args, "out", None):
        return args.out
    return os.environ.get("FEDRECSIM_OUTPUT_DIR")


def _cmd_run(args) -> int:
    config = _load_patched(args)
    try:
        manifest = run_experiment(config, out_root=_out_root(args))
    except RunError as err:
        print(f"run failed: {err}", file=sys.stderr)
        print(f"failure manifest: {err.manifest.run_dir}/manifest.json", file=sys.stderr)
        return 1
    print(f"run dir: {manifest.run_dir}")
    report = manifest.final_report
    for group, by_k in sorted(report["er"].items()):
        for k, v in sorted(by_k.items(), key=lambda kv: int(kv[0])):
            print(f"  ER@{k}({group}) = {v:.4f}")
    for k, v in sorted(report["hit_ratio"].items(), key=lambda kv: int(kv[0])):
        print(f"  HR@{k} = {v:.4f}")
    return 0


def _cmd_matrix(args) -> int:
    base = _load_patched(args)
    with open(args.overrides, encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise SystemExit("--overrides must be a JSON list of {name, set} entries")
    manifests = run_matrix(base, entries, out_root=_out_root(args))
    root = _out_root(args) or base.output_dir
    print(f"comparison: {root}/comparison.csv")
    failed = [m for m in manifests if m.status != "completed"]
    for m in failed:
        print(f"failed: {m.run_dir} ({m.error})", file=sys.stderr)
    return 1 if failed else 0


def _cmd_inspect(args) -> int:
    manifest = RunManifest.load(args.manifest)
    print(f"status: {manifest.status}")
    print(f"code version: {manifest.code_version}")
    print(f"dataset sha256: {manifest.dataset_sha256}")
    for key, value in sorted(manifest.resolved.items()):
        print(f"{key}: {value}")
    if manifest.round_wall_ms:
        total = sum(manifest.round_wall_ms)
        print(f"rounds: {len(manifest.round_wall_ms)} ({total / 1e3:.1f}s total)")
    if manifest.error:
        print(f"error at round {manifest.failure_round}: {manifest.error}")
    if manifest.final_report:
        print("final metrics:")
        report = manifest.final_report
        for group, by_k in sorted(report["er"].items()):
            for k, v in sorted(by_k.items(), key=lambda kv: int(kv[0])):
                print(f"  ER@{k}({group}) = {v:.4f}")
        for alpha, by_k in sorted(report["alpha_ger"].items()):
            for k, v in sorted(by_k.items(), key=lambda kv: int(kv[0])):
                print(f"  {float(alpha):g}-GER@{k} = {v:.4f}")
        for name, key in (("HR", "hit_ratio"), ("NDCG", "ndcg")):
            for k, v in sorted(report[key].items(), key=lambda kv: int(kv[0])):
                print(f"  {name}@{k} = {v:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrecsim",
        description="Federated recommender simulator: training, subgroup "
                    "promotion attacks, robust aggregation defenses.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one experiment")
    run_p.add_argument("--config", required=True, help="experiment config JSON")
    run_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-key config override, repeatable")
    run_p.add_argument("--seed", type=int, help="override master_seed")
    run_p.add_argument("--out", help="output root directory")
    run_p.set_defaults(func=_cmd_run)

    matrix_p = sub.add_parser("matrix", help="run a batch of config variants")
    matrix_p.add_argument("--config", required=True, help="base config JSON")
    matrix_p.add_argument("--overrides", required=True,
                          help="JSON list of {name, set: {dotted: value}} entries")
    matrix_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                          help="override applied to the base config first")
    matrix_p.add_argument("--seed", type=int, help="override master_seed")
    matrix_p.add_argument("--out", help="output root directory")
    matrix_p.set_defaults(func=_cmd_matrix)

    inspect_p = sub.add_parser("inspect", help="summarize a finished run")
    inspect_p.add_argument("--manifest", required=True, help="path to manifest.json")
    inspect_p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
