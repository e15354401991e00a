"""Config-driven command line: partition -> noise -> train -> analyze.

Every stage writes a manifest with sha256 hashes of its inputs and outputs;
the next stage refuses to run on artifacts whose hashes no longer match.
All output bytes are a pure function of the config and master seed: JSON is
dumped with sorted keys, CSVs use fixed formatting, and no timestamps or
absolute paths are recorded.

Exit codes: 0 success, 2 config validation, 3 artifact mismatch,
4 numerical abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, rng
from .analysis import (
    AccuracyTable,
    drop_ratio_series,
    last_k_average,
    read_accuracy_table,
    sensitivity_series,
)
from .config import RunConfig, load_config
from .datasets import load_csv, save_csv
from .errors import ArtifactMismatchError, ConfigError, NoisyFLError, NumericalAbortError
from .federation import run_federation, write_telemetry
from .localtrain import COTEACHING_DEFAULT_FORGET_RATE
from .models import save_checkpoint
from .noise import (
    SCENE_CLEAN,
    SCENE_GLOBALIZED,
    SCENE_LOCALIZED,
    SCENE_REALWORLD,
    load_noise_manifest,
    noise_manifest_dict,
    run_scene,
)
from .partition import load_plan, make_partition, save_plan

SUMMARY_LAST_K = 10


# ---------------------------------------------------------------- helpers

def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def write_json(doc: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.canonical_dict(), sort_keys=True).encode("utf-8")
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def _check_recorded_hashes(recorded: dict, base_dir: str, stage: str) -> None:
    for rel, expected in recorded.items():
        path = os.path.join(base_dir, rel)
        if not os.path.exists(path):
            raise ArtifactMismatchError(f"{stage}: missing artifact {rel}")
        actual = sha256_file(path)
        if actual != expected:
            raise ArtifactMismatchError(
                f"{stage}: artifact {rel} hash {actual} does not match recorded {expected}"
            )


def _materialize_dataset_files(cfg: RunConfig) -> tuple[str, str | None]:
    """Write dataset.csv (+ test_dataset.csv) into the output dir; idempotent bytes."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    train, test = cfg.dataset.materialize()
    train_path = os.path.join(cfg.output_dir, "dataset.csv")
    save_csv(train, train_path)
    test_path = None
    if test is not None:
        test_path = os.path.join(cfg.output_dir, "test_dataset.csv")
        save_csv(test, test_path)
    return train_path, test_path


# ---------------------------------------------------------------- stages

def cmd_partition(cfg: RunConfig) -> None:
    """Materialize the dataset and write plan + per-client class histograms."""
    train_path, _ = _materialize_dataset_files(cfg)
    ds = load_csv(train_path, "label")
    plan = make_partition(
        ds, cfg.federation.num_clients, cfg.partition, rng.derive_seed(cfg.seed, "partition")
    )
    plan_path = os.path.join(cfg.output_dir, "plan.json")
    save_plan(plan, plan_path)

    hist_path = os.path.join(cfg.output_dir, "client_histograms.csv")
    with open(hist_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["client"] + [f"class_{i}" for i in range(ds.num_classes)])
        for k, idx in enumerate(plan.clients):
            counts = np.bincount(ds.labels[idx], minlength=ds.num_classes)
            writer.writerow([k] + counts.tolist())

    write_json(
        {
            "stage": "partition",
            "version": __version__,
            "config_digest": config_digest(cfg),
            "inputs": {"dataset.csv": sha256_file(train_path)},
            "outputs": {
                "plan.json": sha256_file(plan_path),
                "client_histograms.csv": sha256_file(hist_path),
            },
        },
        os.path.join(cfg.output_dir, "partition_manifest.json"),
    )


def _plans_equal(a, b) -> bool:
    return (
        a.scheme == b.scheme
        and a.num_clients == b.num_clients
        and all(np.array_equal(x, y) for x, y in zip(a.clients, b.clients))
    )


def cmd_noise(cfg: RunConfig) -> None:
    """Run the configured noise scene; writes noisy dataset, plan, and manifest.

    The globalized scene corrupts before partitioning, so it owns the plan
    and ignores any pre-existing plan file; other scenes must agree with a
    pre-existing plan byte for byte.
    """
    train_path, _ = _materialize_dataset_files(cfg)
    ds = load_csv(train_path, "label")
    plan, noisy, report = run_scene(ds, cfg.noise, cfg.federation.num_clients, cfg.partition)

    plan_path = os.path.join(cfg.output_dir, "plan.json")
    if os.path.exists(plan_path) and cfg.noise.scene != SCENE_GLOBALIZED:
        existing = load_plan(plan_path)
        if not _plans_equal(existing, plan):
            raise ArtifactMismatchError(
                "noise: existing plan.json does not match this config's partition"
            )
    save_plan(plan, plan_path)

    noisy_path = os.path.join(cfg.output_dir, "noisy_dataset.csv")
    save_csv(noisy, noisy_path)

    manifest = noise_manifest_dict(
        cfg.noise,
        report,
        extra={
            "stage": "noise",
            "version": __version__,
            "config_digest": config_digest(cfg),
            "inputs": {"dataset.csv": sha256_file(train_path)},
            "outputs": {
                "plan.json": sha256_file(plan_path),
                "noisy_dataset.csv": sha256_file(noisy_path),
            },
        },
    )
    write_json(manifest, os.path.join(cfg.output_dir, "noise_manifest.json"))


def _noise_ratio_estimate(manifest: dict) -> float:
    scene = manifest["scene"]
    if scene == SCENE_GLOBALIZED:
        return float(manifest["eps_global"])
    if scene == SCENE_LOCALIZED:
        return 0.5 * (float(manifest["eps_min"]) + float(manifest["eps_max"]))
    if scene == SCENE_REALWORLD and manifest.get("overall_ratio") is not None:
        return float(manifest["overall_ratio"])
    return 0.0


def _train_one_seed(cfg: RunConfig, seed_dir: str, fed_seed: int, lr: float, datasets, digest: str) -> dict:
    """Run one federation repeat unless its manifest says it already finished."""
    manifest_path = os.path.join(seed_dir, "seed_manifest.json")
    if os.path.exists(manifest_path):
        doc = read_json(manifest_path)
        try:
            if doc.get("config_digest") == digest and doc.get("lr") == lr:
                _check_recorded_hashes(doc.get("outputs", {}), seed_dir, "train")
                return doc
        except ArtifactMismatchError:
            pass  # stale partial outputs; redo the seed

    noisy, plan, test = datasets
    layout = cfg.layout_for(noisy.dim, noisy.num_classes)
    trainer = dataclasses.replace(cfg.federation.trainer, lr=lr)
    fed_cfg = dataclasses.replace(cfg.federation, trainer=trainer, seed=fed_seed)
    result = run_federation(noisy, plan, test, layout, fed_cfg)

    os.makedirs(seed_dir, exist_ok=True)
    telemetry_path = os.path.join(seed_dir, "telemetry.csv")
    write_telemetry(result.records, telemetry_path)
    checkpoint_path = os.path.join(seed_dir, "final_checkpoint.bin")
    save_checkpoint(result.params, checkpoint_path, round_t=fed_cfg.rounds, seed=fed_seed)

    last_k = min(SUMMARY_LAST_K, sum(1 for r in result.records if r.test_accuracy is not None))
    doc = {
        "seed": fed_seed,
        "lr": lr,
        "config_digest": digest,
        "last_k": last_k,
        "last_k_accuracy": last_k_average(result.records, last_k),
        "outputs": {
            "telemetry.csv": sha256_file(telemetry_path),
            "final_checkpoint.bin": sha256_file(checkpoint_path),
        },
    }
    write_json(doc, manifest_path)
    return doc


def _write_summary(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lr", "repeats", "last_k", "mean_accuracy", "std_accuracy", "formatted"])
        for row in rows:
            writer.writerow(
                [
                    repr(row["lr"]),
                    row["repeats"],
                    row["last_k"],
                    repr(row["mean"]),
                    repr(row["std"]),
                    f"{row['mean']:.4f} ± {row['std']:.4f}",
                ]
            )


def cmd_train(cfg: RunConfig) -> None:
    """Run `repeats` federations per learning rate; summarize last-10 accuracy.

    Verifies the artifact hash chain recorded by the noise stage, derives
    one federation seed per repeat, and skips repeats whose manifests show
    completed, hash-intact outputs.
    """
    out = cfg.output_dir
    noise_manifest_path = os.path.join(out, "noise_manifest.json")
    if not os.path.exists(noise_manifest_path):
        raise ArtifactMismatchError("train: noise_manifest.json not found; run the noise stage first")
    noise_manifest = load_noise_manifest(noise_manifest_path)
    _check_recorded_hashes(noise_manifest.get("outputs", {}), out, "train")
    _check_recorded_hashes(noise_manifest.get("inputs", {}), out, "train")
    if noise_manifest.get("config_digest") != config_digest(cfg):
        raise ArtifactMismatchError("train: noise stage was produced by a different config")

    test_path = os.path.join(out, "test_dataset.csv")
    if not os.path.exists(test_path):
        raise ConfigError("dataset", "train stage requires a clean test set (test_per_class or test_path)")
    noisy = load_csv(os.path.join(out, "noisy_dataset.csv"), "label")
    plan = load_plan(os.path.join(out, "plan.json"))
    test = load_csv(test_path, "label")

    trainer = cfg.federation.trainer
    if trainer.method == "coteaching" and "forget_rate" not in trainer.method_params:
        estimate = _noise_ratio_estimate(noise_manifest)
        params = dict(trainer.method_params)
        params["forget_rate"] = estimate if estimate > 0 else COTEACHING_DEFAULT_FORGET_RATE
        trainer = dataclasses.replace(trainer, method_params=params)
        cfg = dataclasses.replace(cfg, federation=dataclasses.replace(cfg.federation, trainer=trainer))

    digest = config_digest(cfg)
    train_root = os.path.join(out, "train")
    os.makedirs(train_root, exist_ok=True)
    lrs = list(cfg.lr_grid) if cfg.lr_grid else [cfg.federation.trainer.lr]
    sweep = cfg.lr_grid is not None

    summary_rows = []
    for lr in lrs:
        lr_root = os.path.join(train_root, f"lr_{lr!r}") if sweep else train_root
        os.makedirs(lr_root, exist_ok=True)
        accs = []
        for i in range(cfg.repeats):
            fed_seed = rng.derive_seed(cfg.seed, "federate", i)
            seed_dir = os.path.join(lr_root, f"seed_{i}")
            doc = _train_one_seed(cfg, seed_dir, fed_seed, lr, (noisy, plan, test), digest)
            accs.append(doc["last_k_accuracy"])
        row = {
            "lr": lr,
            "repeats": cfg.repeats,
            "last_k": min(SUMMARY_LAST_K, cfg.federation.rounds),
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs)),
        }
        summary_rows.append(row)
        if sweep:
            _write_summary(os.path.join(lr_root, "summary.csv"), [row])

    # grid sweeps select the lr with the best mean last-10 accuracy
    best = max(summary_rows, key=lambda r: r["mean"])
    _write_summary(os.path.join(train_root, "summary.csv"), summary_rows)
    write_json(
        {
            "stage": "train",
            "version": __version__,
            "config_digest": digest,
            "inputs": {
                "noisy_dataset.csv": sha256_file(os.path.join(out, "noisy_dataset.csv")),
                "plan.json": sha256_file(os.path.join(out, "plan.json")),
                "test_dataset.csv": sha256_file(test_path),
            },
            "selected_lr": best["lr"],
            "summary": [
                {"lr": r["lr"], "mean_accuracy": r["mean"], "std_accuracy": r["std"]}
                for r in summary_rows
            ],
        },
        os.path.join(train_root, "run_manifest.json"),
    )


def _write_series_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def cmd_analyze(run_dir: str | None, table_path: str | None, scale: str, out_dir: str) -> None:
    """Emit drop-ratio / sensitivity series (table input) and the realized
    noise-ratio series (run input); empty inputs yield header-only files."""
    os.makedirs(out_dir, exist_ok=True)
    drop_rows: list[list] = []
    sens_rows: list[list] = []
    noise_rows: list[list] = []

    if table_path:
        table: AccuracyTable = read_accuracy_table(table_path, scale=scale)
        partitions = sorted({p for (p, _, _) in table.entries})
        modes = sorted({m for (_, m, _) in table.entries})
        for mode in modes:
            for part in partitions:
                if part == "iid":
                    continue
                for eps, ratio in drop_ratio_series(table, mode, part):
                    drop_rows.append([part, mode, repr(eps), repr(ratio)])
        for mode in modes:
            for part in partitions:
                for eps, s in sensitivity_series(table, part, mode):
                    sens_rows.append([part, mode, repr(eps), repr(s)])

    if run_dir:
        manifest_path = os.path.join(run_dir, "noise_manifest.json")
        if os.path.exists(manifest_path):
            doc = load_noise_manifest(manifest_path)
            if doc.get("overall_ratio") is not None:
                noise_rows.append(
                    [
                        doc["scene"],
                        doc["mode"],
                        repr(_noise_ratio_estimate(doc)),
                        repr(float(doc["overall_ratio"])),
                    ]
                )

    _write_series_csv(
        os.path.join(out_dir, "drop_ratio.csv"),
        ["partition", "mode", "eps", "drop_ratio"],
        drop_rows,
    )
    _write_series_csv(
        os.path.join(out_dir, "sensitivity.csv"),
        ["partition", "mode", "eps", "sensitivity"],
        sens_rows,
    )
    _write_series_csv(
        os.path.join(out_dir, "noise_ratio.csv"),
        ["scene", "mode", "eps_nominal", "overall_ratio"],
        noise_rows,
    )


def cmd_pipeline(cfg: RunConfig) -> None:
    """Chain all stages in scene-appropriate order, then index the output tree.

    Globalized noise corrupts before partitioning, so its pipeline starts at
    the noise stage, which emits the plan itself.
    """
    stages = []
    if cfg.noise.scene != SCENE_GLOBALIZED:
        cmd_partition(cfg)
        stages.append("partition")
    cmd_noise(cfg)
    stages.append("noise")
    cmd_train(cfg)
    stages.append("train")
    cmd_analyze(cfg.output_dir, None, "fraction", os.path.join(cfg.output_dir, "analysis"))
    stages.append("analyze")

    artifacts = {}
    for root, _, files in os.walk(cfg.output_dir):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, cfg.output_dir)
            if rel == "run.json":
                continue
            artifacts[rel.replace(os.sep, "/")] = sha256_file(path)
    write_json(
        {
            "stages": stages,
            "version": __version__,
            "config_digest": config_digest(cfg),
            "seed": cfg.seed,
            "artifacts": artifacts,
        },
        os.path.join(cfg.output_dir, "run.json"),
    )


# ---------------------------------------------------------------- argparse

def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", required=True, help="path to the run config JSON")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--output-dir", help="output directory override")
    parser.add_argument("--repeats", type=int, help="number of repeated seeds")
    parser.add_argument("--rounds", type=int, help="communication rounds T")
    parser.add_argument("--clients", type=int, help="client count K")
    parser.add_argument("--method", help="local training method")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--lr-grid", help="comma-separated learning-rate sweep")
    parser.add_argument("--epochs", type=int, help="local epochs E")
    parser.add_argument("--batch-size", type=int, help="local batch size")
    parser.add_argument("--scene", help="noise scene")
    parser.add_argument("--mode", help="noise mode (symmetric/asymmetric/none)")
    parser.add_argument("--eps-global", type=float, help="globalized noise ratio")
    parser.add_argument("--eps-min", type=float, help="localized noise ratio lower bound")
    parser.add_argument("--eps-max", type=float, help="localized noise ratio upper bound")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--iid", action="store_true", help="IID partition")
    group.add_argument("--noniid-labeldir", type=float, metavar="ALPHA", help="Dirichlet label skew")
    group.add_argument("--noniid-quantity", type=float, metavar="ALPHA", help="quantity skew")
    group.add_argument(
        "--noniid-label-count", type=int, metavar="C", help="label-quantity skew (classes per client)"
    )


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    simple = {
        "seed": "seed",
        "output_dir": "output_dir",
        "repeats": "repeats",
        "rounds": "federation.rounds",
        "clients": "federation.num_clients",
        "method": "federation.trainer.method",
        "lr": "federation.trainer.lr",
        "epochs": "federation.trainer.epochs",
        "batch_size": "federation.trainer.batch_size",
        "scene": "noise.scene",
        "mode": "noise.mode",
        "eps_global": "noise.eps_global",
        "eps_min": "noise.eps_min",
        "eps_max": "noise.eps_max",
    }
    for attr, dotted in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = value
    if getattr(args, "lr_grid", None):
        overrides["federation.lr_grid"] = [float(v) for v in args.lr_grid.split(",")]
    if getattr(args, "iid", False):
        overrides["partition"] = {"scheme": "iid"}
    elif getattr(args, "noniid_labeldir", None) is not None:
        overrides["partition"] = {"scheme": "label-dir", "alpha": args.noniid_labeldir}
    elif getattr(args, "noniid_quantity", None) is not None:
        overrides["partition"] = {"scheme": "quantity-skew", "alpha": args.noniid_quantity}
    elif getattr(args, "noniid_label_count", None) is not None:
        overrides["partition"] = {"scheme": "label-quantity", "c": args.noniid_label_count}
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisyfl",
        description="Simulate federated learning with noisy labels: partition, corrupt, train, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("partition", "split the dataset across clients and report class histograms"),
        ("noise", "apply the configured noise scene and write the noisy dataset"),
        ("train", "run FedAvg repeats and summarize last-10-round accuracy"),
        ("pipeline", "run partition, noise, train, and analyze in order"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_config_arguments(p)

    p = sub.add_parser("analyze", help="compute drop-ratio/sensitivity/noise-ratio series")
    p.add_argument("--run", help="run directory holding noise_manifest.json and telemetry")
    p.add_argument("--table", help="accuracy table CSV (partition,mode,eps,accuracy)")
    p.add_argument("--scale", choices=["percent", "fraction"], default="percent")
    p.add_argument("--out", required=True, help="directory for the metric CSVs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            cmd_analyze(args.run, args.table, args.scale, args.out)
            return 0
        cfg = load_config(args.config, _overrides_from_args(args))
        if args.command == "partition":
            cmd_partition(cfg)
        elif args.command == "noise":
            cmd_noise(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "pipeline":
            cmd_pipeline(cfg)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ArtifactMismatchError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return 3
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4
    except (NoisyFLError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
