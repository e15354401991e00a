"""Run configuration: one JSON document describing the whole pipeline.

Sections: dataset (synthetic or csv, exactly one), partition, noise,
federation (protocol + model + trainer), plus output directory, repeat
count, and the master seed.  Validation errors carry the offending field
path.  CLI flags override individual fields before validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import rng
from .datasets import LabeledDataset, load_csv, make_synthetic_blobs
from .errors import ConfigError
from .federation import FedConfig
from .localtrain import TrainerConfig
from .models import Layout, LinearSoftmaxLayout, MLPLayout
from .noise import MODES, SCENE_CLEAN, SCENES, NoiseSpec
from .partition import SCHEMES, PartitionSpec


def _require(doc: dict, field: str, path: str):
    if field not in doc:
        raise ConfigError(f"{path}.{field}" if path else field, "missing required field")
    return doc[field]


def _opt(doc: dict, field: str, default=None):
    return doc.get(field, default)


@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic blob parameters or CSV paths; exactly one source."""

    source: str  # "synthetic" | "csv"
    params: dict

    def materialize(self) -> tuple[LabeledDataset, LabeledDataset | None]:
        """Build (train, test) datasets; test is None when not configured."""
        p = self.params
        if self.source == "synthetic":
            train = make_synthetic_blobs(
                num_classes=p["num_classes"],
                per_class=p["per_class"],
                dim=p["dim"],
                separation=p["separation"],
                seed=p["seed"],
                name="synthetic-train",
            )
            test = make_synthetic_blobs(
                num_classes=p["num_classes"],
                per_class=p["test_per_class"],
                dim=p["dim"],
                separation=p["separation"],
                seed=rng.derive_seed(p["seed"], "test"),
                name="synthetic-test",
            )
            return train, test
        train = load_csv(p["path"], p["label_column"])
        test = load_csv(p["test_path"], p["label_column"]) if p.get("test_path") else None
        return train, test


@dataclass(frozen=True)
class RunConfig:
    """Validated pipeline configuration."""

    seed: int
    output_dir: str
    repeats: int
    dataset: DatasetConfig
    partition: PartitionSpec
    noise: NoiseSpec
    federation: FedConfig
    model: dict
    lr_grid: tuple[float, ...] | None
    raw: dict

    def layout_for(self, dim: int, num_classes: int) -> Layout:
        kind = self.model.get("kind", "mlp")
        if kind == "linear-softmax":
            return LinearSoftmaxLayout(dim=dim, num_classes=num_classes)
        return MLPLayout(
            dim=dim,
            hidden=int(self.model.get("hidden", 32)),
            num_classes=num_classes,
            activation=self.model.get("activation", "tanh"),
        )

    def canonical_dict(self) -> dict:
        """Resolved config without the output directory (location-independent)."""
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return doc


def _validate_dataset(doc: dict) -> DatasetConfig:
    sources = [s for s in ("synthetic", "csv") if s in doc]
    if len(sources) != 1:
        raise ConfigError("dataset", "exactly one of 'synthetic' or 'csv' is required")
    source = sources[0]
    section = doc[source]
    path = f"dataset.{source}"
    if source == "synthetic":
        params = {
            "num_classes": int(_require(section, "num_classes", path)),
            "per_class": int(_require(section, "per_class", path)),
            "dim": int(_require(section, "dim", path)),
            "separation": float(_require(section, "separation", path)),
            "seed": int(_opt(section, "seed", 0)),
        }
        params["test_per_class"] = int(_opt(section, "test_per_class", max(params["per_class"] // 4, 1)))
        if params["num_classes"] < 2:
            raise ConfigError(f"{path}.num_classes", "must be >= 2")
        if params["per_class"] < 1:
            raise ConfigError(f"{path}.per_class", "must be >= 1")
        if params["dim"] < 1:
            raise ConfigError(f"{path}.dim", "must be >= 1")
        if not params["separation"] > 0:
            raise ConfigError(f"{path}.separation", "must be > 0")
        return DatasetConfig(source=source, params=params)
    params = {
        "path": str(_require(section, "path", path)),
        "label_column": str(_require(section, "label_column", path)),
        "test_path": _opt(section, "test_path"),
    }
    return DatasetConfig(source=source, params=params)


def _validate_partition(doc: dict) -> PartitionSpec:
    scheme = _require(doc, "scheme", "partition")
    if scheme not in SCHEMES:
        raise ConfigError("partition.scheme", f"must be one of {list(SCHEMES)}")
    try:
        return PartitionSpec(
            scheme=scheme,
            alpha=float(doc["alpha"]) if "alpha" in doc else None,
            c=int(doc["c"]) if "c" in doc else None,
        )
    except ValueError as exc:
        raise ConfigError("partition", str(exc)) from None


def _validate_noise(doc: dict, master_seed: int) -> NoiseSpec:
    scene = _require(doc, "scene", "noise")
    if scene not in SCENES:
        raise ConfigError("noise.scene", f"must be one of {list(SCENES)}")
    mode = _opt(doc, "mode", "none")
    if mode not in MODES:
        raise ConfigError("noise.mode", f"must be one of {list(MODES)}")
    asym_map = None
    if doc.get("asym_map") is not None:
        try:
            asym_map = {int(k): int(v) for k, v in doc["asym_map"].items()}
        except (TypeError, ValueError, AttributeError):
            raise ConfigError("noise.asym_map", "must map class ids to class ids") from None
    try:
        return NoiseSpec(
            scene=scene,
            mode=mode,
            eps_global=float(doc["eps_global"]) if doc.get("eps_global") is not None else None,
            eps_min=float(doc["eps_min"]) if doc.get("eps_min") is not None else None,
            eps_max=float(doc["eps_max"]) if doc.get("eps_max") is not None else None,
            asym_map=asym_map,
            seed=master_seed,
        )
    except ValueError as exc:
        raise ConfigError("noise", str(exc)) from None


def _validate_trainer(doc: dict) -> TrainerConfig:
    try:
        return TrainerConfig(
            method=_opt(doc, "method", "ce"),
            lr=float(_opt(doc, "lr", 0.01)),
            momentum=float(_opt(doc, "momentum", 0.9)),
            weight_decay=float(_opt(doc, "weight_decay", 5e-4)),
            batch_size=int(_opt(doc, "batch_size", 128)),
            epochs=int(_opt(doc, "epochs", 5)),
            method_params=dict(_opt(doc, "method_params", {})),
        )
    except ValueError as exc:
        raise ConfigError("federation.trainer", str(exc)) from None


def _validate_federation(doc: dict, master_seed: int) -> tuple[FedConfig, dict, tuple[float, ...] | None]:
    trainer = _validate_trainer(_opt(doc, "trainer", {}))
    try:
        fed = FedConfig(
            num_clients=int(_require(doc, "num_clients", "federation")),
            rounds=int(_require(doc, "rounds", "federation")),
            trainer=trainer,
            selection_fraction=float(_opt(doc, "selection_fraction", 1.0)),
            eval_every=int(_opt(doc, "eval_every", 1)),
            seed=master_seed,
        )
    except ValueError as exc:
        raise ConfigError("federation", str(exc)) from None
    model = _opt(doc, "model", {"kind": "mlp"})
    if model.get("kind", "mlp") not in ("mlp", "linear-softmax"):
        raise ConfigError("federation.model.kind", "must be 'mlp' or 'linear-softmax'")
    lr_grid = None
    if doc.get("lr_grid"):
        lr_grid = tuple(float(v) for v in doc["lr_grid"])
        if any(not v > 0 for v in lr_grid):
            raise ConfigError("federation.lr_grid", "learning rates must be > 0")
    return fed, model, lr_grid


def validate_config(doc: dict) -> RunConfig:
    """Validate a raw config dictionary into a RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("", "config root must be a JSON object")
    seed = int(_opt(doc, "seed", 0))
    output_dir = _require(doc, "output_dir", "")
    repeats = int(_opt(doc, "repeats", 1))
    if repeats < 1:
        raise ConfigError("repeats", "must be >= 1")
    dataset = _validate_dataset(_require(doc, "dataset", ""))
    partition = _validate_partition(_require(doc, "partition", ""))
    noise = _validate_noise(_opt(doc, "noise", {"scene": SCENE_CLEAN}), seed)
    fed, model, lr_grid = _validate_federation(_require(doc, "federation", ""), seed)
    return RunConfig(
        seed=seed,
        output_dir=str(output_dir),
        repeats=repeats,
        dataset=dataset,
        partition=partition,
        noise=noise,
        federation=fed,
        model=model,
        lr_grid=lr_grid,
        raw=doc,
    )


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Read a config JSON file, apply dotted-path overrides, and validate."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for dotted, value in (overrides or {}).items():
        set_by_path(doc, dotted, value)
    return validate_config(doc)


def set_by_path(doc: dict, dotted: str, value) -> None:
    """Set ``doc["a"]["b"] = value`` for a dotted path ``a.b``."""
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value
