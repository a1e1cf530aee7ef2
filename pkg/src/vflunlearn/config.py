"""Experiment configuration: strict JSON schema, helpful field-path errors,
and a canonical content hash that stamps every output file.

Unknown keys are hard errors: a typo in a config must fail loudly, not
silently fall back to a default.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import TriggerSpec
from .protocol import ModelSpec

SCHEMA_VERSION = 1
DATA_ROOT_ENV = "VFLUNLEARN_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; carries the dotted field path."""

    def __init__(self, path: str, msg: str):
        super().__init__(msg)
        self.path = path


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synth"  # "synth" or "idx"
    n_train: int = 800
    n_test: int = 400
    height: int = 12
    width: int = 12
    num_classes: int = 4
    noise: float = 0.12
    blobs_per_class: int = 3
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit_train: int | None = None
    limit_test: int | None = None


@dataclass(frozen=True)
class PartitionConfig:
    num_feature_parties: int = 3
    forgetting_party: int = 2
    active_holds_features: bool = False
    boundaries: tuple[int, ...] | None = None


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int
    batch_size: int
    lr: float


@dataclass(frozen=True)
class UnlearnPhaseConfig:
    epochs: int
    batch_size: int
    lr: float
    c: float = 1.0
    alpha: float = 1e-3
    mode: str = "coordinated"


@dataclass(frozen=True)
class EvalConfig:
    mia: bool = True
    mia_pool: int = 256
    kl: bool = True
    figures: bool = True
    eval_original_clean: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    dataset: DatasetConfig
    partition: PartitionConfig
    trigger: TriggerSpec
    model: ModelSpec
    pretrain: PhaseConfig
    unlearn: UnlearnPhaseConfig
    retrain: PhaseConfig
    evaluation: EvalConfig


_BOOL = "bool"
_INT = "int"
_FLOAT = "float"
_STR = "str"
_INT_LIST = "int_list"
_OPT_INT = "opt_int"
_OPT_INT_LIST = "opt_int_list"


def _check(path: str, value, kind: str):
    if kind == _BOOL:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if kind == _OPT_INT:
        if value is None:
            return None
        return _check(path, value, _INT)
    if kind == _INT_LIST:
        if not isinstance(value, (list, tuple)) or \
                any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(path, f"expected a list of integers, got {value!r}")
        return tuple(value)
    if kind == _OPT_INT_LIST:
        if value is None:
            return None
        return _check(path, value, _INT_LIST)
    raise AssertionError(kind)


def _section(raw: dict, name: str, fields: dict, required: set[str] = frozenset()):
    """Pull one config section as a plain dict of validated values."""
    if name not in raw:
        blob = {}
    else:
        blob = raw[name]
        if not isinstance(blob, dict):
            raise ConfigError(name, f"expected an object, got {blob!r}")
    unknown = set(blob) - set(fields)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    out = {}
    for key, (kind, default) in fields.items():
        path = f"{name}.{key}"
        if key in blob:
            out[key] = _check(path, blob[key], kind)
        elif key in required:
            raise ConfigError(path, "required key is missing")
        else:
            out[key] = default
    return out


_TOP_LEVEL = {"seed", "output_dir", "dataset", "partition", "trigger", "model",
              "pretrain", "unlearn", "retrain", "evaluation"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(raw) - _TOP_LEVEL
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    if "seed" not in raw:
        raise ConfigError("seed", "required key is missing")
    seed = _check("seed", raw["seed"], _INT)
    output_dir = _check("output_dir", raw.get("output_dir", "runs/out"), _STR)

    ds = _section(raw, "dataset", {
        "source": (_STR, "synth"), "n_train": (_INT, 800), "n_test": (_INT, 400),
        "height": (_INT, 12), "width": (_INT, 12), "num_classes": (_INT, 4),
        "noise": (_FLOAT, 0.12), "blobs_per_class": (_INT, 3),
        "train_images": (_STR, ""), "train_labels": (_STR, ""),
        "test_images": (_STR, ""), "test_labels": (_STR, ""),
        "limit_train": (_OPT_INT, None), "limit_test": (_OPT_INT, None)})
    if ds["source"] not in ("synth", "idx"):
        raise ConfigError("dataset.source", f"must be 'synth' or 'idx', got {ds['source']!r}")
    if ds["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not ds[key]:
                raise ConfigError(f"dataset.{key}", "required for source 'idx'")

    pt = _section(raw, "partition", {
        "num_feature_parties": (_INT, 3), "forgetting_party": (_INT, 2),
        "active_holds_features": (_BOOL, False), "boundaries": (_OPT_INT_LIST, None)})
    if pt["num_feature_parties"] < 1:
        raise ConfigError("partition.num_feature_parties", "must be >= 1")
    if not 1 <= pt["forgetting_party"] <= pt["num_feature_parties"]:
        raise ConfigError("partition.forgetting_party",
                          f"must lie in 1..{pt['num_feature_parties']}")
    b = pt["boundaries"]
    if b is not None:
        if len(b) != pt["num_feature_parties"] + 1:
            raise ConfigError("partition.boundaries",
                              f"need {pt['num_feature_parties'] + 1} entries, got {len(b)}")
        if b[0] != 0 or any(lo >= hi for lo, hi in zip(b, b[1:])):
            raise ConfigError("partition.boundaries",
                              "must start at 0 and increase strictly")

    tg = _section(raw, "trigger", {
        "height": (_INT, 2), "width": (_INT, 2), "fill": (_FLOAT, 1.0),
        "target_label": (_INT, 0), "poison_rate": (_FLOAT, 0.1),
        "position": (_STR, "lower_right")})
    try:
        trigger = TriggerSpec(**tg)
    except ValueError as err:
        raise ConfigError("trigger", str(err))

    md = _section(raw, "model", {
        "encoder": (_STR, "mlp"), "encoder_hidden": (_INT_LIST, (32,)),
        "hidden_dim": (_INT, 16), "conv_channels": (_INT_LIST, (32, 64)),
        "top_hidden": (_INT_LIST, (128,))})
    if len(md["conv_channels"]) != 2:
        raise ConfigError("model.conv_channels", "expected exactly two channel counts")
    try:
        model = ModelSpec(encoder=md["encoder"], encoder_hidden=md["encoder_hidden"],
                          hidden_dim=md["hidden_dim"],
                          conv_channels=tuple(md["conv_channels"]),
                          top_hidden=md["top_hidden"])
    except ValueError as err:
        raise ConfigError("model", str(err))

    def phase(name, defaults):
        vals = _section(raw, name, {"epochs": (_INT, defaults[0]),
                                    "batch_size": (_INT, defaults[1]),
                                    "lr": (_FLOAT, defaults[2])})
        if vals["epochs"] < 0:
            raise ConfigError(f"{name}.epochs", "must be >= 0")
        if vals["batch_size"] < 1:
            raise ConfigError(f"{name}.batch_size", "must be >= 1")
        if vals["lr"] < 0:
            raise ConfigError(f"{name}.lr", "must be >= 0")
        return PhaseConfig(**vals)

    pretrain = phase("pretrain", (20, 32, 0.3))
    retrain = phase("retrain", (20, 32, 0.3))

    ul = _section(raw, "unlearn", {
        "epochs": (_INT, 4), "batch_size": (_INT, 32), "lr": (_FLOAT, 0.05),
        "c": (_FLOAT, 1.0), "alpha": (_FLOAT, 1e-3),
        "mode": (_STR, "coordinated")})
    if ul["c"] <= 0:
        raise ConfigError("unlearn.c", "must be > 0")
    if ul["alpha"] < 0:
        raise ConfigError("unlearn.alpha", "must be >= 0")
    if ul["mode"] not in ("coordinated", "no_gcm", "rand_proj"):
        raise ConfigError("unlearn.mode", f"unknown mode {ul['mode']!r}")
    unlearn_phase = UnlearnPhaseConfig(**ul)

    ev = _section(raw, "evaluation", {
        "mia": (_BOOL, True), "mia_pool": (_INT, 256), "kl": (_BOOL, True),
        "figures": (_BOOL, True), "eval_original_clean": (_BOOL, False)})
    if ev["mia_pool"] < 8:
        raise ConfigError("evaluation.mia_pool", "must be >= 8")
    evaluation = EvalConfig(**ev)

    return ExperimentConfig(seed=seed, output_dir=output_dir,
                            dataset=DatasetConfig(**ds), partition=PartitionConfig(**pt),
                            trigger=trigger, model=model, pretrain=pretrain,
                            unlearn=unlearn_phase, retrain=retrain,
                            evaluation=evaluation)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("<config>", f"file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("<config>", f"invalid JSON: {err}")
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Lossless plain-dict form (the canonical shape that gets hashed)."""
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "dataset": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in vars(cfg.dataset).items()},
        "partition": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in vars(cfg.partition).items()},
        "trigger": dict(vars(cfg.trigger)),
        "model": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in vars(cfg.model).items()},
        "pretrain": dict(vars(cfg.pretrain)),
        "unlearn": dict(vars(cfg.unlearn)),
        "retrain": dict(vars(cfg.retrain)),
        "evaluation": dict(vars(cfg.evaluation)),
    }


def config_hash(cfg: ExperimentConfig) -> str:
    """Identity of the experiment: everything that can change a recorded
    number. Output location and figure rendering are excluded so cosmetic
    toggles do not relabel the run."""
    d = config_to_dict(cfg)
    d.pop("output_dir", None)
    d["evaluation"].pop("figures", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def with_updates(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    """New config with top-level values or section fields replaced,
    e.g. with_updates(cfg, seed=7, unlearn={"alpha": 1e-2})."""
    d = config_to_dict(cfg)
    for key, value in updates.items():
        if key not in d:
            raise ConfigError(key, "unknown key")
        if isinstance(value, dict):
            d[key] = {**d[key], **value}
        else:
            d[key] = value
    return config_from_dict(d)


def resolve_data_path(p: str) -> Path:
    """Dataset paths resolve against $VFLUNLEARN_DATA_ROOT unless absolute."""
    path = Path(p)
    if path.is_absolute():
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    return (Path(root) / path) if root else path
