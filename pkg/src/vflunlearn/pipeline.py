"""Experiment orchestration: build data, train, unlearn, retrain, evaluate,
and write every artifact a run produces.

Output layout under the run directory:
    config.json       resolved config plus its content hash
    summary.csv       one row per model variant, deterministic fields only
    metrics.jsonl     metric records plus wall-clock timings
    trace.jsonl       anchor header plus one line per unlearning round
    checkpoints/      one .npz per model variant
    figures/          rendered plots (unless disabled)

summary.csv carries no timing columns on purpose: byte-identical reruns of
the same config are part of the contract, and wall-clock never is. Timings
live in metrics.jsonl.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, data, metrics, protocol, unlearn
from .config import (ExperimentConfig, config_from_dict, config_hash,
                     config_to_dict, resolve_data_path, with_updates, ConfigError)
from .seeds import derive_seed, stream

SUMMARY_COLUMNS = ("config_hash", "seed", "variant", "clean_acc",
                   "backdoor_success", "mia_auc", "mia_acc", "kl_to_gold")
SWEEP_COLUMNS = ("config_hash", "seed", "param", "value", "clean_acc",
                 "backdoor_success", "mia_auc", "mia_acc", "kl_to_gold")
ABLATION_COLUMNS = ("config_hash", "seed", "mode", "clean_acc",
                    "backdoor_success", "mia_auc", "mia_acc", "kl_to_gold")

ABLATION_MODES = ("coordinated", "no_gcm", "rand_proj")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path: Path, columns, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in columns))
    path.write_text("\n".join(lines) + "\n")
    return path


def append_jsonl(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")


@dataclass
class DataBundle:
    train: data.PartitionedDataset          # clean training rows
    test: data.PartitionedDataset           # clean held-out rows
    poisoned_train: data.PartitionedDataset
    backdoor_test: data.PartitionedDataset  # trigger on all rows, true labels
    topology: protocol.Topology
    forgetting_party: int


def _load_raw(cfg: ExperimentConfig) -> tuple[data.RawDataset, data.RawDataset]:
    ds = cfg.dataset
    if ds.source == "synth":
        train = data.synth_dataset(derive_seed(cfg.seed, "data-train"), ds.n_train,
                                   ds.height, ds.width, ds.num_classes, ds.noise,
                                   ds.blobs_per_class)
        test = data.synth_dataset(derive_seed(cfg.seed, "data-test"), ds.n_test,
                                  ds.height, ds.width, ds.num_classes, ds.noise,
                                  ds.blobs_per_class)
        return train, test
    paths = {key: resolve_data_path(getattr(ds, key))
             for key in ("train_images", "train_labels", "test_images", "test_labels")}
    for key, p in paths.items():
        if not p.exists():
            raise ConfigError(f"dataset.{key}", f"file not found: {p}")
    train = data.load_idx(paths["train_images"], paths["train_labels"])
    test = data.load_idx(paths["test_images"], paths["test_labels"])
    if ds.limit_train is not None and ds.limit_train < train.num_samples:
        idx = stream(cfg.seed, "data-subset-train").choice(
            train.num_samples, ds.limit_train, replace=False)
        train = train.subset(np.sort(idx))
    if ds.limit_test is not None and ds.limit_test < test.num_samples:
        idx = stream(cfg.seed, "data-subset-test").choice(
            test.num_samples, ds.limit_test, replace=False)
        test = test.subset(np.sort(idx))
    return train, test


def build_datasets(cfg: ExperimentConfig) -> DataBundle:
    raw_train, raw_test = _load_raw(cfg)
    pt = cfg.partition
    if pt.boundaries is not None:
        spec = data.PartitionSpec(tuple(pt.boundaries), pt.forgetting_party)
        if spec.num_parties != pt.num_feature_parties:
            raise ConfigError("partition.boundaries",
                              f"{spec.num_parties} slices vs "
                              f"{pt.num_feature_parties} feature parties")
    else:
        spec = data.PartitionSpec.equal(raw_train.images.shape[2],
                                        pt.num_feature_parties, pt.forgetting_party)
    train = data.partition(raw_train, spec)
    test = data.partition(raw_test, spec)
    poisoned = data.inject_backdoor(train, cfg.trigger, derive_seed(cfg.seed, "poison"))
    backdoor_test = data.make_backdoor_testset(test, cfg.trigger)
    topo = protocol.Topology(pt.num_feature_parties, pt.active_holds_features)
    return DataBundle(train, test, poisoned, backdoor_test, topo, pt.forgetting_party)


class PhaseFailure(RuntimeError):
    """Numeric divergence wrapped with the phase it happened in."""

    def __init__(self, phase: str, err: protocol.NumericError):
        super().__init__(f"{phase}: {err}")
        self.phase = phase
        self.round_no = err.round_no


def _run_phase(phase: str, thunk):
    try:
        return metrics.time_phase(phase, thunk)
    except protocol.NumericError as err:
        raise PhaseFailure(phase, err)


def _train_cfg(cfg: ExperimentConfig, phase, label: str) -> protocol.TrainConfig:
    return protocol.TrainConfig(phase.epochs, phase.batch_size, phase.lr,
                                derive_seed(cfg.seed, label))


def _unlearn_cfg(cfg: ExperimentConfig) -> unlearn.UnlearnConfig:
    ph = cfg.unlearn
    return unlearn.UnlearnConfig(ph.epochs, ph.batch_size, ph.lr,
                                 derive_seed(cfg.seed, "unlearn"),
                                 c=ph.c, alpha=ph.alpha, mode=ph.mode)


def _mia_pools(cfg: ExperimentConfig, bundle: DataBundle):
    n = min(cfg.evaluation.mia_pool, bundle.poisoned_train.num_samples,
            bundle.test.num_samples)
    member_idx = stream(cfg.seed, "mia-members").choice(
        bundle.poisoned_train.num_samples, n, replace=False)
    nonmember_idx = stream(cfg.seed, "mia-nonmembers").choice(
        bundle.test.num_samples, n, replace=False)
    return (bundle.poisoned_train.subset(np.sort(member_idx)),
            bundle.test.subset(np.sort(nonmember_idx)))


def evaluate_variant(variant: str, model: protocol.VflModel, cfg: ExperimentConfig,
                     bundle: DataBundle, gold: protocol.VflModel | None,
                     mia_pools=None) -> metrics.MetricsRecord:
    rec = metrics.MetricsRecord(
        variant=variant,
        clean_acc=metrics.clean_accuracy(model, bundle.test),
        backdoor_success=metrics.backdoor_success(model, bundle.backdoor_test,
                                                  cfg.trigger.target_label))
    if cfg.evaluation.mia:
        members, nonmembers = mia_pools if mia_pools else _mia_pools(cfg, bundle)
        masked = metrics.without_party(model, bundle.forgetting_party)
        rec.mia_auc, rec.mia_acc = metrics.mia_attack(
            masked, model, members, nonmembers, derive_seed(cfg.seed, "mia"))
    if cfg.evaluation.kl and gold is not None:
        rec.kl_to_gold = metrics.predictive_kl_between(gold, model, bundle.test)
    return rec


@dataclass
class RunResult:
    out_dir: Path
    records: list[metrics.MetricsRecord]
    timings: dict[str, float]
    config_hash: str
    summary_path: Path


def _init_out_dir(cfg: ExperimentConfig, out_dir: str | Path | None) -> tuple[Path, str]:
    out = Path(out_dir) if out_dir else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    (out / "config.json").write_text(json.dumps(
        {"config": config_to_dict(cfg), "config_hash": chash}, indent=2, sort_keys=True)
        + "\n")
    return out, chash


def _summary_row(chash: str, seed: int, rec: metrics.MetricsRecord) -> dict:
    return {"config_hash": chash[:12], "seed": seed, "variant": rec.variant,
            "clean_acc": rec.clean_acc, "backdoor_success": rec.backdoor_success,
            "mia_auc": rec.mia_auc, "mia_acc": rec.mia_acc,
            "kl_to_gold": rec.kl_to_gold}


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> RunResult:
    """The full story: poisoned pretrain, unlearn, gold retrain, evaluate.

    threads is accepted for interface symmetry; a single run is sequential.
    """
    del threads
    out, chash = _init_out_dir(cfg, out_dir)
    bundle = build_datasets(cfg)
    timings: dict[str, float] = {}

    original, timings["pretrain"] = _run_phase(
        "pretrain", lambda: protocol.vfl_pretrain(
            bundle.poisoned_train, _train_cfg(cfg, cfg.pretrain, "pretrain"),
            bundle.topology, cfg.model))

    (unlearned, trace, anchor), timings["unlearn"] = _run_phase(
        "unlearn", lambda: unlearn.unlearn(original, bundle.poisoned_train,
                                           bundle.forgetting_party, _unlearn_cfg(cfg)))

    gold, timings["retrain"] = _run_phase(
        "retrain", lambda: protocol.retrain_gold(
            bundle.poisoned_train, _train_cfg(cfg, cfg.retrain, "retrain"),
            bundle.topology, cfg.model, bundle.forgetting_party))

    variants: list[tuple[str, protocol.VflModel]] = [("original", original)]
    if cfg.evaluation.eval_original_clean:
        clean_model, timings["pretrain_clean"] = _run_phase(
            "pretrain_clean", lambda: protocol.vfl_pretrain(
                bundle.train, _train_cfg(cfg, cfg.pretrain, "pretrain-clean"),
                bundle.topology, cfg.model))
        variants.append(("original_clean", clean_model))
    variants += [("unlearned", unlearned), ("gold", gold)]

    pools = _mia_pools(cfg, bundle) if cfg.evaluation.mia else None
    records = []
    for name, model in variants:
        rec, timings[f"evaluate:{name}"] = _run_phase(
            f"evaluate:{name}", lambda m=model, n=name: evaluate_variant(
                n, m, cfg, bundle, gold, pools))
        phase_key = {"original": "pretrain", "original_clean": "pretrain_clean",
                     "unlearned": "unlearn", "gold": "retrain"}[name]
        rec.wall_clock_s = {phase_key: timings[phase_key],
                            "evaluate": timings[f"evaluate:{name}"]}
        records.append(rec)

    trace_path = out / "trace.jsonl"
    trace_path.unlink(missing_ok=True)
    append_jsonl(trace_path, {"type": "anchor", "digest": anchor.digest(),
                              "c": anchor.c, "dim": int(anchor.u.shape[0]),
                              "config_hash": chash})
    for row in trace:
        append_jsonl(trace_path, {"type": "round", **row.to_json_dict()})

    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    for rec in records:
        append_jsonl(metrics_path, {"type": "metrics", "config_hash": chash,
                                    "seed": cfg.seed, **rec.to_json_dict()})
    ratio = timings["unlearn"] / timings["retrain"] if timings["retrain"] > 0 else None
    append_jsonl(metrics_path, {"type": "timings", "config_hash": chash,
                                "seed": cfg.seed, "wall_clock_s": timings,
                                "unlearn_over_retrain": ratio})

    ckpt_dir = out / "checkpoints"
    for name, model in variants:
        checkpoint.save_model(ckpt_dir / f"{name}.npz", model, config_hash=chash,
                              seed=cfg.seed, extra={"variant": name})

    summary = write_csv(out / "summary.csv", SUMMARY_COLUMNS,
                        [_summary_row(chash, cfg.seed, r) for r in records])

    if cfg.evaluation.figures:
        from . import report
        report.render_run_figures(out, trace, records)

    return RunResult(out, records, timings, chash, summary)


def _shared_pretrain_and_gold(cfg: ExperimentConfig, out: Path, chash: str,
                              bundle: DataBundle):
    original, t_pre = _run_phase(
        "pretrain", lambda: protocol.vfl_pretrain(
            bundle.poisoned_train, _train_cfg(cfg, cfg.pretrain, "pretrain"),
            bundle.topology, cfg.model))
    gold, t_re = _run_phase(
        "retrain", lambda: protocol.retrain_gold(
            bundle.poisoned_train, _train_cfg(cfg, cfg.retrain, "retrain"),
            bundle.topology, cfg.model, bundle.forgetting_party))
    ckpt_dir = out / "checkpoints"
    p_orig = checkpoint.save_model(ckpt_dir / "original.npz", original,
                                   config_hash=chash, seed=cfg.seed,
                                   extra={"variant": "original"})
    p_gold = checkpoint.save_model(ckpt_dir / "gold.npz", gold, config_hash=chash,
                                   seed=cfg.seed, extra={"variant": "gold"})
    return original, gold, p_orig, p_gold, {"pretrain": t_pre, "retrain": t_re}


def _unlearn_and_eval(cfg: ExperimentConfig, bundle: DataBundle,
                      original: protocol.VflModel, gold: protocol.VflModel
                      ) -> metrics.MetricsRecord:
    unlearned, _, _ = unlearn.unlearn(original, bundle.poisoned_train,
                                      bundle.forgetting_party, _unlearn_cfg(cfg))
    return evaluate_variant("unlearned", unlearned, cfg, bundle, gold)


def _sweep_worker(payload: tuple) -> dict:
    cfg_dict, param, value, orig_path, gold_path = payload
    cfg = config_from_dict(cfg_dict)
    bundle = build_datasets(cfg)
    original, _ = checkpoint.load_model(orig_path)
    gold, _ = checkpoint.load_model(gold_path)
    rec = _unlearn_and_eval(cfg, bundle, original, gold)
    return {"param": param, "value": value, **rec.to_json_dict()}


def run_sweep(cfg: ExperimentConfig, param: str, values: list[float],
              out_dir=None, threads: int = 1) -> tuple[Path, list[dict]]:
    """One unlearning run per parameter value, all sharing the pretrained
    and gold checkpoints. Emits long-format sweep_summary.csv."""
    if param not in ("c", "alpha"):
        raise ConfigError("param", f"sweep supports 'c' or 'alpha', got {param!r}")
    if not values:
        raise ConfigError("values", "need at least one value")
    out, chash = _init_out_dir(cfg, out_dir)
    bundle = build_datasets(cfg)
    original, gold, p_orig, p_gold, _ = _shared_pretrain_and_gold(cfg, out, chash, bundle)

    payloads = [(config_to_dict(with_updates(cfg, unlearn={param: v})), param, v,
                 str(p_orig), str(p_gold)) for v in values]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw_rows = list(pool.map(_sweep_worker, payloads))
    else:
        raw_rows = [_sweep_worker(p) for p in payloads]

    rows = [{"config_hash": chash[:12], "seed": cfg.seed, "param": param,
             "value": r["value"], "clean_acc": r["clean_acc"],
             "backdoor_success": r["backdoor_success"], "mia_auc": r["mia_auc"],
             "mia_acc": r["mia_acc"], "kl_to_gold": r["kl_to_gold"]}
            for r in raw_rows]
    path = write_csv(out / "sweep_summary.csv", SWEEP_COLUMNS, rows)
    if cfg.evaluation.figures:
        from . import report
        report.render_sweep_figure(out, param, rows)
    return path, rows


def _ablation_worker(payload: tuple) -> dict:
    cfg_dict, mode, orig_path, gold_path = payload
    cfg = config_from_dict(cfg_dict)
    bundle = build_datasets(cfg)
    original, _ = checkpoint.load_model(orig_path)
    gold, _ = checkpoint.load_model(gold_path)
    rec = _unlearn_and_eval(cfg, bundle, original, gold)
    return {"mode": mode, **rec.to_json_dict()}


def run_ablation(cfg: ExperimentConfig, out_dir=None, threads: int = 1
                 ) -> tuple[Path, list[dict]]:
    """The three update rules, same checkpoints, same unlearning seed."""
    out, chash = _init_out_dir(cfg, out_dir)
    bundle = build_datasets(cfg)
    original, gold, p_orig, p_gold, _ = _shared_pretrain_and_gold(cfg, out, chash, bundle)
    payloads = [(config_to_dict(with_updates(cfg, unlearn={"mode": m})), m,
                 str(p_orig), str(p_gold)) for m in ABLATION_MODES]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw_rows = list(pool.map(_ablation_worker, payloads))
    else:
        raw_rows = [_ablation_worker(p) for p in payloads]
    rows = [{"config_hash": chash[:12], "seed": cfg.seed, "mode": r["mode"],
             "clean_acc": r["clean_acc"], "backdoor_success": r["backdoor_success"],
             "mia_auc": r["mia_auc"], "mia_acc": r["mia_acc"],
             "kl_to_gold": r["kl_to_gold"]} for r in raw_rows]
    path = write_csv(out / "ablation_summary.csv", ABLATION_COLUMNS, rows)
    if cfg.evaluation.figures:
        from . import report
        report.render_ablation_figure(out, rows)
    return path, rows


def run_retrain(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Gold model only: retrain without the forgetting party and evaluate."""
    out, chash = _init_out_dir(cfg, out_dir)
    bundle = build_datasets(cfg)
    timings = {}
    gold, timings["retrain"] = _run_phase(
        "retrain", lambda: protocol.retrain_gold(
            bundle.poisoned_train, _train_cfg(cfg, cfg.retrain, "retrain"),
            bundle.topology, cfg.model, bundle.forgetting_party))
    rec, timings["evaluate:gold"] = _run_phase(
        "evaluate:gold", lambda: evaluate_variant("gold", gold, cfg, bundle, gold))
    rec.wall_clock_s = {"retrain": timings["retrain"],
                        "evaluate": timings["evaluate:gold"]}
    checkpoint.save_model(out / "checkpoints" / "gold.npz", gold, config_hash=chash,
                          seed=cfg.seed, extra={"variant": "gold"})
    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)
    append_jsonl(metrics_path, {"type": "metrics", "config_hash": chash,
                                "seed": cfg.seed, **rec.to_json_dict()})
    append_jsonl(metrics_path, {"type": "timings", "config_hash": chash,
                                "seed": cfg.seed, "wall_clock_s": timings,
                                "unlearn_over_retrain": None})
    summary = write_csv(out / "summary.csv", SUMMARY_COLUMNS,
                        [_summary_row(chash, cfg.seed, rec)])
    return RunResult(out, [rec], timings, chash, summary)


def run_eval(cfg: ExperimentConfig, checkpoint_path: str | Path,
             out_dir=None) -> metrics.MetricsRecord:
    """Re-evaluate a saved checkpoint against the config's datasets. The
    checkpoint must carry this config's hash."""
    out, chash = _init_out_dir(cfg, out_dir)
    model, meta = checkpoint.load_model(checkpoint_path, expect_config_hash=chash)
    bundle = build_datasets(cfg)
    variant = meta.get("extra", {}).get("variant", "checkpoint")
    gold = None
    gold_path = Path(checkpoint_path).parent / "gold.npz"
    if cfg.evaluation.kl and gold_path.exists():
        gold, _ = checkpoint.load_model(gold_path, expect_config_hash=chash)
    rec = evaluate_variant(variant, model, cfg, bundle, gold)
    append_jsonl(out / "metrics.jsonl", {"type": "metrics", "config_hash": chash,
                                         "seed": cfg.seed, "reevaluated": True,
                                         **rec.to_json_dict()})
    return rec
