"""Config validation, hashing and command-line behaviour."""

import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from vflunlearn import cli
from vflunlearn.config import (
    DATA_ROOT_ENV,
    ConfigError,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    resolve_data_path,
    with_updates,
)


def tiny_config(**overrides):
    raw = {
        "seed": 5,
        "dataset": {"source": "synth", "n_train": 120, "n_test": 80,
                    "height": 6, "width": 6, "num_classes": 3},
        "partition": {"num_feature_parties": 2, "forgetting_party": 1},
        "trigger": {"height": 1, "width": 2, "fill": 1.0,
                    "target_label": 0, "poison_rate": 0.15},
        "model": {"encoder": "mlp", "encoder_hidden": [12],
                  "hidden_dim": 6, "top_hidden": [16]},
        "pretrain": {"epochs": 4, "batch_size": 16, "lr": 0.3},
        "unlearn": {"epochs": 2, "batch_size": 16, "lr": 0.05,
                    "c": 1.0, "alpha": 0.001, "mode": "coordinated"},
        "retrain": {"epochs": 4, "batch_size": 16, "lr": 0.3},
        "evaluation": {"mia": True, "mia_pool": 32, "kl": True, "figures": False},
    }
    for section, kv in overrides.items():
        if isinstance(kv, dict):
            raw.setdefault(section, {}).update(kv)
        else:
            raw[section] = kv
    return raw


# ---------------------------------------------------------------- validation

def test_valid_config_round_trips():
    cfg = config_from_dict(tiny_config())
    again = config_from_dict(config_to_dict(cfg))
    assert config_hash(cfg) == config_hash(again)


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tiny_config(bogus=1))
    assert "bogus" in exc.value.path


def test_unknown_nested_key_has_dotted_path():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tiny_config(unlearn={"momentum": 0.9}))
    assert exc.value.path == "unlearn.momentum"


def test_wrong_type_names_field():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tiny_config(pretrain={"epochs": "ten"}))
    assert exc.value.path == "pretrain.epochs"


def test_bool_is_not_an_int():
    # True would silently pass an isinstance(int) check; the schema must not.
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tiny_config(seed=True))
    assert exc.value.path == "seed"


def test_bad_mode_rejected():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tiny_config(unlearn={"mode": "turbo"}))
    assert exc.value.path == "unlearn.mode"


def test_forgetting_party_out_of_range():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tiny_config(partition={"forgetting_party": 7}))
    assert "forgetting_party" in exc.value.path


def test_poison_rate_bounds():
    with pytest.raises(ConfigError):
        config_from_dict(tiny_config(trigger={"poison_rate": 1.5}))


def test_idx_source_requires_paths():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tiny_config(dataset={"source": "idx"}))
    assert exc.value.path.startswith("dataset.")


def test_boundaries_override_validated():
    raw = tiny_config(partition={"num_feature_parties": 2,
                                 "forgetting_party": 1,
                                 "boundaries": [0, 4, 6]})
    cfg = config_from_dict(raw)
    assert cfg.partition.boundaries == (0, 4, 6)
    with pytest.raises(ConfigError):
        config_from_dict(tiny_config(partition={"boundaries": [1, 4, 6]}))


def test_hash_changes_with_seed():
    a = config_from_dict(tiny_config())
    b = config_from_dict(tiny_config(seed=6))
    assert config_hash(a) != config_hash(b)


def test_with_updates_overrides_one_field():
    cfg = config_from_dict(tiny_config())
    bumped = with_updates(cfg, seed=99, unlearn={"alpha": 0.5})
    assert bumped.seed == 99
    assert bumped.unlearn.alpha == 0.5
    assert bumped.unlearn.mode == cfg.unlearn.mode
    assert cfg.seed == 5  # original untouched


def test_load_config_reports_file_path(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_resolve_data_path_env_root(monkeypatch, tmp_path):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    assert resolve_data_path("sub/x.gz") == tmp_path / "sub" / "x.gz"
    absolute = tmp_path / "y.gz"
    assert resolve_data_path(str(absolute)) == absolute
    monkeypatch.delenv(DATA_ROOT_ENV)
    assert resolve_data_path("plain.gz") == Path("plain.gz")


# ----------------------------------------------------------------------- CLI

def write_config(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tiny_config())
    out = tmp_path / "out"
    rc = cli.main(["run", "--config", cfg_path, "--out", str(out)])
    assert rc == 0
    assert (out / "summary.csv").is_file()
    assert (out / "metrics.jsonl").is_file()
    assert (out / "trace.jsonl").is_file()
    assert (out / "config.json").is_file()
    assert (out / "checkpoints" / "original.npz").is_file()
    assert (out / "checkpoints" / "unlearned.npz").is_file()
    assert (out / "checkpoints" / "gold.npz").is_file()
    header = (out / "summary.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["config_hash", "seed", "variant"]
    assert "run complete" in capsys.readouterr().out


def test_cli_run_renders_figures(tmp_path):
    raw = tiny_config(evaluation={"figures": True})
    cfg_path = write_config(tmp_path, raw)
    out = tmp_path / "out"
    rc = cli.main(["run", "--config", cfg_path, "--out", str(out)])
    assert rc == 0
    made = sorted(p.name for p in (out / "figures").glob("*.png"))
    assert "unlearn_trace.png" in made
    assert "variant_metrics.png" in made


def test_cli_seed_override_changes_summary(tmp_path):
    cfg_path = write_config(tmp_path, tiny_config())
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", cfg_path, "--out", str(out_a)]) == 0
    assert cli.main(["run", "--config", cfg_path, "--out", str(out_b),
                     "--seed", "71"]) == 0
    text_a = (out_a / "summary.csv").read_text()
    text_b = (out_b / "summary.csv").read_text()
    assert text_a != text_b
    assert ",71," in text_b.splitlines()[1]


def test_cli_missing_dataset_file_is_config_error(tmp_path, capsys):
    raw = tiny_config(dataset={
        "source": "idx",
        "train_images": str(tmp_path / "absent-images.gz"),
        "train_labels": str(tmp_path / "absent-labels.gz"),
        "test_images": str(tmp_path / "absent-images.gz"),
        "test_labels": str(tmp_path / "absent-labels.gz"),
    })
    cfg_path = write_config(tmp_path, raw)
    rc = cli.main(["run", "--config", cfg_path, "--out", str(tmp_path / "out")])
    assert rc == cli.EXIT_CONFIG
    assert "config error at dataset." in capsys.readouterr().err


def test_cli_divergence_exit_code(tmp_path, capsys):
    raw = tiny_config(pretrain={"lr": 1e6, "epochs": 3})
    cfg_path = write_config(tmp_path, raw)
    with np.errstate(all="ignore"):
        rc = cli.main(["run", "--config", cfg_path, "--out", str(tmp_path / "out")])
    assert rc == cli.EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "pretrain" in err and "round" in err


def test_cli_bad_config_file_exit_code(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tiny_config(bogus=1))
    rc = cli.main(["run", "--config", cfg_path, "--out", str(tmp_path / "out")])
    assert rc == cli.EXIT_CONFIG


def test_cli_sweep_and_values_parsing(tmp_path):
    cfg_path = write_config(tmp_path, tiny_config())
    out = tmp_path / "sweep"
    rc = cli.main(["sweep", "--config", cfg_path, "--out", str(out),
                   "--param", "c", "--values", "0.5,2"])
    assert rc == 0
    rows = (out / "sweep_summary.csv").read_text().splitlines()
    assert len(rows) == 3  # header + one per value
    assert "param,value" in rows[0]
    rc = cli.main(["sweep", "--config", cfg_path, "--out", str(out),
                   "--param", "c", "--values", "a,b"])
    assert rc == cli.EXIT_CONFIG


def test_cli_ablate_lists_all_modes(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tiny_config())
    out = tmp_path / "ablate"
    rc = cli.main(["ablate", "--config", cfg_path, "--out", str(out)])
    assert rc == 0
    body = (out / "ablation_summary.csv").read_text()
    for mode in ("coordinated", "no_gcm", "rand_proj"):
        assert mode in body


def test_cli_retrain_then_eval_checkpoint(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tiny_config())
    out = tmp_path / "ret"
    assert cli.main(["retrain", "--config", cfg_path, "--out", str(out)]) == 0
    ckpt = out / "checkpoints" / "gold.npz"
    assert ckpt.is_file()
    rc = cli.main(["eval", "--config", cfg_path, "--checkpoint", str(ckpt),
                   "--out", str(tmp_path / "ev")])
    assert rc == 0
    assert "clean=" in capsys.readouterr().out


def test_cli_eval_rejects_foreign_checkpoint(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tiny_config())
    out = tmp_path / "ret"
    assert cli.main(["retrain", "--config", cfg_path, "--out", str(out)]) == 0
    other_cfg = write_config(tmp_path, tiny_config(seed=6), name="other.json")
    rc = cli.main(["eval", "--config", other_cfg,
                   "--checkpoint", str(out / "checkpoints" / "gold.npz"),
                   "--out", str(tmp_path / "ev2")])
    assert rc == cli.EXIT_CONFIG


def test_cli_inspect_checkpoint(tmp_path, capsys):
    cfg_path = write_config(tmp_path, tiny_config())
    out = tmp_path / "ret"
    assert cli.main(["retrain", "--config", cfg_path, "--out", str(out)]) == 0
    capsys.readouterr()
    rc = cli.main(["inspect-checkpoint", str(out / "checkpoints" / "gold.npz")])
    assert rc == 0
    meta = json.loads(capsys.readouterr().out)
    assert meta["format_version"] == 1
    assert "param_counts" in meta


def test_cli_idx_paths_resolve_against_env_root(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    imgs = (rng.random((60, 6, 6)) * 255).astype(np.uint8)
    labels = (np.arange(60) % 3).astype(np.uint8)
    root = tmp_path / "dataroot"
    root.mkdir()

    def dump(images, labs, ipath, lpath):
        with gzip.open(ipath, "wb") as f:
            n, h, w = images.shape
            f.write(struct.pack(">IIII", 0x803, n, h, w))
            f.write(images.tobytes())
        with gzip.open(lpath, "wb") as f:
            f.write(struct.pack(">II", 0x801, len(labs)))
            f.write(labs.tobytes())

    dump(imgs[:40], labels[:40], root / "tri.gz", root / "trl.gz")
    dump(imgs[40:], labels[40:], root / "tei.gz", root / "tel.gz")
    monkeypatch.setenv(DATA_ROOT_ENV, str(root))
    raw = tiny_config(dataset={
        "source": "idx",
        "train_images": "tri.gz", "train_labels": "trl.gz",
        "test_images": "tei.gz", "test_labels": "tel.gz",
    }, trigger={"poison_rate": 0.3},
       evaluation={"mia": False, "kl": False, "figures": False})
    raw["pretrain"]["epochs"] = 2
    raw["retrain"]["epochs"] = 2
    cfg_path = write_config(tmp_path, raw)
    rc = cli.main(["run", "--config", cfg_path, "--out", str(tmp_path / "out")])
    assert rc == 0
