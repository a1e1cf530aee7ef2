"""Acceptance battery: twelve end-to-end criteria, one test each.

Every test registers a single verdict line (printed in the terminal summary)
and asserts it, so a glance at the output answers which criteria hold.
The image-data criteria run on a handwritten-digits subset materialized as
IDX files, so they exercise the same ingestion path a real deployment uses.
"""

import gzip
import json
import struct
import time

import numpy as np
import pytest

from conftest import record_verdict
from oracles import fd_param_grads, fd_scalar_grad, rel_err, well_separated, monolithic_reference

from vflunlearn import cli, data, metrics, nn, protocol
from vflunlearn import pipeline as pl
from vflunlearn import unlearn as ul
from vflunlearn.config import config_from_dict, with_updates


# --------------------------------------------------------------- shared runs

def _write_idx(images, labels, ipath, lpath):
    n, h, w = images.shape
    with gzip.open(ipath, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.tobytes())
    with gzip.open(lpath, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())


@pytest.fixture(scope="session")
def digits_root(tmp_path_factory):
    """Handwritten 8x8 digits (1,797 samples) rescaled to ubyte IDX files."""
    from sklearn.datasets import load_digits

    root = tmp_path_factory.mktemp("digits-idx")
    d = load_digits()
    images = np.round(d.images * (255.0 / 16.0)).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    order = np.random.default_rng(7).permutation(len(images))
    tr, te = order[:1400], order[1400:]
    _write_idx(images[tr], labels[tr], root / "train-images.gz", root / "train-labels.gz")
    _write_idx(images[te], labels[te], root / "test-images.gz", root / "test-labels.gz")
    return root


def _digits_raw(root, seed):
    return {
        "seed": seed,
        "dataset": {"source": "idx",
                    "train_images": str(root / "train-images.gz"),
                    "train_labels": str(root / "train-labels.gz"),
                    "test_images": str(root / "test-images.gz"),
                    "test_labels": str(root / "test-labels.gz")},
        "partition": {"num_feature_parties": 4, "forgetting_party": 2},
        "trigger": {"height": 2, "width": 2, "fill": 1.0,
                    "target_label": 0, "poison_rate": 0.12},
        "model": {"encoder": "mlp", "encoder_hidden": [64],
                  "hidden_dim": 16, "top_hidden": [128]},
        "pretrain": {"epochs": 50, "batch_size": 32, "lr": 0.05},
        "unlearn": {"epochs": 8, "batch_size": 32, "lr": 0.1,
                    "c": 1.0, "alpha": 0.3, "mode": "coordinated"},
        "retrain": {"epochs": 50, "batch_size": 32, "lr": 0.05},
        "evaluation": {"mia": True, "mia_pool": 256, "kl": True, "figures": False},
    }


@pytest.fixture(scope="session")
def digits_battery(digits_root):
    """Pretrain / unlearn / retrain on the digits subset for five seeds.

    Criteria 5-7 read the first seed's run; 8 and 9 read all five.
    """
    rows = []
    for seed in (11, 12, 13, 14, 15):
        cfg = config_from_dict(_digits_raw(digits_root, seed))
        bundle = pl.build_datasets(cfg)
        t0 = time.perf_counter()
        original = protocol.vfl_pretrain(
            bundle.poisoned_train, pl._train_cfg(cfg, cfg.pretrain, "pretrain"),
            bundle.topology, cfg.model)
        t1 = time.perf_counter()
        unlearned, _, _ = ul.unlearn(original, bundle.poisoned_train,
                                     bundle.forgetting_party, pl._unlearn_cfg(cfg))
        t2 = time.perf_counter()
        gold = protocol.retrain_gold(
            bundle.poisoned_train, pl._train_cfg(cfg, cfg.retrain, "retrain"),
            bundle.topology, cfg.model, bundle.forgetting_party)
        t3 = time.perf_counter()

        tgt = cfg.trigger.target_label
        pools = pl._mia_pools(cfg, bundle)
        aucs = {}
        for name, m in (("orig", original), ("unl", unlearned), ("gold", gold)):
            without = metrics.without_party(m, bundle.forgetting_party)
            aucs[name], _ = metrics.mia_attack(without, m, *pools, seed=cfg.seed)
        rows.append({
            "seed": seed,
            "clean": {n: metrics.clean_accuracy(m, bundle.test)
                      for n, m in (("orig", original), ("unl", unlearned), ("gold", gold))},
            "bkd": {n: metrics.backdoor_success(m, bundle.backdoor_test, tgt)
                    for n, m in (("orig", original), ("unl", unlearned), ("gold", gold))},
            "kl_unl": metrics.predictive_kl_between(gold, unlearned, bundle.test),
            "kl_orig": metrics.predictive_kl_between(gold, original, bundle.test),
            "auc": aucs,
            "wall": {"pretrain": t1 - t0, "unlearn": t2 - t1, "retrain": t3 - t2},
        })
    return rows


def _synth_raw(**overrides):
    raw = {
        "seed": 1,
        "dataset": {"source": "synth", "n_train": 600, "n_test": 300,
                    "height": 12, "width": 12, "num_classes": 4},
        "partition": {"num_feature_parties": 3, "forgetting_party": 2},
        "trigger": {"height": 2, "width": 2, "fill": 1.0,
                    "target_label": 0, "poison_rate": 0.1},
        "model": {"encoder": "mlp", "encoder_hidden": [32],
                  "hidden_dim": 16, "top_hidden": [64]},
        "pretrain": {"epochs": 25, "batch_size": 32, "lr": 0.3},
        "unlearn": {"epochs": 4, "batch_size": 32, "lr": 0.05,
                    "c": 1.0, "alpha": 0.001, "mode": "coordinated"},
        "retrain": {"epochs": 25, "batch_size": 32, "lr": 0.3},
        "evaluation": {"mia": False, "kl": False, "figures": False},
    }
    for section, kv in overrides.items():
        if isinstance(kv, dict):
            raw.setdefault(section, {}).update(kv)
        else:
            raw[section] = kv
    return raw


@pytest.fixture(scope="session")
def ablation_battery():
    """Three unlearning update rules on a hard synthetic task, five seeds.

    The task is deliberately unfittable (8 classes, heavy pixel noise, small
    encoders) so the retention gradient keeps a large norm throughout the
    unlearning phase and the three rules can actually diverge.
    """
    base = _synth_raw(
        dataset={"num_classes": 8, "noise": 0.35},
        model={"encoder_hidden": [16], "hidden_dim": 8, "top_hidden": [32]},
        pretrain={"epochs": 15},
        unlearn={"alpha": 1.0, "epochs": 8, "lr": 0.2})
    rows = []
    for seed in (1, 2, 3, 4, 5):
        raw = json.loads(json.dumps(base))
        raw["seed"] = seed
        cfg = config_from_dict(raw)
        bundle = pl.build_datasets(cfg)
        original = protocol.vfl_pretrain(
            bundle.poisoned_train, pl._train_cfg(cfg, cfg.pretrain, "pretrain"),
            bundle.topology, cfg.model)
        row = {"seed": seed}
        for mode in ul.MODES:
            mode_cfg = with_updates(cfg, unlearn={"mode": mode})
            m, _, _ = ul.unlearn(original, bundle.poisoned_train,
                                 bundle.forgetting_party, pl._unlearn_cfg(mode_cfg))
            row[mode] = (metrics.clean_accuracy(m, bundle.test),
                         metrics.backdoor_success(m, bundle.backdoor_test,
                                                  cfg.trigger.target_label))
        rows.append(row)
    return rows


# ------------------------------------------------------------- criteria 1-4

def test_criterion_01_gradient_correctness():
    started = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)

        cases = [
            (nn.Network([nn.Dense(5, 4, rng)]), rng.normal(size=(3, 5))),
            (nn.Network([nn.Relu((7,))]), well_separated(rng, (3, 7))),
            (nn.Network([nn.Conv3x3(2, 3, (6, 6), rng)]),
             rng.normal(size=(2, 2 * 6 * 6))),
            (nn.Network([nn.MaxPool2x2((1, 5, 5))]), well_separated(rng, (2, 25))),
            (nn.Network([nn.Dense(6, 8, rng), nn.Relu((8,)), nn.Dense(8, 4, rng)]),
             well_separated(rng, (3, 6))),
        ]
        for net, x in cases:
            y = net.forward(x)
            dy = rng.normal(size=y.shape)
            analytic, _ = net.backward(dy)
            numeric = fd_param_grads(net, x, lambda out: float((dy * out).sum()))
            if analytic.size:
                worst = max(worst, rel_err(analytic, numeric))

        logits = rng.normal(size=(4, 3))
        labels = rng.integers(0, 3, size=4)
        _, dlogits = nn.loss_softmax_ce(logits, labels)
        num = fd_scalar_grad(lambda z: nn.loss_softmax_ce(z, labels)[0], logits)
        worst = max(worst, rel_err(dlogits, num))

        pred = rng.normal(size=(4, 5))
        target = rng.normal(size=(4, 5))
        _, dpred = nn.loss_mse(pred, target)
        num = fd_scalar_grad(lambda z: nn.loss_mse(z, target)[0], pred)
        worst = max(worst, rel_err(dpred, num))

    elapsed = time.perf_counter() - started
    ok = worst <= 1e-4 and elapsed < 10.0
    assert record_verdict(1, "gradient-correctness", ok,
                          f"worst rel err {worst:.2e} over 20 seeds, {elapsed:.1f}s")


def test_criterion_02_split_equals_monolithic():
    started = time.perf_counter()
    worst = 0.0
    for trial in range(5):
        rng = np.random.default_rng(40 + trial)
        k = int(rng.integers(2, 5))
        width = int(rng.integers(2 * k, 4 * k))
        raw = data.synth_dataset(seed=50 + trial, n=24, height=5, width=width,
                                 num_classes=3)
        part = data.partition(raw, data.PartitionSpec.equal(width, k, 1))
        topo = protocol.Topology(k)
        spec = protocol.ModelSpec(encoder="mlp",
                                  encoder_hidden=(int(rng.integers(4, 9)),),
                                  hidden_dim=int(rng.integers(3, 7)),
                                  top_hidden=(int(rng.integers(6, 13)),))
        model = protocol.build_model(part, topo, spec, seed=60 + trial)
        mono, extract = monolithic_reference(model)

        idx = np.arange(16)
        sim = protocol.SplitVfl(model, part)
        logits = sim.forward_round(idx)
        loss_split, dlogits = sim.loss_grad(logits)
        grad_split = sim.backward_round(dlogits)

        x = np.hstack([part.features_flat(j)[idx] for j in model.participating])
        mono_logits = mono.forward(x)
        loss_mono, dmono = nn.loss_softmax_ce(mono_logits, part.labels[idx])
        grad_mono, _ = mono.backward(dmono)

        worst = max(worst,
                    float(np.abs(logits - mono_logits).max()),
                    abs(loss_split - loss_mono),
                    float(np.abs(grad_split - extract(grad_mono)).max()))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-10 and elapsed < 5.0
    assert record_verdict(2, "split-equals-monolithic", ok,
                          f"worst abs diff {worst:.2e} over 5 configs, {elapsed:.1f}s")


def test_criterion_03_projection_algebra():
    started = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_orth = 0.0
    identity_ok = True
    expansion_ok = True
    for _ in range(100_000):
        dim = int(rng.integers(1, 33))
        scale_f = 10.0 ** rng.uniform(-3, 3)
        scale_r = 10.0 ** rng.uniform(-3, 3)
        g_f = rng.normal(size=dim) * scale_f
        g_r = rng.normal(size=dim) * scale_r
        proj = ul.project_retention(g_r, g_f)
        if float(g_f @ g_r) < 0.0:
            denom = max(1.0, float(np.linalg.norm(g_f) * np.linalg.norm(g_r)))
            worst_orth = max(worst_orth, abs(float(proj @ g_f)) / denom)
        else:
            identity_ok = identity_ok and (proj is g_r)
        if np.linalg.norm(proj) > np.linalg.norm(g_r) * (1.0 + 1e-12):
            expansion_ok = False
    elapsed = time.perf_counter() - started
    ok = worst_orth <= 1e-10 and identity_ok and expansion_ok and elapsed < 10.0
    assert record_verdict(3, "projection-algebra", ok,
                          f"orth {worst_orth:.2e}, identity {identity_ok}, "
                          f"non-expansion {expansion_ok}, {elapsed:.1f}s")


def test_criterion_04_anchor_distribution():
    worst_norm = 0.0
    for dim in range(1, 513):
        a = ul.draw_anchor(dim, 1.0, seed=dim)
        worst_norm = max(worst_norm, abs(float(np.linalg.norm(a.u)) - 1.0))

    fixed = ul.draw_anchor(16, 2.0, seed=99)
    again = ul.draw_anchor(16, 2.0, seed=99)
    stable = fixed.digest() == again.digest() and np.array_equal(fixed.u, again.u)

    draws = np.stack([ul.sample_unit_sphere(3, 10_000 + i) for i in range(10_000)])
    # each coordinate of a uniform point on the 2-sphere has variance 1/3
    sigma = np.sqrt(1.0 / 3.0 / draws.shape[0])
    max_dev = float(np.abs(draws.mean(axis=0)).max())

    ok = worst_norm <= 1e-12 and stable and max_dev <= 3.0 * sigma
    assert record_verdict(4, "anchor-distribution", ok,
                          f"norm err {worst_norm:.1e}, digest stable {stable}, "
                          f"mean dev {max_dev:.4f} vs 3sigma {3 * sigma:.4f}")


# ----------------------------------------------- criteria 5-9 (image subset)

def test_criterion_05_backdoor_erasure(digits_battery):
    row = digits_battery[0]
    ok = (row["bkd"]["orig"] >= 90.0
          and row["bkd"]["unl"] <= 15.0
          and row["bkd"]["gold"] <= 15.0
          and sum(r["wall"]["pretrain"] + r["wall"]["unlearn"] + r["wall"]["retrain"]
                  for r in digits_battery) < 900.0)
    assert record_verdict(5, "backdoor-erasure", ok,
                          f"backdoor orig {row['bkd']['orig']:.1f}% -> "
                          f"unlearned {row['bkd']['unl']:.1f}%, "
                          f"gold {row['bkd']['gold']:.1f}%")


def test_criterion_06_utility_retention(digits_battery):
    row = digits_battery[0]
    floor = row["clean"]["gold"] - 5.0
    ok = row["clean"]["unl"] >= floor
    assert record_verdict(6, "utility-retention", ok,
                          f"unlearned clean {row['clean']['unl']:.2f}% vs "
                          f"floor {floor:.2f}% (gold {row['clean']['gold']:.2f}%)")


def test_criterion_07_runtime_overhead(digits_battery):
    row = digits_battery[0]
    ratio = row["wall"]["unlearn"] / row["wall"]["retrain"]
    ok = ratio <= 0.35
    assert record_verdict(7, "runtime-overhead", ok,
                          f"unlearn/retrain wall-clock ratio {ratio:.3f}")


def test_criterion_08_kl_directionality(digits_battery):
    hits = sum(1 for r in digits_battery if r["kl_unl"] < r["kl_orig"])
    ok = hits >= 4
    detail = ", ".join(f"s{r['seed']}:{r['kl_unl']:.2f}<{r['kl_orig']:.2f}"
                       for r in digits_battery)
    assert record_verdict(8, "kl-directionality", ok, f"{hits}/5 seeds ({detail})")


def test_criterion_09_mia_closeness(digits_battery):
    hits = 0
    gaps = []
    for r in digits_battery:
        d_unl = abs(r["auc"]["unl"] - r["auc"]["gold"])
        d_orig = abs(r["auc"]["orig"] - r["auc"]["gold"])
        gaps.append(f"s{r['seed']}:{d_unl:.3f}")
        if d_unl <= d_orig + 0.02 and d_unl <= 0.15:
            hits += 1
    ok = hits >= 4
    assert record_verdict(9, "mia-closeness", ok,
                          f"{hits}/5 seeds within bounds (|auc gap| {', '.join(gaps)})")


# ------------------------------------------------------------ criteria 10-12

def test_criterion_10_ablation_ordering(ablation_battery):
    clean_gaps = sorted(r["coordinated"][0] - r["rand_proj"][0]
                        for r in ablation_battery)
    bkd_gaps = sorted(r["no_gcm"][1] - r["coordinated"][1]
                      for r in ablation_battery)
    median_clean = clean_gaps[len(clean_gaps) // 2]
    median_bkd = bkd_gaps[len(bkd_gaps) // 2]
    ok = median_clean >= 10.0 and median_bkd >= 0.0
    assert record_verdict(10, "ablation-ordering", ok,
                          f"median clean gap coordinated-rand_proj "
                          f"{median_clean:.1f} pts, median backdoor gap "
                          f"no_gcm-coordinated {median_bkd:+.1f} pts")


def test_criterion_11_sensitivity_directionality():
    # anchor scale: a far-away target destabilizes collapse, backdoor survives
    raw = _synth_raw()
    cfg = config_from_dict(raw)
    bundle = pl.build_datasets(cfg)
    original = protocol.vfl_pretrain(
        bundle.poisoned_train, pl._train_cfg(cfg, cfg.pretrain, "pretrain"),
        bundle.topology, cfg.model)
    bkd_at_c = {}
    for c in (1.0, 8.0):
        cfg_c = with_updates(cfg, unlearn={"c": c})
        m, _, _ = ul.unlearn(original, bundle.poisoned_train,
                             bundle.forgetting_party, pl._unlearn_cfg(cfg_c))
        bkd_at_c[c] = metrics.backdoor_success(m, bundle.backdoor_test,
                                               cfg.trigger.target_label)

    # retention weight: a heavier task term re-fits the poisoned labels
    raw = _synth_raw(trigger={"poison_rate": 0.3},
                     unlearn={"epochs": 10, "lr": 0.1})
    cfg = config_from_dict(raw)
    bundle = pl.build_datasets(cfg)
    original = protocol.vfl_pretrain(
        bundle.poisoned_train, pl._train_cfg(cfg, cfg.pretrain, "pretrain"),
        bundle.topology, cfg.model)
    bkd_at_alpha = {}
    for alpha in (1e-3, 1e-2):
        cfg_a = with_updates(cfg, unlearn={"alpha": alpha})
        m, _, _ = ul.unlearn(original, bundle.poisoned_train,
                             bundle.forgetting_party, pl._unlearn_cfg(cfg_a))
        bkd_at_alpha[alpha] = metrics.backdoor_success(m, bundle.backdoor_test,
                                                       cfg.trigger.target_label)

    ok = bkd_at_c[8.0] > bkd_at_c[1.0] and bkd_at_alpha[1e-2] > bkd_at_alpha[1e-3]
    assert record_verdict(11, "sensitivity-directionality", ok,
                          f"backdoor c=8 {bkd_at_c[8.0]:.1f}% > c=1 "
                          f"{bkd_at_c[1.0]:.1f}%; alpha=1e-2 "
                          f"{bkd_at_alpha[1e-2]:.1f}% > alpha=1e-3 "
                          f"{bkd_at_alpha[1e-3]:.1f}%")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_criterion_12_byte_identical_reruns(tmp_path):
    raw = _synth_raw(evaluation={"mia": True, "mia_pool": 64,
                                 "kl": True, "figures": False})
    raw["dataset"].update({"n_train": 200, "n_test": 120})
    raw["pretrain"]["epochs"] = 6
    raw["retrain"]["epochs"] = 6
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(raw))
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    rc_a = cli.main(["run", "--config", str(cfg_path), "--out", str(out_a)])
    rc_b = cli.main(["run", "--config", str(cfg_path), "--out", str(out_b)])
    bytes_a = (out_a / "summary.csv").read_bytes()
    bytes_b = (out_b / "summary.csv").read_bytes()
    ok = rc_a == 0 and rc_b == 0 and bytes_a == bytes_b
    assert record_verdict(12, "determinism", ok,
                          f"summary.csv identical across reruns: {bytes_a == bytes_b}")
