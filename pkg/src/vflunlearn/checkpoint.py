"""Model checkpoints: float64 arrays plus a JSON metadata header in one
.npz file. Round trips are bit-exact; the config hash embedded at save time
is verified on load so a checkpoint cannot silently cross experiments."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .protocol import Topology, VflModel

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_model(path: str | Path, model: VflModel, config_hash: str = "",
               seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "seed": seed,
        "topology": {
            "num_feature_parties": model.topology.num_feature_parties,
            "active_holds_features": model.topology.active_holds_features,
        },
        "num_classes": model.num_classes,
        "components": {f"bottom:{k}": model.bottoms[k].specs()
                       for k in model.participating},
        "extra": extra or {},
    }
    meta["components"]["top"] = model.top.specs()
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for k in model.participating:
        arrays[f"params/bottom:{k}"] = model.bottoms[k].flat_params()
    arrays["params/top"] = model.top.flat_params()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_model(path: str | Path, expect_config_hash: str | None = None
               ) -> tuple[VflModel, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as bundle:
        try:
            meta = json.loads(str(bundle["__meta__"]))
        except KeyError:
            raise CheckpointError(f"{path} is not a model checkpoint (no metadata)")
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format {meta.get('format_version')} != {FORMAT_VERSION}")
        if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
            raise CheckpointError(
                f"checkpoint was written for config {meta['config_hash'][:12]}, "
                f"expected {expect_config_hash[:12]}")
        topo = Topology(**meta["topology"])
        bottoms = {}
        for name, specs in meta["components"].items():
            if name == "top":
                continue
            k = int(name.split(":")[1])
            bottoms[k] = nn.network_from_specs(specs)
            bottoms[k].set_flat_params(bundle[f"params/{name}"])
        top = nn.network_from_specs(meta["components"]["top"])
        top.set_flat_params(bundle["params/top"])
    model = VflModel(topo, bottoms, top, int(meta["num_classes"]))
    return model, meta


def inspect(path: str | Path) -> dict:
    """Metadata plus parameter counts, without rebuilding networks."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as bundle:
        try:
            meta = json.loads(str(bundle["__meta__"]))
        except KeyError:
            raise CheckpointError(f"{path} is not a model checkpoint (no metadata)")
        meta["param_counts"] = {name[len("params/"):]: int(bundle[name].size)
                                for name in bundle.files if name.startswith("params/")}
    return meta
