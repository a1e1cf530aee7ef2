"""Client-level unlearning by representation misdirection.

The forgetting party's encoder is steered so its representations collapse
onto a fixed random anchor on a scaled unit sphere, which starves the top
model of that party's signal; a task-loss retention gradient over the full
dataset keeps everyone else useful. When the two objectives conflict (their
gradients form an obtuse angle) the retention gradient is projected onto
the orthogonal complement of the forgetting gradient before mixing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .protocol import (NumericError, SplitVfl, UnsupportedOperationError, VflModel)
from .data import PartitionedDataset
from .seeds import stream

MODES = ("coordinated", "no_gcm", "rand_proj")


def sample_unit_sphere(dim: int, seed) -> np.ndarray:
    """Uniform draw from the unit sphere: normalized standard Gaussian."""
    if dim < 1:
        raise ValueError("anchor dimension must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    while norm < 1e-12:  # astronomically unlikely; keeps the division safe
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
    return v / norm


@dataclass(frozen=True)
class Anchor:
    """The fixed misdirection target: scale * unit direction."""

    u: np.ndarray
    c: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.u) - 1.0) > nn.TOL.unit_norm_abs:
            raise ValueError("anchor direction must have unit norm")
        if not np.isfinite(self.c) or self.c <= 0:
            raise ValueError("anchor scale must be positive and finite")
        self.u.setflags(write=False)

    @property
    def target(self) -> np.ndarray:
        return self.c * self.u

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.u.tobytes())
        h.update(np.float64(self.c).tobytes())
        return h.hexdigest()[:16]


def draw_anchor(dim: int, c: float, seed: int) -> Anchor:
    return Anchor(sample_unit_sphere(dim, seed), c)


def forgetting_loss(h: np.ndarray, anchor: Anchor) -> tuple[float, np.ndarray]:
    """Mean squared distance (summed over coordinates) between the batch of
    representations and the anchor target; returns (loss, dL/dh)."""
    h = np.asarray(h, dtype=nn.DTYPE)
    if h.ndim != 2 or h.shape[1] != anchor.u.shape[0]:
        raise nn.DimensionError(
            f"representations {h.shape} do not match anchor dim {anchor.u.shape[0]}")
    if h.shape[0] == 0:
        raise ValueError("empty batch")
    return nn.loss_mse(h, np.broadcast_to(anchor.target, h.shape))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector is numerically zero."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-30 or nb < 1e-30:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def project_retention(g_r: np.ndarray, g_f: np.ndarray) -> np.ndarray:
    """Orthogonalize the retention gradient against the forgetting gradient,
    but only when they conflict (negative inner product). The agreeing
    branch returns g_r itself, untouched."""
    g_r = np.asarray(g_r, dtype=nn.DTYPE)
    g_f = np.asarray(g_f, dtype=nn.DTYPE)
    if g_r.shape != g_f.shape:
        raise nn.DimensionError(f"gradient shapes differ: {g_r.shape} vs {g_f.shape}")
    dot = float(np.dot(g_f, g_r))
    if dot >= 0.0:
        return g_r
    return g_r - (dot / float(np.dot(g_f, g_f))) * g_f


@dataclass(frozen=True)
class UnlearnConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    c: float = 1.0
    alpha: float = 1e-3
    mode: str = "coordinated"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ValueError("lr must be finite and >= 0")
        if not np.isfinite(self.c) or self.c <= 0:
            raise ValueError("anchor scale c must be positive")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError("retention weight alpha must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def coordinated_update(g_f: np.ndarray, g_r: np.ndarray, cfg: UnlearnConfig,
                       rng: np.random.Generator | None = None
                       ) -> tuple[np.ndarray, dict]:
    """Combine forgetting and retention gradients into one update direction.

    coordinated: g_f + alpha * (conflict-gated orthogonalized g_r)
    no_gcm:      g_f + alpha * g_r (no conflict handling)
    rand_proj:   g_f + alpha * r with r a fresh random vector scaled to the
                 norm the orthogonalized retention gradient would have had
    """
    g_f = np.asarray(g_f, dtype=nn.DTYPE)
    g_r = np.asarray(g_r, dtype=nn.DTYPE)
    if g_f.shape != g_r.shape:
        raise nn.DimensionError(f"gradient shapes differ: {g_f.shape} vs {g_r.shape}")
    cos = cosine(g_f, g_r)
    tilde = project_retention(g_r, g_f)
    projected = tilde is not g_r
    info = {"cosine": cos, "projected": projected,
            "g_f_norm": float(np.linalg.norm(g_f)),
            "g_r_norm": float(np.linalg.norm(g_r))}
    if cfg.mode == "coordinated":
        return g_f + cfg.alpha * tilde, info
    if cfg.mode == "no_gcm":
        return g_f + cfg.alpha * g_r, info
    if rng is None:
        raise ValueError("rand_proj needs a random stream")
    r = rng.standard_normal(g_f.shape[0])
    rn = np.linalg.norm(r)
    if rn > 0:
        r *= np.linalg.norm(tilde) / rn
    return g_f + cfg.alpha * r, info


@dataclass(frozen=True)
class UnlearnRoundRecord:
    """One coordinated round, as written to the trace stream."""

    round_no: int
    epoch: int
    loss_forget: float
    loss_retain: float
    cosine: float
    projected: bool
    g_f_norm: float
    g_r_norm: float

    def to_json_dict(self) -> dict:
        return {"round": self.round_no, "epoch": self.epoch,
                "loss_forget": self.loss_forget, "loss_retain": self.loss_retain,
                "cosine": self.cosine, "projected": self.projected,
                "g_f_norm": self.g_f_norm, "g_r_norm": self.g_r_norm}


def unlearn(model: VflModel, data: PartitionedDataset, forget_party: int,
            cfg: UnlearnConfig) -> tuple[VflModel, list[UnlearnRoundRecord], Anchor]:
    """Run coordinated unlearning rounds against a pretrained model.

    Returns (new model, per-round trace, the anchor used). The input model
    is never mutated. The anchor is drawn once from the run's named stream
    and stays fixed across all rounds.
    """
    topo = model.topology
    if forget_party == topo.active_index and not topo.active_holds_features:
        raise UnsupportedOperationError(
            "cannot unlearn the active party: it holds only labels")
    if forget_party not in model.bottoms:
        raise ValueError(f"party {forget_party} has no encoder in this model")

    work = model.clone()
    sim = SplitVfl(work, data)
    if forget_party not in sim.passive_parties:
        raise UnsupportedOperationError(
            "unlearning the active party's own features is not supported")
    party_f = sim.passive_parties[forget_party]
    lo, hi = work.component_bounds()[f"bottom:{forget_party}"]
    anchor = draw_anchor(work.hidden_dims[forget_party], cfg.c,
                         stream(cfg.seed, "anchor"))
    shuffle_rng = stream(cfg.seed, "unlearn-shuffle")
    rand_rng = stream(cfg.seed, "rand-proj")
    n = data.num_samples
    total = work.param_count()
    trace: list[UnlearnRoundRecord] = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits = sim.forward_round(idx)
            loss_f, d_h = forgetting_loss(sim.last_reprs[forget_party], anchor)
            g_f = np.zeros(total, dtype=nn.DTYPE)
            g_f[lo:hi] = party_f.local_backward(d_h)
            loss_r, dlogits = sim.loss_grad(logits)
            if not (np.isfinite(loss_f) and np.isfinite(loss_r)):
                raise NumericError("unlearning loss diverged", sim.round_no)
            g_r = sim.backward_round(dlogits)
            delta, info = coordinated_update(g_f, g_r, cfg, rand_rng)
            sim.apply_update(delta, cfg.lr)
            trace.append(UnlearnRoundRecord(
                round_no=sim.round_no, epoch=epoch, loss_forget=loss_f,
                loss_retain=loss_r, cosine=info["cosine"],
                projected=info["projected"], g_f_norm=info["g_f_norm"],
                g_r_norm=info["g_r_norm"]))
    return work, trace, anchor
