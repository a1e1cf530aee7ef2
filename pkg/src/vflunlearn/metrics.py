"""Evaluation: task accuracy, backdoor success, membership-inference
resistance, predictive KL divergence, and phase timing.

The membership attack follows the logit-exposure recipe: for each sample,
features are built from the evaluated model's output logits both with and
without the forgetting party's contribution, and a small regularized
logistic-regression attacker is trained to tell members (training rows)
from non-members (held-out rows). Everything here is deterministic given
the seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import PartitionedDataset
from .protocol import VflModel, predict_logits, predict_probs
from .seeds import stream


class EvaluationError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    """One evaluated model variant. Percentages in [0, 100]."""

    variant: str
    clean_acc: float
    backdoor_success: float
    mia_auc: float | None = None
    mia_acc: float | None = None
    kl_to_gold: float | None = None
    wall_clock_s: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"variant": self.variant, "clean_acc": self.clean_acc,
                "backdoor_success": self.backdoor_success, "mia_auc": self.mia_auc,
                "mia_acc": self.mia_acc, "kl_to_gold": self.kl_to_gold,
                "wall_clock_s": self.wall_clock_s}


def clean_accuracy(model: VflModel, test: PartitionedDataset, indices=None) -> float:
    """Top-1 accuracy in percent on an unpoisoned test set."""
    if test.poison_mask.any():
        raise ValueError("clean accuracy needs an unpoisoned test set")
    idx = np.arange(test.num_samples) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ValueError("empty evaluation set")
    preds = predict_logits(model, test, idx).argmax(axis=1)
    return float((preds == test.labels[idx]).mean() * 100.0)


def backdoor_success(model: VflModel, triggered: PartitionedDataset,
                     target_label: int) -> float:
    """Share of triggered samples classified as the attack target, in percent.

    Samples whose true label already equals the target are excluded; they
    would count as hits even for a clean model.
    """
    keep = np.flatnonzero(triggered.labels != target_label)
    if keep.size == 0:
        raise ValueError("no triggered samples with a non-target true label")
    preds = predict_logits(model, triggered, keep).argmax(axis=1)
    return float((preds == target_label).mean() * 100.0)


def kl_predictive(p: np.ndarray, q: np.ndarray) -> float:
    """Mean KL(p row || q row). Rows are clamped away from zero and
    renormalized, so the value is finite and never negative."""
    p = np.asarray(p, dtype=nn.DTYPE)
    q = np.asarray(q, dtype=nn.DTYPE)
    if p.shape != q.shape or p.ndim != 2:
        raise nn.DimensionError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if p.shape[0] == 0:
        raise ValueError("empty distribution batch")
    p = np.clip(p, nn.TOL.prob_clamp, None)
    q = np.clip(q, nn.TOL.prob_clamp, None)
    p /= p.sum(axis=1, keepdims=True)
    q /= q.sum(axis=1, keepdims=True)
    return max(0.0, float((p * np.log(p / q)).sum(axis=1).mean()))


def without_party(model: VflModel, party: int) -> VflModel:
    """The model as seen with one party silenced: that party's encoder is
    zeroed, so its representation is a constant zero vector. A model that
    never contained the party is returned as a plain clone."""
    view = model.clone()
    if party in view.bottoms:
        net = view.bottoms[party]
        net.set_flat_params(np.zeros(net.param_count()))
    return view


def mia_features(logits: np.ndarray) -> np.ndarray:
    """Per-sample exposure features: logits sorted descending, the max
    logit, and the softmax entropy."""
    z = np.asarray(logits, dtype=nn.DTYPE)
    if z.ndim != 2:
        raise nn.DimensionError(f"expected a 2-D logit batch, got {z.shape}")
    srt = -np.sort(-z, axis=1)
    p = nn.softmax(z)
    ent = -(p * np.log(np.clip(p, nn.TOL.prob_clamp, None))).sum(axis=1, keepdims=True)
    return np.hstack([srt, srt[:, :1], ent])


@dataclass
class MiaDataset:
    features: np.ndarray
    membership: np.ndarray  # 1 = member (training row), 0 = non-member

    def __post_init__(self):
        if self.features.shape[0] != self.membership.shape[0]:
            raise ValueError("feature/label counts differ")


class LogisticAttacker:
    """L2-regularized logistic regression fit by full-batch gradient descent.

    Deterministic: zero init, standardized features, fixed iteration count.
    """

    def __init__(self, l2: float = 1e-3, lr: float = 0.5, iters: int = 400):
        self.l2 = l2
        self.lr = lr
        self.iters = iters
        self.w = None
        self.mean = None
        self.std = None

    def _prep(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return np.hstack([z, np.ones((z.shape[0], 1))])

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LogisticAttacker":
        x = np.asarray(x, dtype=nn.DTYPE)
        y = np.asarray(y, dtype=nn.DTYPE)
        if not np.isfinite(x).all():
            raise EvaluationError("non-finite attack features")
        if len(np.unique(y)) < 2 or min((y == 0).sum(), (y == 1).sum()) < 2:
            raise EvaluationError("attacker needs at least two samples per class")
        self.mean = x.mean(axis=0)
        self.std = np.maximum(x.std(axis=0), 1e-9)
        z = self._prep(x)
        self.w = np.zeros(z.shape[1])
        n = z.shape[0]
        for _ in range(self.iters):
            p = 1.0 / (1.0 + np.exp(-(z @ self.w)))
            grad = z.T @ (p - y) / n + self.l2 * self.w
            self.w -= self.lr * grad
        return self

    def scores(self, x: np.ndarray) -> np.ndarray:
        if self.w is None:
            raise EvaluationError("attacker not fitted")
        return 1.0 / (1.0 + np.exp(-(self._prep(np.asarray(x, dtype=nn.DTYPE)) @ self.w)))


def train_binary_classifier(ds: MiaDataset, seed: int) -> LogisticAttacker:
    """Fit the attack model. The fit itself is deterministic regardless of
    the seed; the argument pins the API so a stochastic attacker could be
    slotted in without changing callers."""
    del seed
    return LogisticAttacker().fit(ds.features, ds.membership)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC (Mann-Whitney with midranks for ties)."""
    scores = np.asarray(scores, dtype=nn.DTYPE)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs both members and non-members")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=nn.DTYPE)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def attack_accuracy(scores: np.ndarray, labels: np.ndarray,
                    threshold: float = 0.5) -> float:
    preds = (np.asarray(scores) >= threshold).astype(int)
    return float((preds == np.asarray(labels)).mean() * 100.0)


def mia_attack(model_before: VflModel, model_after: VflModel,
               member_set: PartitionedDataset, nonmember_set: PartitionedDataset,
               seed: int) -> tuple[float, float]:
    """Membership inference against a model pair.

    Each sample's features concatenate mia_features of both models' logits;
    the attacker trains on a balanced 70/30 split and is scored on the held
    30%. Returns (AUC, accuracy percent) on the evaluation fold.
    """
    n = min(member_set.num_samples, nonmember_set.num_samples)
    if n < 8:
        raise EvaluationError(f"too few samples for a membership attack: {n}")
    feats = []
    labels = []
    for ds, flag in ((member_set, 1), (nonmember_set, 0)):
        idx = np.arange(n)
        block = np.hstack([mia_features(predict_logits(model_before, ds, idx)),
                           mia_features(predict_logits(model_after, ds, idx))])
        feats.append(block)
        labels.append(np.full(n, flag))
    x = np.vstack(feats)
    y = np.concatenate(labels)
    rng = stream(seed, "mia-split")
    train_idx, eval_idx = [], []
    for flag in (1, 0):
        rows = np.flatnonzero(y == flag)
        rows = rows[rng.permutation(rows.size)]
        cut = int(round(0.7 * rows.size))
        train_idx.append(rows[:cut])
        eval_idx.append(rows[cut:])
    train_idx = np.concatenate(train_idx)
    eval_idx = np.concatenate(eval_idx)
    if len(np.unique(y[eval_idx])) < 2:
        raise EvaluationError("degenerate evaluation fold: one class only")
    attacker = train_binary_classifier(MiaDataset(x[train_idx], y[train_idx]), seed)
    scores = attacker.scores(x[eval_idx])
    return roc_auc(scores, y[eval_idx]), attack_accuracy(scores, y[eval_idx])


def time_phase(label: str, thunk):
    """Run thunk(), returning (result, wall seconds) on a monotonic clock."""
    start = time.perf_counter()
    result = thunk()
    elapsed = time.perf_counter() - start
    return result, elapsed


def predictive_kl_between(model_p: VflModel, model_q: VflModel,
                          test: PartitionedDataset, indices=None) -> float:
    """KL(model_p's predictive distribution || model_q's) on the same rows."""
    idx = np.arange(test.num_samples) if indices is None else np.asarray(indices)
    return kl_predictive(predict_probs(model_p, test, idx),
                         predict_probs(model_q, test, idx))
