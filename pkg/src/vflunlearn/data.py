"""Datasets: IDX loading, synthetic image generation, vertical partitioning,
and backdoor trigger injection.

All arrays handed out are marked read-only; anything that edits samples
(trigger stamping, label flips) copies first and returns a new dataset.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """Malformed IDX payload; carries the byte offset of the problem."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass
class RawDataset:
    """Unsplit image set: float64 pixels in [0, 1], integer labels."""

    images: np.ndarray  # (N, H, W) grayscale
    labels: np.ndarray  # (N,)
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"expected (N, H, W) images, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels do not match image count")
        if self.images.shape[0] and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        self.images = _freeze(np.ascontiguousarray(self.images, dtype=np.float64))
        self.labels = _freeze(np.ascontiguousarray(self.labels, dtype=np.int64))

    @property
    def num_samples(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "RawDataset":
        idx = np.asarray(indices)
        return RawDataset(self.images[idx], self.labels[idx], self.num_classes)


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise FormatError("truncated header", offset=len(raw))
    magic = int.from_bytes(raw[0:4], "big")
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated dimension header", offset=len(raw))
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = header_end + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"truncated payload, expected {expected} bytes got {len(raw)}",
                          offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)),
                         offset=header_end).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path) -> RawDataset:
    """Load an IDX image/label file pair (plain or gzipped)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}", offset=4)
    return RawDataset(images.astype(np.float64) / 255.0,
                      labels.astype(np.int64),
                      num_classes=int(labels.max()) + 1 if labels.size else 0)


def synth_dataset(seed: int, n: int, height: int, width: int, num_classes: int,
                  noise: float = 0.12, blobs_per_class: int = 3) -> RawDataset:
    """Class-conditional blob images.

    Each class gets one Gaussian bump per vertical band of the image, pinned
    to a class-specific row so classes never collide; every contiguous column
    slice therefore carries class signal and a linear model separates the
    classes from any single slice.
    """
    if n < 1 or num_classes < 1 or height < 1 or width < 1:
        raise ValueError("n, height, width, num_classes must be positive")
    bands = min(blobs_per_class, width)
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    templates = np.zeros((num_classes, height, width))
    edges = np.linspace(0, width, bands + 1)
    sigma = max(1.0, min(height, width) / 8.0)
    for c in range(num_classes):
        cy = (c + 0.5) / num_classes * (height - 1)
        for b in range(bands):
            cx = rng.uniform(edges[b] + 0.1 * (edges[b + 1] - edges[b]),
                             edges[b + 1] - 0.1 * (edges[b + 1] - edges[b]) - 1e-9)
            templates[c] += 0.85 * np.exp(
                -((ys - cy - rng.uniform(-0.5, 0.5)) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))
    templates = np.clip(templates, 0.0, 0.9)
    reps = math.ceil(n / num_classes)
    labels = np.tile(np.arange(num_classes), reps)[:n]
    rng.shuffle(labels)
    images = np.clip(templates[labels] + rng.normal(0.0, noise, (n, height, width)), 0.0, 1.0)
    return RawDataset(images, labels.astype(np.int64), num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    """Vertical split of image columns among feature-holding parties.

    Boundaries are column indices: party k (1-based) owns columns
    [boundaries[k-1], boundaries[k]).
    """

    boundaries: tuple[int, ...]
    forgetting_party: int

    def __post_init__(self):
        if len(self.boundaries) < 2:
            raise ValueError("need at least one slice")
        if self.boundaries[0] != 0:
            raise ValueError("boundaries must start at column 0")
        if any(a >= b for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if not (1 <= self.forgetting_party <= self.num_parties):
            raise ValueError(f"forgetting_party {self.forgetting_party} outside "
                             f"1..{self.num_parties}")

    @property
    def num_parties(self) -> int:
        return len(self.boundaries) - 1

    @property
    def total_width(self) -> int:
        return self.boundaries[-1]

    def width(self, party: int) -> int:
        return self.boundaries[party] - self.boundaries[party - 1]

    @classmethod
    def equal(cls, width: int, num_parties: int, forgetting_party: int) -> "PartitionSpec":
        """Near-equal contiguous slices; the remainder goes to the leftmost parties."""
        if num_parties < 1 or width < num_parties:
            raise ValueError(f"cannot split width {width} into {num_parties} slices")
        base, extra = divmod(width, num_parties)
        widths = [base + (1 if k < extra else 0) for k in range(num_parties)]
        bounds = [0]
        for w in widths:
            bounds.append(bounds[-1] + w)
        return cls(tuple(bounds), forgetting_party)


@dataclass
class PartitionedDataset:
    """Feature slices keyed by party, plus the labels the active party holds."""

    slices: dict[int, np.ndarray]  # party -> (N, H, w_k)
    labels: np.ndarray
    num_classes: int
    spec: PartitionSpec
    poison_mask: np.ndarray = field(default=None)
    poison_target: int | None = None

    def __post_init__(self):
        n = self.labels.shape[0]
        heights = {s.shape[1] for s in self.slices.values()}
        if len(heights) != 1:
            raise ValueError("slice heights disagree")
        for k, s in self.slices.items():
            if s.shape[0] != n:
                raise ValueError(f"party {k} slice row count {s.shape[0]} != {n}")
            self.slices[k] = _freeze(np.ascontiguousarray(s, dtype=np.float64))
        self.labels = _freeze(np.ascontiguousarray(self.labels, dtype=np.int64))
        if self.poison_mask is None:
            self.poison_mask = np.zeros(n, dtype=bool)
        self.poison_mask = _freeze(np.ascontiguousarray(self.poison_mask, dtype=bool))

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def height(self) -> int:
        return next(iter(self.slices.values())).shape[1]

    @property
    def parties(self) -> tuple[int, ...]:
        return tuple(sorted(self.slices))

    def width(self, party: int) -> int:
        return self.slices[party].shape[2]

    def features_flat(self, party: int) -> np.ndarray:
        """Party slice flattened channel-major to (N, H * w_k)."""
        s = self.slices[party]
        return s.reshape(s.shape[0], -1)

    def subset(self, indices) -> "PartitionedDataset":
        idx = np.asarray(indices)
        return PartitionedDataset({k: s[idx] for k, s in self.slices.items()},
                                  self.labels[idx], self.num_classes, self.spec,
                                  self.poison_mask[idx], self.poison_target)


def partition(raw: RawDataset, spec: PartitionSpec) -> PartitionedDataset:
    """Cut the image columns into contiguous per-party slices."""
    if spec.total_width != raw.images.shape[2]:
        raise ValueError(f"partition covers {spec.total_width} columns, "
                         f"images have {raw.images.shape[2]}")
    slices = {k: raw.images[:, :, spec.boundaries[k - 1]:spec.boundaries[k]].copy()
              for k in range(1, spec.num_parties + 1)}
    return PartitionedDataset(slices, raw.labels.copy(), raw.num_classes, spec)


def reassemble(data: PartitionedDataset) -> np.ndarray:
    """Concatenate the slices back into full images (order fixed by party index)."""
    return np.concatenate([data.slices[k] for k in data.parties], axis=2)


@dataclass(frozen=True)
class TriggerSpec:
    """Pixel-block trigger stamped into the forgetting party's slice."""

    height: int = 2
    width: int = 2
    fill: float = 1.0
    target_label: int = 0
    poison_rate: float = 0.1
    position: str = "lower_right"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("trigger must be at least 1x1")
        if not 0.0 <= self.fill <= 1.0:
            raise ValueError("trigger fill must lie in [0, 1]")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in [0, 1]")
        if self.position not in ("lower_right", "lower_left", "upper_right", "upper_left"):
            raise ValueError(f"unknown trigger position {self.position!r}")


def _trigger_window(trig: TriggerSpec, height: int, width: int) -> tuple[slice, slice]:
    if trig.height > height or trig.width > width:
        raise ValueError(f"trigger {trig.height}x{trig.width} does not fit in a "
                         f"{height}x{width} slice")
    rows = slice(0, trig.height) if trig.position.startswith("upper") else \
        slice(height - trig.height, height)
    cols = slice(0, trig.width) if trig.position.endswith("left") else \
        slice(width - trig.width, width)
    return rows, cols


def _stamp(data: PartitionedDataset, indices: np.ndarray, trig: TriggerSpec,
           flip_labels: bool) -> PartitionedDataset:
    f = data.spec.forgetting_party
    rows, cols = _trigger_window(trig, data.height, data.width(f))
    slices = dict(data.slices)
    stamped = data.slices[f].copy()
    stamped[np.ix_(indices, np.arange(rows.start, rows.stop),
                   np.arange(cols.start, cols.stop))] = trig.fill
    slices[f] = stamped
    labels = data.labels.copy()
    if flip_labels:
        labels[indices] = trig.target_label
    mask = data.poison_mask.copy()
    mask[indices] = True
    return PartitionedDataset(slices, labels, data.num_classes, data.spec,
                              mask, trig.target_label)


def inject_backdoor(data: PartitionedDataset, trig: TriggerSpec, seed: int) -> PartitionedDataset:
    """Stamp the trigger on round(rate * N) samples chosen without replacement
    and flip their labels to the target. Returns a new dataset."""
    if trig.target_label >= data.num_classes:
        raise ValueError("target label outside the label set")
    n_poison = int(round(trig.poison_rate * data.num_samples))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(data.num_samples, size=n_poison, replace=False)
    return _stamp(data, np.sort(chosen), trig, flip_labels=True)


def make_backdoor_testset(data: PartitionedDataset, trig: TriggerSpec) -> PartitionedDataset:
    """Stamp the trigger on every sample but keep the true labels."""
    if trig.target_label >= data.num_classes:
        raise ValueError("target label outside the label set")
    return _stamp(data, np.arange(data.num_samples), trig, flip_labels=False)
