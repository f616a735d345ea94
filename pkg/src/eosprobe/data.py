"""Labeled datasets: synthetic Gaussian mixtures, CIFAR-10 binary batches, subsets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_IMAGE_SHAPE = (3, 32, 32)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_c: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.shape[0] != labels.shape[0] or labels.ndim != 1:
            raise DatasetError("inputs and labels disagree on n_D")
        if labels.size < 1:
            raise DatasetError("dataset must contain at least one example")
        if labels.min() < 0 or labels.max() >= self.n_c:
            raise DatasetError(f"labels must lie in [0, {self.n_c})")
        if not np.all(np.isfinite(inputs)):
            raise DatasetError("inputs must be finite")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n_D(self) -> int:
        return int(self.labels.size)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_c)


def synth_dataset(
    n_D: int, n_c: int, dim: int, separation: float, seed: int = 0, offset: float = 0.0
) -> LabeledDataset:
    """Balanced Gaussian mixture with unit covariance.

    Class means sit on a regular simplex so every pair is exactly
    ``separation`` apart; this needs ``dim >= n_c``. The simplex is centred,
    then shifted by ``offset`` along the unit vector orthogonal to it inside
    the first ``n_c`` coordinates (a component shared by every example, much
    like the mean brightness shared by natural images). Example ``j`` has
    label ``j mod n_c``, so any remainder goes to the low class indices.
    """
    if n_c < 1 or n_D < n_c:
        raise DatasetError("need n_D >= n_c >= 1")
    if dim < n_c:
        raise DatasetError(f"dim={dim} cannot hold {n_c} equidistant means")
    rng = np.random.default_rng(seed)
    corners = np.eye(n_c, dim)
    means = separation / np.sqrt(2.0) * (corners - corners.mean(axis=0))
    means += offset * corners.sum(axis=0) / np.sqrt(n_c)
    labels = np.arange(n_D) % n_c
    inputs = means[labels] + rng.standard_normal((n_D, dim))
    prov = {"source": "synthetic", "n_D": n_D, "n_c": n_c, "dim": dim,
            "separation": separation, "seed": seed, "offset": offset}
    return LabeledDataset(inputs, labels, n_c, prov)


def load_cifar10_binary(
    paths: str | Path | Sequence[str | Path], standardize: bool = False
) -> LabeledDataset:
    """Read CIFAR-10 binary batch files.

    Each 3073-byte record is one label byte followed by the red, green and blue
    32x32 planes in row-major order. Pixels are scaled to [0, 1]; with
    ``standardize`` each channel is additionally mean-centred and scaled to
    unit variance over the loaded set.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    labels, pixels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
            raise DatasetError(
                f"{path}: length {raw.size} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        bad = np.flatnonzero(records[:, 0] > 9)
        if bad.size:
            rec = int(bad[0])
            raise DatasetError(
                f"{path}: record {rec} at byte offset {rec * CIFAR_RECORD_BYTES} "
                f"has label byte {records[rec, 0]}"
            )
        labels.append(records[:, 0].astype(np.int64))
        pixels.append(records[:, 1:])
    x = np.concatenate(pixels).astype(np.float64) / 255.0
    if standardize:
        x = x.reshape(-1, 3, 1024)
        mean = x.mean(axis=(0, 2), keepdims=True)
        std = x.std(axis=(0, 2), keepdims=True)
        x = ((x - mean) / np.where(std > 0, std, 1.0)).reshape(-1, 3072)
    prov = {"source": "cifar10", "files": [str(p) for p in paths], "standardize": standardize}
    return LabeledDataset(x, np.concatenate(labels), 10, prov)


def subset_classes(data: LabeledDataset, keep: Sequence[int]) -> LabeledDataset:
    """Keep only classes in ``keep``; labels become their position in ``keep``."""
    keep = [int(c) for c in keep]
    if not keep:
        raise DatasetError("keep must be nonempty")
    if len(set(keep)) != len(keep):
        raise DatasetError("keep contains duplicates")
    unknown = [c for c in keep if not 0 <= c < data.n_c]
    if unknown:
        raise DatasetError(f"unknown class ids {unknown}")
    remap = np.full(data.n_c, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = remap[data.labels] >= 0
    if not mask.any():
        raise DatasetError("no examples belong to the kept classes")
    prov = dict(data.provenance, classes=keep)
    return LabeledDataset(data.inputs[mask], remap[data.labels[mask]], len(keep), prov)


def subset_size(data: LabeledDataset, n_D: int, seed: int = 0) -> LabeledDataset:
    """Class-stratified sample of ``n_D`` examples without replacement.

    Per-class quotas are proportional to class frequency, with leftover slots
    assigned by largest remainder (ties to lower class index). The sample keeps
    the original example order.
    """
    if not 1 <= n_D <= data.n_D:
        raise DatasetError(f"cannot draw {n_D} examples from {data.n_D}")
    counts = data.class_counts()
    exact = counts * n_D / data.n_D
    quota = np.floor(exact).astype(np.int64)
    short = n_D - int(quota.sum())
    order = np.lexsort((np.arange(data.n_c), -(exact - quota)))
    quota[order[:short]] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(data.n_c):
        members = np.flatnonzero(data.labels == c)
        if quota[c]:
            chosen.append(rng.choice(members, size=quota[c], replace=False))
    idx = np.sort(np.concatenate(chosen))
    prov = dict(data.provenance, subset_n_D=n_D, subset_seed=seed)
    return LabeledDataset(data.inputs[idx], data.labels[idx], data.n_c, prov)
