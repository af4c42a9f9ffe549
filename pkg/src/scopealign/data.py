"""Synthetic blob datasets, training-condition perturbations and CSV I/O."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .engine import philox


@dataclass
class Dataset:
    features: np.ndarray  # [N, d]
    labels: np.ndarray  # [N] int
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be [N, d] with one label per row")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def make_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int = 0,
    test_per_class: Optional[int] = None,
    modes_per_class: int = 1,
    radius: float = 1.0,
) -> Tuple[Dataset, Dataset]:
    """Gaussian class clouds around centres drawn on a sphere of ``radius``.

    ``modes_per_class > 1`` gives every class several centres, which makes
    the task non-linear. Train and test are independent draws.
    """
    if min(num_classes, dim, per_class, modes_per_class) < 1 or spread < 0:
        raise ValueError("counts must be positive and spread non-negative")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = philox(seed, 0xB10B)
    centres = rng.normal(size=(num_classes * modes_per_class, dim))
    centres *= radius / np.linalg.norm(centres, axis=1, keepdims=True)
    centres = centres.reshape(num_classes, modes_per_class, dim)

    def draw(count: int, stream: int, split: str) -> Dataset:
        r = philox(seed, 0xB10B, stream)
        xs, ys = [], []
        for c in range(num_classes):
            mode = r.integers(0, modes_per_class, size=count)
            xs.append(centres[c, mode] + spread * r.normal(size=(count, dim)))
            ys.append(np.full(count, c))
        return Dataset(np.concatenate(xs), np.concatenate(ys), num_classes, split)

    return draw(per_class, 1, "train"), draw(test_per_class, 2, "test")


@dataclass(frozen=True)
class ImbalanceSpec:
    """Split the data in two: ``part=0`` keeps ``fraction`` of each class in
    ``major_classes`` and ``1-fraction`` of the rest; ``part=1`` is the
    complement."""

    major_classes: Tuple[int, ...]
    fraction: float = 0.9
    part: int = 0


def perturb(dataset: Dataset, kind: str, param, seed: int = 0) -> Dataset:
    """Apply one training-condition change to a train split.

    kinds: ``label_noise`` (p), ``feature_noise`` (eps, multiplicative
    N(1, eps^2)), ``subsample`` (q), ``imbalance`` (ImbalanceSpec).
    """
    if dataset.split != "train":
        raise ValueError("perturbations apply to the train split only")
    rng = philox(seed, 0x9E47)
    if kind == "label_noise":
        p = float(param)
        if not 0.0 <= p <= 1.0:
            raise ValueError("label_noise p must lie in [0, 1]")
        flip = rng.random(len(dataset)) < p
        random_labels = rng.integers(0, dataset.num_classes, size=len(dataset))
        return replace(dataset, labels=np.where(flip, random_labels, dataset.labels))
    if kind == "feature_noise":
        eps = float(param)
        if eps < 0:
            raise ValueError("feature_noise eps must be non-negative")
        if eps == 0:
            return replace(dataset, features=dataset.features.copy())
        factors = rng.normal(1.0, eps, size=dataset.features.shape)
        return replace(dataset, features=dataset.features * factors)
    if kind == "subsample":
        q = float(param)
        if not 0.0 < q <= 1.0:
            raise ValueError("subsample q must lie in (0, 1]")
        keep = max(1, int(round(q * len(dataset))))
        idx = np.sort(rng.permutation(len(dataset))[:keep])
        return dataset.subset(idx)
    if kind == "imbalance":
        spec = param if isinstance(param, ImbalanceSpec) else ImbalanceSpec(**param)
        if spec.part not in (0, 1) or not 0.0 < spec.fraction < 1.0:
            raise ValueError("imbalance needs part in {0, 1} and fraction in (0, 1)")
        if any(not 0 <= c < dataset.num_classes for c in spec.major_classes):
            raise ValueError("imbalance major_classes outside the label range")
        first = np.zeros(len(dataset), dtype=bool)
        for c in range(dataset.num_classes):
            members = np.flatnonzero(dataset.labels == c)
            frac = spec.fraction if c in spec.major_classes else 1.0 - spec.fraction
            take = int(round(frac * members.size))
            first[rng.permutation(members)[:take]] = True
        mask = first if spec.part == 0 else ~first
        return dataset.subset(np.flatnonzero(mask))
    raise ValueError(f"unknown perturbation {kind!r}")


def to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"f{i}" for i in range(dataset.dim)])
    for y, row in zip(dataset.labels, dataset.features):
        w.writerow([int(y)] + [format(float(v), ".17g") for v in row])
    return buf.getvalue()


def from_csv(text: str, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "label":
        raise ValueError("dataset CSV must start with a 'label,f0,f1,...' header")
    body = [r for r in rows[1:] if r]
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 1)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(feats, labels, k, split)


def save_csv(dataset: Dataset, path) -> None:
    Path(path).write_text(to_csv(dataset))


def load_csv(path, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    return from_csv(Path(path).read_text(), num_classes, split)
