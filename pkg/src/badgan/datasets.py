"""2D synthetic datasets (four spins, two circles) and their splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class InputBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if not np.all(np.asarray(self.lo) < np.asarray(self.hi)):
            raise ValueError("box min corner must be below max corner")

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def half_width(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, len(self.lo)))


@dataclass
class Dataset:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    box: InputBox

    def __post_init__(self):
        for y in (self.labeled_y, self.test_y):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError("label outside 0..K-1")
        if set(np.unique(self.labeled_y).tolist()) != set(range(self.num_classes)):
            raise ValueError("every class needs at least one labeled point")

    @property
    def training_inputs(self) -> np.ndarray:
        return np.concatenate([self.unlabeled_x, self.labeled_x])


def _check_args(n_per_class: int, noise_sigma: float) -> None:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")


def four_spins(n_per_class: int = 500, noise_sigma: float = 0.01, seed: int = 0):
    """Four interlocking spiral arms. Returns ``(points, labels)``, class-major order."""
    _check_args(n_per_class, noise_sigma)
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for k in range(4):
        t = rng.uniform(0.05, 1.0, n_per_class)
        angle = 3.0 * math.pi * t + k * math.pi / 2.0
        p = t[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        pts.append(p + noise_sigma * rng.standard_normal((n_per_class, 2)))
        labels.append(np.full(n_per_class, k))
    return np.concatenate(pts), np.concatenate(labels)


def two_circles(
    n_per_class: int = 300,
    radii: tuple[float, float] = (0.5, 1.0),
    noise_sigma: float = 0.025,
    seed: int = 0,
):
    """Two concentric noisy circles. Returns ``(points, labels)``."""
    _check_args(n_per_class, noise_sigma)
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for k, r in enumerate(radii):
        angle = rng.uniform(0.0, 2.0 * math.pi, n_per_class)
        radius = r + noise_sigma * rng.standard_normal(n_per_class)
        pts.append(radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1))
        labels.append(np.full(n_per_class, k))
    return np.concatenate(pts), np.concatenate(labels)


def bounding_box(points: np.ndarray, pad_fraction: float = 0.1) -> InputBox:
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = pad_fraction * (hi - lo)
    return InputBox(lo - pad, hi + pad)


def split(
    points: np.ndarray,
    labels: np.ndarray,
    n_labeled_per_class: int = 5,
    test_fraction: float = 0.25,
    seed: int = 0,
    pad_fraction: float = 0.1,
) -> Dataset:
    """Stratified split into labeled / unlabeled / test sets.

    ``test_fraction`` of each class goes to test; ``n_labeled_per_class``
    of the remainder keep their labels; everything else is unlabeled. The
    box covers all points.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    lab, unl, test = [], [], []
    for k in classes:
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_test = int(round(test_fraction * idx.size))
        if idx.size - n_test < n_labeled_per_class or n_labeled_per_class < 1:
            raise ValueError(f"class {k}: not enough points for {n_labeled_per_class} labels")
        test.append(idx[:n_test])
        lab.append(idx[n_test : n_test + n_labeled_per_class])
        unl.append(idx[n_test + n_labeled_per_class :])
    lab, unl, test = (np.concatenate(a) for a in (lab, unl, test))
    return Dataset(
        labeled_x=points[lab],
        labeled_y=labels[lab],
        unlabeled_x=points[unl],
        test_x=points[test],
        test_y=labels[test],
        num_classes=int(classes.size),
        box=bounding_box(points, pad_fraction),
    )


def make_dataset(
    name: str,
    n_per_class: int | None = None,
    noise_sigma: float | None = None,
    n_labeled_per_class: int = 5,
    test_fraction: float = 0.25,
    seed: int = 0,
) -> Dataset:
    if name in ("spins", "four_spins"):
        pts, y = four_spins(n_per_class or 500, 0.01 if noise_sigma is None else noise_sigma, seed)
    elif name in ("circles", "two_circles"):
        pts, y = two_circles(
            n_per_class or 300, noise_sigma=0.025 if noise_sigma is None else noise_sigma, seed=seed
        )
    else:
        raise ValueError(f"unknown dataset {name!r}")
    return split(pts, y, n_labeled_per_class, test_fraction, seed + 1)


def write_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "role", "label"])
        for x, y in zip(ds.labeled_x, ds.labeled_y):
            w.writerow([repr(float(x[0])), repr(float(x[1])), "labeled", int(y)])
        for x in ds.unlabeled_x:
            w.writerow([repr(float(x[0])), repr(float(x[1])), "unlabeled", -1])
        for x, y in zip(ds.test_x, ds.test_y):
            w.writerow([repr(float(x[0])), repr(float(x[1])), "test", int(y)])


def read_csv(path: str | Path, pad_fraction: float = 0.1) -> Dataset:
    rows = {"labeled": [], "unlabeled": [], "test": []}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows[r["role"]].append((float(r["x1"]), float(r["x2"]), int(r["label"])))

    def xs(role):
        return np.array([r[:2] for r in rows[role]], dtype=np.float64).reshape(-1, 2)

    def ys(role):
        return np.array([r[2] for r in rows[role]], dtype=np.int64)

    lab_y, test_y = ys("labeled"), ys("test")
    everything = np.concatenate([xs("labeled"), xs("unlabeled"), xs("test")])
    return Dataset(
        labeled_x=xs("labeled"),
        labeled_y=lab_y,
        unlabeled_x=xs("unlabeled"),
        test_x=xs("test"),
        test_y=test_y,
        num_classes=int(max(lab_y.max(), test_y.max() if test_y.size else 0)) + 1,
        box=bounding_box(everything, pad_fraction),
    )


def nearest_cross_class_distance(points: np.ndarray, labels: np.ndarray) -> float:
    """Smallest distance between two points of different classes."""
    best = np.inf
    for k in np.unique(labels):
        a, b = points[labels == k], points[labels != k]
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        best = min(best, float(np.sqrt(d2.min())))
    return best
