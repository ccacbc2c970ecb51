"""Frozen Gaussian kernel density estimate over the training inputs.

Plays the role of a pretrained, fixed density model p(x): it supplies
log p(x), its closed-form input gradient, and quantile thresholds in
log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_CHUNK = 1024


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class DensityModel:
    points: np.ndarray
    bandwidth: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if not self.bandwidth > 0:
            raise FitError("bandwidth must be positive")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def _exponents(self, x: np.ndarray) -> np.ndarray:
        diff = x[:, None, :] - self.points[None, :, :]
        return -np.einsum("mnd,mnd->mn", diff, diff) / (2.0 * self.bandwidth**2)

    def _log_norm(self) -> float:
        n = self.points.shape[0]
        return math.log(n) + 0.5 * self.dim * math.log(2.0 * math.pi * self.bandwidth**2)

    def log_density(self, x) -> np.ndarray:
        """log p at each row of ``x`` (shape (M, d)); a 1-D point gives a float."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], _CHUNK):
            e = self._exponents(x[s : s + _CHUNK])
            m = e.max(1, keepdims=True)
            out[s : s + _CHUNK] = (m + np.log(np.exp(e - m).sum(1, keepdims=True)))[:, 0]
        out -= self._log_norm()
        return float(out[0]) if single else out

    def log_density_and_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        vals = np.empty(x.shape[0])
        grads = np.empty_like(x)
        for s in range(0, x.shape[0], _CHUNK):
            xc = x[s : s + _CHUNK]
            e = self._exponents(xc)
            m = e.max(1, keepdims=True)
            w = np.exp(e - m)
            tot = w.sum(1, keepdims=True)
            vals[s : s + _CHUNK] = (m + np.log(tot))[:, 0]
            w /= tot
            grads[s : s + _CHUNK] = (w @ self.points - xc) / self.bandwidth**2
        return vals - self._log_norm(), grads

    def log_density_grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = self.log_density_and_grad(x)[1]
        return g[0] if x.ndim == 1 else g


def scott_bandwidth(points: np.ndarray) -> float:
    """Scott's rule for an isotropic kernel: N^(-1/(d+4)) times the pooled std."""
    n, d = points.shape
    sigma = math.sqrt(float(np.mean(np.var(points, axis=0, ddof=1))))
    return n ** (-1.0 / (d + 4)) * sigma


def fit_kde(points, bandwidth: float | str = "scott", min_points: int = 2) -> DensityModel:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] < min_points:
        raise FitError(f"need at least {min_points} points, got {points.shape[0]}")
    if bandwidth == "scott":
        if points.shape[0] < 2 or np.all(np.var(points, axis=0) == 0):
            raise FitError("degenerate data: zero variance")
        h = scott_bandwidth(points)
    else:
        h = float(bandwidth)
    return DensityModel(points, h)


def log_density(model: DensityModel, x):
    return model.log_density(x)


def log_density_grad(model: DensityModel, x):
    return model.log_density_grad(x)


def nearest_rank(values, q: float) -> float:
    """Nearest-rank q-th percentile: sorted ascending, index ceil(q N / 100) - 1."""
    if not 0 < q <= 100:
        raise ValueError("q must lie in (0, 100]")
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("no values")
    idx = max(math.ceil(q * v.size / 100.0) - 1, 0)
    return float(v[idx])


def quantile_threshold(model: DensityModel, points, q_centile: float = 10.0) -> float:
    """Log-space threshold eps at the q-th centile of log p over ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0:
        raise ValueError("no points")
    return nearest_rank(model.log_density(points), q_centile)


def save(model: DensityModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"bandwidth {model.bandwidth!r}\n")
        for p in model.points:
            fh.write(",".join(repr(float(c)) for c in p) + "\n")


def load(path: str | Path) -> DensityModel:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != "bandwidth":
            raise FitError(f"{path}: not a density file")
        pts = [[float(c) for c in line.split(",")] for line in fh if line.strip()]
    return DensityModel(np.array(pts), float(head[1]))
