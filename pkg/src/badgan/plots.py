"""Static SVG exports of data, decision regions, true-fake maps and samples."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from badgan.datasets import Dataset  # noqa: E402
from badgan.trainer import BoundaryGrid  # noqa: E402

# fixed ids and no timestamp so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "badgan"
_META = {"Date": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def _scatter_data(ax, ds: Dataset) -> None:
    ax.scatter(ds.unlabeled_x[:, 0], ds.unlabeled_x[:, 1], s=3, c="0.3", marker=".")
    ax.scatter(
        ds.labeled_x[:, 0], ds.labeled_x[:, 1], s=40, c=ds.labeled_y, cmap="tab10",
        vmin=0, vmax=9, marker="x",
    )


def _grid_axes(grid: BoundaryGrid):
    r = grid.resolution
    gx = grid.points[:, 0].reshape(r, r)
    gy = grid.points[:, 1].reshape(r, r)
    return gx, gy


def plot_data(ds: Dataset, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(
        ds.unlabeled_x[:, 0], ds.unlabeled_x[:, 1], s=3, marker=".",
        c=_nearest_labels(ds), cmap="tab10", vmin=0, vmax=9,
    )
    ax.scatter(
        ds.labeled_x[:, 0], ds.labeled_x[:, 1], s=40, c=ds.labeled_y, cmap="tab10",
        vmin=0, vmax=9, marker="x",
    )
    ax.set_title("labeled (x) and unlabeled (.) data")
    ax.set_aspect("equal")
    return _save(fig, path)


def _nearest_labels(ds: Dataset) -> np.ndarray:
    # unlabeled points carry no label; colour them by the nearest test point
    ref = np.concatenate([ds.labeled_x, ds.test_x])
    lab = np.concatenate([ds.labeled_y, ds.test_y])
    d = ((ds.unlabeled_x[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    return lab[np.argmin(d, axis=1)]


def plot_decision_boundary(grid: BoundaryGrid, ds: Dataset, path: Path) -> Path:
    gx, gy = _grid_axes(grid)
    r = grid.resolution
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.contourf(gx, gy, grid.pred.reshape(r, r), levels=np.arange(ds.num_classes + 1) - 0.5,
                cmap="tab10", vmin=0, vmax=9, alpha=0.4)
    ax.contour(gx, gy, grid.p_fake.reshape(r, r), levels=[0.5], colors="white", linewidths=1.5)
    _scatter_data(ax, ds)
    ax.set_title("class regions; white line = true-fake boundary")
    ax.set_aspect("equal")
    return _save(fig, path)


def plot_true_fake(grid: BoundaryGrid, ds: Dataset, path: Path) -> Path:
    gx, gy = _grid_axes(grid)
    r = grid.resolution
    fig, ax = plt.subplots(figsize=(5.8, 5))
    cs = ax.contourf(gx, gy, grid.p_fake.reshape(r, r), levels=np.linspace(0, 1, 11), cmap="coolwarm")
    fig.colorbar(cs, ax=ax, label="P(fake | x)")
    _scatter_data(ax, ds)
    ax.set_title("true-fake decision")
    ax.set_aspect("equal")
    return _save(fig, path)


def plot_generated(ds: Dataset, generated: np.ndarray, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    _scatter_data(ax, ds)
    ax.scatter(generated[:, 0], generated[:, 1], s=4, c="tab:red", marker=".")
    ax.set_title("generated samples (red) over data")
    ax.set_aspect("equal")
    return _save(fig, path)


def plot_feature_space(
    grid: BoundaryGrid, true_features: np.ndarray, true_labels: np.ndarray,
    gen_features: np.ndarray, path: Path,
) -> Path:
    gx, gy = _grid_axes(grid)
    r = grid.resolution
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.contour(gx, gy, grid.p_fake.reshape(r, r), levels=[0.5], colors="k", linewidths=1.0)
    ax.scatter(true_features[:, 0], true_features[:, 1], s=3, c=true_labels, cmap="tab10", vmin=0, vmax=9)
    ax.scatter(gen_features[:, 0], gen_features[:, 1], s=3, c="tab:red", marker=".")
    ax.set_title("feature space: true (coloured), generated (red)")
    return _save(fig, path)
