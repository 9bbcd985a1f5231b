"""
SVG 図と PGM 画像の出力

折れ線・散布図・ヒストグラム・画像グリッドの4種類の図を
matplotlib（Agg バックエンド）で SVG に書き出します。
同じデータからは同じ SVG が得られるよう、ハッシュソルトを固定し
日付メタデータを省いています。
"""

import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from cycle_chaos_lab.config import PIXEL_MAX, PIXEL_MIN, SVG_HASH_SALT  # noqa: E402
from cycle_chaos_lab.data import bytes_from_pixels  # noqa: E402
from cycle_chaos_lab.errors import ShapeError  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_PARAMS = {
    "svg.hashsalt": SVG_HASH_SALT,
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.5),
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Saved figure {path}")
    return path


def line_plot(path, x, series: Mapping[str, Sequence[float]], xlabel: str, ylabel: str,
              title: str = "", errors: Mapping[str, Sequence[float]] | None = None,
              fit: tuple[float, float, tuple[int, int]] | None = None, markers: bool = True) -> Path:
    """
    折れ線グラフ

    Args:
        path: 出力 SVG
        x: 横軸の値
        series: 凡例名 -> 縦軸の値
        errors: 凡例名 -> 標準偏差（エラーバー）
        fit: (傾き, 切片, (start, stop)) を与えると回帰直線を重ねる
    """
    with plt.rc_context(PLOT_PARAMS):
        fig, ax = plt.subplots()
        x = np.asarray(x)
        for label, values in series.items():
            err = None if errors is None else errors.get(label)
            ax.errorbar(x, values, yerr=err, label=label, marker="o" if markers else None,
                        markersize=3, linewidth=1, capsize=2 if err is not None else 0)
        if fit is not None:
            slope, intercept, (start, stop) = fit
            if np.isfinite(slope):
                xs = np.arange(start, stop)
                ax.plot(xs, slope * xs + intercept, color="green", linewidth=1.5,
                        label=f"fit slope={slope:.4f}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def scatter_plot(path, groups: Mapping[str, np.ndarray], xlabel: str = "PC 1", ylabel: str = "PC 2",
                 title: str = "") -> Path:
    """凡例名 -> [M, 2] の点群の散布図"""
    with plt.rc_context(PLOT_PARAMS):
        fig, ax = plt.subplots()
        for label, points in groups.items():
            points = np.asarray(points)
            if points.ndim != 2 or points.shape[1] < 2:
                raise ShapeError(f"Scatter group '{label}' needs [M, 2] points, got {points.shape}")
            ax.scatter(points[:, 0], points[:, 1], s=4, alpha=0.6, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(markerscale=3)
        return _save(fig, path)


def histogram_grid(path, samples: np.ndarray, bins: int, label: str = "lambda") -> Path:
    """列ごとのヒストグラムを横に並べる（[T, m] の m 列）"""
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ShapeError(f"Histogram samples must be 2-D, got {samples.shape}")
    m = samples.shape[1]
    with plt.rc_context(PLOT_PARAMS):
        fig, axes = plt.subplots(1, m, figsize=(2.2 * m, 2.2), squeeze=False)
        for i, ax in enumerate(axes[0]):
            ax.hist(samples[:, i], bins=bins, color="steelblue")
            ax.set_xlabel(f"{label}_{i + 1}")
        axes[0][0].set_ylabel("count")
        return _save(fig, path)


def image_grid(path, rows: Sequence[Sequence[np.ndarray]], column_labels: Sequence[str] | None = None) -> Path:
    """
    画像グリッド。各行が1つの軌道で、左端が初期画像
    """
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows) if rows else 0
    if n_rows == 0 or n_cols == 0:
        raise ValueError("Image grid needs at least one image")
    with plt.rc_context(PLOT_PARAMS):
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(0.8 * n_cols, 0.8 * n_rows), squeeze=False)
        for r, row in enumerate(rows):
            for c in range(n_cols):
                ax = axes[r][c]
                ax.set_axis_off()
                if c < len(row):
                    image = np.asarray(row[c])
                    ax.imshow(image.reshape(image.shape[0], image.shape[1]), cmap="gray",
                              vmin=PIXEL_MIN, vmax=PIXEL_MAX, interpolation="nearest")
                if r == 0 and column_labels is not None and c < len(column_labels):
                    ax.set_title(column_labels[c], fontsize=6)
        return _save(fig, path)


def write_pgm(path, image: np.ndarray) -> Path:
    """[-1, 1] の単チャネル画像を PGM (P5) で保存"""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ShapeError(f"PGM export needs a single-channel image, got shape {image.shape}")
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + bytes_from_pixels(image).tobytes())
    return path
