"""
離散時間力学系としての写像の解析

任意の微分可能な自己写像 x_{n+1} = f(x_n) について、軌道の反復、
ヤコビ行列の積とグラム・シュミット再直交化によるリアプノフスペクトル、
リアプノフ次元、近接軌道の直接的な発散率を計算します。

ベンチマーク写像（エノン写像、ロジスティック写像）と、学習済み生成器を
写像として扱う generator_map を提供します。
"""

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import linregress

from cycle_chaos_lab.config import (
    DEFAULT_DIVERGENCE_EPSILON,
    DEFAULT_DIVERGENCE_STEPS,
    DEFAULT_SPECTRUM_STEPS,
    DEFAULT_TRANSIENT,
    DIVERGENCE_SATURATION_FRACTION,
    HENON_A,
    HENON_B,
    LOGISTIC_R,
    MAX_DEFAULT_EXPONENTS,
)
from cycle_chaos_lab.errors import (
    NonFiniteError,
    RankCollapseError,
    ShapeError,
    UnsortedSpectrumError,
)
from cycle_chaos_lab.model import GeneratorNet
from cycle_chaos_lab.tensor_core import jacobian

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DynMap:
    """
    N 次元ベクトル上の写像とそのヤコビ行列

    evaluate_batch を与えると、複数の状態 [M, N] をまとめて評価できます。
    """

    dimension: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    jacobian_at: Callable[[np.ndarray], np.ndarray]
    name: str = "map"
    evaluate_batch: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError(f"Map dimension must be >= 1, got {self.dimension}")

    def state(self, x) -> np.ndarray:
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        if x.size != self.dimension:
            raise ShapeError(f"{self.name} expects {self.dimension}-vectors, got {x.size} values")
        return x.reshape(self.dimension)

    def step_batch(self, states: np.ndarray) -> np.ndarray:
        if self.evaluate_batch is not None:
            return np.asarray(self.evaluate_batch(states)).reshape(states.shape)
        return np.stack([self.evaluate(s) for s in states]).reshape(states.shape)


@dataclass(frozen=True)
class Trajectory:
    """過渡期間を除いた軌道。states[0] は x0 の1ステップ後"""

    states: np.ndarray
    transient_skipped: int

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class LyapunovSpectrum:
    """降順のリアプノフ指数"""

    exponents: np.ndarray
    n_steps: int
    dimension: int
    per_trajectory: np.ndarray | None = None
    log_det_mean: float | None = None
    basis: np.ndarray | None = None

    @property
    def m(self) -> int:
        return len(self.exponents)


@dataclass(frozen=True)
class SpectrumEnsemble:
    """複数の初期点から求めたスペクトルの平均・標準偏差と個別値"""

    mean: np.ndarray
    std: np.ndarray
    per_trajectory: np.ndarray
    n_steps: int
    dimension: int
    failures: tuple[tuple[int, str], ...] = ()

    @property
    def spectrum(self) -> LyapunovSpectrum:
        return LyapunovSpectrum(self.mean, self.n_steps, self.dimension, self.per_trajectory)


@dataclass(frozen=True)
class LyapunovDimension:
    value: float
    j: int
    saturated: bool = False


@dataclass(frozen=True)
class DivergenceCurve:
    """
    近接軌道ペアの距離の推移

    Attributes:
        mean_log: ステップごとの log 距離の標本平均 [n_steps + 1]
        distances: ペアごとの距離 [n_pairs, n_steps + 1]
        slope: 飽和前の区間での mean_log の回帰直線の傾き
        fit_window: 回帰に使ったステップ範囲 [start, stop)
    """

    mean_log: np.ndarray
    distances: np.ndarray
    slope: float
    intercept: float
    fit_window: tuple[int, int]
    epsilon: float
    skipped: int = 0


def _check_state(x: np.ndarray, step: int, name: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{name}: non-finite state at step {step}")


def iterate(dyn: DynMap, x0, n_steps: int, n_transient: int = 0) -> Trajectory:
    """
    軌道を計算

    n_transient 回の適用結果は捨て、その後の n_steps 個の状態を記録します。

    Args:
        dyn: 写像
        x0: 初期状態
        n_steps: 記録するステップ数
        n_transient: 捨てるステップ数

    Returns:
        Trajectory
    """
    if n_steps < 0 or n_transient < 0:
        raise ValueError("Step counts must be non-negative")
    x = dyn.state(x0)
    for i in range(n_transient):
        x = dyn.state(dyn.evaluate(x))
        _check_state(x, i + 1, dyn.name)
    states = np.empty((n_steps, dyn.dimension), dtype=x.dtype)
    for i in range(n_steps):
        x = dyn.state(dyn.evaluate(x))
        _check_state(x, n_transient + i + 1, dyn.name)
        states[i] = x
    return Trajectory(states, n_transient)


def gram_schmidt(vectors: np.ndarray, step: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """
    修正グラム・シュミット法による列ベクトルの正規直交化

    Args:
        vectors: [N, m] の列ベクトル
        step: エラー報告用のステップ番号

    Returns:
        (Q [N, m], 正規化係数 r [m])（r は QR 分解の R 対角成分）
    """
    q = np.array(vectors, dtype=np.float64)
    m = q.shape[1]
    r = np.empty(m)
    for i in range(m):
        v = q[:, i]
        for j in range(i):
            v -= np.dot(q[:, j], v) * q[:, j]
        norm = np.sqrt(np.dot(v, v))
        if not (norm > 0 and np.isfinite(norm)):
            raise RankCollapseError(step, i)
        v /= norm
        r[i] = norm
    return q, r


def _initial_basis(n: int, m: int, basis) -> np.ndarray:
    if basis is None:
        return np.eye(n, m)
    basis = np.asarray(basis, dtype=np.float64)
    if basis.shape != (n, m):
        raise ShapeError(f"Initial tangent basis must have shape {(n, m)}, got {basis.shape}")
    return basis


def lyapunov_spectrum(dyn: DynMap, x0, n_transient: int = DEFAULT_TRANSIENT,
                      n_steps: int = DEFAULT_SPECTRUM_STEPS, m: int | None = None,
                      initial_basis=None) -> LyapunovSpectrum:
    """
    リアプノフスペクトルを推定

    m 本の接ベクトルに毎ステップ J_k を掛けて再直交化し、正規化係数の
    対数平均を指数とします。接ベクトルと累積和は64ビットで保持します。

    Args:
        dyn: 写像
        x0: 初期状態
        n_transient: 過渡ステップ数
        n_steps: 測定ステップ数
        m: 指数の数（既定 min(N, 32)）
        initial_basis: 接ベクトルの初期値 [N, m]（既定は単位行列の先頭 m 列）

    Returns:
        降順の LyapunovSpectrum（log_det_mean は log|det J_k| の軌道平均、
        basis は最終ステップの再直交化後の接ベクトル [N, m]）
    """
    n = dyn.dimension
    m = min(n, MAX_DEFAULT_EXPONENTS) if m is None else m
    if not 1 <= m <= n:
        raise ValueError(f"Exponent count must lie in [1, {n}], got {m}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")

    x = dyn.state(x0)
    for i in range(n_transient):
        x = dyn.state(dyn.evaluate(x))
        _check_state(x, i + 1, dyn.name)

    q = _initial_basis(n, m, initial_basis)
    log_sums = np.zeros(m)
    log_det = 0.0
    for step in range(1, n_steps + 1):
        jac = np.asarray(dyn.jacobian_at(x), dtype=np.float64).reshape(n, n)
        if m == n:
            log_det += np.linalg.slogdet(jac)[1]
        q, r = gram_schmidt(jac @ q, step)
        log_sums += np.log(r)
        x = dyn.state(dyn.evaluate(x))
        _check_state(x, n_transient + step, dyn.name)

    exponents = np.sort(log_sums / n_steps)[::-1]
    logger.debug(f"{dyn.name}: lambda_1={exponents[0]:.5f} over {n_steps} steps")
    return LyapunovSpectrum(exponents, n_steps, n, log_det_mean=log_det / n_steps if m == n else None, basis=q)


def spectrum_ensemble(dyn: DynMap, initial_set, n_transient: int = DEFAULT_TRANSIENT,
                      n_steps: int = DEFAULT_SPECTRUM_STEPS, m: int | None = None,
                      workers: int = 1) -> SpectrumEnsemble:
    """
    初期点ごとに lyapunov_spectrum を実行して集計

    発散やランク落ちで失敗した軌道は除外して警告に記録します。ヤコビ行列の
    サイズ超過など構成の誤りはそのまま送出します。結果は入力順に並びます。
    """
    initial_set = list(initial_set)
    if not initial_set:
        raise ValueError("spectrum_ensemble needs at least one initial point")

    def run(x0):
        try:
            return lyapunov_spectrum(dyn, x0, n_transient, n_steps, m)
        except (NonFiniteError, RankCollapseError) as e:
            return e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, initial_set))
    else:
        results = [run(x0) for x0 in initial_set]

    failures = tuple((i, str(r)) for i, r in enumerate(results) if isinstance(r, Exception))
    spectra = [r.exponents for r in results if not isinstance(r, Exception)]
    for index, message in failures:
        logger.warning(f"⚠️ Trajectory {index} excluded: {message}")
    if not spectra:
        raise NonFiniteError(f"All {len(initial_set)} trajectories failed; first error: {failures[0][1]}")

    per_trajectory = np.vstack(spectra)
    logger.info(f"📊 {dyn.name}: spectrum from {len(spectra)}/{len(initial_set)} trajectories")
    return SpectrumEnsemble(per_trajectory.mean(axis=0), per_trajectory.std(axis=0), per_trajectory,
                            n_steps, dyn.dimension, failures)


def lyapunov_dimension(spectrum) -> LyapunovDimension:
    """
    リアプノフ次元 D_L

    部分和が非負となる最大の j について j + S_j / |lambda_{j+1}| を返します。
    全ての部分和が非負なら m を飽和フラグ付きで、lambda_1 < 0 なら 0 を返します。
    """
    exponents = spectrum.exponents if isinstance(spectrum, LyapunovSpectrum) else spectrum
    exponents = np.asarray(exponents, dtype=np.float64)
    if exponents.size == 0:
        raise ValueError("Empty spectrum")
    if np.any(np.diff(exponents) > 0):
        raise UnsortedSpectrumError("Lyapunov spectrum must be sorted in descending order")
    if exponents[0] < 0:
        return LyapunovDimension(0.0, 0)
    partial = np.cumsum(exponents)
    j = int(np.count_nonzero(partial >= 0))
    if j == exponents.size:
        logger.warning(f"⚠️ All {j} partial sums are non-negative; Lyapunov dimension saturates")
        return LyapunovDimension(float(j), j, saturated=True)
    return LyapunovDimension(j + partial[j - 1] / abs(exponents[j]), j)


def _fit_window(mean_log: np.ndarray, threshold: float) -> tuple[int, int]:
    stop = 0
    while stop < len(mean_log) and np.isfinite(mean_log[stop]) and mean_log[stop] < threshold:
        stop += 1
    return 0, stop


def direct_divergence(dyn: DynMap, base_points, epsilon: float = DEFAULT_DIVERGENCE_EPSILON,
                      n_steps: int = DEFAULT_DIVERGENCE_STEPS,
                      saturation_fraction: float = DIVERGENCE_SATURATION_FRACTION,
                      fit_window: tuple[int, int] | None = None) -> DivergenceCurve:
    """
    近接軌道の距離の成長率から最大リアプノフ指数を推定

    各基準点を最近傍の他の基準点の方向へ epsilon だけずらし、両方の軌道を
    反復して距離を記録します。log 距離の平均が log(0.1 x 基準点集合の直径)
    を下回る先頭区間で直線を当てはめ、その傾きを返します。

    Args:
        dyn: 写像
        base_points: [M, N] の基準点（M >= 2）
        epsilon: 摂動の大きさ
        n_steps: 反復回数
        saturation_fraction: 飽和判定に使う直径の割合
        fit_window: 回帰区間 [start, stop) を明示する場合に指定

    Returns:
        DivergenceCurve
    """
    points = np.asarray(base_points)
    if not np.issubdtype(points.dtype, np.floating):
        points = points.astype(np.float64)
    points = points.reshape(len(points), -1)
    if len(points) < 2:
        raise ValueError("direct_divergence needs at least two base points")
    if points.shape[1] != dyn.dimension:
        raise ShapeError(f"Base points have dimension {points.shape[1]}, map expects {dyn.dimension}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    pairwise = cdist(points, points)
    diameter = float(pairwise.max())
    np.fill_diagonal(pairwise, np.inf)
    nearest = np.argmin(pairwise, axis=1)
    gaps = pairwise[np.arange(len(points)), nearest]
    keep = gaps > 0
    skipped = int(np.count_nonzero(~keep))
    if skipped:
        logger.warning(f"⚠️ Skipped {skipped} base points with a zero-distance nearest peer")
    if not keep.any():
        raise ValueError("All base points coincide with their nearest peer")

    a = points[keep]
    direction = (points[nearest[keep]] - a) / gaps[keep, None]
    b = (a + epsilon * direction).astype(a.dtype)

    distances = np.empty((len(a), n_steps + 1))
    distances[:, 0] = np.linalg.norm((b - a).astype(np.float64), axis=1)
    for n in range(1, n_steps + 1):
        a, b = dyn.step_batch(a), dyn.step_batch(b)
        distances[:, n] = np.linalg.norm((b - a).astype(np.float64), axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.log(distances)
    logs[~np.isfinite(logs)] = np.nan
    with warnings.catch_warnings():
        # 全ペアが非有限のステップは NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_log = np.nanmean(logs, axis=0)

    if fit_window is None:
        fit_window = _fit_window(mean_log, np.log(saturation_fraction * diameter))
    start, stop = fit_window
    if stop - start < 2:
        logger.warning(f"⚠️ Divergence fit window {fit_window} has fewer than two points")
        slope, intercept = float("nan"), float("nan")
    else:
        steps = np.arange(start, stop)
        fit = linregress(steps, mean_log[start:stop])
        slope, intercept = float(fit.slope), float(fit.intercept)
    logger.info(f"📊 {dyn.name}: divergence slope {slope:.5f} over steps [{start}, {stop})")
    return DivergenceCurve(mean_log, distances, slope, intercept, (start, stop), epsilon, skipped)


def ensemble_states(dyn: DynMap, initial_set, steps: Sequence[int]) -> dict[int, np.ndarray]:
    """
    軌道の束の、指定ステップにおける全軌道の状態

    ステップ 0 は初期状態そのものです。
    """
    states = np.asarray(initial_set)
    if not np.issubdtype(states.dtype, np.floating):
        states = states.astype(np.float64)
    states = states.reshape(len(states), dyn.dimension)
    wanted = sorted(set(steps))
    if wanted and wanted[0] < 0:
        raise ValueError("Steps must be non-negative")
    snapshots = {}
    current = 0
    for target in wanted:
        while current < target:
            states = dyn.step_batch(states)
            current += 1
            _check_state(states, current, dyn.name)
        snapshots[target] = states.copy()
    return snapshots


# ---------------------------------------------------------------------------
# 写像
# ---------------------------------------------------------------------------

def henon(a: float = HENON_A, b: float = HENON_B) -> DynMap:
    """(x, y) -> (1 - a x^2 + y, b x)"""
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError("Henon parameters must be finite")

    def evaluate(s):
        return np.array([1.0 - a * s[0] * s[0] + s[1], b * s[0]])

    def evaluate_batch(states):
        x, y = states[:, 0], states[:, 1]
        return np.stack([1.0 - a * x * x + y, b * x], axis=1)

    def jacobian_at(s):
        return np.array([[-2.0 * a * s[0], 1.0], [b, 0.0]])

    return DynMap(2, evaluate, jacobian_at, f"henon({a},{b})", evaluate_batch)


def logistic(r: float = LOGISTIC_R) -> DynMap:
    """x -> r x (1 - x)"""
    if not np.isfinite(r):
        raise ValueError("Logistic parameter must be finite")

    def evaluate(s):
        return r * s * (1.0 - s)

    def jacobian_at(s):
        return np.array([[r * (1.0 - 2.0 * s[0])]])

    return DynMap(1, evaluate, jacobian_at, f"logistic({r})", evaluate)


def linear(matrix) -> DynMap:
    """x -> A x"""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise ShapeError(f"Linear map needs a square matrix, got {matrix.shape}")
    return DynMap(n, lambda s: matrix @ s, lambda s: matrix, "linear",
                  lambda states: states @ matrix.T)


def flatten_image(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image).reshape(-1)


def unflatten_image(vector: np.ndarray, image_shape) -> np.ndarray:
    vector = np.asarray(vector)
    if vector.size != int(np.prod(image_shape)):
        raise ShapeError(f"Cannot reshape {vector.size} values into image shape {tuple(image_shape)}")
    return vector.reshape(tuple(image_shape))


def generator_map(net: GeneratorNet) -> DynMap:
    """生成器 G を画像空間上の写像（行優先で平坦化した N 次元ベクトル）として扱う"""
    shape = net.image_shape
    n = int(np.prod(shape))

    def evaluate(s):
        return flatten_image(net(unflatten_image(s.astype(np.float32), shape)))

    def evaluate_batch(states):
        images = states.astype(np.float32).reshape((len(states),) + shape)
        return net(images).reshape(len(states), n)

    def jacobian_at(s):
        return jacobian(net.graph, unflatten_image(s.astype(np.float32), shape)).data

    return DynMap(n, evaluate, jacobian_at, "generator", evaluate_batch)


# ---------------------------------------------------------------------------
# CSV 出力
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return format(float(value), ".10g")


def _open_csv(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path, path.open("w", newline="", encoding="utf-8")


def write_spectrum_csv(path, spectrum: LyapunovSpectrum | SpectrumEnsemble) -> Path:
    """index, exponent（アンサンブルなら std も）"""
    path, f = _open_csv(path)
    with f:
        writer = csv.writer(f, lineterminator="\n")
        if isinstance(spectrum, SpectrumEnsemble):
            writer.writerow(["index", "exponent", "std"])
            for i, (mean, std) in enumerate(zip(spectrum.mean, spectrum.std), start=1):
                writer.writerow([i, _fmt(mean), _fmt(std)])
        else:
            writer.writerow(["index", "exponent"])
            for i, value in enumerate(spectrum.exponents, start=1):
                writer.writerow([i, _fmt(value)])
    return path


def write_ensemble_csv(path, ensemble: SpectrumEnsemble) -> Path:
    """軌道ごとの指数（ヒストグラム用）"""
    path, f = _open_csv(path)
    with f:
        writer = csv.writer(f, lineterminator="\n")
        m = ensemble.per_trajectory.shape[1]
        writer.writerow(["trajectory", *[f"lambda_{i}" for i in range(1, m + 1)]])
        for i, row in enumerate(ensemble.per_trajectory):
            writer.writerow([i, *[_fmt(v) for v in row]])
    return path


def write_divergence_csv(path, curve: DivergenceCurve) -> Path:
    """step, mean_log_distance, pair_0, pair_1, ..."""
    path, f = _open_csv(path)
    with f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "mean_log_distance", *[f"pair_{j}" for j in range(len(curve.distances))]])
        for n in range(curve.distances.shape[1]):
            writer.writerow([n, _fmt(curve.mean_log[n]), *[_fmt(d) for d in curve.distances[:, n]]])
    return path
