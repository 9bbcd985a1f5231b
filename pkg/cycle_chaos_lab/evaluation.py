"""
生成品質と巡回性の評価

k 近傍超球による多様体の精度・再現率、k や時間ステップに対する掃引、
特徴抽出器（画素、識別器特徴、外部ファイル）、カテゴリ判定プローブ、
分布の可視化用の PCA 2次元射影を提供します。
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import softmax
from sklearn.decomposition import PCA

from cycle_chaos_lab.config import (
    DEFAULT_K,
    DEFAULT_K_RANGE,
    DEFAULT_SEED,
    DOMAIN_NAMES,
    PROBE_BATCH_SIZE,
    PROBE_EPOCHS,
    PROBE_HELDOUT_FRACTION,
    PROBE_HIDDEN_UNITS,
    PROBE_LEARNING_RATE,
    PROBE_MIN_ACCURACY,
)
from cycle_chaos_lab.data import TriDomain
from cycle_chaos_lab.errors import ConsistencyError, DataFormatError, ProbeTrainingError, ShapeError
from cycle_chaos_lab.model import DiscriminatorNet, kaiming_uniform, load_tensors
from cycle_chaos_lab.tensor_core import INFER, TRAIN, Dense, Graph, ReLU
from cycle_chaos_lab.training import Adam

logger = logging.getLogger(__name__)

REAL = "real"
GENERATED = "generated"


# ---------------------------------------------------------------------------
# 特徴ベクトル
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSet:
    """同じ次元の有限な特徴ベクトルの集合 [M, d]"""

    vectors: np.ndarray
    source: str = REAL
    embedder: str = "pixels"

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ShapeError(f"Feature vectors must form a 2-D array, got shape {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ValueError("Feature vectors must be finite")
        object.__setattr__(self, "vectors", vectors)

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Pixels:
    """画像を行優先で平坦化"""

    name: str = "pixels"

    def __call__(self, images) -> np.ndarray:
        images = np.asarray(images)
        return images.reshape(len(images), -1)


@dataclass(frozen=True)
class DiscFeature:
    """指定した識別器のグローバル平均プーリング直後の活性"""

    net: DiscriminatorNet
    domain: str = "X"

    @property
    def name(self) -> str:
        return f"disc_feature:D_{self.domain}"

    def __call__(self, images) -> np.ndarray:
        return self.net.features(images)


@dataclass(frozen=True)
class External:
    """
    外部ツールで計算済みの特徴ベクトルを読み込む

    CSV（1行1ベクトル、ヘッダ行は任意）またはテンソルコンテナの
    "features" テンソルに対応します。
    """

    path: Path

    @property
    def name(self) -> str:
        return f"external:{Path(self.path).name}"

    def __call__(self, images=None) -> np.ndarray:
        vectors = load_feature_file(self.path)
        if images is not None and len(images) != len(vectors):
            raise ConsistencyError(
                f"{self.path}: {len(vectors)} feature vectors for {len(images)} images"
            )
        return vectors


def _parse_csv_features(path: Path) -> np.ndarray:
    with path.open(newline="", encoding="utf-8") as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise DataFormatError(f"{path}: no feature rows")

    columns = None
    try:
        [float(cell) for cell in rows[0]]
    except ValueError:
        header, rows = rows[0], rows[1:]
        columns = [i for i, name in enumerate(header) if name.startswith("f") and name[1:].isdigit()]
        if not columns:
            raise DataFormatError(f"{path}: header has no feature columns (f0, f1, ...)")

    vectors = []
    width = None
    for line, row in enumerate(rows, start=2 if columns is not None else 1):
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataFormatError(f"{path}:{line}: row has {len(row)} columns, expected {width}")
        cells = [row[i] for i in columns] if columns is not None else row
        try:
            vectors.append([float(cell) for cell in cells])
        except ValueError as e:
            raise DataFormatError(f"{path}:{line}: {e}") from e
    return np.asarray(vectors, dtype=np.float64)


def load_feature_file(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        vectors = _parse_csv_features(path)
    else:
        tensors, _, _ = load_tensors(path)
        if "features" not in tensors:
            raise DataFormatError(f"{path}: no 'features' tensor (found {sorted(tensors)})")
        vectors = tensors["features"].astype(np.float64)
        if vectors.ndim != 2:
            raise DataFormatError(f"{path}: features tensor must be 2-D, got shape {vectors.shape}")
    logger.info(f"Loaded {len(vectors)} feature vectors of dimension {vectors.shape[1]} from {path}")
    return vectors


def embed(images, embedder=Pixels(), source: str = REAL) -> FeatureSet:
    """画像バッチを特徴ベクトルへ変換"""
    return FeatureSet(embedder(images), source, embedder.name)


def save_features_csv(path, features: FeatureSet | np.ndarray, labels: Sequence | None = None) -> Path:
    """
    特徴ベクトルを CSV に書き出す（外部の次元削減ツール用）

    列は任意の label と f0, f1, ... です。
    """
    vectors = features.vectors if isinstance(features, FeatureSet) else np.asarray(features)
    if labels is not None and len(labels) != len(vectors):
        raise ConsistencyError(f"{len(labels)} labels for {len(vectors)} vectors")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        header = [f"f{i}" for i in range(vectors.shape[1])]
        writer.writerow((["label"] if labels is not None else []) + header)
        for i, row in enumerate(vectors):
            cells = [format(float(v), ".8g") for v in row]
            writer.writerow(([labels[i]] if labels is not None else []) + cells)
    return path


# ---------------------------------------------------------------------------
# 精度・再現率
# ---------------------------------------------------------------------------

def _vectors(features) -> np.ndarray:
    if isinstance(features, FeatureSet):
        return features.vectors
    return FeatureSet(features).vectors


@dataclass(frozen=True)
class ManifoldEstimate:
    """各点を中心とし、k 番目の近傍点までの距離を半径とする超球の和集合"""

    base: np.ndarray
    k: int
    radii: np.ndarray


def _self_distances_sorted(base: np.ndarray) -> np.ndarray:
    distances = cdist(base, base)
    np.fill_diagonal(distances, np.inf)
    return np.sort(distances, axis=1, kind="stable")


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}] for {n} points, got {k}")


def knn_radii(features, k: int) -> ManifoldEstimate:
    """
    各点から自分以外の k 番目の近傍点までのユークリッド距離

    Args:
        features: FeatureSet または [M, d] 配列
        k: 近傍数（1 <= k <= M-1）
    """
    base = _vectors(features)
    _check_k(k, len(base))
    radii = _self_distances_sorted(base)[:, k - 1]
    return ManifoldEstimate(base, k, radii)


def _membership(queries: np.ndarray, base: np.ndarray, radii: np.ndarray) -> np.ndarray:
    if queries.shape[1] != base.shape[1]:
        raise ShapeError(f"Feature dimension mismatch: {queries.shape[1]} vs {base.shape[1]}")
    return (cdist(queries, base) <= radii[None, :]).any(axis=1)


def in_manifold(phi, manifold: ManifoldEstimate) -> int:
    """phi がいずれかの超球に含まれれば 1"""
    phi = np.asarray(phi, dtype=np.float64).reshape(1, -1)
    return int(_membership(phi, manifold.base, manifold.radii)[0])


def _check_counts(real: np.ndarray, fake: np.ndarray) -> None:
    if len(real) != len(fake):
        raise ConsistencyError(f"Real and generated sets must be equal in size ({len(real)} vs {len(fake)})")


def precision(real, fake, k: int = DEFAULT_K) -> float:
    """生成特徴のうち実データ多様体に含まれる割合"""
    real, fake = _vectors(real), _vectors(fake)
    _check_counts(real, fake)
    manifold = knn_radii(real, k)
    return float(_membership(fake, manifold.base, manifold.radii).mean())


def recall(real, fake, k: int = DEFAULT_K) -> float:
    """実特徴のうち生成データ多様体に含まれる割合"""
    real, fake = _vectors(real), _vectors(fake)
    _check_counts(real, fake)
    manifold = knn_radii(fake, k)
    return float(_membership(real, manifold.base, manifold.radii).mean())


@dataclass(frozen=True)
class PRResult:
    precision: float
    recall: float
    k: int
    n_real: int
    n_fake: int


def precision_recall(real, fake, k: int = DEFAULT_K) -> PRResult:
    real, fake = _vectors(real), _vectors(fake)
    return PRResult(precision(real, fake, k), recall(real, fake, k), k, len(real), len(fake))


@dataclass(frozen=True)
class PRTable:
    """k または時間ステップごとの精度・再現率（平均と標準偏差）"""

    index_name: str
    index: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    precision_std: np.ndarray | None = None
    recall_std: np.ndarray | None = None

    def rows(self):
        for i, key in enumerate(self.index):
            yield int(key), float(self.precision[i]), float(self.recall[i])


def _pr_sweep(real: np.ndarray, fake: np.ndarray, k_range: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """距離行列を1度だけ計算して複数の k を評価"""
    _check_counts(real, fake)
    if real.shape[1] != fake.shape[1]:
        raise ShapeError(f"Feature dimension mismatch: {real.shape[1]} vs {fake.shape[1]}")
    for k in k_range:
        _check_k(k, len(real))
    real_sorted = _self_distances_sorted(real)
    fake_sorted = _self_distances_sorted(fake)
    cross = cdist(fake, real)
    precisions, recalls = [], []
    for k in k_range:
        precisions.append((cross <= real_sorted[:, k - 1][None, :]).any(axis=1).mean())
        recalls.append((cross.T <= fake_sorted[:, k - 1][None, :]).any(axis=1).mean())
    return np.asarray(precisions, dtype=np.float64), np.asarray(recalls, dtype=np.float64)


def pr_vs_k(real, fake, k_range: Sequence[int] = DEFAULT_K_RANGE) -> PRTable:
    """k を変えたときの精度・再現率"""
    k_range = list(k_range)
    p, r = _pr_sweep(_vectors(real), _vectors(fake), k_range)
    return PRTable("k", np.asarray(k_range), p, r)


def reference_pr_vs_k(train_features, test_features, k_range: Sequence[int] = DEFAULT_K_RANGE,
                      seed: int = DEFAULT_SEED) -> PRTable:
    """学習データとテストデータの間の精度・再現率（生成データと比較する基準線）"""
    train, test = _vectors(train_features), _vectors(test_features)
    if len(train) < len(test):
        raise ConsistencyError(f"Need at least {len(test)} training vectors, got {len(train)}")
    chosen = np.sort(np.random.default_rng(seed).choice(len(train), size=len(test), replace=False))
    return pr_vs_k(test, train[chosen], k_range)


def _orbit(G: Callable, images: np.ndarray, n_steps: int) -> list[np.ndarray]:
    states = [images]
    for _ in range(n_steps):
        states.append(np.asarray(G(states[-1])))
    return states


def pr_vs_step(test_images, G: Callable, n_steps: int, k: int = DEFAULT_K, embedder=Pixels()) -> PRTable:
    """
    テスト画像全体に G を n 回適用した集合とテスト集合の精度・再現率

    ステップ 0 はテスト集合同士の比較なので精度・再現率ともに 1 です。
    """
    test_images = np.asarray(test_images)
    if len(test_images) == 0:
        raise ValueError("pr_vs_step needs a non-empty test set")
    real = embed(test_images, embedder).vectors
    precisions, recalls = [1.0], [1.0]
    _check_k(k, len(real))
    for n, images in enumerate(_orbit(G, test_images, n_steps)[1:], start=1):
        fake = embed(images, embedder, GENERATED).vectors
        p, r = _pr_sweep(real, fake, [k])
        precisions.append(float(p[0]))
        recalls.append(float(r[0]))
        logger.debug(f"step {n}: precision={p[0]:.4f} recall={r[0]:.4f}")
    return PRTable("step", np.arange(n_steps + 1), np.asarray(precisions), np.asarray(recalls))


def pr_vs_k_trajectories(test_images, G: Callable, initial_images, k_range: Sequence[int] = DEFAULT_K_RANGE,
                         n_transient: int = 0, embedder=Pixels()) -> PRTable:
    """
    単一軌道を生成集合とした精度・再現率の、複数の初期点にわたる平均と標準偏差

    各軌道 {x_1, ..., x_M} の長さ M はテスト集合の大きさです。
    """
    test_images = np.asarray(test_images)
    initial_images = np.asarray(initial_images)
    if len(initial_images) == 0:
        raise ValueError("pr_vs_k_trajectories needs at least one initial image")
    k_range = list(k_range)
    real = embed(test_images, embedder).vectors
    states = initial_images
    for _ in range(n_transient):
        states = np.asarray(G(states))
    orbit = _orbit(G, states, len(test_images))[1:]
    stacked = np.stack(orbit, axis=1)  # [軌道数, M, ...]
    precisions, recalls = [], []
    for trajectory in stacked:
        p, r = _pr_sweep(real, embed(trajectory, embedder, GENERATED).vectors, k_range)
        precisions.append(p)
        recalls.append(r)
    precisions, recalls = np.vstack(precisions), np.vstack(recalls)
    return PRTable("k", np.asarray(k_range), precisions.mean(axis=0), recalls.mean(axis=0),
                   precisions.std(axis=0), recalls.std(axis=0))


def write_pr_csv(path, table: PRTable) -> Path:
    """index, precision, recall（標準偏差があれば追加列）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        has_std = table.precision_std is not None
        writer.writerow([table.index_name, "precision", "recall"]
                        + (["precision_std", "recall_std"] if has_std else []))
        for i, key in enumerate(table.index):
            row = [int(key), format(table.precision[i], ".10g"), format(table.recall[i], ".10g")]
            if has_std:
                row += [format(table.precision_std[i], ".10g"), format(table.recall_std[i], ".10g")]
            writer.writerow(row)
    return path


# ---------------------------------------------------------------------------
# カテゴリ判定プローブ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CategoryProbe:
    """X/Y/Z を判定する小さなソフトマックス分類器"""

    graph: Graph
    accuracy: float
    labels: tuple[str, ...] = field(default=DOMAIN_NAMES)

    def predict(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if tuple(images.shape) == tuple(self.graph.input_shape):
            images = images[None]
        return np.argmax(self.graph(images, INFER), axis=1)


def _probe_graph(image_shape, hidden: int, rng: np.random.Generator) -> Graph:
    n_in = int(np.prod(image_shape))
    params = {
        "hidden.kernel": kaiming_uniform(rng, (n_in, hidden), n_in),
        "hidden.bias": np.zeros(hidden, dtype=np.float32),
        "logits.kernel": kaiming_uniform(rng, (hidden, len(DOMAIN_NAMES)), hidden),
        "logits.bias": np.zeros(len(DOMAIN_NAMES), dtype=np.float32),
    }
    nodes = (Dense("hidden"), ReLU("hidden.relu"), Dense("logits"))
    return Graph(nodes, params, tuple(image_shape))


def train_probe(tri: TriDomain, epochs: int = PROBE_EPOCHS, batch_size: int = PROBE_BATCH_SIZE,
                learning_rate: float = PROBE_LEARNING_RATE, hidden: int = PROBE_HIDDEN_UNITS,
                heldout_fraction: float = PROBE_HELDOUT_FRACTION, seed: int = DEFAULT_SEED,
                min_accuracy: float = PROBE_MIN_ACCURACY) -> CategoryProbe:
    """
    3カテゴリの分類器を学習

    データの一部を検証用に取り分け、その正解率を CategoryProbe.accuracy に
    記録します。正解率が min_accuracy を下回れば ProbeTrainingError を送出します。
    """
    images = np.concatenate([d.images for d in tri.domains]).astype(np.float32)
    targets = np.concatenate([np.full(len(d), i) for i, d in enumerate(tri.domains)])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_heldout = max(1, int(round(heldout_fraction * len(images))))
    heldout, train_idx = order[:n_heldout], order[n_heldout:]
    if len(train_idx) == 0:
        raise ValueError("Not enough images to train the category probe")

    graph = _probe_graph(tri.image_shape, hidden, rng)
    optimizer = Adam(learning_rate)
    moments = optimizer.init(graph.params)
    t = 0
    for _ in range(epochs):
        shuffled = rng.permutation(train_idx)
        for start in range(0, len(shuffled), batch_size):
            batch = shuffled[start:start + batch_size]
            logits, tape = graph.forward(images[batch], TRAIN, rng)
            probs = softmax(logits.astype(np.float64), axis=1)
            probs[np.arange(len(batch)), targets[batch]] -= 1.0
            grads = graph.backward(tape, (probs / len(batch)).astype(np.float32))
            t += 1
            params, moments = optimizer.update(graph.params, grads.params, moments, t)
            graph = graph.with_params(params)

    predicted = np.argmax(graph(images[heldout], INFER), axis=1)
    accuracy = float(np.mean(predicted == targets[heldout]))
    if accuracy < min_accuracy:
        raise ProbeTrainingError(accuracy, min_accuracy)
    logger.info(f"✅ Category probe held-out accuracy: {accuracy:.3f}")
    return CategoryProbe(graph, accuracy)


def classify(probe: CategoryProbe, image) -> str:
    """1枚の画像のカテゴリ名（X, Y, Z のいずれか）"""
    return probe.labels[int(probe.predict(image)[0])]


def cyclicity_rate(categories: Sequence[str], n_transient: int = 0) -> float:
    """過渡期間後の連続するステップのうち X->Y->Z->X の順に遷移した割合"""
    labels = list(categories)[n_transient:]
    if len(labels) < 2:
        raise ValueError("Need at least two post-transient steps to measure cyclicity")
    index = {name: i for i, name in enumerate(DOMAIN_NAMES)}
    hits = sum((index[b] - index[a]) % len(DOMAIN_NAMES) == 1 for a, b in zip(labels, labels[1:]))
    return hits / (len(labels) - 1)


# ---------------------------------------------------------------------------
# PCA 射影
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    points: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca_project(vectors, out_dim: int = 2) -> Projection:
    """
    主成分への射影（平均中心化）

    各主成分は絶対値最大の成分が正になるよう符号をそろえます。
    ランクが out_dim に満たない場合は警告し、残りの座標を 0 で埋めます。
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ShapeError(f"PCA expects a 2-D array, got shape {vectors.shape}")
    n, d = vectors.shape
    if n < out_dim:
        raise ValueError(f"PCA to {out_dim} dimensions needs at least {out_dim} samples, got {n}")
    mean = vectors.mean(axis=0)
    rank = int(np.linalg.matrix_rank(vectors - mean))
    used = min(out_dim, rank)
    if used < out_dim:
        logger.warning(f"⚠️ Data rank {rank} is below the requested {out_dim} components; padding with zeros")

    points = np.zeros((n, out_dim))
    ratios = np.zeros(out_dim)
    components = np.zeros((out_dim, d))
    if used > 0:
        pca = PCA(n_components=used, svd_solver="full").fit(vectors)
        comps = pca.components_.copy()
        signs = np.sign(comps[np.arange(used), np.argmax(np.abs(comps), axis=1)])
        comps *= signs[:, None]
        components[:used] = comps
        points[:, :used] = (vectors - pca.mean_) @ comps.T
        ratios[:used] = pca.explained_variance_ratio_
    return Projection(points, ratios, components, mean)
