"""
データセットの読み込みと合成

IDX 形式（MNIST / Fashion-MNIST）のビット単位で正確な読み書き、
3カテゴリの選択、画素値の [-1, 1] への正規化、デスクスケール学習用の
合成図形データセット（円盤・十字・縞）を提供します。
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from cycle_chaos_lab.config import (
    IDX_FILENAMES,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    PIXEL_MAX,
    PIXEL_MIN,
    SHAPE_CATEGORIES,
    SYNTH_IMAGE_SIZE,
    SYNTH_MIN_SIZE,
    SYNTH_NOISE_STD,
    SYNTH_TEST_PER_CATEGORY,
    SYNTH_TRAIN_PER_CATEGORY,
)
from cycle_chaos_lab.errors import ConsistencyError, DataFormatError, ShapeError, TruncatedFileError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass(frozen=True)
class LabeledImages:
    """ラベル付き画像集合。images は [N,H,W,1]、画素は [-1, 1]"""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[3] != 1:
            raise ShapeError(f"Images must be [N,H,W,1], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (
            not np.isfinite(self.images).all()
            or self.images.min() < PIXEL_MIN
            or self.images.max() > PIXEL_MAX
        ):
            raise DataFormatError("Pixel values must be finite and lie in [-1, 1]")
        if self.split not in SPLITS:
            raise ValueError(f"Unknown split '{self.split}'")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, mask) -> "LabeledImages":
        return LabeledImages(self.images[mask], self.labels[mask], self.split)


@dataclass(frozen=True)
class TriDomain:
    """X, Y, Z の3カテゴリ（それぞれ1カテゴリ）"""

    x: LabeledImages
    y: LabeledImages
    z: LabeledImages
    labels: tuple[int, int, int]

    def __post_init__(self):
        if len(set(self.labels)) != 3:
            raise ConsistencyError(f"Domain labels must be distinct, got {self.labels}")
        shapes = {d.image_shape for d in self.domains if len(d)}
        if len(shapes) > 1:
            raise ShapeError(f"Domains disagree on image shape: {sorted(shapes)}")

    @property
    def domains(self) -> tuple[LabeledImages, LabeledImages, LabeledImages]:
        return self.x, self.y, self.z

    @property
    def image_shape(self) -> tuple[int, int, int]:
        for domain in self.domains:
            if len(domain):
                return domain.image_shape
        return self.x.image_shape


def pixels_from_bytes(raw: np.ndarray) -> np.ndarray:
    """画素バイト {0..255} を v = byte/127.5 - 1 で [-1, 1] に写す"""
    return raw.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def bytes_from_pixels(pixels: np.ndarray) -> np.ndarray:
    """pixels_from_bytes の逆写像"""
    return np.clip(np.rint((pixels.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        try:
            with gzip.open(path, "rb") as f:
                return f.read()
        except gzip.BadGzipFile as e:
            raise DataFormatError(f"{path}: not a gzip file ({e})") from e
        except EOFError as e:
            raise TruncatedFileError(f"{path}: compressed stream ends early") from e
    return path.read_bytes()


def _write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # 再現性のため mtime を固定
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(payload)
    else:
        path.write_bytes(payload)


def _parse_header(data: bytes, path: Path, magic: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(data) < header_len:
        raise TruncatedFileError(f"{path}: header needs {header_len} bytes, file has {len(data)}")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{n_dims}I", data[4:header_len])


def _payload(data: bytes, path: Path, offset: int, expected: int) -> np.ndarray:
    available = len(data) - offset
    if available < expected:
        raise TruncatedFileError(f"{path}: expected {expected} payload bytes, found {available}")
    if available > expected:
        raise DataFormatError(f"{path}: {available - expected} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, offset=offset, count=expected)


def load_idx(image_path, label_path, split: str = "train") -> LabeledImages:
    """
    IDX 形式の画像・ラベルファイルを読み込む

    Args:
        image_path: 画像ファイル（マジック 0x00000803、.gz 圧縮も可）
        label_path: ラベルファイル（マジック 0x00000801）
        split: "train" または "test"

    Returns:
        画素を [-1, 1] に正規化した LabeledImages
    """
    image_path, label_path = Path(image_path), Path(label_path)
    image_data = _read_bytes(image_path)
    label_data = _read_bytes(label_path)

    count, rows, cols = _parse_header(image_data, image_path, IDX_IMAGES_MAGIC, 3)
    (label_count,) = _parse_header(label_data, label_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        raise ConsistencyError(
            f"{image_path} holds {count} images but {label_path} holds {label_count} labels"
        )

    raw = _payload(image_data, image_path, 16, count * rows * cols)
    labels = _payload(label_data, label_path, 8, count).astype(np.int64)
    images = pixels_from_bytes(raw).reshape(count, rows, cols, 1)
    logger.info(f"Loaded {count} images of {rows}x{cols} from {image_path}")
    return LabeledImages(images, labels, split)


def write_idx(image_path, label_path, data: LabeledImages) -> tuple[Path, Path]:
    """LabeledImages を IDX 形式で書き出す（load_idx の逆）"""
    image_path, label_path = Path(image_path), Path(label_path)
    if data.labels.size and (data.labels.min() < 0 or data.labels.max() > 255):
        raise DataFormatError("IDX labels must fit in one unsigned byte")
    n, rows, cols, _ = data.images.shape
    image_bytes = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + \
        bytes_from_pixels(data.images).tobytes()
    label_bytes = struct.pack(">II", IDX_LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes()
    _write_bytes(image_path, image_bytes)
    _write_bytes(label_path, label_bytes)
    return image_path, label_path


def dataset_paths(dataset_dir, split: str) -> tuple[Path, Path]:
    """データセットディレクトリ内の IDX ファイルパス"""
    images, labels = IDX_FILENAMES[split]
    return Path(dataset_dir) / images, Path(dataset_dir) / labels


def select_tridomain(data: LabeledImages, labels: tuple[int, int, int]) -> TriDomain:
    """
    3つのラベル値に対応する画像を X, Y, Z に振り分ける（順序保存）

    Args:
        data: ラベル付き画像集合
        labels: (a, b, c) X, Y, Z に割り当てるラベル値

    Returns:
        TriDomain
    """
    labels = tuple(int(v) for v in labels)
    if len(labels) != 3 or len(set(labels)) != 3:
        raise ConsistencyError(f"Need three distinct labels, got {labels}")
    available = sorted(int(v) for v in np.unique(data.labels))
    missing = [v for v in labels if v not in available]
    if missing:
        raise ConsistencyError(f"Labels {missing} not present; available labels: {available}")
    x, y, z = (data.subset(data.labels == v) for v in labels)
    return TriDomain(x, y, z, labels)


def concat_domains(tri: TriDomain) -> LabeledImages:
    """X, Y, Z を連結した実画像集合"""
    return LabeledImages(
        np.concatenate([d.images for d in tri.domains]),
        np.concatenate([d.labels for d in tri.domains]),
        tri.x.split,
    )


def load_tridomain(dataset_dir, labels: tuple[int, int, int], split: str) -> TriDomain:
    image_path, label_path = dataset_paths(dataset_dir, split)
    return select_tridomain(load_idx(image_path, label_path, split), labels)


# ---------------------------------------------------------------------------
# 合成図形データセット
# ---------------------------------------------------------------------------

def _disk(u, v, size, rng):
    radius = rng.uniform(0.25, 0.35) * size
    return radius - np.hypot(u, v)


def _cross(u, v, size, rng):
    half_thickness = rng.uniform(0.06, 0.1) * size
    arm = rng.uniform(0.3, 0.42) * size
    vertical = np.minimum(half_thickness - np.abs(u), arm - np.abs(v))
    horizontal = np.minimum(half_thickness - np.abs(v), arm - np.abs(u))
    return np.maximum(vertical, horizontal)


def _stripes(u, v, size, rng):
    period = rng.uniform(0.25, 0.4) * size
    phase = rng.uniform(0.0, 2 * np.pi)
    angle = rng.uniform(-np.pi / 8, np.pi / 8)
    along = v * np.cos(angle) + u * np.sin(angle)
    return 1.5 * np.cos(2 * np.pi * along / period + phase)


_SHAPES = {"disk": _disk, "cross": _cross, "stripes": _stripes}


def synth_shapes(category: str, n: int, size: int = SYNTH_IMAGE_SIZE,
                 rng: np.random.Generator | int = 0, split: str = "train") -> LabeledImages:
    """
    合成図形の濃淡画像を生成

    位置・太さ・大きさにランダムな揺らぎを与えます。ラベルは
    SHAPE_CATEGORIES 内のインデックスです。

    Args:
        category: "disk", "cross", "stripes" のいずれか
        n: 枚数
        size: 一辺の画素数（8以上）
        rng: Generator またはシード
    """
    if category not in _SHAPES:
        raise ValueError(f"Unknown shape category '{category}', expected one of {SHAPE_CATEGORIES}")
    if size < SYNTH_MIN_SIZE:
        raise ValueError(f"Synthetic images need size >= {SYNTH_MIN_SIZE}, got {size}")
    if n < 0:
        raise ValueError(f"Image count must be non-negative, got {n}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    images = np.empty((n, size, size, 1), dtype=np.float32)
    for i in range(n):
        center = size / 2 + rng.uniform(-size / 8, size / 8, size=2)
        signed = _SHAPES[category](cols - center[1], rows - center[0], size, rng)
        image = np.tanh(2.0 * signed) + rng.normal(0.0, SYNTH_NOISE_STD, size=(size, size))
        images[i, :, :, 0] = np.clip(image, PIXEL_MIN, PIXEL_MAX)
    labels = np.full(n, SHAPE_CATEGORIES.index(category), dtype=np.int64)
    return LabeledImages(images, labels, split)


def synth_dataset(n_per_category: int, size: int = SYNTH_IMAGE_SIZE, seed: int = 0,
                  split: str = "train") -> LabeledImages:
    """3カテゴリの合成図形を1つのラベル付き集合にまとめる"""
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    parts = [synth_shapes(c, n_per_category, size, rng, split) for c in SHAPE_CATEGORIES]
    return LabeledImages(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        split,
    )


def synth_tridomain(n_train: int = SYNTH_TRAIN_PER_CATEGORY, n_test: int = SYNTH_TEST_PER_CATEGORY,
                    size: int = SYNTH_IMAGE_SIZE, seed: int = 0) -> tuple[TriDomain, TriDomain]:
    """デスクスケールの学習用・テスト用 TriDomain"""
    labels = tuple(range(len(SHAPE_CATEGORIES)))
    train = select_tridomain(synth_dataset(n_train, size, seed, "train"), labels)
    test = select_tridomain(synth_dataset(n_test, size, seed, "test"), labels)
    return train, test


# ---------------------------------------------------------------------------
# バッチ
# ---------------------------------------------------------------------------

def triples_per_epoch(tri: TriDomain, batch: int) -> int:
    return min(len(d) for d in tri.domains) // batch


def batch_triples(tri: TriDomain, batch: int,
                  rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    1エポック分の (x, y, z) バッチの組を返す

    各ドメインを独立にシャッフルしてバッチを並べます。
    最も小さいドメインでエポックが打ち切られます。
    """
    if batch < 1:
        raise ValueError(f"Batch size must be positive, got {batch}")
    smallest = min(len(d) for d in tri.domains)
    if batch > smallest:
        raise ValueError(f"Batch size {batch} exceeds smallest domain size {smallest}")
    orders = [rng.permutation(len(d)) for d in tri.domains]
    count = smallest // batch

    def epoch():
        for i in range(count):
            picks = [order[i * batch:(i + 1) * batch] for order in orders]
            yield tuple(d.images[p] for d, p in zip(tri.domains, picks))

    return epoch()
