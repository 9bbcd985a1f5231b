"""
生成器・識別器の構築とチェックポイント

2つの生成器 (G, F) と3つの識別器 (D_X, D_Y, D_Z) を構築し、
フレームワーク非依存のバイナリ形式で保存・読み込みします。

チェックポイントのバイナリレイアウト（リトルエンディアン）：
    magic "CCGN" | u32 version | u32 tensor count |
    tensor ごとに (u16 名前長, UTF-8 名前, u8 rank, u32 dims..., float32 データ) |
    u32 メタデータ長 | UTF-8 JSON メタデータ
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from cycle_chaos_lab.config import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    DEFAULT_BASE_CHANNELS,
    DEFAULT_DROPOUT_RATE,
    DEFAULT_KERNEL_SIZE,
    DEFAULT_LEAKY_SLOPE,
    DEFAULT_N_DOWNSAMPLES,
    DEFAULT_N_RESBLOCKS,
    NETWORK_NAMES,
)
from cycle_chaos_lab.errors import (
    CheckpointVersionError,
    ConsistencyError,
    DataFormatError,
    ShapeError,
    TruncatedFileError,
)
from cycle_chaos_lab.tensor_core import (
    INFER,
    Conv2D,
    Conv2DTranspose,
    Dense,
    Dropout,
    GlobalAvgPool,
    Graph,
    LeakyReLU,
    ReLU,
    Residual,
    Sigmoid,
    Tanh,
    as_tensor,
)

logger = logging.getLogger(__name__)

GENERATORS = ("G", "F")
DISCRIMINATORS = ("D_X", "D_Y", "D_Z")
FEATURE_NODE = "gap"


@dataclass(frozen=True)
class ArchConfig:
    """生成器・識別器で共有するネットワーク構成"""

    base_channels: int = DEFAULT_BASE_CHANNELS
    n_resblocks: int = DEFAULT_N_RESBLOCKS
    n_downsamples: int = DEFAULT_N_DOWNSAMPLES
    dropout_rate: float = DEFAULT_DROPOUT_RATE
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    kernel_size: int = DEFAULT_KERNEL_SIZE

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be positive, got {self.base_channels}")
        if self.n_resblocks < 0 or self.n_downsamples < 0:
            raise ValueError("n_resblocks and n_downsamples must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.leaky_slope <= 0:
            raise ValueError(f"leaky_slope must be positive, got {self.leaky_slope}")
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be positive, got {self.kernel_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "ArchConfig":
        return cls(**values)


def _check_divisible(arch: ArchConfig, image_shape) -> tuple[int, int, int]:
    if len(image_shape) != 3:
        raise ShapeError(f"Image shape must be (H, W, C), got {image_shape}")
    h, w, c = (int(v) for v in image_shape)
    factor = 2 ** arch.n_downsamples
    if h % factor or w % factor:
        raise ShapeError(
            f"Image extents {h}x{w} are not divisible by 2^{arch.n_downsamples} = {factor}"
        )
    return h, w, c


def _generator_layout(arch: ArchConfig, image_shape):
    """生成器のノード列とパラメータ形状 (形状, fan_in) を返す"""
    _, _, channels = _check_divisible(arch, image_shape)
    k = arch.kernel_size
    nodes, shapes = [], {}

    def conv(name, cin, cout, stride, size=k):
        shapes[f"{name}.kernel"] = ((size, size, cin, cout), size * size * cin)
        shapes[f"{name}.bias"] = ((cout,), None)
        return Conv2D(name, stride=stride)

    def activation(prefix):
        return [ReLU(f"{prefix}.relu"), Dropout(f"{prefix}.drop", arch.dropout_rate)]

    levels = [arch.base_channels * 2 ** i for i in range(arch.n_downsamples)]
    current = channels
    for i, width in enumerate(levels):
        nodes.append(conv(f"down{i}", current, width, stride=2))
        nodes.extend(activation(f"down{i}"))
        current = width

    for r in range(arch.n_resblocks):
        body = (
            conv(f"res{r}.conv_a", current, current, stride=1),
            *activation(f"res{r}"),
            conv(f"res{r}.conv_b", current, current, stride=1),
        )
        nodes.append(Residual(f"res{r}", body))

    for i in range(arch.n_downsamples):
        width = levels[arch.n_downsamples - 2 - i] if i < arch.n_downsamples - 1 else arch.base_channels
        name = f"up{i}"
        # 転置畳み込みのカーネルは [kh, kw, 出力ch, 入力ch]
        shapes[f"{name}.kernel"] = ((k, k, width, current), k * k * current)
        shapes[f"{name}.bias"] = ((width,), None)
        nodes.append(Conv2DTranspose(name, stride=2))
        nodes.extend(activation(name))
        current = width

    nodes.append(conv("out", current, channels, stride=1, size=1))
    nodes.append(Tanh("tanh"))
    return tuple(nodes), shapes


def _discriminator_layout(arch: ArchConfig, image_shape):
    _, _, channels = _check_divisible(arch, image_shape)
    k = arch.kernel_size
    nodes, shapes = [], {}
    current = channels
    for i in range(arch.n_downsamples):
        width = arch.base_channels * 2 ** i
        name = f"down{i}"
        shapes[f"{name}.kernel"] = ((k, k, current, width), k * k * current)
        shapes[f"{name}.bias"] = ((width,), None)
        nodes.append(Conv2D(name, stride=2))
        nodes.append(LeakyReLU(f"{name}.lrelu", arch.leaky_slope))
        nodes.append(Dropout(f"{name}.drop", arch.dropout_rate))
        current = width
    nodes.append(GlobalAvgPool(FEATURE_NODE))
    shapes["dense.kernel"] = ((current, 1), current)
    shapes["dense.bias"] = ((1,), None)
    nodes.append(Dense("dense"))
    nodes.append(Sigmoid("sigmoid"))
    return tuple(nodes), shapes


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """ReLU 系向けの Kaiming 一様初期化"""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_params(shapes, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, (shape, fan_in) in shapes.items():
        if fan_in is None:
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = kaiming_uniform(rng, shape, fan_in)
    return params


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class GeneratorNet:
    """画像空間の自己写像 J -> J（最終活性化 tanh）"""

    graph: Graph
    arch: ArchConfig

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.graph.input_shape)

    def __call__(self, x) -> np.ndarray:
        return infer(self, x)

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "GeneratorNet":
        return GeneratorNet(self.graph.with_params(updates), self.arch)


@dataclass(frozen=True)
class DiscriminatorNet:
    """画像 -> [0, 1] の確率"""

    graph: Graph
    arch: ArchConfig

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.graph.input_shape)

    def __call__(self, x) -> np.ndarray:
        return infer(self, x)

    def features(self, x) -> np.ndarray:
        """グローバル平均プーリング直後の活性 [N, C]"""
        x4, _ = _batched(as_tensor(x, "discriminator input", np.float32), self.image_shape)
        return self.graph.run_until(x4, FEATURE_NODE)

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "DiscriminatorNet":
        return DiscriminatorNet(self.graph.with_params(updates), self.arch)


def build_generator(arch: ArchConfig, image_shape, rng=0) -> GeneratorNet:
    """
    生成器を構築

    構成: stride 2 の畳み込み x n_downsamples -> 残差ブロック x n_resblocks
    （conv, ReLU, conv, add）-> stride 2 の転置畳み込み x n_downsamples
    -> 1x1 畳み込み -> tanh。各 ReLU の後にドロップアウト。

    Args:
        arch: ネットワーク構成
        image_shape: (H, W, C)
        rng: 初期化用の Generator またはシード

    Returns:
        GeneratorNet
    """
    nodes, shapes = _generator_layout(arch, image_shape)
    params = _init_params(shapes, _as_rng(rng))
    return GeneratorNet(Graph(nodes, params, tuple(image_shape)), arch)


def build_discriminator(arch: ArchConfig, image_shape, rng=0) -> DiscriminatorNet:
    """
    識別器を構築

    構成: stride 2 の畳み込み（LeakyReLU、ドロップアウト）-> グローバル平均
    プーリング -> 全結合 -> sigmoid。
    """
    nodes, shapes = _discriminator_layout(arch, image_shape)
    params = _init_params(shapes, _as_rng(rng))
    return DiscriminatorNet(Graph(nodes, params, tuple(image_shape)), arch)


def _batched(x: np.ndarray, image_shape) -> tuple[np.ndarray, bool]:
    if tuple(x.shape) == tuple(image_shape):
        return x[None], True
    if x.ndim == len(image_shape) + 1 and tuple(x.shape[1:]) == tuple(image_shape):
        return x, False
    raise ShapeError(f"Expected image shape {tuple(image_shape)} (or a batch of it), got {x.shape}")


def infer(net: GeneratorNet | DiscriminatorNet, x) -> np.ndarray:
    """
    推論モード（ドロップアウト無効）でネットワークを評価

    単一画像を渡した場合は、生成器なら画像、識別器ならスカラー確率を返します。
    バッチの場合は生成器なら [N,H,W,C]、識別器なら [N] を返します。
    """
    x4, single = _batched(as_tensor(x, "network input", np.float32), net.image_shape)
    y = net.graph(x4, mode=INFER)
    if isinstance(net, DiscriminatorNet):
        y = y.reshape(-1)
        return y[0] if single else y
    return y[0] if single else y


# ---------------------------------------------------------------------------
# チェックポイント
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Checkpoint:
    """5つのネットワークのパラメータ、構成、学習メタデータ"""

    arch: ArchConfig
    image_shape: tuple[int, int, int]
    params: dict[str, dict[str, np.ndarray]]
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_networks(cls, networks: Mapping[str, GeneratorNet | DiscriminatorNet],
                      metadata: Mapping | None = None) -> "Checkpoint":
        first = networks["G"]
        params = {name: dict(networks[name].graph.params) for name in NETWORK_NAMES}
        return cls(first.arch, first.image_shape, params, dict(metadata or {}))

    def generator(self, name: str = "G") -> GeneratorNet:
        if name not in GENERATORS:
            raise KeyError(f"Unknown generator '{name}'")
        nodes, _ = _generator_layout(self.arch, self.image_shape)
        return GeneratorNet(Graph(nodes, self.params[name], tuple(self.image_shape)), self.arch)

    def discriminator(self, name: str) -> DiscriminatorNet:
        if name not in DISCRIMINATORS:
            raise KeyError(f"Unknown discriminator '{name}'")
        nodes, _ = _discriminator_layout(self.arch, self.image_shape)
        return DiscriminatorNet(Graph(nodes, self.params[name], tuple(self.image_shape)), self.arch)

    def networks(self) -> dict[str, GeneratorNet | DiscriminatorNet]:
        nets = {name: self.generator(name) for name in GENERATORS}
        nets.update({name: self.discriminator(name) for name in DISCRIMINATORS})
        return nets

    def bitwise_equal(self, other: "Checkpoint") -> bool:
        """全テンソル、構成、メタデータがビット単位で一致するか"""
        if (self.arch, tuple(self.image_shape), self.metadata, self.version) != \
                (other.arch, tuple(other.image_shape), other.metadata, other.version):
            return False
        if self.params.keys() != other.params.keys():
            return False
        for net, tensors in self.params.items():
            theirs = other.params[net]
            if tensors.keys() != theirs.keys():
                return False
            for name, value in tensors.items():
                if value.shape != theirs[name].shape or value.tobytes() != theirs[name].tobytes():
                    return False
        return True


def expected_parameter_shapes(arch: ArchConfig, image_shape) -> dict[str, dict[str, tuple]]:
    """構成から決まる各ネットワークのパラメータ名と形状"""
    _, gen_shapes = _generator_layout(arch, image_shape)
    _, disc_shapes = _discriminator_layout(arch, image_shape)
    shapes = {}
    for name in GENERATORS:
        shapes[name] = {k: v[0] for k, v in gen_shapes.items()}
    for name in DISCRIMINATORS:
        shapes[name] = {k: v[0] for k, v in disc_shapes.items()}
    return shapes


def save_tensors(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> Path:
    """
    名前付きテンソルをチェックポイント形式のコンテナに保存

    Args:
        path: 出力ファイル
        tensors: 名前 -> 配列（float32 として保存）
        metadata: JSON 化可能なメタデータ

    Returns:
        書き込んだパス
    """
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)))
    chunks.append(meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info(f"Saved {len(tensors)} tensors to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: expected {count} bytes at offset {self.offset}, "
                f"only {len(self.data) - self.offset} available"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict, int]:
    """
    チェックポイント形式のコンテナを読み込む

    Returns:
        (テンソル辞書, メタデータ, バージョン)
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = reader.unpack("<II")
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}"
        )
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if name in tensors:
            raise ConsistencyError(f"{path}: tensor {name} appears more than once")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(4 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    (meta_len,) = reader.unpack("<I")
    metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    if reader.offset != len(reader.data):
        raise DataFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return tensors, metadata, version


def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    """チェックポイントを保存"""
    tensors = {
        f"{net}/{name}": value
        for net in NETWORK_NAMES
        for name, value in checkpoint.params[net].items()
    }
    metadata = {
        "arch": checkpoint.arch.to_dict(),
        "image_shape": list(checkpoint.image_shape),
        "training": checkpoint.metadata,
    }
    return save_tensors(path, tensors, metadata)


def load_checkpoint(path) -> Checkpoint:
    """
    チェックポイントを読み込み、構成との整合性を検証

    全てのパラメータが構成どおりにちょうど1回ずつ存在しない場合は
    ConsistencyError を送出し、部分的なモデルは返しません。
    """
    tensors, metadata, version = load_tensors(path)
    try:
        arch = ArchConfig.from_dict(metadata["arch"])
        image_shape = tuple(int(v) for v in metadata["image_shape"])
    except (KeyError, TypeError) as e:
        raise ConsistencyError(f"{path}: metadata block is missing architecture fields ({e})") from e

    expected = expected_parameter_shapes(arch, image_shape)
    expected_names = {f"{net}/{name}" for net, shapes in expected.items() for name in shapes}
    if len(tensors) != len(expected_names) or set(tensors) != expected_names:
        missing = sorted(expected_names - set(tensors))
        extra = sorted(set(tensors) - expected_names)
        raise ConsistencyError(
            f"{path}: {len(tensors)} tensors do not match architecture "
            f"({len(expected_names)} expected; missing {missing[:5]}, unexpected {extra[:5]})"
        )

    params: dict[str, dict[str, np.ndarray]] = {net: {} for net in NETWORK_NAMES}
    for full_name, value in tensors.items():
        net, name = full_name.split("/", 1)
        if tuple(value.shape) != tuple(expected[net][name]):
            raise ConsistencyError(
                f"{path}: tensor {full_name} has shape {value.shape}, expected {expected[net][name]}"
            )
        params[net][name] = value
    logger.info(f"✅ Loaded checkpoint {path} (version {version})")
    return Checkpoint(arch, image_shape, params, metadata.get("training", {}), version)
