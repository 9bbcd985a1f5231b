"""
テンソル演算コア

画像写像に必要な最小限のレイヤー語彙について、順伝播、逆伝播
（ベクトル・ヤコビ積）、完全なヤコビ行列の抽出を提供します。

主要機能：
- 畳み込み / 転置畳み込み（互いに随伴）
- 全結合、ReLU、LeakyReLU、tanh、sigmoid、ドロップアウト、
  グローバル平均プーリング、残差加算
- 計算グラフの逆伝播とノード名付きの非有限値検出
- 単位上流ベクトルの一括逆伝播によるヤコビ行列の組み立て

テンソルはバッチ先頭の NHWC 形式の numpy 配列として扱います。
全ての演算は入力を変更せず、乱数は明示的な Generator からのみ取得します。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from cycle_chaos_lab.config import JACOBIAN_CHUNK_ROWS, JACOBIAN_MAX_ELEMENTS
from cycle_chaos_lab.errors import JacobianSizeError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

TRAIN = "train"
INFER = "infer"
MODES = (TRAIN, INFER)
PADDINGS = ("same", "valid")


def as_tensor(values, name: str = "tensor", dtype=None) -> np.ndarray:
    """
    配列を検証してテンソルとして返す

    Args:
        values: 配列に変換可能な値
        name: エラーメッセージ用の名前
        dtype: 変換先の型（省略時は浮動小数点ならそのまま、それ以外は float32）

    Returns:
        有限値のみを含む numpy 配列
    """
    array = np.asarray(values)
    if dtype is not None:
        array = array.astype(dtype, copy=False)
    elif not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float32)
    if not np.isfinite(array).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return array


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"Expected [H,W,C] or [N,H,W,C] tensor, got shape {x.shape}")
    return x, False


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    """出力サイズとパディング (上, 下, 左, 右) を計算"""
    if stride < 1:
        raise ShapeError(f"Stride must be positive, got {stride}")
    if padding == "same":
        ho, top, bottom = _same_padding(h, kh, stride)
        wo, left, right = _same_padding(w, kw, stride)
        return ho, wo, (top, bottom, left, right)
    if padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"Kernel {kh}x{kw} exceeds input {h}x{w} with valid padding")
        return (h - kh) // stride + 1, (w - kw) // stride + 1, (0, 0, 0, 0)
    raise ShapeError(f"Unknown padding '{padding}', expected one of {PADDINGS}")


def _check_kernel(kernel: np.ndarray, channels: int, axis: int) -> None:
    if kernel.ndim != 4:
        raise ShapeError(f"Kernel must be [kh,kw,Cin,Cout], got shape {kernel.shape}")
    if kernel.shape[axis] != channels:
        raise ShapeError(
            f"Kernel {kernel.shape} does not match {channels} input channels"
        )


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pads, ho: int, wo: int):
    top, bottom, left, right = pads
    padded = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    # (N, Ho, Wo, Cin, kh, kw)
    view = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return view[:, ::stride, ::stride][:, :ho, :wo]


def _scatter_windows(cols: np.ndarray, in_shape, kh: int, kw: int, stride: int, pads):
    """(N, Ho, Wo, kh, kw, Cin) の列を入力形状に足し戻す"""
    n, h, w, cin = in_shape
    top, bottom, left, right = pads
    ho, wo = cols.shape[1], cols.shape[2]
    padded = np.zeros((n, h + top + bottom, w + left + right, cin), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                cols[:, :, :, i, j, :]
    return padded[:, top:top + h, left:left + w, :]


def _kernel_grad(windows: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    grad = np.tensordot(windows, upstream, axes=([0, 1, 2], [0, 1, 2]))
    return grad.transpose(1, 2, 0, 3)


def conv2d(x, kernel, stride: int = 1, padding: str = "same", bias=None) -> np.ndarray:
    """
    2次元畳み込み（相互相関）

    Args:
        x: 入力 [H,W,Cin] または [N,H,W,Cin]
        kernel: カーネル [kh,kw,Cin,Cout]
        stride: ストライド
        padding: "same" または "valid"
        bias: バイアス [Cout]（省略可）

    Returns:
        畳み込み結果（入力と同じバッチ次元の有無）
    """
    x4, squeeze = _as_batch(np.asarray(x))
    kernel = np.asarray(kernel)
    _check_kernel(kernel, x4.shape[3], axis=2)
    _, h, w, _ = x4.shape
    kh, kw = kernel.shape[:2]
    ho, wo, pads = _conv_geometry(h, w, kh, kw, stride, padding)
    windows = _windows(x4, kh, kw, stride, pads, ho, wo)
    y = np.tensordot(windows, kernel, axes=([3, 4, 5], [2, 0, 1]))
    if bias is not None:
        y = y + bias
    y = y.astype(x4.dtype, copy=False)
    return y[0] if squeeze else y


def conv2d_transpose(y, kernel, stride: int = 1, padding: str = "same", output_size=None) -> np.ndarray:
    """
    転置畳み込み（同じカーネルを持つ conv2d の随伴）

    <conv2d(a), b> == <a, conv2d_transpose(b)> が成り立ちます。

    Args:
        y: 入力 [h,w,Cout] または [N,h,w,Cout]
        kernel: conv2d と共有するカーネル [kh,kw,Cin,Cout]
        stride: ストライド
        padding: 対応する conv2d のパディング
        output_size: 出力の (H, W)。省略時は same なら (h*s, w*s)、valid なら ((h-1)*s+kh, ...)

    Returns:
        [H,W,Cin] または [N,H,W,Cin]
    """
    y4, squeeze = _as_batch(np.asarray(y))
    kernel = np.asarray(kernel)
    _check_kernel(kernel, y4.shape[3], axis=3)
    n, h, w, _ = y4.shape
    kh, kw, cin, _ = kernel.shape
    if output_size is None:
        if padding == "same":
            output_size = (h * stride, w * stride)
        else:
            output_size = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    out_h, out_w = output_size
    ho, wo, pads = _conv_geometry(out_h, out_w, kh, kw, stride, padding)
    if (ho, wo) != (h, w):
        raise ShapeError(
            f"Input {h}x{w} is not the conv2d image of output size {out_h}x{out_w} "
            f"(stride {stride}, padding {padding})"
        )
    cols = np.tensordot(y4, kernel, axes=([3], [3]))
    x = _scatter_windows(cols, (n, out_h, out_w, cin), kh, kw, stride, pads)
    x = x.astype(y4.dtype, copy=False)
    return x[0] if squeeze else x


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """
    ドロップアウト

    学習モードでは各要素を確率 rate でゼロにし、残りを 1/(1-rate) 倍します。
    推論モードでは恒等写像です。
    """
    x = as_tensor(x, "dropout input")
    scale = _dropout_scale(x.shape, rate, mode, rng, x.dtype)
    if scale is None:
        return x
    return (x * scale).astype(x.dtype, copy=False)


def _dropout_scale(shape, rate: float, mode: str, rng, dtype):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
    if mode not in MODES:
        raise ValueError(f"Unknown mode '{mode}', expected one of {MODES}")
    if mode == INFER:
        return None
    if rng is None:
        raise ValueError("Train-mode dropout needs an explicit rng")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


# ---------------------------------------------------------------------------
# レイヤー語彙
# ---------------------------------------------------------------------------

class Layer:
    """計算グラフのノード（レイヤー適用）"""

    name: str

    @property
    def param_names(self) -> tuple[str, ...]:
        return ()

    def forward(self, params: Mapping[str, np.ndarray], x: np.ndarray, mode: str, rng):
        raise NotImplementedError

    def backward(self, params: Mapping[str, np.ndarray], cache, grad: np.ndarray, need_params: bool):
        raise NotImplementedError


@dataclass(frozen=True)
class Conv2D(Layer):
    name: str
    stride: int = 1
    padding: str = "same"

    @property
    def param_names(self):
        return (f"{self.name}.kernel", f"{self.name}.bias")

    def forward(self, params, x, mode, rng):
        kernel = params[f"{self.name}.kernel"]
        y = conv2d(x, kernel, self.stride, self.padding, params[f"{self.name}.bias"])
        return y, x

    def backward(self, params, cache, grad, need_params):
        x = cache
        kernel = params[f"{self.name}.kernel"]
        dx = conv2d_transpose(grad, kernel, self.stride, self.padding, output_size=x.shape[1:3])
        grads = {}
        if need_params:
            kh, kw = kernel.shape[:2]
            ho, wo, pads = _conv_geometry(x.shape[1], x.shape[2], kh, kw, self.stride, self.padding)
            windows = _windows(x, kh, kw, self.stride, pads, ho, wo)
            grads[f"{self.name}.kernel"] = _kernel_grad(windows, grad).astype(kernel.dtype)
            grads[f"{self.name}.bias"] = grad.sum(axis=(0, 1, 2)).astype(kernel.dtype)
        return dx, grads


@dataclass(frozen=True)
class Conv2DTranspose(Layer):
    """カーネル形状は [kh,kw,Cout,Cin]（随伴となる conv2d の向き）"""

    name: str
    stride: int = 2
    padding: str = "same"

    @property
    def param_names(self):
        return (f"{self.name}.kernel", f"{self.name}.bias")

    def forward(self, params, x, mode, rng):
        kernel = params[f"{self.name}.kernel"]
        y = conv2d_transpose(x, kernel, self.stride, self.padding)
        y = (y + params[f"{self.name}.bias"]).astype(y.dtype, copy=False)
        return y, x

    def backward(self, params, cache, grad, need_params):
        x = cache
        kernel = params[f"{self.name}.kernel"]
        dx = conv2d(grad, kernel, self.stride, self.padding)
        grads = {}
        if need_params:
            kh, kw = kernel.shape[:2]
            ho, wo, pads = _conv_geometry(grad.shape[1], grad.shape[2], kh, kw, self.stride, self.padding)
            windows = _windows(grad, kh, kw, self.stride, pads, ho, wo)
            grads[f"{self.name}.kernel"] = _kernel_grad(windows, x).astype(kernel.dtype)
            grads[f"{self.name}.bias"] = grad.sum(axis=(0, 1, 2)).astype(kernel.dtype)
        return dx, grads


@dataclass(frozen=True)
class Dense(Layer):
    """全結合層。バッチ以外の次元は平坦化される"""

    name: str

    @property
    def param_names(self):
        return (f"{self.name}.kernel", f"{self.name}.bias")

    def forward(self, params, x, mode, rng):
        flat = x.reshape(x.shape[0], -1)
        y = flat @ params[f"{self.name}.kernel"] + params[f"{self.name}.bias"]
        return y.astype(x.dtype, copy=False), x

    def backward(self, params, cache, grad, need_params):
        x = cache
        kernel = params[f"{self.name}.kernel"]
        dx = (grad @ kernel.T).reshape(x.shape).astype(x.dtype, copy=False)
        grads = {}
        if need_params:
            flat = x.reshape(x.shape[0], -1)
            grads[f"{self.name}.kernel"] = (flat.T @ grad).astype(kernel.dtype)
            grads[f"{self.name}.bias"] = grad.sum(axis=0).astype(kernel.dtype)
        return dx, grads


@dataclass(frozen=True)
class ReLU(Layer):
    """x=0 での劣勾配は 0"""

    name: str

    def forward(self, params, x, mode, rng):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, params, cache, grad, need_params):
        return np.where(cache, grad, 0).astype(grad.dtype, copy=False), {}


@dataclass(frozen=True)
class LeakyReLU(Layer):
    """x=0 での劣勾配は負側の傾き"""

    name: str
    slope: float = 0.2

    def forward(self, params, x, mode, rng):
        mask = x > 0
        return np.where(mask, x, x * x.dtype.type(self.slope)), mask

    def backward(self, params, cache, grad, need_params):
        return np.where(cache, grad, grad * grad.dtype.type(self.slope)), {}


@dataclass(frozen=True)
class Tanh(Layer):
    name: str

    def forward(self, params, x, mode, rng):
        y = np.tanh(x)
        return y, y

    def backward(self, params, cache, grad, need_params):
        return grad * (1 - cache * cache), {}


@dataclass(frozen=True)
class Sigmoid(Layer):
    name: str

    def forward(self, params, x, mode, rng):
        y = expit(x)
        return y, y

    def backward(self, params, cache, grad, need_params):
        return grad * cache * (1 - cache), {}


@dataclass(frozen=True)
class Dropout(Layer):
    name: str
    rate: float = 0.0

    def forward(self, params, x, mode, rng):
        scale = _dropout_scale(x.shape, self.rate, mode, rng, x.dtype)
        if scale is None:
            return x, None
        return x * scale, scale

    def backward(self, params, cache, grad, need_params):
        if cache is None:
            return grad, {}
        return grad * cache, {}


@dataclass(frozen=True)
class GlobalAvgPool(Layer):
    """[N,H,W,C] -> [N,C]"""

    name: str

    def forward(self, params, x, mode, rng):
        return x.mean(axis=(1, 2)).astype(x.dtype, copy=False), x.shape

    def backward(self, params, cache, grad, need_params):
        n, h, w, c = cache
        dx = np.broadcast_to(grad[:, None, None, :] / grad.dtype.type(h * w), cache)
        return np.ascontiguousarray(dx), {}


@dataclass(frozen=True)
class Residual(Layer):
    """y = x + body(x)"""

    name: str
    body: tuple[Layer, ...] = ()

    @property
    def param_names(self):
        return tuple(p for node in self.body for p in node.param_names)

    def forward(self, params, x, mode, rng):
        h, caches = _run_forward(self.body, params, x, mode, rng)
        return x + h, caches

    def backward(self, params, cache, grad, need_params):
        dh, grads = _run_backward(self.body, params, cache, grad, need_params)
        return grad + dh, grads


def _check_finite(array: np.ndarray, node: Layer, phase: str) -> None:
    if not np.isfinite(array).all():
        raise NonFiniteError(f"Non-finite {phase} value at node '{node.name}'")


def _run_forward(nodes: Sequence[Layer], params, x, mode, rng):
    caches = []
    for node in nodes:
        x, cache = node.forward(params, x, mode, rng)
        _check_finite(x, node, "forward")
        caches.append(cache)
    return x, caches


def _run_backward(nodes: Sequence[Layer], params, caches, grad, need_params):
    grads: dict[str, np.ndarray] = {}
    for node, cache in zip(reversed(nodes), reversed(caches)):
        grad, node_grads = node.backward(params, cache, grad, need_params)
        _check_finite(grad, node, "backward")
        for key, value in node_grads.items():
            grads[key] = grads[key] + value if key in grads else value
    return grad, grads


# ---------------------------------------------------------------------------
# 計算グラフ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tape:
    """順伝播で記録された逆伝播用のキャッシュ"""

    caches: list
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]


@dataclass(frozen=True)
class Gradients:
    input: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class JacobianMatrix:
    """行 i は出力成分 i の入力に関する勾配"""

    data: np.ndarray

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Graph:
    """
    単一入力・単一出力の非巡回計算グラフ

    ノードは評価順に並んだレイヤー適用で、パラメータは名前付きテンソルです。
    input_shape はバッチ次元を除いた1サンプルの形状です。
    """

    nodes: tuple[Layer, ...]
    params: Mapping[str, np.ndarray]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        referenced = [name for node in self.nodes for name in node.param_names]
        missing = sorted(set(referenced) - set(self.params))
        if missing:
            raise ShapeError(f"Graph nodes reference missing parameters: {missing}")
        unused = sorted(set(self.params) - set(referenced))
        if unused:
            raise ShapeError(f"Graph parameters not referenced by any node: {unused}")
        names = [node.name for node in self.nodes]
        if len(set(names)) != len(names):
            raise ShapeError("Graph node names must be unique")

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"Graph expects batches of shape {self.input_shape}, got {x.shape}"
            )
        return x

    def forward(self, x, mode: str = INFER, rng: np.random.Generator | None = None):
        """
        バッチの順伝播を行い、出力と逆伝播用テープを返す

        Args:
            x: [N, *input_shape] の入力
            mode: "train"（ドロップアウト有効）または "infer"
            rng: 学習モードのドロップアウト用の乱数生成器

        Returns:
            (出力, Tape)
        """
        if mode not in MODES:
            raise ValueError(f"Unknown mode '{mode}', expected one of {MODES}")
        x = self._check_input(as_tensor(x, "graph input"))
        y, caches = _run_forward(self.nodes, self.params, x, mode, rng)
        return y, Tape(caches, tuple(x.shape), tuple(y.shape))

    def __call__(self, x, mode: str = INFER, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.forward(x, mode, rng)[0]

    def backward(self, tape: Tape, upstream, need_params: bool = True) -> Gradients:
        """
        記録済みテープに沿ってベクトル・ヤコビ積を計算

        Args:
            tape: forward が返したテープ
            upstream: 出力と同じ形状の上流勾配
            need_params: False ならパラメータ勾配の計算を省略

        Returns:
            入力とパラメータの勾配
        """
        upstream = np.asarray(upstream)
        if tuple(upstream.shape) != tape.output_shape:
            raise ShapeError(
                f"Upstream shape {upstream.shape} does not match output shape {tape.output_shape}"
            )
        dx, grads = _run_backward(self.nodes, self.params, tape.caches, upstream, need_params)
        return Gradients(dx, grads)

    def run_until(self, x, node_name: str) -> np.ndarray:
        """推論モードで指定ノードの出力までを評価"""
        names = [node.name for node in self.nodes]
        if node_name not in names:
            raise KeyError(f"No node named '{node_name}' in graph")
        stop = names.index(node_name) + 1
        x = self._check_input(as_tensor(x, "graph input"))
        y, _ = _run_forward(self.nodes[:stop], self.params, x, INFER, None)
        return y

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "Graph":
        unknown = sorted(set(updates) - set(self.params))
        if unknown:
            raise KeyError(f"Unknown parameters: {unknown}")
        return replace(self, params={**self.params, **updates})

    def astype(self, dtype) -> "Graph":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})


def backprop(graph: Graph, x, upstream, mode: str = INFER, rng: np.random.Generator | None = None) -> Gradients:
    """順伝播と逆伝播をまとめて実行し、入力とパラメータの勾配を返す"""
    _, tape = graph.forward(x, mode, rng)
    return graph.backward(tape, upstream)


def jacobian(graph: Graph, x, max_elements: int = JACOBIAN_MAX_ELEMENTS,
             chunk_rows: int = JACOBIAN_CHUNK_ROWS) -> JacobianMatrix:
    """
    1サンプル x における完全なヤコビ行列を組み立てる

    単位上流ベクトルをまとめて逆伝播し、行ごとに埋めます。
    グラフはサンプル間で独立に作用するので、x を複製したバッチで
    複数行を同時に計算できます。

    Args:
        graph: 評価するグラフ（推論モード）
        x: バッチ次元なしの入力
        max_elements: 行数 x 列数の上限
        chunk_rows: 一度に計算する行数

    Returns:
        (出力次元, 入力次元) の JacobianMatrix
    """
    x = as_tensor(x, "jacobian point")
    if tuple(x.shape) != tuple(graph.input_shape):
        raise ShapeError(f"Jacobian point shape {x.shape} != graph input {graph.input_shape}")
    y = graph(x[None])
    n_out, n_in = y[0].size, x.size
    if n_out * n_in > max_elements:
        raise JacobianSizeError(
            f"Jacobian {n_out}x{n_in} exceeds the configured cap of {max_elements} elements"
        )
    rows = np.empty((n_out, n_in), dtype=x.dtype)
    for start in range(0, n_out, chunk_rows):
        count = min(chunk_rows, n_out - start)
        batch = np.broadcast_to(x, (count,) + x.shape).copy()
        out, tape = graph.forward(batch)
        upstream = np.zeros((count, n_out), dtype=out.dtype)
        upstream[np.arange(count), start + np.arange(count)] = 1
        grads = graph.backward(tape, upstream.reshape(out.shape), need_params=False)
        rows[start:start + count] = grads.input.reshape(count, -1)
    logger.debug(f"Assembled {n_out}x{n_in} Jacobian")
    return JacobianMatrix(rows)
