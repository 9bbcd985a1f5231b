"""テンソル演算コアのテスト"""

import numpy as np
import pytest

from cycle_chaos_lab.errors import JacobianSizeError, NonFiniteError, ShapeError
from cycle_chaos_lab.model import ArchConfig, build_generator
from cycle_chaos_lab.tensor_core import (
    INFER,
    TRAIN,
    Conv2D,
    Conv2DTranspose,
    Dense,
    Dropout,
    GlobalAvgPool,
    Graph,
    LeakyReLU,
    Residual,
    Sigmoid,
    Tanh,
    as_tensor,
    backprop,
    conv2d,
    conv2d_transpose,
    dropout,
    jacobian,
)


def naive_conv(x, kernel, stride, padding):
    """ループによる相互相関（参照実装）"""
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                patch = x[b, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                out[b, i, j] = np.tensordot(patch, kernel, axes=([0, 1, 2], [0, 1, 2]))
    return out


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv2d_matches_loop_reference(rng, stride, padding):
    x = rng.normal(size=(2, 7, 6, 3))
    kernel = rng.normal(size=(3, 3, 3, 4))
    np.testing.assert_allclose(conv2d(x, kernel, stride, padding), naive_conv(x, kernel, stride, padding),
                               rtol=1e-10, atol=1e-12)


def test_conv2d_single_image_keeps_rank(rng):
    x = rng.normal(size=(5, 5, 1))
    kernel = rng.normal(size=(3, 3, 1, 2))
    assert conv2d(x, kernel).shape == (5, 5, 2)


@pytest.mark.parametrize("stride, size", [(1, 5), (2, 5), (2, 6)])
def test_conv2d_transpose_is_adjoint(rng, stride, size):
    x = rng.normal(size=(2, size, size, 3))
    kernel = rng.normal(size=(3, 3, 3, 4))
    y = conv2d(x, kernel, stride, "same")
    b = rng.normal(size=y.shape)
    lhs = np.sum(y * b)
    rhs = np.sum(x * conv2d_transpose(b, kernel, stride, "same", output_size=(size, size)))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_conv2d_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.normal(size=(1, 4, 4, 2)), rng.normal(size=(3, 3, 3, 1)))


def test_dropout_infer_is_identity(rng):
    x = rng.normal(size=(4, 3)).astype(np.float32)
    np.testing.assert_array_equal(dropout(x, 0.5, INFER), x)


def test_dropout_train_masks_and_rescales(rng):
    x = np.ones((200, 50), dtype=np.float32)
    y = dropout(x, 0.25, TRAIN, np.random.default_rng(3))
    assert set(np.unique(y)) <= {np.float32(0.0), np.float32(1.0 / 0.75)}
    assert 0.2 < np.mean(y == 0) < 0.3
    np.testing.assert_array_equal(y, dropout(x, 0.25, TRAIN, np.random.default_rng(3)))


def test_dropout_half_rate_preserves_mean():
    y = dropout(np.ones(10**6, dtype=np.float32), 0.5, TRAIN, np.random.default_rng(0))
    assert 0.99 <= y.mean(dtype=np.float64) <= 1.01


def test_dropout_train_needs_rng():
    with pytest.raises(ValueError):
        dropout(np.ones(3), 0.5, TRAIN)


def test_as_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, np.nan])


def small_graph(rng, dtype=np.float64) -> Graph:
    """全レイヤー種を含む小さなグラフ"""
    nodes = (
        Conv2D("c1", stride=2),
        LeakyReLU("c1.act", 0.2),
        Residual("res", (Conv2D("res.conv"), Tanh("res.tanh"))),
        Conv2DTranspose("up", stride=2),
        Tanh("up.tanh"),
        Dropout("drop", 0.5),
        GlobalAvgPool("gap"),
        Dense("dense"),
        Sigmoid("sigmoid"),
    )
    params = {
        "c1.kernel": rng.normal(scale=0.5, size=(3, 3, 2, 3)),
        "c1.bias": rng.normal(scale=0.1, size=(3,)),
        "res.conv.kernel": rng.normal(scale=0.3, size=(3, 3, 3, 3)),
        "res.conv.bias": rng.normal(scale=0.1, size=(3,)),
        "up.kernel": rng.normal(scale=0.5, size=(3, 3, 2, 3)),
        "up.bias": rng.normal(scale=0.1, size=(2,)),
        "dense.kernel": rng.normal(size=(2, 1)),
        "dense.bias": rng.normal(size=(1,)),
    }
    return Graph(nodes, {k: v.astype(dtype) for k, v in params.items()}, (4, 4, 2))


def test_graph_gradients_match_finite_differences(rng, numeric_grad):
    graph = small_graph(rng)
    x = rng.normal(size=(3, 4, 4, 2))
    weights = rng.normal(size=(3, 1))

    def loss_of_input(xv):
        return float(np.sum(graph(xv) * weights))

    grads = backprop(graph, x, weights)
    np.testing.assert_allclose(grads.input, numeric_grad(loss_of_input, x), rtol=1e-5, atol=1e-8)

    for name in ("c1.kernel", "res.conv.bias", "up.kernel", "dense.kernel"):
        def loss_of_param(value, name=name):
            return float(np.sum(graph.with_params({name: value})(x) * weights))

        np.testing.assert_allclose(grads.params[name], numeric_grad(loss_of_param, graph.params[name]),
                                   rtol=1e-5, atol=1e-8, err_msg=name)


def test_graph_backward_in_train_mode_uses_recorded_mask(rng):
    graph = small_graph(rng)
    x = rng.normal(size=(2, 4, 4, 2))
    upstream = np.ones((2, 1))
    first = backprop(graph, x, upstream, TRAIN, np.random.default_rng(5))
    second = backprop(graph, x, upstream, TRAIN, np.random.default_rng(5))
    np.testing.assert_array_equal(first.input, second.input)


def test_graph_rejects_missing_and_unused_parameters(rng):
    graph = small_graph(rng)
    params = dict(graph.params)
    params.pop("c1.bias")
    with pytest.raises(ShapeError, match="missing"):
        Graph(graph.nodes, params, graph.input_shape)
    with pytest.raises(ShapeError, match="not referenced"):
        Graph(graph.nodes, {**graph.params, "extra": np.zeros(1)}, graph.input_shape)


def test_graph_reports_node_of_non_finite_value(rng):
    graph = small_graph(rng)
    broken = graph.with_params({"dense.kernel": np.full((2, 1), np.inf)})
    with pytest.raises(NonFiniteError, match="dense"):
        broken(rng.normal(size=(1, 4, 4, 2)))


def test_graph_rejects_wrong_input_shape(rng):
    with pytest.raises(ShapeError):
        small_graph(rng)(np.zeros((1, 5, 5, 2)))


def test_jacobian_matches_finite_differences_in_float64():
    arch = ArchConfig(base_channels=4, n_resblocks=1, n_downsamples=1)
    graph = build_generator(arch, (8, 8, 1), rng=1).graph.astype(np.float64)
    x = np.random.default_rng(2).uniform(-1, 1, size=(8, 8, 1))
    jac = jacobian(graph, x, chunk_rows=16).data

    h = 1e-6
    eye = np.eye(x.size).reshape(x.size, *x.shape)
    plus = graph(x[None] + h * eye).reshape(x.size, -1)
    minus = graph(x[None] - h * eye).reshape(x.size, -1)
    numeric = ((plus - minus) / (2 * h)).T
    np.testing.assert_allclose(jac, numeric, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_float32_jacobian_relative_error(seed):
    arch = ArchConfig(base_channels=4, n_resblocks=1, n_downsamples=1)
    graph32 = build_generator(arch, (8, 8, 1), rng=seed).graph
    graph64 = graph32.astype(np.float64)
    x = np.random.default_rng(100 + seed).uniform(-1, 1, size=(8, 8, 1)).astype(np.float32)
    jac = jacobian(graph32, x).data.astype(np.float64)

    h = 1e-5
    x64 = x.astype(np.float64)
    eye = np.eye(x.size).reshape(x.size, *x.shape)
    numeric = ((graph64(x64[None] + h * eye) - graph64(x64[None] - h * eye)).reshape(x.size, -1) / (2 * h)).T

    scale = np.abs(numeric).max()
    assert np.abs(jac - numeric).max() / scale < 1e-2
    large = np.abs(numeric) > 1e-3
    assert np.max(np.abs(jac - numeric)[large] / np.abs(numeric)[large]) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_vector_product_is_directional_derivative(seed):
    arch = ArchConfig(base_channels=4, n_resblocks=1, n_downsamples=1)
    graph32 = build_generator(arch, (8, 8, 1), rng=seed).graph
    graph64 = graph32.astype(np.float64)
    rng = np.random.default_rng(200 + seed)
    x = rng.uniform(-1, 1, size=(8, 8, 1)).astype(np.float32)
    v = rng.normal(size=x.size)
    v /= np.linalg.norm(v)

    h = 1e-5
    step = h * v.reshape(x.shape)
    x64 = x.astype(np.float64)
    numeric = ((graph64(x64[None] + step) - graph64(x64[None] - step)) / (2 * h)).reshape(-1)
    product = jacobian(graph32, x).data.astype(np.float64) @ v
    np.testing.assert_allclose(product, numeric, atol=1e-3)


def test_jacobian_respects_size_cap():
    arch = ArchConfig(base_channels=4, n_resblocks=0, n_downsamples=1)
    graph = build_generator(arch, (8, 8, 1)).graph
    with pytest.raises(JacobianSizeError):
        jacobian(graph, np.zeros((8, 8, 1), dtype=np.float32), max_elements=64 * 64 - 1)
