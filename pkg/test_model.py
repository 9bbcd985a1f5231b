"""生成器・識別器とチェックポイント形式のテスト"""

import struct

import numpy as np
import pytest

from cycle_chaos_lab.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from cycle_chaos_lab.errors import CheckpointVersionError, ConsistencyError, DataFormatError, ShapeError
from cycle_chaos_lab.model import (
    ArchConfig,
    Checkpoint,
    build_discriminator,
    build_generator,
    load_checkpoint,
    load_tensors,
    save_checkpoint,
    save_tensors,
)


@pytest.fixture
def networks(tiny_arch):
    shape = (8, 8, 1)
    return {
        "G": build_generator(tiny_arch, shape, rng=1),
        "F": build_generator(tiny_arch, shape, rng=2),
        "D_X": build_discriminator(tiny_arch, shape, rng=3),
        "D_Y": build_discriminator(tiny_arch, shape, rng=4),
        "D_Z": build_discriminator(tiny_arch, shape, rng=5),
    }


def test_generator_maps_images_into_pixel_range(tiny_arch, rng):
    generator = build_generator(tiny_arch, (8, 8, 1))
    x = rng.uniform(-1, 1, size=(3, 8, 8, 1)).astype(np.float32)
    y = generator(x)
    assert y.shape == x.shape
    assert y.dtype == np.float32
    assert np.all(np.abs(y) <= 1.0)
    np.testing.assert_array_equal(generator(x[0]), y[0])


def test_discriminator_outputs_probabilities(tiny_arch, rng):
    disc = build_discriminator(tiny_arch, (8, 8, 1))
    x = rng.uniform(-1, 1, size=(4, 8, 8, 1)).astype(np.float32)
    p = disc(x)
    assert p.shape == (4,)
    assert np.all((p >= 0) & (p <= 1))
    assert np.ndim(disc(x[0])) == 0
    assert disc.features(x).shape == (4, tiny_arch.base_channels * 2 ** (tiny_arch.n_downsamples - 1))


def test_float64_input_runs_in_float32(tiny_arch, rng):
    generator = build_generator(tiny_arch, (8, 8, 1))
    disc = build_discriminator(tiny_arch, (8, 8, 1))
    x = rng.uniform(-1, 1, size=(2, 8, 8, 1))
    y = generator(x)
    assert y.dtype == np.float32
    np.testing.assert_array_equal(y, generator(x.astype(np.float32)))
    assert disc(x).dtype == np.float32
    assert disc.features(x).dtype == np.float32


def test_inference_is_deterministic(tiny_arch, rng):
    generator = build_generator(tiny_arch, (8, 8, 1))
    x = rng.uniform(-1, 1, size=(8, 8, 1)).astype(np.float32)
    np.testing.assert_array_equal(generator(x), generator(x))


def test_build_is_seed_deterministic(tiny_arch):
    a = build_generator(tiny_arch, (8, 8, 1), rng=7).graph.params
    b = build_generator(tiny_arch, (8, 8, 1), rng=7).graph.params
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_indivisible_image_shape_is_rejected(tiny_arch):
    with pytest.raises(ShapeError, match="divisible"):
        build_generator(tiny_arch, (9, 8, 1))


def test_wrong_image_shape_is_rejected(tiny_arch):
    generator = build_generator(tiny_arch, (8, 8, 1))
    with pytest.raises(ShapeError):
        generator(np.zeros((4, 4, 1), dtype=np.float32))


def test_arch_config_validates_fields():
    with pytest.raises(ValueError):
        ArchConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        ArchConfig(base_channels=0)


def test_checkpoint_roundtrip_is_bitwise_equal(networks, tmp_path):
    checkpoint = Checkpoint.from_networks(networks, {"seed": 3, "lambda": 10.0})
    path = save_checkpoint(tmp_path / "model.ccgn", checkpoint)
    loaded = load_checkpoint(path)
    assert loaded.bitwise_equal(checkpoint)
    x = np.zeros((8, 8, 1), dtype=np.float32)
    np.testing.assert_array_equal(loaded.generator("G")(x), networks["G"](x))


def test_bitwise_equal_detects_single_value_change(networks):
    checkpoint = Checkpoint.from_networks(networks)
    changed = networks["D_Y"].with_params({"dense.bias": networks["D_Y"].graph.params["dense.bias"] + 1e-6})
    other = Checkpoint.from_networks({**networks, "D_Y": changed})
    assert not checkpoint.bitwise_equal(other)


def test_checkpoint_missing_tensor_is_rejected(networks, tmp_path):
    checkpoint = Checkpoint.from_networks(networks)
    path = save_checkpoint(tmp_path / "model.ccgn", checkpoint)
    tensors, metadata, _ = load_tensors(path)
    tensors.pop(next(name for name in tensors if name.startswith("F/")))
    save_tensors(path, tensors, metadata)
    with pytest.raises(ConsistencyError, match="missing"):
        load_checkpoint(path)


def test_checkpoint_wrong_tensor_shape_is_rejected(networks, tmp_path):
    checkpoint = Checkpoint.from_networks(networks)
    path = save_checkpoint(tmp_path / "model.ccgn", checkpoint)
    tensors, metadata, _ = load_tensors(path)
    name = next(n for n in tensors if n.startswith("D_Z/"))
    tensors[name] = np.zeros(tensors[name].size + 1, dtype=np.float32)
    save_tensors(path, tensors, metadata)
    with pytest.raises(ConsistencyError, match="shape"):
        load_checkpoint(path)


def test_checkpoint_repeated_tensor_is_rejected(networks, tmp_path):
    path = save_checkpoint(tmp_path / "model.ccgn", Checkpoint.from_networks(networks))
    tensors, _, _ = load_tensors(path)
    name, value = next(iter(tensors.items()))
    copy = value.copy()
    copy.reshape(-1)[-1] = 123.0
    encoded = name.encode("utf-8")
    record = (struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", copy.ndim)
              + struct.pack(f"<{copy.ndim}I", *copy.shape) + copy.astype("<f4").tobytes())

    # 先頭テンソルの直後に同名のレコードを挿入し、個数を1つ増やす
    data = path.read_bytes()
    header = len(CHECKPOINT_MAGIC) + 8
    first_end = header + len(record)
    count = len(tensors) + 1
    patched = (data[:len(CHECKPOINT_MAGIC)] + struct.pack("<II", CHECKPOINT_VERSION, count)
               + data[header:first_end] + record + data[first_end:])
    path.write_bytes(patched)
    with pytest.raises(ConsistencyError, match="more than once"):
        load_checkpoint(path)


def test_newer_checkpoint_version_is_rejected(networks, tmp_path):
    path = save_checkpoint(tmp_path / "model.ccgn", Checkpoint.from_networks(networks))
    data = bytearray(path.read_bytes())
    offset = len(CHECKPOINT_MAGIC)
    data[offset:offset + 4] = struct.pack("<I", CHECKPOINT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_container_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ccgn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataFormatError):
        load_tensors(path)


def test_container_preserves_names_shapes_and_metadata(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b/c": np.float32([1.5])}
    path = save_tensors(tmp_path / "t.ccgn", tensors, {"note": "x"})
    loaded, metadata, version = load_tensors(path)
    assert list(loaded) == ["a", "b/c"]
    np.testing.assert_array_equal(loaded["a"], tensors["a"])
    assert metadata == {"note": "x"}
    assert version == CHECKPOINT_VERSION
