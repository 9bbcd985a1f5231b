"""データセット読み込み・合成・バッチのテスト"""

import gzip
import struct

import numpy as np
import pytest

from cycle_chaos_lab.config import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, SHAPE_CATEGORIES
from cycle_chaos_lab.data import (
    LabeledImages,
    batch_triples,
    bytes_from_pixels,
    concat_domains,
    dataset_paths,
    load_idx,
    load_tridomain,
    pixels_from_bytes,
    select_tridomain,
    synth_dataset,
    synth_shapes,
    synth_tridomain,
    triples_per_epoch,
    write_idx,
)
from cycle_chaos_lab.errors import ConsistencyError, DataFormatError, ShapeError, TruncatedFileError


def idx_bytes(raw: np.ndarray, labels) -> tuple[bytes, bytes]:
    n, rows, cols = raw.shape
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + raw.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", IDX_LABELS_MAGIC, n) + bytes(labels)
    return images, label_bytes


@pytest.fixture
def idx_pair(tmp_path, rng):
    raw = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    labels = [0, 1, 2, 1, 7]
    images, label_bytes = idx_bytes(raw, labels)
    (tmp_path / "images").write_bytes(images)
    (tmp_path / "labels").write_bytes(label_bytes)
    return tmp_path / "images", tmp_path / "labels", raw, labels


def test_pixel_mapping_endpoints():
    values = pixels_from_bytes(np.array([0, 255], dtype=np.uint8))
    assert values[0] == np.float32(-1.0)
    assert values[1] == np.float32(1.0)


def test_pixel_bytes_invert_exactly():
    raw = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(bytes_from_pixels(pixels_from_bytes(raw)), raw)


def test_load_idx_reads_images_and_labels(idx_pair):
    image_path, label_path, raw, labels = idx_pair
    data = load_idx(image_path, label_path, "test")
    assert data.images.shape == (5, 4, 3, 1)
    assert data.images.dtype == np.float32
    np.testing.assert_array_equal(data.labels, labels)
    np.testing.assert_array_equal(data.images[..., 0], pixels_from_bytes(raw))
    assert data.split == "test"


def test_idx_write_then_load_is_bit_exact(idx_pair, tmp_path):
    image_path, label_path, raw, _ = idx_pair
    data = load_idx(image_path, label_path)
    out_images, out_labels = write_idx(tmp_path / "out" / "img", tmp_path / "out" / "lbl", data)
    assert out_images.read_bytes() == image_path.read_bytes()
    assert out_labels.read_bytes() == label_path.read_bytes()


def test_gzip_idx_is_read_transparently(idx_pair, tmp_path):
    image_path, label_path, _, _ = idx_pair
    gz_images, gz_labels = tmp_path / "img.gz", tmp_path / "lbl.gz"
    gz_images.write_bytes(gzip.compress(image_path.read_bytes()))
    gz_labels.write_bytes(gzip.compress(label_path.read_bytes()))
    plain = load_idx(image_path, label_path)
    packed = load_idx(gz_images, gz_labels)
    np.testing.assert_array_equal(plain.images, packed.images)


def test_gzip_write_is_reproducible(idx_pair, tmp_path):
    data = load_idx(*idx_pair[:2])
    first = write_idx(tmp_path / "a" / "img.gz", tmp_path / "a" / "lbl.gz", data)
    second = write_idx(tmp_path / "b" / "img.gz", tmp_path / "b" / "lbl.gz", data)
    assert first[0].read_bytes() == second[0].read_bytes()


def test_bad_magic_is_rejected(idx_pair):
    image_path, label_path, _, _ = idx_pair
    data = bytearray(image_path.read_bytes())
    data[3] = 0x01
    image_path.write_bytes(bytes(data))
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(image_path, label_path)


def test_truncated_payload_is_rejected(idx_pair):
    image_path, label_path, _, _ = idx_pair
    image_path.write_bytes(image_path.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(image_path, label_path)


def test_trailing_bytes_are_rejected(idx_pair):
    image_path, label_path, _, _ = idx_pair
    image_path.write_bytes(image_path.read_bytes() + b"\x00")
    with pytest.raises(DataFormatError, match="trailing"):
        load_idx(image_path, label_path)


def test_count_mismatch_is_rejected(idx_pair, tmp_path):
    image_path, _, _, _ = idx_pair
    _, short_labels = idx_bytes(np.zeros((4, 4, 3)), [0, 1, 2, 1])
    (tmp_path / "short").write_bytes(short_labels)
    with pytest.raises(ConsistencyError):
        load_idx(image_path, tmp_path / "short")


def test_select_tridomain_preserves_order(idx_pair):
    data = load_idx(*idx_pair[:2])
    tri = select_tridomain(data, (1, 0, 7))
    assert len(tri.x) == 2 and len(tri.y) == 1 and len(tri.z) == 1
    np.testing.assert_array_equal(tri.x.images, data.images[[1, 3]])


def test_select_tridomain_reports_available_labels(idx_pair):
    data = load_idx(*idx_pair[:2])
    with pytest.raises(ConsistencyError, match=r"available labels: \[0, 1, 2, 7\]"):
        select_tridomain(data, (0, 1, 9))


def test_select_tridomain_needs_distinct_labels(idx_pair):
    data = load_idx(*idx_pair[:2])
    with pytest.raises(ConsistencyError):
        select_tridomain(data, (0, 0, 1))


def test_load_tridomain_uses_mnist_file_names(tmp_path):
    train, test = synth_tridomain(n_train=3, n_test=2, size=8, seed=4)
    for split, tri in (("train", train), ("test", test)):
        write_idx(*dataset_paths(tmp_path, split), concat_domains(tri))
    loaded = load_tridomain(tmp_path, (0, 1, 2), "test")
    assert [len(d) for d in loaded.domains] == [2, 2, 2]
    assert (tmp_path / "t10k-images-idx3-ubyte").exists()


def test_labeled_images_validates_range():
    with pytest.raises(DataFormatError):
        LabeledImages(np.full((1, 2, 2, 1), 1.5, dtype=np.float32), np.zeros(1, dtype=np.int64))
    with pytest.raises(ShapeError):
        LabeledImages(np.zeros((1, 2, 2), dtype=np.float32), np.zeros(1, dtype=np.int64))


@pytest.mark.parametrize("category", SHAPE_CATEGORIES)
def test_synth_shapes_are_valid_images(category):
    data = synth_shapes(category, 10, size=16, rng=3)
    assert data.images.shape == (10, 16, 16, 1)
    assert data.images.min() >= -1.0 and data.images.max() <= 1.0
    assert np.all(data.labels == SHAPE_CATEGORIES.index(category))
    # 画像ごとに揺らぎがある
    assert not np.array_equal(data.images[0], data.images[1])


def test_synth_shapes_reject_small_size():
    with pytest.raises(ValueError):
        synth_shapes("disk", 1, size=4)


def test_synth_dataset_is_seed_deterministic():
    a = synth_dataset(4, size=8, seed=11)
    b = synth_dataset(4, size=8, seed=11)
    c = synth_dataset(4, size=8, seed=12)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_synth_train_and_test_splits_differ():
    train, test = synth_tridomain(n_train=4, n_test=4, size=8, seed=0)
    assert not np.array_equal(train.x.images, test.x.images)
    assert test.x.split == "test"


def test_categories_are_separable_by_mean_intensity():
    # disk と cross は背景が多く、stripes は平均がほぼ 0
    data = synth_dataset(50, size=16, seed=0)
    means = [data.images[data.labels == i].mean() for i in range(3)]
    assert means[0] < 0 and means[1] < 0
    assert abs(means[2]) < min(abs(means[0]), abs(means[1]))


def test_batch_triples_covers_epoch_without_replacement(tiny_tri):
    train, _ = tiny_tri
    batches = list(batch_triples(train, 4, np.random.default_rng(0)))
    assert len(batches) == triples_per_epoch(train, 4) == 3
    xs = np.concatenate([b[0] for b in batches])
    assert len({x.tobytes() for x in xs}) == 12
    assert all(b[0].shape == (4, 8, 8, 1) for b in batches)


def test_batch_triples_is_deterministic_for_seed(tiny_tri):
    train, _ = tiny_tri
    first = list(batch_triples(train, 3, np.random.default_rng(9)))
    second = list(batch_triples(train, 3, np.random.default_rng(9)))
    for a, b in zip(first, second):
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)


def test_batch_triples_rejects_oversized_batch(tiny_tri):
    train, _ = tiny_tri
    with pytest.raises(ValueError):
        batch_triples(train, 13, np.random.default_rng(0))
