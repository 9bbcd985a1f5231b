"""精度・再現率、特徴抽出、プローブ、PCA 射影のテスト"""

import logging

import numpy as np
import pytest

from cycle_chaos_lab.config import DOMAIN_NAMES
from cycle_chaos_lab.data import synth_tridomain
from cycle_chaos_lab.errors import ConsistencyError, DataFormatError, ProbeTrainingError
from cycle_chaos_lab.evaluation import (
    DiscFeature,
    External,
    FeatureSet,
    Pixels,
    classify,
    cyclicity_rate,
    embed,
    in_manifold,
    knn_radii,
    load_feature_file,
    pca_project,
    pr_vs_k,
    pr_vs_k_trajectories,
    pr_vs_step,
    precision,
    precision_recall,
    recall,
    reference_pr_vs_k,
    save_features_csv,
    train_probe,
    write_pr_csv,
)
from cycle_chaos_lab.model import build_discriminator, save_tensors


def brute_force_precision(real, fake, k):
    """ループによる定義どおりの計算"""
    radii = []
    for i, a in enumerate(real):
        distances = sorted(np.linalg.norm(a - b) for j, b in enumerate(real) if j != i)
        radii.append(distances[k - 1])
    hits = 0
    for phi in fake:
        hits += any(np.linalg.norm(phi - a) <= r for a, r in zip(real, radii))
    return hits / len(fake)


def random_set_pairs(count, seed):
    """大きさ 2..64、次元 1..8、k <= min(10, n - 1) の実・生成集合の組"""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 65))
        d = int(rng.integers(1, 9))
        k = int(rng.integers(1, min(10, n - 1) + 1))
        real = rng.normal(size=(n, d))
        fake = rng.normal(loc=rng.uniform(-1, 1), scale=rng.uniform(0.5, 2.0), size=(n, d))
        yield real, fake, k


def test_knn_radii_small_example():
    manifold = knn_radii(np.array([[0.0], [1.0], [3.0]]), k=1)
    np.testing.assert_allclose(manifold.radii, [1.0, 1.0, 2.0])
    assert in_manifold([3.9], manifold) == 1
    assert in_manifold([5.5], manifold) == 0


def test_precision_recall_small_example():
    real = np.array([[0.0], [1.0]])
    fake = np.array([[0.4], [3.0]])
    assert precision(real, fake, k=1) == 0.5
    assert recall(real, fake, k=1) == 1.0
    result = precision_recall(real, fake, k=1)
    assert (result.precision, result.recall, result.n_real) == (0.5, 1.0, 2)


@pytest.mark.parametrize("k", [1, 3, 7])
def test_precision_matches_brute_force(rng, k):
    real = rng.normal(size=(25, 4))
    fake = rng.normal(loc=0.5, size=(25, 4))
    assert precision(real, fake, k) == pytest.approx(brute_force_precision(real, fake, k))
    assert recall(real, fake, k) == pytest.approx(brute_force_precision(fake, real, k))


def test_random_pairs_match_brute_force():
    for real, fake, k in random_set_pairs(200, seed=11):
        p, r = precision(real, fake, k), recall(real, fake, k)
        assert p == pytest.approx(brute_force_precision(real, fake, k))
        assert r == pytest.approx(brute_force_precision(fake, real, k))
        assert (precision(fake, real, k), recall(fake, real, k)) == (r, p)
        assert precision(real, real.copy(), k) == 1.0 and recall(real, real.copy(), k) == 1.0


def test_random_pairs_are_monotone_in_k():
    for real, fake, k in random_set_pairs(50, seed=12):
        table = pr_vs_k(real, fake, range(1, min(10, len(real) - 1) + 1))
        assert np.all(np.diff(table.precision) >= 0)
        assert np.all(np.diff(table.recall) >= 0)


def test_precision_recall_invariant_under_isometry(rng):
    for real, fake, k in random_set_pairs(50, seed=13):
        d = real.shape[1]
        rotation, _ = np.linalg.qr(rng.normal(size=(d, d)))
        shift = rng.normal(scale=3.0, size=d)
        moved_real, moved_fake = (v @ rotation.T + shift for v in (real, fake))
        assert precision(moved_real, moved_fake, k) == precision(real, fake, k)
        assert recall(moved_real, moved_fake, k) == recall(real, fake, k)


def test_precision_and_recall_swap_roles(rng):
    a = rng.normal(size=(15, 3))
    b = rng.normal(scale=2.0, size=(15, 3))
    assert precision(a, b, 4) == recall(b, a, 4)


def test_identical_sets_are_perfect(rng):
    a = rng.normal(size=(10, 2))
    assert precision(a, a.copy(), 1) == 1.0 and recall(a, a.copy(), 1) == 1.0


def test_pr_vs_k_is_monotone_and_matches_pointwise(rng):
    real = rng.normal(size=(30, 5))
    fake = rng.normal(loc=1.0, size=(30, 5))
    table = pr_vs_k(real, fake, range(1, 11))
    assert np.all(np.diff(table.precision) >= 0)
    assert np.all(np.diff(table.recall) >= 0)
    assert table.precision[6] == precision(real, fake, 7)
    assert table.recall[2] == recall(real, fake, 3)


def test_k_must_leave_a_neighbour(rng):
    real = rng.normal(size=(5, 2))
    with pytest.raises(ValueError):
        precision(real, real, k=5)
    with pytest.raises(ValueError):
        knn_radii(real, k=0)


def test_unequal_set_sizes_are_rejected(rng):
    with pytest.raises(ConsistencyError):
        precision(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)), k=1)


def test_feature_set_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureSet(np.array([[0.0, np.nan]]))


def test_reference_curve_uses_test_sized_subsample(rng):
    train = rng.normal(size=(40, 3))
    test = rng.normal(size=(10, 3))
    first = reference_pr_vs_k(train, test, [1, 2, 3], seed=4)
    second = reference_pr_vs_k(train, test, [1, 2, 3], seed=4)
    np.testing.assert_array_equal(first.precision, second.precision)
    with pytest.raises(ConsistencyError):
        reference_pr_vs_k(test, train, [1])


def test_pr_vs_step_starts_at_one(rng):
    images = rng.uniform(-1, 1, size=(12, 4, 4, 1))
    table = pr_vs_step(images, lambda x: -x, n_steps=3, k=2)
    assert list(table.index) == [0, 1, 2, 3]
    assert (table.precision[0], table.recall[0]) == (1.0, 1.0)
    # 偶数回の反転で元の集合に戻る
    assert (table.precision[2], table.recall[2]) == (1.0, 1.0)


def test_pr_vs_k_trajectories_reports_spread(rng):
    test_images = rng.uniform(-1, 1, size=(8, 2, 2, 1))
    initial = rng.uniform(-1, 1, size=(3, 2, 2, 1))
    table = pr_vs_k_trajectories(test_images, lambda x: np.roll(x, 1, axis=1) * 0.9, initial, [1, 2, 3])
    assert table.precision.shape == (3,)
    assert table.precision_std is not None and np.all(table.precision_std >= 0)


def test_write_pr_csv_columns(tmp_path, rng):
    real, fake = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    path = write_pr_csv(tmp_path / "pr.csv", pr_vs_k(real, fake, [1, 2]))
    lines = path.read_text().splitlines()
    assert lines[0] == "k,precision,recall"
    assert len(lines) == 3


def test_pixel_and_discriminator_embedders(tiny_arch, rng):
    images = rng.uniform(-1, 1, size=(5, 8, 8, 1)).astype(np.float32)
    assert embed(images).vectors.shape == (5, 64)
    disc = build_discriminator(tiny_arch, (8, 8, 1))
    features = embed(images, DiscFeature(disc, "Y"), "generated")
    assert features.vectors.shape[0] == 5
    assert features.embedder == "disc_feature:D_Y"
    assert features.source == "generated"


def test_features_csv_can_be_read_back(tmp_path, rng):
    vectors = rng.normal(size=(4, 3))
    path = save_features_csv(tmp_path / "features.csv", vectors, labels=["X", "Y", "Z", "X"])
    np.testing.assert_allclose(load_feature_file(path), vectors, rtol=1e-7)
    assert path.read_text().splitlines()[0] == "label,f0,f1,f2"


def test_headerless_feature_csv(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("1,2\n3,4\n")
    np.testing.assert_array_equal(load_feature_file(path), [[1.0, 2.0], [3.0, 4.0]])


def test_ragged_feature_csv_reports_line(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("f0,f1\n1,2\n3\n")
    with pytest.raises(DataFormatError, match=r"ragged.csv:3"):
        load_feature_file(path)


def test_non_numeric_feature_csv_is_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2\n3,abc\n")
    with pytest.raises(DataFormatError):
        load_feature_file(path)


def test_external_features_from_tensor_container(tmp_path, rng):
    vectors = rng.normal(size=(3, 2)).astype(np.float32)
    path = save_tensors(tmp_path / "features.ccgn", {"features": vectors})
    external = External(path)
    np.testing.assert_array_equal(external(np.zeros((3, 8, 8, 1))), vectors)
    with pytest.raises(ConsistencyError):
        external(np.zeros((4, 8, 8, 1)))


def test_probe_separates_synthetic_categories():
    train, _ = synth_tridomain(n_train=100, n_test=1, size=16, seed=2)
    probe = train_probe(train, epochs=60, learning_rate=3e-3, seed=3)
    assert probe.accuracy >= 0.95
    assert classify(probe, train.y.images[0]) in DOMAIN_NAMES
    predictions = probe.predict(train.z.images)
    assert np.mean(predictions == 2) >= 0.95


def test_probe_failure_is_reported(tiny_tri):
    train, _ = tiny_tri
    with pytest.raises(ProbeTrainingError):
        train_probe(train, epochs=1, min_accuracy=1.01)


@pytest.mark.parametrize("categories, transient, expected", [
    (["X", "Y", "Z", "X", "Y"], 0, 1.0),
    (["X", "X", "Y", "Z", "Z"], 0, 0.5),
    (["Z", "Z", "X", "Y"], 1, 1.0),
    (["Y", "X", "Z", "Y"], 0, 0.0),
])
def test_cyclicity_rate(categories, transient, expected):
    assert cyclicity_rate(categories, transient) == expected


def test_pca_of_planar_data_explains_everything(rng):
    coefficients = rng.normal(size=(50, 2))
    basis = np.array([[1.0, 0.0, 1.0], [0.0, 2.0, -1.0]])
    projection = pca_project(coefficients @ basis + 3.0)
    assert projection.explained_variance_ratio.sum() == pytest.approx(1.0)
    assert projection.points.shape == (50, 2)


def test_pca_matches_svd_and_sign_convention(rng):
    vectors = rng.normal(size=(40, 6)) * np.array([5, 3, 1, 1, 0.5, 0.1])
    projection = pca_project(vectors)
    centered = vectors - vectors.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    np.testing.assert_allclose(np.abs(projection.components), np.abs(vt[:2]), atol=1e-10)
    np.testing.assert_allclose(np.abs(projection.points), np.abs(centered @ vt[:2].T), atol=1e-8)
    np.testing.assert_allclose(projection.explained_variance_ratio, singular[:2] ** 2 / np.sum(singular ** 2))
    for component in projection.components:
        assert component[np.argmax(np.abs(component))] > 0


def test_pca_warns_and_pads_for_rank_deficient_data(caplog):
    vectors = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [2.0, 2.0, 3.0]])
    with caplog.at_level(logging.WARNING, logger="cycle_chaos_lab.evaluation"):
        projection = pca_project(vectors)
    assert "rank 1" in caplog.text
    np.testing.assert_array_equal(projection.points[:, 1], 0.0)
    assert projection.points[0, 0] == projection.points[1, 0]


def test_pixels_embedder_name():
    assert Pixels().name == "pixels"
