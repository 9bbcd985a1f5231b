"""コマンドラインの終了コード・成果物・manifest のテスト"""

import csv
import json
import math

import numpy as np
import pytest

from cycle_chaos_lab.cli import generate_sequences, pick_initial_images, run, sha256_of
from cycle_chaos_lab.config import MANIFEST_FILENAME
from cycle_chaos_lab.data import dataset_paths

TINY_PIPELINE = """
# 8x8 の合成図形で全段階を数秒で通す設定
n_train = 4
n_test = 4
synth_size = 8
base_channels = 4
n_resblocks = 1
n_downsamples = 1
epochs = 1
batch_size = 4
n_init = 2
steps = 2
trajectories = 2
transient = 2
spectrum_steps = 3
exponents = 4
histogram_exponents = 2
bins = 5
points = 4
divergence_steps = 3
k = 2
k_range = 1-3
project_points = 5
"""


def read_manifest(directory):
    return json.loads((directory / MANIFEST_FILENAME).read_text(encoding="utf-8"))


def test_unknown_option_is_a_usage_error(tmp_path):
    assert run(["lyapunov", "--out", str(tmp_path), "--bogus"]) == 1


def test_missing_checkpoint_is_a_config_error(tmp_path):
    assert run(["generate", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "absent.ccgn")]) == 1
    assert not (tmp_path / MANIFEST_FILENAME).exists()


def test_bad_config_file_is_a_config_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs = 2\nwhatever = 1\n", encoding="utf-8")
    assert run(["train", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_corrupt_dataset_is_a_runtime_error(tmp_path):
    data_dir = tmp_path / "data"
    assert run(["dataset", "--out", str(data_dir), "--seed", "1"]) == 0
    images_path, _ = dataset_paths(data_dir, "train")
    images_path.write_bytes(images_path.read_bytes()[:40])
    assert run(["dataset", "--source", "idx", "--dataset-dir", str(data_dir), "--out", str(tmp_path / "check")]) == 2


def test_henon_benchmark_spectrum_sums_to_log_contraction(tmp_path):
    code = run(["lyapunov", "--benchmark", "henon", "--out", str(tmp_path), "--trajectories", "3",
                "--steps", "500", "--transient", "50"])
    assert code == 0
    with (tmp_path / "spectrum.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert sum(float(r["exponent"]) for r in rows) == pytest.approx(math.log(0.3), abs=1e-6)
    with (tmp_path / "lyapunov_summary.csv").open() as f:
        summary = {r["quantity"]: r["value"] for r in csv.DictReader(f)}
    assert summary["trajectories_used"] == "3"
    assert 1.0 < float(summary["lyapunov_dimension"]) < 1.5


def test_manifest_hashes_every_artifact(tmp_path):
    assert run(["diverge", "--benchmark", "henon", "--out", str(tmp_path), "--points", "20",
                "--steps", "15", "--transient", "20"]) == 0
    manifest = read_manifest(tmp_path)
    assert manifest["command"] == "diverge"
    assert set(manifest["artifacts"]) == {"divergence.csv", "divergence_summary.csv", "divergence.svg"}
    for name, digest in manifest["artifacts"].items():
        assert sha256_of(tmp_path / name) == digest
    assert manifest["config"]["benchmark"] == "henon"


def test_synthetic_dataset_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run(["dataset", "--out", str(tmp_path / name), "--seed", "7"]) == 0
    first, second = read_manifest(tmp_path / "a"), read_manifest(tmp_path / "b")
    assert first["artifacts"] == second["artifacts"]
    assert "dataset_summary.csv" in first["artifacts"]


def test_generate_sequences_shape_and_first_column():
    init = np.arange(2 * 4 * 4, dtype=np.float32).reshape(2, 4, 4, 1)
    sequences = generate_sequences(lambda x: -x, init, 3)
    assert sequences.shape == (2, 4, 4, 4, 1)
    np.testing.assert_array_equal(sequences[:, 0], init)
    np.testing.assert_array_equal(sequences[:, 3], -init)
    assert generate_sequences(lambda x: x, init, 0).shape == (2, 1, 4, 4, 1)


@pytest.mark.slow
def test_tiny_pipeline_writes_all_stages(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text(TINY_PIPELINE, encoding="utf-8")
    out = tmp_path / "run"
    assert run(["pipeline", "--config", str(config), "--out", str(out), "--seed", "3"]) == 0

    manifest = read_manifest(out)
    artifacts = manifest["artifacts"]
    for expected in ("dataset/dataset_summary.csv", "train/checkpoint.ccgn", "train/loss_history.csv",
                     "generate/generated_grid.svg", "lyapunov/spectrum.csv", "diverge/divergence.csv",
                     "pr/pr_vs_k.csv", "pr/pr_vs_step.csv", "project/projection.csv"):
        assert expected in artifacts, expected
    assert str(config) in manifest["inputs"]
    assert manifest["seed"] == 3
    with (out / "lyapunov" / "spectrum.csv").open() as f:
        assert len(list(csv.DictReader(f))) == 4


def test_initial_images_come_from_domain_x(tiny_tri):
    _, test_tri = tiny_tri
    chosen = pick_initial_images(test_tri, 4, seed=2)
    assert chosen.shape == (4, 8, 8, 1)
    for image in chosen:
        assert any(np.array_equal(image, x) for x in test_tri.x.images)
    np.testing.assert_array_equal(chosen, pick_initial_images(test_tri, 4, seed=2))
    assert len(pick_initial_images(test_tri, 100, seed=2)) == len(test_tri.x)
