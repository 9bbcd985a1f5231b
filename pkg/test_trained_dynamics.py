"""
既定構成（16x16 合成図形、300 エポック、シード 1）で学習した G の力学のテスト

学習に数時間かかるため、すべて slow マーカー付きです。
"""

import numpy as np
import pytest

from cycle_chaos_lab.cli import generate_sequences, pick_initial_images
from cycle_chaos_lab.config import DOMAIN_NAMES
from cycle_chaos_lab.data import concat_domains, synth_tridomain
from cycle_chaos_lab.dynamics import generator_map, spectrum_ensemble
from cycle_chaos_lab.evaluation import cyclicity_rate, pr_vs_k_trajectories, pr_vs_step, train_probe
from cycle_chaos_lab.training import TrainConfig, train

pytestmark = pytest.mark.slow

SEED = 1


@pytest.fixture(scope="module")
def trained():
    train_tri, test_tri = synth_tridomain(size=16, seed=SEED)
    result = train(TrainConfig(epochs=300, seed=SEED), train_tri)
    return train_tri, test_tri, result.checkpoint.generator("G")


def test_orbits_cycle_through_the_three_categories(trained):
    train_tri, test_tri, G = trained
    classifier = train_probe(train_tri, seed=SEED)
    sequences = generate_sequences(G, pick_initial_images(test_tri, 3, SEED), 320)
    for row in sequences:
        categories = [DOMAIN_NAMES[i] for i in classifier.predict(row)]
        assert cyclicity_rate(categories, 20) >= 0.9


def test_leading_exponent_is_positive_and_unimodal(trained):
    _, test_tri, G = trained
    initial = pick_initial_images(test_tri, 100, SEED)
    ensemble = spectrum_ensemble(generator_map(G), initial.reshape(len(initial), -1),
                                 n_transient=20, n_steps=100, m=4, workers=4)
    leading = ensemble.per_trajectory[:, 0]
    assert len(leading) >= 50
    assert leading.mean() > 0
    # 単峰で鋭い分布: 平均が標準偏差の3倍を超える
    assert leading.mean() > 3 * leading.std()


def test_trajectories_favor_precision_over_recall(trained):
    _, test_tri, G = trained
    real = concat_domains(test_tri).images
    table = pr_vs_k_trajectories(real, G, pick_initial_images(test_tri, 5, SEED), k_range=[3])
    assert table.precision[0] > table.recall[0]


def test_repeated_application_loses_recall_but_keeps_precision(trained):
    _, test_tri, G = trained
    table = pr_vs_step(concat_domains(test_tri).images, G, 10, k=3)
    assert table.recall[10] < table.recall[1]
    assert np.all(table.precision[1:] > 0.5)
