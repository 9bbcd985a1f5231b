"""テスト共通のフィクスチャ"""

import numpy as np
import pytest

from cycle_chaos_lab.data import synth_tridomain
from cycle_chaos_lab.model import ArchConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_arch():
    """8x8 画像で数秒以内に学習できる構成"""
    return ArchConfig(base_channels=4, n_resblocks=1, n_downsamples=1, dropout_rate=0.3)


@pytest.fixture
def tiny_tri():
    """8x8 の合成図形（学習 12 枚 / テスト 6 枚 x 3 カテゴリ）"""
    return synth_tridomain(n_train=12, n_test=6, size=8, seed=0)


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """スカラー関数 f の x における中心差分勾配（float64）"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f(x)
        flat[i] = original - h
        minus = f(x)
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


@pytest.fixture
def numeric_grad():
    return finite_difference
