"""
Pytest configuration for spm_protocol tests
"""
import os
import sys

import numpy as np
import pytest

# プロジェクトルートをパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from spm_protocol.config import EnvConfig, TrainConfig  # noqa: E402
from spm_protocol.services.extraction import StateDomain  # noqa: E402
from spm_protocol.services.neural_protocol import NPModel  # noqa: E402
from spm_protocol.services.semantic_model import Clause, Spm  # noqa: E402


@pytest.fixture(scope="session")
def project_root():
    """プロジェクトルートパスを返す"""
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_toy_spm() -> Spm:
    """
    b_max = 1 の手書きSPM。

    バッファが空のUEは常にSilence、空でないUEはAccessを選ぶ。
    (1, 1) では UE1 が確率0.9、UE2 が確率0.6 でAccessするため衝突確率は0.54。
    """
    clauses = [
        # α
        Clause.make(1.0, "u1_1", "b1_0"),
        Clause.make(1.0, "u1_2", "b1_1"),
        Clause.make(1.0, "u2_1", "b2_0"),
        Clause.make(1.0, "u2_2", "b2_1"),
        # β: UE1 のDCMへ
        Clause.make(1.0, "d1_1", "u1_1"),
        Clause.make(0.25, "d1_1", "u1_2"),
        Clause.make(0.75, "d1_2", "u1_2"),
        Clause.make(0.5, "d1_1", "u2_1"),
        Clause.make(0.5, "d1_2", "u2_1"),
        Clause.make(0.5, "d1_1", "u2_2"),
        Clause.make(0.5, "d1_2", "u2_2"),
        # β: UE2 のDCMへ
        Clause.make(1.0, "d2_1", "u2_1"),
        Clause.make(0.25, "d2_1", "u2_2"),
        Clause.make(0.75, "d2_2", "u2_2"),
        Clause.make(0.5, "d2_1", "u1_1"),
        Clause.make(0.5, "d2_2", "u1_1"),
        Clause.make(0.5, "d2_1", "u1_2"),
        Clause.make(0.5, "d2_2", "u1_2"),
        # γ
        Clause.make(1.0, "a1_S", "d1_1"),
        Clause.make(0.9, "a1_A", "d1_2"),
        Clause.make(0.1, "a1_D", "d1_2"),
        Clause.make(1.0, "a2_S", "d2_1"),
        Clause.make(0.6, "a2_A", "d2_2"),
        Clause.make(0.4, "a2_S", "d2_2"),
    ]
    return Spm(clauses, domain=StateDomain.grid(1))


@pytest.fixture
def toy_spm():
    return build_toy_spm()


@pytest.fixture
def small_env():
    """toy_spm と組み合わせる b_max = 1 の環境"""
    return EnvConfig(b_max=1, t_max=24, d_max=12, eps_block=0.0)


@pytest.fixture
def tiny_train_config():
    """数エピソードで終わる小さな学習設定"""
    return TrainConfig(
        hidden_width=6, hidden_layers=1, cm_width=4,
        replay_capacity=200, batch_size=8, target_sync_interval=20,
        total_episodes=3, learning_rate=1e-3,
    )


@pytest.fixture
def small_model(tiny_train_config):
    """b_max = 2 の乱数初期化NPM（float32精度）"""
    return NPModel.initialize(2, tiny_train_config, np.random.default_rng(7)).quantized()
