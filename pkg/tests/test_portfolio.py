"""
非定常環境でのポートフォリオ運用テスト
"""
import os

import pytest

from spm_protocol.config import EnvConfig, MarkovEnvConfig, PortfolioMode
from spm_protocol.errors import ConfigError, PortfolioError
from spm_protocol.services.analytics import reconfigure_collision_free
from spm_protocol.services.extraction import StateDomain
from spm_protocol.services.inference import SpmPolicy
from spm_protocol.services.mac_env import derive_rng, run_episode
from spm_protocol.services.portfolio import (
    Portfolio,
    PortfolioEntry,
    continual_learning_run,
    load_portfolio_file,
    markov_states,
    portfolio_run,
)
from spm_protocol.services.semantic_model import Clause, Spm


def solo_spm(ue: int) -> Spm:
    """
    b_max = 1 で UE ue だけが送信するSPM。
    UE ue はバッファが空でなければAccess、相手UEは常にSilence。
    """
    me, other = f"{ue + 1}", f"{2 - ue}"
    clauses = [
        Clause.make(1.0, f"u{me}_1", f"b{me}_0"),
        Clause.make(1.0, f"u{me}_2", f"b{me}_1"),
        Clause.make(1.0, f"u{other}_1", f"b{other}_0"),
        Clause.make(1.0, f"u{other}_2", f"b{other}_1"),
        # 送信側: 自UCMでDCMが決まり、相手UCMは両DCMに同じ重み
        Clause.make(1.0, f"d{me}_1", f"u{me}_1"),
        Clause.make(1.0, f"d{me}_2", f"u{me}_2"),
        Clause.make(0.5, f"d{me}_1", f"u{other}_1"),
        Clause.make(0.5, f"d{me}_2", f"u{other}_1"),
        Clause.make(0.5, f"d{me}_1", f"u{other}_2"),
        Clause.make(0.5, f"d{me}_2", f"u{other}_2"),
        # 沈黙側: DCMは1つだけ
        Clause.make(1.0, f"d{other}_1", f"u{other}_1"),
        Clause.make(1.0, f"d{other}_1", f"u{other}_2"),
        Clause.make(1.0, f"d{other}_1", f"u{me}_1"),
        Clause.make(1.0, f"d{other}_1", f"u{me}_2"),
        Clause.make(1.0, f"a{me}_S", f"d{me}_1"),
        Clause.make(1.0, f"a{me}_A", f"d{me}_2"),
        Clause.make(1.0, f"a{other}_S", f"d{other}_1"),
    ]
    return Spm(clauses, domain=StateDomain.grid(1))


@pytest.fixture
def solo_entries():
    return [PortfolioEntry("ue1_burst", solo_spm(0)), PortfolioEntry("ue2_burst", solo_spm(1))]


@pytest.fixture
def long_env():
    """d_max = t_max で到着数の上限に当たらない b_max = 1 の環境"""
    return EnvConfig(b_max=1, t_max=24, d_max=24, eps_block=0.0)


@pytest.fixture
def two_entries(toy_spm):
    cf = reconfigure_collision_free(toy_spm, 0.0).spm
    return [PortfolioEntry("ue1_burst", toy_spm), PortfolioEntry("ue2_burst", cf)]


class TestMarkovStates:
    def test_length_and_determinism(self):
        config = MarkovEnvConfig(n_episodes=30)
        assert len(markov_states(config, 1)) == 30
        assert markov_states(config, 1) == markov_states(config, 1)

    def test_never_switch(self):
        config = MarkovEnvConfig(n_episodes=10, transition_prob=0.0, initial_state=1)
        assert markov_states(config, 0) == [1] * 10

    def test_always_switch(self):
        config = MarkovEnvConfig(n_episodes=5, transition_prob=1.0)
        assert markov_states(config, 0) == [0, 1, 0, 1, 0]


class TestPortfolio:
    def test_entries_required(self):
        with pytest.raises(PortfolioError):
            Portfolio([])

    def test_distinct_descriptors(self, toy_spm):
        with pytest.raises(PortfolioError):
            Portfolio([PortfolioEntry("a", toy_spm), PortfolioEntry("a", toy_spm)])

    def test_oracle_follows_environment(self, two_entries, small_env):
        markov = MarkovEnvConfig(n_episodes=12)
        result = portfolio_run(Portfolio(two_entries), markov, small_env, seed=2)
        assert len(result.records) == 12
        assert all(r["model"] == r["environment"] for r in result.records)
        assert result.report.episodes == 12
        assert len(result.episode_rewards) == 12

    def test_oracle_needs_every_descriptor(self, toy_spm, small_env):
        portfolio = Portfolio([PortfolioEntry("ue1_burst", toy_spm)])
        with pytest.raises(PortfolioError):
            portfolio_run(portfolio, MarkovEnvConfig(n_episodes=2), small_env)

    def test_fixed_mode(self, two_entries, small_env):
        portfolio = Portfolio(two_entries, mode=PortfolioMode.FIXED)
        result = portfolio_run(portfolio, MarkovEnvConfig(n_episodes=6), small_env)
        assert {r["model"] for r in result.records} == {"ue1_burst"}

    def test_reward_mode_switches_on_low_reward(self, two_entries, small_env):
        """閾値が高すぎると毎エピソード次のモデルへ切り替わる"""
        portfolio = Portfolio(two_entries, mode=PortfolioMode.REWARD, window=1, threshold=1e9)
        result = portfolio_run(portfolio, MarkovEnvConfig(n_episodes=4), small_env)
        assert [r["model"] for r in result.records] == ["ue1_burst", "ue2_burst", "ue1_burst", "ue2_burst"]

    def test_reward_mode_keeps_model_above_threshold(self, two_entries, small_env):
        portfolio = Portfolio(two_entries, mode=PortfolioMode.REWARD, window=2, threshold=-1e9)
        result = portfolio_run(portfolio, MarkovEnvConfig(n_episodes=5), small_env)
        assert {r["model"] for r in result.records} == {"ue1_burst"}

    def test_same_seed_same_result(self, two_entries, small_env):
        markov = MarkovEnvConfig(n_episodes=8)
        a = portfolio_run(Portfolio(two_entries), markov, small_env, seed=5)
        b = portfolio_run(Portfolio(two_entries), markov, small_env, seed=5)
        assert a.records == b.records

    def test_single_entry_matches_plain_policy(self, toy_spm, small_env):
        """1エントリのポートフォリオは同じ乱数ストリームで素のSpmPolicyと同じ結果になる"""
        markov = MarkovEnvConfig(n_episodes=6, transition_prob=0.5)
        portfolio = Portfolio([PortfolioEntry("only", toy_spm)], mode=PortfolioMode.FIXED)
        result = portfolio_run(portfolio, markov, small_env, seed=9)
        states = markov_states(markov, 9)
        for episode, (record, s) in enumerate(zip(result.records, states)):
            config = small_env.model_copy(update={"lam": tuple(markov.rates[s])})
            policy = SpmPolicy(toy_spm)
            trace, report = run_episode(policy, config, derive_rng(9, episode, 0), derive_rng(9, episode, 1))
            assert len(trace.rows) == small_env.t_max
            assert record["model"] == "only"
            assert (record["n_r"], record["n_c"], record["n_d"]) == (report.n_r, report.n_c, report.n_d)
            assert record["mean_reward"] == report.mean_reward

    def test_oracle_beats_fixed_mismatched(self, solo_entries, long_env):
        """環境に合うSPMへ切り替えるオラクルは先頭固定より平均報酬が高い"""
        markov = MarkovEnvConfig(n_episodes=20, transition_prob=0.8)
        states = markov_states(markov, 3)
        assert 1 in states
        oracle = portfolio_run(Portfolio(solo_entries), markov, long_env, seed=3)
        fixed = portfolio_run(Portfolio(solo_entries, mode=PortfolioMode.FIXED), markov, long_env, seed=3)
        for o, f, s in zip(oracle.records, fixed.records, states):
            if s == 0:
                assert o == f
            else:
                assert o["model"] == "ue2_burst" and f["model"] == "ue1_burst"
                assert o["mean_reward"] > f["mean_reward"]
        assert oracle.report.mean_reward > fixed.report.mean_reward

    def test_reward_mode_settles_on_better_model(self, long_env):
        """定常環境で報酬が閾値を下回るモデルから離れ、合うモデルに留まる"""
        entries = [PortfolioEntry("ue2_only", solo_spm(1)), PortfolioEntry("ue1_only", solo_spm(0))]
        markov = MarkovEnvConfig(descriptors=["ue1_burst"], rates=[(0.9, 0.1)], n_episodes=8)
        portfolio = Portfolio(entries, mode=PortfolioMode.REWARD, window=1, threshold=2.0)
        result = portfolio_run(portfolio, markov, long_env, seed=4)
        assert [r["model"] for r in result.records] == ["ue2_only"] + ["ue1_only"] * 7
        assert result.records[0]["mean_reward"] < 2.0
        assert all(r["mean_reward"] > 2.0 for r in result.records[1:])


class TestContinualLearning:
    def test_retrains_on_switch(self, tiny_train_config):
        env = EnvConfig(b_max=2, t_max=8, d_max=6)
        markov = MarkovEnvConfig(n_episodes=3, transition_prob=1.0)
        result = continual_learning_run(markov, env, tiny_train_config, retrain_episodes=1, seed=0)
        assert [r["environment"] for r in result.records] == ["ue1_burst", "ue2_burst", "ue1_burst"]
        assert {r["model"] for r in result.records} == {"continual_npm"}
        assert result.report is not None

    def test_warm_model_is_used(self, tiny_train_config, small_model):
        env = EnvConfig(b_max=small_model.b_max, t_max=8, d_max=6)
        markov = MarkovEnvConfig(n_episodes=2, transition_prob=0.0)
        result = continual_learning_run(markov, env, tiny_train_config, 0, initial_model=small_model)
        assert len(result.records) == 2


class TestPortfolioFile:
    def test_relative_paths(self, tmp_path):
        path = tmp_path / "portfolio.txt"
        path.write_text("# models\nue1_burst = a.pl\nue2_burst = /abs/b.pl\n", encoding="utf-8")
        entries = load_portfolio_file(str(path))
        assert entries["ue1_burst"] == os.path.join(str(tmp_path), "a.pl")
        assert entries["ue2_burst"] == "/abs/b.pl"

    def test_duplicate_descriptor(self, tmp_path):
        path = tmp_path / "portfolio.txt"
        path.write_text("x = a.pl\nx = b.pl\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_portfolio_file(str(path))

    def test_missing_and_empty(self, tmp_path):
        with pytest.raises(ConfigError):
            load_portfolio_file(str(tmp_path / "none.txt"))
        empty = tmp_path / "empty.txt"
        empty.write_text("# nothing\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_portfolio_file(str(empty))
