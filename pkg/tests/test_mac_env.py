"""
MAC環境のテスト

到着・チャネル解決・報酬・エピソード実行と保存則
"""
import numpy as np
import pytest

from spm_protocol.config import EnvConfig
from spm_protocol.errors import InvalidActionError
from spm_protocol.services.mac_env import (
    BsObservation,
    EnvState,
    MacEnvironment,
    ObservationKind,
    UeAction,
    apply_arrivals,
    conservation_holds,
    derive_rng,
    resolve_cycle,
    run_episode,
)
from spm_protocol.services.policies import SAlohaPolicy, SilentPolicy

S, A, D = UeAction.SILENCE, UeAction.ACCESS, UeAction.DISCARD


class TestUeAction:
    """UeAction テスト"""

    def test_symbols(self):
        """記号 S/A/D と整数値の対応"""
        assert [a.symbol for a in UeAction] == ["S", "A", "D"]
        assert UeAction.from_symbol("D") == D

    def test_ack_requires_valid_ue(self):
        """ACKは有効なUEインデックスを持つ"""
        with pytest.raises(ValueError):
            BsObservation(ObservationKind.ACK, 5)
        assert str(BsObservation(ObservationKind.ACK, 1)) == "ACK2"


class TestArrivals:
    """apply_arrivals テスト"""

    def test_zero_rate_keeps_buffers(self):
        """到着率0ではバッファが変わらない"""
        config = EnvConfig(lam=(0.0, 0.0))
        state = EnvState(buffers=(2, 3))
        after = apply_arrivals(state, config, np.random.default_rng(0))
        assert after.buffers == (2, 3)
        assert after.arrived_total == (0, 0)

    def test_full_buffer_overflows(self):
        """満杯のバッファへの到着はオーバーフローとして数える"""
        config = EnvConfig(lam=(1.0, 1.0), b_max=5)
        state = EnvState(buffers=(5, 0))
        after = apply_arrivals(state, config, np.random.default_rng(0))
        assert after.buffers == (5, 1)
        assert after.dropped_total == (1, 0)
        assert after.arrived_total == (1, 1)

    def test_d_max_caps_arrivals(self):
        """累計到着数がd_maxに達したUEには到着しない"""
        config = EnvConfig(lam=(1.0, 1.0), d_max=3)
        state = EnvState(arrived_total=(3, 2))
        after = apply_arrivals(state, config, np.random.default_rng(0))
        assert after.arrived_total == (3, 3)
        assert after.buffers == (0, 1)

    def test_empirical_rate(self):
        """λ=0.5 の到着頻度は10000サイクルで0.5±0.02に収まる"""
        config = EnvConfig(lam=(0.5, 0.5))
        rng = np.random.default_rng(42)
        counts = np.zeros(2)
        for _ in range(10_000):
            counts += apply_arrivals(EnvState(), config, rng).arrived_total
        assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)


class TestResolveCycle:
    """resolve_cycle テスト"""

    def setup_method(self):
        self.config = EnvConfig(eps_block=0.0, rho1=5.0, rho2=5.0)
        self.state = EnvState(buffers=(2, 2))
        self.rng = np.random.default_rng(0)

    def test_single_access_is_acked(self):
        """1台だけAccessするとACKされ報酬はρ1"""
        out = resolve_cycle(self.state, (A, S), self.config, self.rng)
        assert str(out.observation) == "ACK1"
        assert out.reward == 5.0
        assert out.next_state.buffers == (1, 2)
        assert out.events.acked_ue == 0

    def test_collision(self):
        """両方がAccessすると衝突、NACK、報酬−1、両方のSDUが消える"""
        out = resolve_cycle(self.state, (A, A), self.config, self.rng)
        assert out.observation.kind == ObservationKind.NACK
        assert out.events.collision
        assert out.reward == -1.0
        assert out.next_state.buffers == (1, 1)

    def test_discard_penalty(self):
        """Discardは−ρ2、バッファが1減る"""
        out = resolve_cycle(self.state, (D, S), self.config, self.rng)
        assert out.reward == -5.0
        assert out.next_state.buffers == (1, 2)
        assert out.observation.kind == ObservationKind.IDLE

    def test_ack_and_discard_combine(self):
        """ACKとDiscardが同時に起きると ρ1 − ρ2"""
        out = resolve_cycle(self.state, (A, D), self.config, self.rng)
        assert out.reward == 0.0

    def test_idle_reward(self):
        """何も起きないサイクルは−1"""
        out = resolve_cycle(self.state, (S, S), self.config, self.rng)
        assert out.observation.kind == ObservationKind.IDLE
        assert out.reward == -1.0

    def test_block_error(self):
        """ε=1では単独Accessも失敗し、SDUは再送されない"""
        config = EnvConfig(eps_block=1.0)
        out = resolve_cycle(self.state, (S, A), config, self.rng)
        assert out.observation.kind == ObservationKind.NACK
        assert out.events.block_error and not out.events.collision
        assert out.next_state.buffers == (2, 1)

    def test_invalid_action_on_empty_buffer(self):
        """空バッファでのAccessは InvalidActionError"""
        with pytest.raises(InvalidActionError) as exc:
            resolve_cycle(EnvState(buffers=(0, 1)), (A, S), self.config, self.rng)
        assert exc.value.ue == 0


class TestEpisode:
    """run_episode テスト"""

    def test_silent_policy(self):
        """常にSilenceなら goodput 0、衝突0"""
        _, report = run_episode(SilentPolicy(), EnvConfig(), derive_rng(1, 0))
        assert report.goodput == 0.0
        assert report.n_c == 0
        assert report.total_reward == -report.t_max

    def test_always_access_collides_every_cycle(self):
        """λ=1で両UEが常にAccessすると毎サイクル衝突する"""
        config = EnvConfig(lam=(1.0, 1.0), t_max=24, d_max=24)

        def always_access(state):
            return tuple(A if b > 0 else S for b in state.buffers)

        _, report = run_episode(always_access, config, derive_rng(3, 0))
        assert report.n_c == config.t_max
        assert report.goodput == 0.0

    def test_invalid_policy_propagates(self):
        """不正な行動を返す方策のエラーはそのまま伝播する"""
        config = EnvConfig(lam=(0.0, 0.0))
        with pytest.raises(InvalidActionError):
            run_episode(lambda state: (A, S), config, derive_rng(0, 0))

    def test_conservation_and_goodput_identity(self):
        """到着 = 送信 + 破棄 + オーバーフロー + 残り、goodput = n_R / t_max"""
        config = EnvConfig(lam=(0.7, 0.4), b_max=2, t_max=60, d_max=40)
        for seed in range(5):
            trace, report = run_episode(SAlohaPolicy(0.3), config, derive_rng(seed, 0), derive_rng(seed, 1))
            sent = tuple(sum(getattr(r, f"a{i + 1}") == "A" for r in trace.rows) for i in range(2))
            discarded = tuple(sum(getattr(r, f"a{i + 1}") == "D" for r in trace.rows) for i in range(2))
            assert conservation_holds(trace.final_state, sent, discarded)
            assert report.goodput == report.n_r / config.t_max
            acks = sum(r.obs.startswith("ACK") for r in trace.rows)
            assert acks == report.n_r

    def test_deterministic_replay(self):
        """同じシードなら同じトレース"""
        config = EnvConfig(lam=(0.5, 0.5), eps_block=0.1)
        first, _ = run_episode(SAlohaPolicy(0.5), config, derive_rng(9, 0), derive_rng(9, 1))
        second, _ = run_episode(SAlohaPolicy(0.5), config, derive_rng(9, 0), derive_rng(9, 1))
        assert first.as_records() == second.as_records()

    def test_buffers_stay_in_bounds(self):
        """到達するすべての状態で 0 ≤ b_i ≤ b_max"""
        config = EnvConfig(lam=(0.9, 0.9), b_max=3, t_max=50, d_max=50)
        trace, _ = run_episode(SAlohaPolicy(0.2), config, derive_rng(2, 0), derive_rng(2, 1))
        assert all(0 <= r.b1 <= 3 and 0 <= r.b2 <= 3 for r in trace.rows)


class TestMacEnvironment:
    """step型ラッパーのテスト"""

    def test_step_until_done(self):
        """t_maxステップで終了し、それ以上は進めない"""
        config = EnvConfig(t_max=5)
        env = MacEnvironment(config, derive_rng(0, 0))
        env.reset()
        done = False
        steps = 0
        while not done:
            _, _, done = env.step((S, S))
            steps += 1
        assert steps == 5
        with pytest.raises(RuntimeError):
            env.step((S, S))
