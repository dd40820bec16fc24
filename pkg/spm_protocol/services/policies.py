"""
ベースラインMACプロトコル（S-ALOHA、S-ALOHA BEB）と常時Silence方策
"""
from typing import List, Optional

import numpy as np
import structlog

from spm_protocol.services.mac_env import (
    ActionPair,
    BasePolicy,
    CycleOutcome,
    EnvState,
    N_UES,
    UeAction,
)

logger = structlog.get_logger(__name__)


class SilentPolicy(BasePolicy):
    name = "silent"

    def act(self, state: EnvState) -> ActionPair:
        return (UeAction.SILENCE, UeAction.SILENCE)


class SAlohaPolicy(BasePolicy):
    """
    Slotted ALOHA: バッファが空でないUEは確率pでAccessする。Discardはしない。
    乱数は毎サイクル2つ引く（バッファが空でも）ので、同じシードなら引き出し列が揃う。
    """

    name = "aloha"

    def __init__(self, p: float = 0.5):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"access probability {p} outside [0, 1]")
        self.p = p
        self.rng = np.random.default_rng(0)

    def reset(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def act(self, state: EnvState) -> ActionPair:
        draws = self.rng.random(N_UES)
        return tuple(
            UeAction.ACCESS if state.buffers[i] > 0 and draws[i] < self.p else UeAction.SILENCE
            for i in range(N_UES)
        )


class BebPolicy(BasePolicy):
    """
    S-ALOHA with binary exponential backoff。

    各UEはコンテンションウィンドウWとバックオフカウンタを持つ。
    カウンタが0でバッファが空でなければAccessする（持続的アクセス）。
    衝突NACKのたびに W ← min(base·W, w_max) とし、[0, W−1] から一様にカウンタを引き直す。
    ACKでWは1に戻る。ブロック誤りによるNACKではWを変えない。
    """

    name = "beb"

    def __init__(self, base: int = 2, w_max: int = 16):
        if base < 2:
            raise ValueError("BEB base must be >= 2")
        if w_max < 1:
            raise ValueError("w_max must be >= 1")
        self.base = base
        self.w_max = w_max
        self.rng = np.random.default_rng(0)
        self.windows: List[int] = [1] * N_UES
        self.counters: List[int] = [0] * N_UES

    def reset(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.windows = [1] * N_UES
        self.counters = [0] * N_UES

    def act(self, state: EnvState) -> ActionPair:
        actions = []
        for i in range(N_UES):
            if self.counters[i] > 0:
                self.counters[i] -= 1
                actions.append(UeAction.SILENCE)
            elif state.buffers[i] > 0:
                actions.append(UeAction.ACCESS)
            else:
                actions.append(UeAction.SILENCE)
        return tuple(actions)

    def observe(self, state: EnvState, actions: ActionPair, outcome: CycleOutcome) -> None:
        events = outcome.events
        for i in events.accessors:
            if events.collision:
                self.windows[i] = min(self.base * self.windows[i], self.w_max)
                self.counters[i] = int(self.rng.integers(0, self.windows[i]))
            elif events.acked_ue == i:
                self.windows[i] = 1


def make_baseline(name: str, aloha_p: float = 0.5, beb_base: int = 2, beb_w_max: int = 16) -> Optional[BasePolicy]:
    """名前からベースライン方策を作る。該当しなければNone"""
    if name == "aloha":
        return SAlohaPolicy(aloha_p)
    if name == "beb":
        return BebPolicy(beb_base, beb_w_max)
    if name == "silent":
        return SilentPolicy()
    return None


def s_aloha_policy(p: float = 0.5) -> SAlohaPolicy:
    return SAlohaPolicy(p)


def s_aloha_beb_policy(base: int = 2, w_max: int = 16) -> BebPolicy:
    return BebPolicy(base, w_max)
