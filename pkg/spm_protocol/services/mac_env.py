"""
2UE・1BSのMAC競合環境

1通信サイクル = SDU到着 → 方策による行動選択 → チャネル解決（衝突・ブロック誤り）→ 報酬。
同じ (config, seed, policy) からは常に同じトレースが得られる。
"""
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import structlog

from spm_protocol.config import EnvConfig
from spm_protocol.errors import InvalidActionError
from spm_protocol.kpi import KpiReport

logger = structlog.get_logger(__name__)

N_UES = 2
BufferPair = Tuple[int, int]


class UeAction(IntEnum):
    """UEの行動。整数値はQ値出力のインデックスであり、同点時の優先順 S < A < D でもある"""
    SILENCE = 0
    ACCESS = 1
    DISCARD = 2

    @property
    def symbol(self) -> str:
        return "SAD"[self.value]

    @classmethod
    def from_symbol(cls, symbol: str) -> "UeAction":
        return cls("SAD".index(symbol))


ActionPair = Tuple[UeAction, UeAction]


class ObservationKind(str, Enum):
    IDLE = "IDLE"
    ACK = "ACK"
    NACK = "NACK"


@dataclass(frozen=True)
class BsObservation:
    """BSでの観測。ACKの場合は受信したUEのインデックス（0始まり）を持つ"""
    kind: ObservationKind
    ue: Optional[int] = None

    def __post_init__(self):
        if self.kind == ObservationKind.ACK and self.ue not in range(N_UES):
            raise ValueError(f"ACK requires a valid UE index, got {self.ue}")

    def __str__(self) -> str:
        return f"ACK{self.ue + 1}" if self.kind == ObservationKind.ACK else self.kind.value


IDLE = BsObservation(ObservationKind.IDLE)
NACK = BsObservation(ObservationKind.NACK)


@dataclass(frozen=True)
class EnvState:
    buffers: BufferPair = (0, 0)
    arrived_total: BufferPair = (0, 0)
    dropped_total: BufferPair = (0, 0)
    cycle: int = 0


@dataclass(frozen=True)
class CycleEvents:
    collision: bool = False
    block_error: bool = False
    discards: int = 0
    overflow_drops: int = 0
    accessors: Tuple[int, ...] = ()
    acked_ue: Optional[int] = None


@dataclass(frozen=True)
class CycleOutcome:
    observation: BsObservation
    reward: float
    next_state: EnvState
    events: CycleEvents = field(default_factory=CycleEvents)


def derive_rng(seed: int, *indices: int) -> np.random.Generator:
    """(seed, エピソード番号, ...) から独立な乱数ストリームを作る"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(i) for i in indices]]))


def apply_arrivals(state: EnvState, config: EnvConfig, rng: np.random.Generator) -> EnvState:
    """
    各UEにBernoulli(λ_i)でSDUが到着する。累計到着数がd_maxに達したUEには到着しない。
    バッファ満杯時の到着SDUは破棄（オーバーフロー）されるが、到着数には数える。
    """
    draws = rng.random(N_UES)
    buffers = list(state.buffers)
    arrived = list(state.arrived_total)
    dropped = list(state.dropped_total)
    for i in range(N_UES):
        if arrived[i] >= config.d_max or draws[i] >= config.lam[i]:
            continue
        arrived[i] += 1
        if buffers[i] >= config.b_max:
            dropped[i] += 1
        else:
            buffers[i] += 1
    return replace(state, buffers=tuple(buffers), arrived_total=tuple(arrived), dropped_total=tuple(dropped))


def check_actions(state: EnvState, actions: ActionPair) -> None:
    for i, action in enumerate(actions):
        if action != UeAction.SILENCE and state.buffers[i] < 1:
            raise InvalidActionError(i, action.symbol, state.buffers[i])


def resolve_cycle(state: EnvState, actions: ActionPair, config: EnvConfig, rng: np.random.Generator) -> CycleOutcome:
    """
    行動ペアをチャネルで解決する。再送はない: 衝突・ブロック誤りでもSDUはバッファから消える。
    報酬 = ρ1·[ACK] − ρ2·(Discard数)、どちらも起きなければ −1。
    """
    actions = (UeAction(actions[0]), UeAction(actions[1]))
    check_actions(state, actions)

    buffers = list(state.buffers)
    discards = 0
    accessors = []
    for i, action in enumerate(actions):
        if action == UeAction.DISCARD:
            buffers[i] -= 1
            discards += 1
        elif action == UeAction.ACCESS:
            buffers[i] -= 1
            accessors.append(i)

    collision = False
    block_error = False
    if len(accessors) == 2:
        collision = True
        observation = NACK
    elif len(accessors) == 1:
        block_error = bool(rng.random() < config.eps_block)
        observation = NACK if block_error else BsObservation(ObservationKind.ACK, accessors[0])
    else:
        observation = IDLE

    acked = observation.kind == ObservationKind.ACK
    reward = config.rho1 * acked - config.rho2 * discards
    if not acked and discards == 0:
        reward = -1.0

    next_state = replace(state, buffers=tuple(buffers), cycle=state.cycle + 1)
    events = CycleEvents(
        collision=collision, block_error=block_error, discards=discards,
        accessors=tuple(accessors), acked_ue=observation.ue if acked else None,
    )
    return CycleOutcome(observation=observation, reward=float(reward), next_state=next_state, events=events)


class BasePolicy:
    """環境に渡すプロトコルの共通インタフェース"""

    name = "policy"

    def reset(self, rng: np.random.Generator) -> None:
        """エピソード開始時に呼ばれる。方策専用の乱数ストリームを受け取る"""

    def act(self, state: EnvState) -> ActionPair:
        raise NotImplementedError

    def observe(self, state: EnvState, actions: ActionPair, outcome: CycleOutcome) -> None:
        """サイクル結果の通知（ベースラインのバックオフ用）"""

    @property
    def last_messages(self) -> Optional[dict]:
        """直近サイクルのCM（UCM/DCM）。公開しない方策はNone"""
        return None


class FunctionPolicy(BasePolicy):
    """状態→行動ペアの関数をそのまま方策として使う"""

    def __init__(self, fn: Callable[[EnvState], ActionPair], name: str = "function"):
        self.fn = fn
        self.name = name

    def act(self, state: EnvState) -> ActionPair:
        return self.fn(state)


PolicyLike = Union[BasePolicy, Callable[[EnvState], ActionPair]]


def as_policy(policy: PolicyLike) -> BasePolicy:
    return policy if isinstance(policy, BasePolicy) else FunctionPolicy(policy)


class MacEnvironment:
    """
    step型の環境ラッパー。reset() は到着処理後の最初の状態を返し、
    step() はチャネル解決の後、次サイクルの到着まで進めた状態を返す。
    """

    def __init__(self, config: EnvConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.state = EnvState()
        self._pending_drops = 0

    def _arrive(self, state: EnvState) -> EnvState:
        before = sum(state.dropped_total)
        state = apply_arrivals(state, self.config, self.rng)
        self._pending_drops = sum(state.dropped_total) - before
        return state

    def reset(self) -> EnvState:
        self.state = self._arrive(EnvState())
        return self.state

    @property
    def done(self) -> bool:
        return self.state.cycle >= self.config.t_max

    def step(self, actions: ActionPair) -> Tuple[EnvState, CycleOutcome, bool]:
        if self.done:
            raise RuntimeError("episode already finished; call reset()")
        outcome = resolve_cycle(self.state, actions, self.config, self.rng)
        outcome = replace(outcome, events=replace(outcome.events, overflow_drops=self._pending_drops))
        state = outcome.next_state
        done = state.cycle >= self.config.t_max
        if not done:
            state = self._arrive(state)
        self.state = state
        return state, outcome, done


@dataclass(frozen=True)
class TraceRow:
    cycle: int
    b1: int
    b2: int
    a1: str
    a2: str
    obs: str
    reward: float
    messages: Optional[dict] = None


@dataclass
class EpisodeTrace:
    rows: List[TraceRow] = field(default_factory=list)
    final_state: Optional[EnvState] = None

    TRACE_COLUMNS = ("cycle", "b1", "b2", "a1", "a2", "obs", "reward")

    def as_records(self) -> List[dict]:
        return [{c: getattr(r, c) for c in self.TRACE_COLUMNS} for r in self.rows]


def run_episode(
    policy: PolicyLike,
    config: EnvConfig,
    rng: np.random.Generator,
    policy_rng: Optional[np.random.Generator] = None,
) -> Tuple[EpisodeTrace, KpiReport]:
    """
    t_maxサイクルを (到着 → 方策 → 解決) で実行し、トレースとKPIを返す。
    方策が不正な行動を返した場合は InvalidActionError がそのまま伝播する。
    """
    policy = as_policy(policy)
    if policy_rng is None:
        policy_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
    policy.reset(policy_rng)

    env = MacEnvironment(config, rng)
    state = env.reset()
    trace = EpisodeTrace()
    n_r = n_c = n_d = n_block = n_overflow = n_access = 0
    total_reward = 0.0
    done = False
    while not done:
        actions = policy.act(state)
        actions = (UeAction(actions[0]), UeAction(actions[1]))
        next_state, outcome, done = env.step(actions)
        policy.observe(state, actions, outcome)

        events = outcome.events
        n_r += outcome.observation.kind == ObservationKind.ACK
        n_c += events.collision
        n_d += events.discards
        n_block += events.block_error
        n_overflow += events.overflow_drops
        n_access += len(events.accessors)
        total_reward += outcome.reward
        trace.rows.append(TraceRow(
            cycle=state.cycle, b1=state.buffers[0], b2=state.buffers[1],
            a1=actions[0].symbol, a2=actions[1].symbol, obs=str(outcome.observation),
            reward=outcome.reward, messages=policy.last_messages,
        ))
        state = next_state

    trace.final_state = state
    report = KpiReport.from_counts(
        t_max=config.t_max, n_r=n_r, n_c=n_c, n_d=n_d, total_reward=total_reward,
        n_block_errors=n_block, n_overflow=n_overflow, n_access=n_access,
    )
    return trace, report


def conservation_holds(state: EnvState, sent: BufferPair, discarded: BufferPair) -> bool:
    """到着 = 送信 + 破棄 + オーバーフロー + 残りバッファ（UEごと）"""
    return all(
        state.arrived_total[i] == sent[i] + discarded[i] + state.dropped_total[i] + state.buffers[i]
        for i in range(N_UES)
    )
