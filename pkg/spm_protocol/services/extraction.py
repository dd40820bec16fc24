"""
NPM抽出（NPM extract）

学習済みNPMをシミュレータとして状態ドメイン上で実行し、
Input/UCM/DCM/Action の語彙とその間の有向接続からなる ProtocolGraph を作る。
"""
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
import structlog

from spm_protocol.config import Weighting
from spm_protocol.errors import EmptyDomainError, NoRuleError
from spm_protocol.services.episodic_memory import EpisodicMemory
from spm_protocol.services.mac_env import N_UES, UeAction, derive_rng, run_episode
from spm_protocol.services.neural_protocol import NPModel, NpmPolicy, full_cycle_forward

logger = structlog.get_logger(__name__)

State = Tuple[int, int]


class VocabKind(str, Enum):
    INPUT = "b"
    UCM = "u"
    DCM = "d"
    ACTION = "a"

    @property
    def order(self) -> int:
        return "buda".index(self.value)


# 許される接続（段を飛ばさない）
STAGE_PAIRS = {
    (VocabKind.INPUT, VocabKind.UCM),
    (VocabKind.UCM, VocabKind.DCM),
    (VocabKind.DCM, VocabKind.ACTION),
}

VOCAB_ID_RE = re.compile(r"^([buda])([1-9]\d*)_(\d+|[SAD])$")


def make_id(kind: VocabKind, owner: int, index) -> str:
    """語彙ID。ownerは0始まりで受け取り、IDには1始まりで書く（例: u1_3, a2_S）"""
    return f"{kind.value}{owner + 1}_{index}"


def parse_id(vocab_id: str) -> Tuple[VocabKind, int, str]:
    m = VOCAB_ID_RE.match(vocab_id)
    if not m:
        raise ValueError(f"malformed vocabulary id {vocab_id!r}")
    kind = VocabKind(m.group(1))
    index = m.group(3)
    if kind == VocabKind.ACTION and not index.isalpha():
        raise ValueError(f"action vocabulary must end in S, A or D: {vocab_id!r}")
    if kind != VocabKind.ACTION and not index.isdigit():
        raise ValueError(f"{kind.name} vocabulary must end in a number: {vocab_id!r}")
    return kind, int(m.group(2)) - 1, index


def vocab_sort_key(vocab_id: str) -> Tuple[int, int, int]:
    """(種別, UE, 番号) の数値順。Actionは S < A < D"""
    kind, owner, index = parse_id(vocab_id)
    rank = UeAction.from_symbol(index).value if kind == VocabKind.ACTION else int(index)
    return kind.order, owner, rank


def activation_pattern(v) -> Tuple[int, ...]:
    """Heaviside: v_k > 0 なら1"""
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.isnan(v)):
        raise ValueError("activation vector contains NaN")
    return tuple(int(x) for x in (v > 0))


@dataclass(frozen=True)
class Vocabulary:
    """
    語彙。payloadは Input ならレベル、Action なら行動記号、
    UCM/DCM なら代表活性ベクトル（マージ後はパターン）。
    """
    id: str
    kind: VocabKind
    owner: int
    payload: Optional[Tuple] = None
    merged: bool = False

    @property
    def is_input(self) -> bool:
        return self.kind == VocabKind.INPUT

    @property
    def is_ucm(self) -> bool:
        return self.kind == VocabKind.UCM

    @property
    def is_dcm(self) -> bool:
        return self.kind == VocabKind.DCM

    @property
    def is_action(self) -> bool:
        return self.kind == VocabKind.ACTION

    @property
    def pattern(self) -> Optional[Tuple[int, ...]]:
        if self.kind not in (VocabKind.UCM, VocabKind.DCM) or self.payload is None:
            return None
        return tuple(self.payload) if self.merged else activation_pattern(self.payload)


@dataclass(frozen=True)
class Connection:
    tail: str
    head: str
    count: int


@dataclass
class StateDomain:
    """観測された (b1, b2) と訪問回数"""
    visits: Dict[State, int]

    def __post_init__(self):
        self.visits = {tuple(map(int, s)): int(c) for s, c in sorted(self.visits.items())}

    @classmethod
    def grid(cls, b_max: int) -> "StateDomain":
        return cls({(b1, b2): 1 for b1 in range(b_max + 1) for b2 in range(b_max + 1)})

    @classmethod
    def from_states(cls, states: Iterable[State]) -> "StateDomain":
        visits: Dict[State, int] = {}
        for s in states:
            visits[tuple(s)] = visits.get(tuple(s), 0) + 1
        return cls(visits)

    @property
    def states(self) -> List[State]:
        return list(self.visits)

    def __len__(self) -> int:
        return len(self.visits)

    def __contains__(self, state) -> bool:
        return tuple(state) in self.visits

    def weight(self, state: State, weighting: Weighting) -> float:
        return float(self.visits[tuple(state)]) if weighting == Weighting.EMPIRICAL else 1.0

    @property
    def total_visits(self) -> int:
        return sum(self.visits.values())


@dataclass(frozen=True)
class StateChain:
    """1状態ぶんの語彙の連鎖（UE順）: b_j → u_j → d_i → a_i"""
    inputs: Tuple[str, str]
    ucms: Tuple[str, str]
    dcms: Tuple[str, str]
    actions: Tuple[str, str]


@dataclass
class ProtocolGraph:
    vocabularies: Dict[str, Vocabulary]
    connections: Dict[Tuple[str, str], int]
    domain: StateDomain
    chains: Dict[State, StateChain] = field(default_factory=dict)
    raw_index: Dict[Tuple[str, int, bytes], str] = field(default_factory=dict)
    aliases: Dict[str, str] = field(default_factory=dict)

    def connection_list(self) -> List[Connection]:
        return [
            Connection(t, h, c)
            for (t, h), c in sorted(self.connections.items(), key=lambda kv: (vocab_sort_key(kv[0][0]), vocab_sort_key(kv[0][1])))
        ]

    def of_kind(self, kind: VocabKind, owner: Optional[int] = None) -> List[Vocabulary]:
        found = [v for v in self.vocabularies.values() if v.kind == kind and (owner is None or v.owner == owner)]
        return sorted(found, key=lambda v: vocab_sort_key(v.id))

    def successors(self, vocab_id: str) -> frozenset:
        return frozenset(h for (t, h) in self.connections if t == vocab_id)

    def count_of(self, kind: VocabKind, owner: Optional[int] = None) -> int:
        return len(self.of_kind(kind, owner))

    def resolve(self, vocab_id: str) -> str:
        """抽出時のIDを現在の（マージ後の）IDに引き直す"""
        return self.aliases.get(vocab_id, vocab_id)

    def chain_for(self, model: Optional[NPModel], state: State) -> StateChain:
        """
        状態の連鎖を現在の語彙IDで返す。抽出済みの状態は記録から、
        そうでなければモデルを再実行して生ベクトルを引く。
        """
        state = tuple(state)
        raw = self.chains.get(state)
        if raw is None:
            if model is None:
                raise NoRuleError(state, "state was not part of the extraction domain")
            raw = self._simulate(model, state)
        return StateChain(
            inputs=raw.inputs,
            ucms=tuple(self.resolve(u) for u in raw.ucms),
            dcms=tuple(self.resolve(d) for d in raw.dcms),
            actions=raw.actions,
        )

    def _simulate(self, model: NPModel, state: State) -> StateChain:
        fwd = full_cycle_forward(model, state)
        ucms, dcms = [], []
        for i in range(N_UES):
            for kind, vec, out in ((VocabKind.UCM, fwd.ucms[i], ucms), (VocabKind.DCM, fwd.dcms[i], dcms)):
                key = (kind.value, i, np.asarray(vec, dtype=np.float64).tobytes())
                if key not in self.raw_index:
                    raise NoRuleError(state, f"{kind.name} output of UE{i + 1} was never extracted")
                out.append(self.raw_index[key])
        return StateChain(
            inputs=tuple(make_id(VocabKind.INPUT, i, state[i]) for i in range(N_UES)),
            ucms=tuple(ucms), dcms=tuple(dcms),
            actions=tuple(make_id(VocabKind.ACTION, i, fwd.actions[i].symbol) for i in range(N_UES)),
        )

    def check_layering(self) -> None:
        for (t, h), c in self.connections.items():
            if t not in self.vocabularies or h not in self.vocabularies:
                raise ValueError(f"dangling connection {t} -> {h}")
            if (self.vocabularies[t].kind, self.vocabularies[h].kind) not in STAGE_PAIRS:
                raise ValueError(f"connection {t} -> {h} skips a stage")
            if c < 1:
                raise ValueError(f"connection {t} -> {h} has count {c}")

    def copy(self) -> "ProtocolGraph":
        return replace(
            self,
            vocabularies=dict(self.vocabularies),
            connections=dict(self.connections),
            aliases=dict(self.aliases),
        )


def observed_state_domain(
    memory: Optional[EpisodicMemory],
    model: Optional[NPModel] = None,
    env_config=None,
    fallback_episodes: int = 0,
    seed: int = 0,
) -> StateDomain:
    """
    エピソード記憶に現れた (b1, b2) を訪問回数つきで返す。
    記憶が空で fallback_episodes > 0 なら、モデルの貪欲方策で数エピソード走らせて集める。
    """
    if memory is not None and len(memory) > 0:
        return StateDomain(dict(memory.state_visits()))
    if fallback_episodes <= 0 or model is None or env_config is None:
        raise EmptyDomainError("episodic memory is empty and the test-trial fallback is disabled")

    logger.info("domain.fallback", episodes=fallback_episodes)
    states: List[State] = []
    for k in range(fallback_episodes):
        trace, _ = run_episode(NpmPolicy(model), env_config, derive_rng(seed, k, 0), derive_rng(seed, k, 1))
        states.extend((r.b1, r.b2) for r in trace.rows)
    return StateDomain.from_states(states)


def extract_graph(model: NPModel, domain: StateDomain) -> ProtocolGraph:
    """
    ドメインの各状態で full_cycle_forward を実行し、UCM/DCMベクトルを完全一致で重複排除して語彙化する。
    IDはソート済み状態の走査で初出順に振る。状態ごとに各UEの連鎖 b_j → u_j → d_i → a_i を1回数える。
    """
    if len(domain) == 0:
        raise EmptyDomainError("cannot extract from an empty state domain")

    vocabularies: Dict[str, Vocabulary] = {}
    connections: Dict[Tuple[str, str], int] = {}
    raw_index: Dict[Tuple[str, int, bytes], str] = {}
    chains: Dict[State, StateChain] = {}
    counters = {(kind, i): 0 for kind in (VocabKind.UCM, VocabKind.DCM) for i in range(N_UES)}

    def cm_vocab(kind: VocabKind, ue: int, vec: np.ndarray) -> str:
        vec = np.asarray(vec, dtype=np.float64)
        key = (kind.value, ue, vec.tobytes())
        if key not in raw_index:
            counters[(kind, ue)] += 1
            vid = make_id(kind, ue, counters[(kind, ue)])
            raw_index[key] = vid
            vocabularies[vid] = Vocabulary(vid, kind, ue, tuple(float(x) for x in vec))
        return raw_index[key]

    def fixed_vocab(kind: VocabKind, ue: int, index, payload) -> str:
        vid = make_id(kind, ue, index)
        vocabularies.setdefault(vid, Vocabulary(vid, kind, ue, (payload,)))
        return vid

    def connect(tail: str, head: str) -> None:
        connections[(tail, head)] = connections.get((tail, head), 0) + 1

    for state in domain.states:
        fwd = full_cycle_forward(model, state)
        b = [fixed_vocab(VocabKind.INPUT, i, state[i], state[i]) for i in range(N_UES)]
        u = [cm_vocab(VocabKind.UCM, i, fwd.ucms[i]) for i in range(N_UES)]
        d = [cm_vocab(VocabKind.DCM, i, fwd.dcms[i]) for i in range(N_UES)]
        a = [fixed_vocab(VocabKind.ACTION, i, fwd.actions[i].symbol, fwd.actions[i].symbol) for i in range(N_UES)]
        for j in range(N_UES):
            connect(b[j], u[j])
        for i in range(N_UES):
            for j in range(N_UES):
                connect(u[j], d[i])
            connect(d[i], a[i])
        chains[state] = StateChain(tuple(b), tuple(u), tuple(d), tuple(a))

    graph = ProtocolGraph(vocabularies, connections, domain, chains, raw_index, {})
    logger.info(
        "extract.done",
        states=len(domain),
        ucm=graph.count_of(VocabKind.UCM),
        dcm=graph.count_of(VocabKind.DCM),
        connections=len(connections),
    )
    return graph


def render_graph_text(graph: ProtocolGraph) -> str:
    """段ごとに語彙と出ていく接続を並べたテキスト表示"""
    lines = []
    for kind, title in ((VocabKind.INPUT, "Input"), (VocabKind.UCM, "UCM"), (VocabKind.DCM, "DCM"), (VocabKind.ACTION, "Action")):
        lines.append(f"[{title}]")
        for v in graph.of_kind(kind):
            succ = sorted(graph.successors(v.id), key=vocab_sort_key)
            label = v.id
            if v.pattern is not None:
                label += " " + "".join(str(x) for x in v.pattern)
            if succ:
                edges = ", ".join(f"{h}({graph.connections[(v.id, h)]})" for h in succ)
                lines.append(f"  {label} -> {edges}")
            else:
                lines.append(f"  {label}")
    return "\n".join(lines) + "\n"


def graph_tables(graph: ProtocolGraph) -> Tuple[List[Mapping], List[Mapping]]:
    """(辺リスト, 語彙表) のCSV行"""
    edges = [{"tail_id": c.tail, "head_id": c.head, "count": c.count} for c in graph.connection_list()]
    vocab = []
    for v in sorted(graph.vocabularies.values(), key=lambda v: vocab_sort_key(v.id)):
        pattern = v.pattern
        vocab.append({
            "id": v.id,
            "kind": v.kind.name.lower(),
            "ue": v.owner + 1,
            "pattern": "".join(str(x) for x in pattern) if pattern is not None else "",
            "payload": " ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in (v.payload or ())),
            "merged": int(v.merged),
        })
    return edges, vocab
