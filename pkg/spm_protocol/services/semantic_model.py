"""
意味論的プロトコルモデル（SPM）の構築

抽出グラフの語彙マージ（活性パターン / 接続）、節の真理確率の経験的推定、
規則の定式化、すべての規則の和集合としてのSPM組み立てを行う。
"""
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import structlog

from spm_protocol.config import DomainSource, MergeMode, MergeOptions, Weighting
from spm_protocol.errors import EmptyDomainError, NoRuleError
from spm_protocol.services.episodic_memory import EpisodicMemory
from spm_protocol.services.extraction import (
    ProtocolGraph,
    State,
    StateDomain,
    VocabKind,
    Vocabulary,
    extract_graph,
    make_id,
    observed_state_domain,
    parse_id,
    vocab_sort_key,
)
from spm_protocol.services.mac_env import N_UES
from spm_protocol.services.neural_protocol import NPModel

logger = structlog.get_logger(__name__)


class ClauseKind(str, Enum):
    UPLINK = "alpha"
    DOWNLINK = "beta"
    ACTION = "gamma"
    GRANT_FREE = "delta"


_KIND_BY_STAGE = {
    (VocabKind.INPUT, VocabKind.UCM): ClauseKind.UPLINK,
    (VocabKind.UCM, VocabKind.DCM): ClauseKind.DOWNLINK,
    (VocabKind.DCM, VocabKind.ACTION): ClauseKind.ACTION,
    (VocabKind.INPUT, VocabKind.ACTION): ClauseKind.GRANT_FREE,
}


def clause_kind_for(tail: str, head: str) -> ClauseKind:
    """tail/headの語彙種別から節の種類を決める。許されない組はValueError"""
    t_kind, t_owner, _ = parse_id(tail)
    h_kind, h_owner, _ = parse_id(head)
    kind = _KIND_BY_STAGE.get((t_kind, h_kind))
    if kind is None:
        raise ValueError(f"no clause kind connects {tail} to {head}")
    if kind != ClauseKind.DOWNLINK and t_owner != h_owner:
        raise ValueError(f"{kind.value} clause must stay within one UE: {head} :- {tail}")
    return kind


@dataclass(frozen=True)
class Clause:
    """⟨prob :: head :- tail⟩"""
    prob: float
    head: str
    tail: str
    kind: ClauseKind
    ue_pair: Tuple[int, ...]

    @classmethod
    def make(cls, prob: float, head: str, tail: str) -> "Clause":
        if not 0.0 <= prob <= 1.0 or math.isnan(prob):
            raise ValueError(f"clause probability {prob} outside [0, 1]")
        kind = clause_kind_for(tail, head)
        h_owner = parse_id(head)[1]
        t_owner = parse_id(tail)[1]
        ue_pair = (h_owner, t_owner) if kind == ClauseKind.DOWNLINK else (h_owner,)
        return cls(float(prob), head, tail, kind, ue_pair)

    @property
    def key(self) -> Tuple[str, str]:
        return (self.tail, self.head)

    def sort_key(self):
        order = list(ClauseKind).index(self.kind)
        return (order, vocab_sort_key(self.tail), vocab_sort_key(self.head))


@dataclass(frozen=True)
class Rule:
    """R_{i,j}(b): α_j → β(u_j → UE i のDCM) → γ(それらのDCM → 行動)"""
    state: State
    i: int
    j: int
    entailed: Tuple[Clause, ...]


class Spm:
    """
    節集合と語彙表・状態ドメイン・来歴を持つ不変なSPM。
    (tail, head) ごとに節は高々1つ。
    """

    def __init__(
        self,
        clauses: Iterable[Clause],
        vocabularies: Optional[Dict[str, Vocabulary]] = None,
        domain: Optional[StateDomain] = None,
        provenance: Optional[Dict[str, str]] = None,
    ):
        by_key: Dict[Tuple[str, str], Clause] = {}
        for c in clauses:
            if c.key in by_key:
                raise ValueError(f"duplicate clause for {c.head} :- {c.tail}")
            by_key[c.key] = c
        self._clauses = tuple(sorted(by_key.values(), key=Clause.sort_key))
        self._by_key = by_key
        self._by_tail: Dict[str, List[Clause]] = defaultdict(list)
        for c in self._clauses:
            self._by_tail[c.tail].append(c)
        self.domain = domain or StateDomain({})
        self.provenance = dict(provenance or {})
        self.vocabularies = vocabularies if vocabularies is not None else self._vocab_from_clauses()

    def _vocab_from_clauses(self) -> Dict[str, Vocabulary]:
        vocab = {}
        for c in self._clauses:
            for vid in (c.tail, c.head):
                kind, owner, _ = parse_id(vid)
                vocab.setdefault(vid, Vocabulary(vid, kind, owner))
        return dict(sorted(vocab.items(), key=lambda kv: vocab_sort_key(kv[0])))

    @property
    def clauses(self) -> Tuple[Clause, ...]:
        return self._clauses

    def __len__(self) -> int:
        return len(self._clauses)

    def __iter__(self):
        return iter(self._clauses)

    def clause(self, tail: str, head: str) -> Optional[Clause]:
        return self._by_key.get((tail, head))

    def from_tail(self, tail: str, kind: Optional[ClauseKind] = None) -> List[Clause]:
        return [c for c in self._by_tail.get(tail, ()) if kind is None or c.kind == kind]

    def of_kind(self, kind: ClauseKind) -> List[Clause]:
        return [c for c in self._clauses if c.kind == kind]

    def alpha(self, ue: int, level: int) -> Optional[Clause]:
        found = self.from_tail(make_id(VocabKind.INPUT, ue, level), ClauseKind.UPLINK)
        return found[0] if found else None

    def grant_free(self, ue: int, level: int) -> Optional[Clause]:
        found = self.from_tail(make_id(VocabKind.INPUT, ue, level), ClauseKind.GRANT_FREE)
        return found[0] if found else None

    def with_clauses(self, clauses: Iterable[Clause], **provenance: str) -> "Spm":
        return Spm(clauses, self.vocabularies, self.domain, {**self.provenance, **provenance})

    def used_vocabularies(self) -> Dict[str, Vocabulary]:
        ids = {c.head for c in self._clauses} | {c.tail for c in self._clauses}
        return {k: v for k, v in self.vocabularies.items() if k in ids}

    def vocabulary_counts(self) -> Dict[str, int]:
        """UEごと（ucm_ue1 など）とシステム全体（ucm, dcm）の語彙数"""
        counts: Dict[str, int] = {}
        vocab = self.used_vocabularies().values()
        for kind, name in ((VocabKind.UCM, "ucm"), (VocabKind.DCM, "dcm")):
            counts[name] = sum(1 for v in vocab if v.kind == kind)
            for i in range(N_UES):
                counts[f"{name}_ue{i + 1}"] = sum(1 for v in vocab if v.kind == kind and v.owner == i)
        return counts

    def total_vocabularies(self) -> int:
        counts = self.vocabulary_counts()
        return counts["ucm"] + counts["dcm"]

    def cm_bits(self) -> Dict[str, int]:
        """1メッセージあたりのCM長 ceil(log2 |語彙|)（UEごとの語彙数の最大で評価）"""
        counts = self.vocabulary_counts()
        bits = {}
        for name in ("ucm", "dcm"):
            largest = max(counts[f"{name}_ue{i + 1}"] for i in range(N_UES))
            bits[name] = math.ceil(math.log2(largest)) if largest > 1 else 0
        return bits

    def structure(self):
        """構造的同値性の比較用キー"""
        return (
            tuple((c.kind.value, c.head, c.tail, c.prob) for c in self._clauses),
            tuple(self.domain.visits.items()),
            tuple(sorted(self.provenance.items())),
        )

    def __repr__(self) -> str:
        return f"Spm(clauses={len(self._clauses)}, states={len(self.domain)})"


# --- マージ ------------------------------------------------------------


def _raw_ids(graph: ProtocolGraph) -> set:
    ids = set(graph.raw_index.values())
    for chain in graph.chains.values():
        ids.update(chain.ucms)
        ids.update(chain.dcms)
    return ids


def _apply_rename(graph: ProtocolGraph, rename: Dict[str, str], new_vocab: Dict[str, Vocabulary]) -> ProtocolGraph:
    """
    現在のID→新IDの写像をグラフ全体に適用する。並行する接続は件数を合算する。
    new_vocab は新IDの語彙定義（リネームされないものはそのまま引き継ぐ）。
    """
    out = graph.copy()
    out.vocabularies = {}
    for vid, v in graph.vocabularies.items():
        target = rename.get(vid, vid)
        if target in new_vocab:
            out.vocabularies[target] = new_vocab[target]
        elif target == vid:
            out.vocabularies[vid] = v
    out.vocabularies = dict(sorted(out.vocabularies.items(), key=lambda kv: vocab_sort_key(kv[0])))
    connections: Dict[Tuple[str, str], int] = {}
    for (t, h), c in graph.connections.items():
        key = (rename.get(t, t), rename.get(h, h))
        connections[key] = connections.get(key, 0) + c
    out.connections = connections
    out.aliases = {}
    for raw in _raw_ids(graph):
        current = graph.resolve(raw)
        out.aliases[raw] = rename.get(current, current)
    return out


def _merge_groups(graph: ProtocolGraph, groups: Iterable[List[str]], payload_of) -> Tuple[ProtocolGraph, int]:
    """2つ以上の語彙からなるグループを最小IDに統合する。統合された語彙数を返す"""
    rename: Dict[str, str] = {}
    new_vocab: Dict[str, Vocabulary] = {}
    merged = 0
    for members in groups:
        if len(members) < 2:
            continue
        members = sorted(members, key=vocab_sort_key)
        survivor = graph.vocabularies[members[0]]
        new_vocab[survivor.id] = Vocabulary(
            survivor.id, survivor.kind, survivor.owner, payload_of(members), merged=True
        )
        for vid in members[1:]:
            rename[vid] = survivor.id
        merged += len(members) - 1
    if not merged:
        return graph, 0
    return _apply_rename(graph, rename, new_vocab), merged


def merge_activation_aware(graph: ProtocolGraph) -> ProtocolGraph:
    """同じUE・同じ種別で活性パターンが等しいUCM/DCMを統合する。代表値はパターン"""
    groups: Dict[Tuple, List[str]] = defaultdict(list)
    for v in graph.vocabularies.values():
        if v.kind in (VocabKind.UCM, VocabKind.DCM) and v.pattern is not None:
            groups[(v.kind, v.owner, v.pattern)].append(v.id)
    result, merged = _merge_groups(
        graph, groups.values(), lambda members: graph.vocabularies[members[0]].pattern
    )
    logger.debug("merge.activation", merged=merged)
    return result


def _merge_by_successors(graph: ProtocolGraph, kind: VocabKind) -> Tuple[ProtocolGraph, int]:
    groups: Dict[Tuple, List[str]] = defaultdict(list)
    for v in graph.vocabularies.values():
        if v.kind == kind:
            groups[(v.owner, graph.successors(v.id))].append(v.id)
    # 代表パターンは最小IDの語彙のもの
    return _merge_groups(graph, groups.values(), lambda members: graph.vocabularies[members[0]].pattern)


def merge_connection_aware(graph: ProtocolGraph) -> ProtocolGraph:
    """
    行動の後続集合が等しいDCMを統合し、次にDCMの後続集合が等しいUCMを統合する。
    変化がなくなるまで繰り返す。
    """
    rounds = 0
    while True:
        graph, merged_d = _merge_by_successors(graph, VocabKind.DCM)
        graph, merged_u = _merge_by_successors(graph, VocabKind.UCM)
        rounds += 1
        if merged_d == 0 and merged_u == 0:
            break
    logger.debug("merge.connection", rounds=rounds)
    return graph


def canonicalize_ids(graph: ProtocolGraph) -> ProtocolGraph:
    """UCM/DCMのIDを (種別, UE, パターンのビット列) の順に1から振り直す"""
    rename: Dict[str, str] = {}
    new_vocab: Dict[str, Vocabulary] = {}
    for kind in (VocabKind.UCM, VocabKind.DCM):
        for ue in range(N_UES):
            members = graph.of_kind(kind, ue)
            members.sort(key=lambda v: (v.pattern or (), vocab_sort_key(v.id)))
            for k, v in enumerate(members, start=1):
                new_id = make_id(kind, ue, k)
                rename[v.id] = new_id
                new_vocab[new_id] = Vocabulary(new_id, v.kind, v.owner, v.payload, v.merged)
    return _apply_rename(graph, rename, new_vocab)


def merge_graph(graph: ProtocolGraph, mode: MergeMode) -> ProtocolGraph:
    if mode in (MergeMode.ACTIVATION, MergeMode.BOTH):
        graph = merge_activation_aware(graph)
    if mode in (MergeMode.CONNECTION, MergeMode.BOTH):
        graph = merge_connection_aware(graph)
    return canonicalize_ids(graph)


# --- 確率推定と規則 -------------------------------------------------------


def estimate_clause_probabilities(
    graph: ProtocolGraph,
    model: Optional[NPModel],
    domain: StateDomain,
    weighting: Weighting = Weighting.EMPIRICAL,
) -> List[Clause]:
    """
    ドメイン上でNPMを再実行し、マージ後の語彙で共起を数えて節の確率を求める。
        α = 1
        β_{i,j} = co(u_j, d_i) / occ(u_j)
        γ_i     = co(d_i, a_i) / occ(d_i)
    共起が0の節は作らない。
    """
    if len(domain) == 0:
        raise EmptyDomainError("probability estimation needs a non-empty domain")

    alpha: set = set()
    occ_u: Dict[str, float] = defaultdict(float)
    occ_d: Dict[str, float] = defaultdict(float)
    co_beta: Dict[Tuple[str, str], float] = defaultdict(float)
    co_gamma: Dict[Tuple[str, str], float] = defaultdict(float)

    for state in domain.states:
        w = domain.weight(state, weighting)
        chain = graph.chain_for(model, state)
        for j in range(N_UES):
            alpha.add((chain.inputs[j], chain.ucms[j]))
            occ_u[chain.ucms[j]] += w
        for i in range(N_UES):
            for j in range(N_UES):
                co_beta[(chain.ucms[j], chain.dcms[i])] += w
            occ_d[chain.dcms[i]] += w
            co_gamma[(chain.dcms[i], chain.actions[i])] += w

    clauses = [Clause.make(1.0, u, b) for b, u in alpha]
    clauses += [Clause.make(c / occ_u[u], d, u) for (u, d), c in co_beta.items() if c > 0]
    clauses += [Clause.make(c / occ_d[d], a, d) for (d, a), c in co_gamma.items() if c > 0]
    return clauses


def formulate_rule(spm: Spm, b: State, i: int, j: int) -> Rule:
    """α_j(b_j) から始まる規則 R_{i,j}(b)。確率0の節は含めない"""
    alpha = spm.alpha(j, b[j])
    if alpha is None:
        raise NoRuleError(b, f"no uplink clause for UE{j + 1} at level {b[j]}")
    betas = [
        c for c in spm.from_tail(alpha.head, ClauseKind.DOWNLINK)
        if parse_id(c.head)[1] == i and c.prob > 0
    ]
    gammas = [g for beta in betas for g in spm.from_tail(beta.head, ClauseKind.ACTION) if g.prob > 0]
    return Rule(tuple(b), i, j, (alpha, *betas, *gammas))


def rules_union(spm: Spm) -> List[Clause]:
    """ドメインの全状態・全 (i, j) の規則の和集合"""
    seen: Dict[Tuple[str, str], Clause] = {}
    for state in spm.domain.states:
        for i in range(N_UES):
            for j in range(N_UES):
                for c in formulate_rule(spm, state, i, j).entailed:
                    seen.setdefault(c.key, c)
    return list(seen.values())


@dataclass
class SpmBuild:
    """construct_spm の中間成果物（CLIのCSV出力とKPI用）"""
    spm: Spm
    extract: ProtocolGraph
    merged: ProtocolGraph
    domain: StateDomain
    notes: Dict[str, int] = field(default_factory=dict)


def construct_spm(
    model: NPModel,
    memory: Optional[EpisodicMemory],
    options: MergeOptions,
    env_config=None,
    npm_digest: str = "",
    seed: int = 0,
) -> SpmBuild:
    """抽出 → マージ → 確率推定 → 規則の和集合。来歴を記録する"""
    if options.domain_source == DomainSource.GRID:
        # 全グリッド。記憶にある状態は訪問回数、ない状態は重み1
        visits = dict(memory.state_visits()) if memory is not None and len(memory) else {}
        domain = StateDomain({s: visits.get(s, 1) for s in StateDomain.grid(model.b_max).states})
    else:
        domain = observed_state_domain(
            memory, model=model, env_config=env_config,
            fallback_episodes=options.fallback_episodes, seed=seed,
        )

    extract = extract_graph(model, domain)
    provenance = {
        "npm_sha256": npm_digest,
        "merge_mode": options.merge_mode.value,
        "weighting": options.weighting.value,
        "domain_source": options.domain_source.value,
        "samples": str(domain.total_visits),
    }

    if options.merge_mode == MergeMode.NONE:
        merged = canonicalize_ids(extract)
        clauses = [Clause.make(1.0, h, t) for (t, h) in merged.connections]
    else:
        merged = merge_graph(extract, options.merge_mode)
        clauses = estimate_clause_probabilities(merged, model, domain, options.weighting)

    spm = Spm(clauses, merged.vocabularies, domain, provenance)
    if options.merge_mode != MergeMode.NONE:
        spm = spm.with_clauses(rules_union(spm))

    if options.grant_free:
        from spm_protocol.services.inference import add_grant_free

        spm = add_grant_free(spm)

    counts = spm.vocabulary_counts()
    logger.info(
        "spm.constructed",
        merge_mode=options.merge_mode.value,
        clauses=len(spm),
        ucm_extract=extract.count_of(VocabKind.UCM),
        dcm_extract=extract.count_of(VocabKind.DCM),
        ucm=counts["ucm"],
        dcm=counts["dcm"],
    )
    return SpmBuild(spm=spm, extract=extract, merged=merged, domain=domain)


def normalization_errors(spm: Spm) -> List[str]:
    """β（UE対とUCMごと）とγ（DCMごと）の確率の和が1から外れている箇所"""
    problems = []
    beta_sums: Dict[Tuple[int, str], float] = defaultdict(float)
    gamma_sums: Dict[str, float] = defaultdict(float)
    for c in spm.of_kind(ClauseKind.DOWNLINK):
        beta_sums[(c.ue_pair[0], c.tail)] += c.prob
    for c in spm.of_kind(ClauseKind.ACTION):
        gamma_sums[c.tail] += c.prob
    for (i, u), total in beta_sums.items():
        if abs(total - 1.0) > 1e-9:
            problems.append(f"beta UE{i + 1} from {u}: {total}")
    for d, total in gamma_sums.items():
        if abs(total - 1.0) > 1e-9:
            problems.append(f"gamma from {d}: {total}")
    return problems

