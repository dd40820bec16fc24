"""
SPMの分析: 意味論的エントロピー、モデル選択、衝突回避の再構成
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import structlog

from spm_protocol.errors import NonConvergenceError
from spm_protocol.services.extraction import State, VocabKind, make_id
from spm_protocol.services.inference import add_grant_free, select, strip_grant_free, truth_probabilities
from spm_protocol.services.mac_env import N_UES, UeAction
from spm_protocol.services.problog_io import serialize_problog
from spm_protocol.services.semantic_model import Clause, ClauseKind, Spm

logger = structlog.get_logger(__name__)

LOG_BASES = {"nats": math.e, "bits": 2.0}


def clause_entropy(c: Union[Clause, float], base: str = "nats") -> float:
    """二値エントロピー。p ∈ {0, 1} では0"""
    p = c.prob if isinstance(c, Clause) else float(c)
    if p <= 0.0 or p >= 1.0:
        return 0.0
    h = -(p * math.log(p) + (1.0 - p) * math.log(1.0 - p))
    return h / math.log(LOG_BASES[base])


@dataclass(frozen=True)
class EntropyReport:
    net: float
    partial_beta: float
    partial_gamma: float
    per_clause: Tuple[Tuple[Clause, float], ...] = ()
    base: str = "nats"

    def rows(self) -> List[Dict]:
        return [
            {"kind": c.kind.value, "head": c.head, "tail": c.tail, "prob": c.prob, "entropy": h}
            for c, h in self.per_clause
        ]


def net_entropy(spm: Spm, base: str = "nats") -> EntropyReport:
    if base not in LOG_BASES:
        raise ValueError(f"unknown entropy base {base!r}; use one of {sorted(LOG_BASES)}")
    per_clause = tuple((c, clause_entropy(c, base)) for c in spm.clauses)
    return EntropyReport(
        net=math.fsum(h for _, h in per_clause),
        partial_beta=math.fsum(h for c, h in per_clause if c.kind == ClauseKind.DOWNLINK),
        partial_gamma=math.fsum(h for c, h in per_clause if c.kind == ClauseKind.ACTION),
        per_clause=per_clause,
        base=base,
    )


# --- モデル選択 ----------------------------------------------------------


def _entropy_key(spm: Spm):
    return (round(net_entropy(spm).net, 12), spm.total_vocabularies(), serialize_problog(spm))


def _vocabulary_key(spm: Spm):
    return (spm.total_vocabularies(), round(net_entropy(spm).net, 12), serialize_problog(spm))


def select_min_entropy(candidates: Sequence[Spm]) -> Spm:
    """正味エントロピー最小のSPM。同値は語彙数の少ない方、次にシリアライズ文字列の順"""
    if not candidates:
        raise ValueError("select_min_entropy needs at least one candidate")
    return min(candidates, key=_entropy_key)


def select_min_vocabulary(candidates: Sequence[Spm]) -> Spm:
    """|U| + |D| 最小のSPM"""
    if not candidates:
        raise ValueError("select_min_vocabulary needs at least one candidate")
    return min(candidates, key=_vocabulary_key)


def select_random(candidates: Sequence[Spm], rng: np.random.Generator) -> Spm:
    if not candidates:
        raise ValueError("select_random needs at least one candidate")
    return candidates[int(rng.integers(0, len(candidates)))]


def selection_study(
    spms: Sequence[Spm],
    rewards: Sequence[float],
    subset_size: int,
    trials: int,
    rng: np.random.Generator,
) -> Dict[str, Dict[str, float]]:
    """
    学習済みSPMの集合から subset_size 個を無作為に取り出し、各選択器が選んだSPMの
    テスト報酬を記録する試行を trials 回繰り返す。選択器ごとの平均と標準偏差を返す。
    """
    if len(spms) != len(rewards):
        raise ValueError("one reward per SPM is required")
    if not 1 <= subset_size <= len(spms):
        raise ValueError(f"subset_size must be in [1, {len(spms)}]")
    entropy_keys = [_entropy_key(s) for s in spms]
    vocab_keys = [_vocabulary_key(s) for s in spms]
    picked: Dict[str, List[float]] = {"min_entropy": [], "min_vocabulary": [], "random": []}
    for _ in range(trials):
        subset = rng.choice(len(spms), size=subset_size, replace=False)
        picked["min_entropy"].append(rewards[min(subset, key=lambda k: entropy_keys[k])])
        picked["min_vocabulary"].append(rewards[min(subset, key=lambda k: vocab_keys[k])])
        picked["random"].append(rewards[int(subset[rng.integers(0, subset_size)])])
    return {
        name: {"mean": float(np.mean(values)), "std": float(np.std(values)), "trials": trials}
        for name, values in picked.items()
    }


# --- 衝突回避の再構成 ----------------------------------------------------


def access_probability(spm: Spm, b: State, ue: int) -> float:
    tp = truth_probabilities(spm, b, ue)
    return tp.action.get(make_id(VocabKind.ACTION, ue, UeAction.ACCESS.symbol), 0.0)


def collision_probability(spm: Spm, b: State) -> float:
    """Pr(a1 = A) · Pr(a2 = A)"""
    return access_probability(spm, b, 0) * access_probability(spm, b, 1)


@dataclass(frozen=True)
class Manipulation:
    step: int
    state: State
    ue: int
    dcm: str
    prob: float
    collision_before: float

    def as_row(self) -> Dict:
        return {
            "step": self.step, "b1": self.state[0], "b2": self.state[1], "ue": self.ue + 1,
            "dcm": self.dcm, "replaced": f"a{self.ue + 1}_A", "with": f"a{self.ue + 1}_S",
            "prob": self.prob, "collision_before": self.collision_before,
        }


@dataclass
class ReconfigureResult:
    spm: Spm
    log: List[Manipulation] = field(default_factory=list)


def _silence_instead_of_access(spm: Spm, dcm: str, ue: int) -> Tuple[Spm, float]:
    """
    γ(d → a^A) を ⟨γ^P :: a^S :- d⟩ に置き換える。
    d → a^S の節が既にあれば確率を加算して1つにまとめる。
    """
    access_id = make_id(VocabKind.ACTION, ue, UeAction.ACCESS.symbol)
    silence_id = make_id(VocabKind.ACTION, ue, UeAction.SILENCE.symbol)
    gamma = spm.clause(dcm, access_id)
    existing = spm.clause(dcm, silence_id)
    kept = [c for c in spm.clauses if c.key not in {gamma.key, (dcm, silence_id)}]
    new_prob = min(1.0, gamma.prob + (existing.prob if existing else 0.0))
    kept.append(Clause.make(new_prob, silence_id, dcm))
    return spm.with_clauses(kept), gamma.prob


def reconfigure_collision_free(spm: Spm, p_th: float) -> ReconfigureResult:
    """
    衝突確率が p_th を超える状態がなくなるまで、Access確率の低い方のUE（同値はUE1）の
    選択DCMからのAccess節をSilence節に置き換える。状態はソート順に、その時点のSPMで評価する。
    δ節を持つSPMは、置換後にδ節を検出し直す。
    """
    if not 0.0 <= p_th <= 1.0:
        raise ValueError(f"p_th {p_th} outside [0, 1]")
    had_grant_free = bool(spm.of_kind(ClauseKind.GRANT_FREE))
    current = strip_grant_free(spm)
    limit = len(current.of_kind(ClauseKind.ACTION))
    log: List[Manipulation] = []

    while True:
        target = None
        for state in current.domain.states:
            p_col = collision_probability(current, state)
            if p_col > p_th:
                target = (state, p_col)
                break
        if target is None:
            break
        if len(log) >= limit:
            raise NonConvergenceError(f"still above p_th={p_th} after {len(log)} manipulations")
        state, p_col = target
        p_access = [access_probability(current, state, i) for i in range(N_UES)]
        ue = 0 if p_access[0] <= p_access[1] else 1
        dcm = truth_probabilities(current, state, ue).selected_dcm
        current, moved = _silence_instead_of_access(current, dcm, ue)
        step = Manipulation(len(log) + 1, state, ue, dcm, moved, p_col)
        log.append(step)
        logger.info("reconfigure.step", step=step.step, state=state, ue=ue + 1, dcm=dcm, prob=moved, collision=p_col)

    if had_grant_free:
        current = add_grant_free(current)
    current = current.with_clauses(current.clauses, reconfigured=f"p_th={p_th!r}")
    logger.info("reconfigure.done", steps=len(log), p_th=p_th)
    return ReconfigureResult(current, log)


def deterministic_joint_actions(spm: Spm) -> Dict[State, Tuple[UeAction, UeAction]]:
    """ドメイン上の argmax 行動ペア"""
    return {s: select(spm, s).actions for s in spm.domain.states}

