"""
SPMの実行（推論）

真理確率を計算し、最大真理確率でUCM・DCM・行動を選ぶ。
同確率は語彙IDの小さい方を選ぶため、選択は (spm, b) の純関数になる。
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from spm_protocol.errors import NoRuleError
from spm_protocol.services.extraction import State, VocabKind, make_id, parse_id, vocab_sort_key
from spm_protocol.services.mac_env import N_UES, ActionPair, BasePolicy, EnvState, UeAction
from spm_protocol.services.semantic_model import Clause, ClauseKind, Spm

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class TruthProbabilities:
    """UE i についての Pr(u), Pr(d), Pr(a)。action は選ばれたDCMからのγ"""
    ucm: str
    ucm_prob: float
    dcm: Dict[str, float]
    selected_dcm: str
    action: Dict[str, float]
    ops: int = 0


@dataclass(frozen=True)
class Selection:
    ucms: Tuple[Optional[str], Optional[str]]
    dcms: Tuple[Optional[str], Optional[str]]
    actions: ActionPair
    ucm_probs: Tuple[float, float]
    dcm_probs: Tuple[float, float]
    action_probs: Tuple[float, float]
    grant_free: Tuple[bool, bool] = (False, False)
    ops: int = 0


def argmax_by_id(probs: Dict[str, float]) -> Tuple[str, float]:
    """最大確率の候補。同確率はID順で最初のもの"""
    best_id, best_p = None, -1.0
    for vid in sorted(probs, key=vocab_sort_key):
        if probs[vid] > best_p:
            best_id, best_p = vid, probs[vid]
    return best_id, best_p


def _in_domain(spm: Spm, b: State) -> None:
    if len(spm.domain) and tuple(b) not in spm.domain:
        raise NoRuleError(b, "state outside the SPM domain")


def _alpha(spm: Spm, b: State, ue: int) -> Clause:
    alpha = spm.alpha(ue, b[ue])
    if alpha is None:
        raise NoRuleError(b, f"no uplink clause for UE{ue + 1} at level {b[ue]}")
    return alpha


def truth_probabilities(spm: Spm, b: State, ue: int) -> TruthProbabilities:
    """
    Pr(u_i) = α_i = 1
    Pr(d)   = β_{i,i}(u_i → d) · β_{i,j}(u_j → d)   片方のUCMからしか届かないDCMは0
    Pr(a)   = γ_i(d* → a)                            d* は Pr(d) 最大のDCM
    """
    b = tuple(b)
    _in_domain(spm, b)
    j = 1 - ue
    u_own = _alpha(spm, b, ue).head
    u_other = _alpha(spm, b, j).head
    ops = 2

    def into_ue(u: str) -> Dict[str, float]:
        return {c.head: c.prob for c in spm.from_tail(u, ClauseKind.DOWNLINK) if parse_id(c.head)[1] == ue}

    own = into_ue(u_own)
    other = into_ue(u_other)
    dcm = {d: own.get(d, 0.0) * other.get(d, 0.0) for d in set(own) | set(other)}
    ops += 2 * len(dcm)
    if not dcm:
        raise NoRuleError(b, f"no downlink clause reaches UE{ue + 1}")
    selected, _ = argmax_by_id(dcm)
    action = {c.head: c.prob for c in spm.from_tail(selected, ClauseKind.ACTION)}
    ops += len(action)
    if not action:
        raise NoRuleError(b, f"no action clause from {selected}")
    return TruthProbabilities(u_own, 1.0, dcm, selected, action, ops)


def select(spm: Spm, b: State, use_grant_free: bool = True) -> Selection:
    """
    u_i = α_i の head、d_i = argmax Pr(d)、a_i = argmax Pr(a)。
    δ節があるUEはUCM/DCM段を飛ばし、δのheadを行動とする（UCMは相手UEのDCM計算のため送る）。
    """
    b = tuple(b)
    _in_domain(spm, b)
    ucms, dcms, actions = [], [], []
    u_p, d_p, a_p, gf = [], [], [], []
    ops = 0
    for i in range(N_UES):
        delta = spm.grant_free(i, b[i]) if use_grant_free else None
        if delta is not None:
            ucms.append(_alpha(spm, b, i).head)
            u_p.append(1.0)
            dcms.append(None)
            d_p.append(0.0)
            actions.append(UeAction.from_symbol(parse_id(delta.head)[2]))
            a_p.append(delta.prob)
            gf.append(True)
            ops += 1
            continue
        tp = truth_probabilities(spm, b, i)
        a_id, a_prob = argmax_by_id(tp.action)
        ucms.append(tp.ucm)
        u_p.append(tp.ucm_prob)
        dcms.append(tp.selected_dcm)
        d_p.append(tp.dcm[tp.selected_dcm])
        actions.append(UeAction.from_symbol(parse_id(a_id)[2]))
        a_p.append(a_prob)
        gf.append(False)
        ops += tp.ops
    return Selection(
        ucms=tuple(ucms), dcms=tuple(dcms), actions=tuple(actions),
        ucm_probs=tuple(u_p), dcm_probs=tuple(d_p), action_probs=tuple(a_p),
        grant_free=tuple(gf), ops=ops,
    )


def detect_grant_free(spm: Spm) -> List[Clause]:
    """
    UE i のレベル b_i について、ドメイン内のすべての b_j で選ばれる (DCM, 行動) が同じなら
    δ_i = ⟨1 :: a_i :- b_i⟩ を作る。
    """
    chosen: Dict[Tuple[int, int], set] = {}
    for state in spm.domain.states:
        sel = select(spm, state, use_grant_free=False)
        for i in range(N_UES):
            chosen.setdefault((i, state[i]), set()).add((sel.dcms[i], sel.actions[i]))
    deltas = []
    for (i, level), outcomes in sorted(chosen.items()):
        if len(outcomes) == 1:
            _, action = next(iter(outcomes))
            deltas.append(Clause.make(
                1.0, make_id(VocabKind.ACTION, i, action.symbol), make_id(VocabKind.INPUT, i, level)
            ))
    return deltas


def strip_grant_free(spm: Spm) -> Spm:
    return spm.with_clauses(c for c in spm.clauses if c.kind != ClauseKind.GRANT_FREE)


def add_grant_free(spm: Spm) -> Spm:
    base = strip_grant_free(spm)
    deltas = detect_grant_free(base)
    logger.info("grant_free.detected", clauses=len(deltas))
    return base.with_clauses([*base.clauses, *deltas])


INFERENCE_TRACE_COLUMNS = (
    "cycle", "b1", "b2", "u1", "u2", "d1", "d2", "a1", "a2",
    "p_u1", "p_u2", "p_d1", "p_d2", "p_a1", "p_a2", "gf1", "gf2", "fallback",
)


@dataclass
class SpmPolicy(BasePolicy):
    """
    SPMを環境の方策として実行するアダプタ。
    ドメイン外の状態では両UEともSilence（fallback_events を数える）。
    空バッファでのAccess/DiscardはSilenceに置換する（invalid_substitutions を数える）。
    """
    spm: Spm
    use_grant_free: bool = True
    name: str = "spm"
    fallback_events: int = 0
    invalid_substitutions: int = 0
    total_ops: int = 0
    decisions: int = 0
    trace: List[Dict] = field(default_factory=list)
    _last: Optional[Selection] = None

    def act(self, state: EnvState) -> ActionPair:
        b = state.buffers
        self.decisions += 1
        try:
            sel = select(self.spm, b, self.use_grant_free)
        except NoRuleError:
            self.fallback_events += 1
            self._last = None
            self._record(state, None)
            return (UeAction.SILENCE, UeAction.SILENCE)
        self._last = sel
        self.total_ops += sel.ops
        actions = []
        for i, a in enumerate(sel.actions):
            if a != UeAction.SILENCE and b[i] == 0:
                self.invalid_substitutions += 1
                a = UeAction.SILENCE
            actions.append(a)
        self._record(state, sel)
        return tuple(actions)

    def _record(self, state: EnvState, sel: Optional[Selection]) -> None:
        row = {"cycle": state.cycle, "b1": state.buffers[0], "b2": state.buffers[1]}
        if sel is None:
            row.update({c: "" for c in INFERENCE_TRACE_COLUMNS[3:-1]})
            row["fallback"] = 1
        else:
            row.update({
                "u1": sel.ucms[0], "u2": sel.ucms[1],
                "d1": sel.dcms[0] or "", "d2": sel.dcms[1] or "",
                "a1": sel.actions[0].symbol, "a2": sel.actions[1].symbol,
                "p_u1": sel.ucm_probs[0], "p_u2": sel.ucm_probs[1],
                "p_d1": sel.dcm_probs[0], "p_d2": sel.dcm_probs[1],
                "p_a1": sel.action_probs[0], "p_a2": sel.action_probs[1],
                "gf1": int(sel.grant_free[0]), "gf2": int(sel.grant_free[1]),
                "fallback": 0,
            })
        self.trace.append(row)

    @property
    def last_messages(self) -> Optional[dict]:
        if self._last is None:
            return None
        return {"u": list(self._last.ucms), "d": list(self._last.dcms)}

    def mean_ops(self) -> float:
        return self.total_ops / max(1, self.decisions - self.fallback_events)


def spm_policy(spm: Spm, use_grant_free: bool = True, name: str = "spm") -> SpmPolicy:
    return SpmPolicy(spm, use_grant_free=use_grant_free, name=name)


def spm_inference_flops(spm: Spm) -> int:
    """ドメイン上の select の演算数の平均（切り上げ）"""
    states = spm.domain.states
    if not states:
        return 0
    ops = [select(spm, s).ops for s in states]
    return int(np.ceil(np.mean(ops)))
