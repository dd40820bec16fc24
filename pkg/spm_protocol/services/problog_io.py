"""
SPMのProbLog形式テキスト

文法（1行1節、`%` で始まる行はコメント）:

    clause     := [prob "::"] head ":-" tail "."
    prob       := 10進数（[0, 1]）。省略時は 1.0
    identifier := b<i>_<level> | u<i>_<k> | d<i>_<k> | a<i>_<S|A|D>

来歴はコメント行 `% key: value` で運ぶ。予約キー:
    domain     状態ドメイン `b1,b2=visits;...`
    vocab      語彙パターン `u1_1 = 1,1,0,0,1,0,0,0`（include_vocabulary=True のとき）
"""
import re
from typing import Dict, List, Optional, Tuple

import structlog

from spm_protocol.errors import ProbLogSyntaxError
from spm_protocol.services.extraction import StateDomain, Vocabulary, parse_id, vocab_sort_key
from spm_protocol.services.semantic_model import Clause, Spm

logger = structlog.get_logger(__name__)

HEADER_LINE = "% semantic protocol model"
_IDENT = re.compile(r"[a-z][0-9]+_[0-9A-Z]+")
_PROB = re.compile(r"[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?")
_COMMENT_KV = re.compile(r"^%\s*([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*)$")


def _format_prob(p: float) -> str:
    return repr(float(p))


def serialize_problog(spm: Spm, include_vocabulary: bool = False) -> str:
    lines = [HEADER_LINE]
    for key, value in sorted(spm.provenance.items()):
        lines.append(f"% {key}: {value}")
    if len(spm.domain):
        lines.append("% domain: " + ";".join(f"{b1},{b2}={n}" for (b1, b2), n in spm.domain.visits.items()))
    if include_vocabulary:
        for vid, v in spm.used_vocabularies().items():
            if v.pattern is not None:
                lines.append(f"% vocab: {vid} = " + ",".join(str(x) for x in v.pattern))
    for c in spm.clauses:
        lines.append(f"{_format_prob(c.prob)}::{c.head} :- {c.tail}.")
    return "\n".join(lines) + "\n"


class _LineScanner:
    def __init__(self, text: str, lineno: int):
        self.text = text
        self.lineno = lineno
        self.pos = 0

    def error(self, message: str) -> ProbLogSyntaxError:
        return ProbLogSyntaxError(message, self.lineno, self.pos + 1)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def match(self, pattern: re.Pattern, what: str) -> str:
        self.skip_ws()
        m = pattern.match(self.text, self.pos)
        if not m:
            raise self.error(f"expected {what}")
        self.pos = m.end()
        return m.group(0)

    def expect(self, literal: str) -> None:
        self.skip_ws()
        if not self.text.startswith(literal, self.pos):
            raise self.error(f"expected '{literal}'")
        self.pos += len(literal)

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)


def _parse_clause(line: str, lineno: int) -> Clause:
    scan = _LineScanner(line, lineno)
    prob = 1.0
    scan.skip_ws()
    if "::" in line:
        start = scan.pos
        token = scan.match(_PROB, "a probability")
        prob = float(token)
        if not 0.0 <= prob <= 1.0:
            scan.pos = start
            raise scan.error(f"probability {token} outside [0, 1]")
        scan.expect("::")
    head_pos = scan.pos
    head = scan.match(_IDENT, "a head identifier")
    scan.expect(":-")
    tail = scan.match(_IDENT, "a tail identifier")
    scan.expect(".")
    if not scan.at_end():
        raise scan.error("unexpected text after clause")
    try:
        return Clause.make(prob, head, tail)
    except ValueError as e:
        raise ProbLogSyntaxError(str(e), lineno, head_pos + 1) from e


def _parse_domain(value: str, lineno: int) -> Dict[Tuple[int, int], int]:
    visits = {}
    for item in filter(None, (s.strip() for s in value.split(";"))):
        try:
            pair, count = item.split("=")
            b1, b2 = (int(x) for x in pair.split(","))
            visits[(b1, b2)] = int(count)
        except ValueError as e:
            raise ProbLogSyntaxError(f"malformed domain entry {item!r}", lineno, 1) from e
    return visits


def _parse_vocab(value: str, lineno: int) -> Vocabulary:
    try:
        vid, bits = (s.strip() for s in value.split("="))
        kind, owner, _ = parse_id(vid)
        pattern = tuple(int(x) for x in bits.split(","))
    except ValueError as e:
        raise ProbLogSyntaxError(f"malformed vocabulary entry {value!r}", lineno, 1) from e
    return Vocabulary(vid, kind, owner, pattern, merged=True)


def parse_problog(text: str) -> Spm:
    """
    serialize_problog の逆変換。

    Raises:
        ProbLogSyntaxError: 構文エラー、確率の範囲外、不正なID、(tail, head) の重複
    """
    clauses: List[Clause] = []
    seen: Dict[Tuple[str, str], int] = {}
    provenance: Dict[str, str] = {}
    visits: Optional[Dict[Tuple[int, int], int]] = None
    vocab_patterns: Dict[str, Vocabulary] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("%"):
            m = _COMMENT_KV.match(line)
            if not m:
                continue
            key, value = m.group(1), m.group(2).strip()
            if key == "domain":
                visits = _parse_domain(value, lineno)
            elif key == "vocab":
                v = _parse_vocab(value, lineno)
                vocab_patterns[v.id] = v
            else:
                provenance[key] = value
            continue
        clause = _parse_clause(raw, lineno)
        if clause.key in seen:
            raise ProbLogSyntaxError(
                f"duplicate clause {clause.head} :- {clause.tail} (first on line {seen[clause.key]})", lineno, 1
            )
        seen[clause.key] = lineno
        clauses.append(clause)

    spm = Spm(clauses, domain=StateDomain(visits or {}), provenance=provenance)
    if vocab_patterns:
        vocab = dict(spm.vocabularies)
        vocab.update({k: v for k, v in vocab_patterns.items() if k in vocab})
        spm = Spm(spm.clauses, dict(sorted(vocab.items(), key=lambda kv: vocab_sort_key(kv[0]))),
                  spm.domain, spm.provenance)
    return spm


def write_spm(spm: Spm, path: str, include_vocabulary: bool = False) -> int:
    text = serialize_problog(spm, include_vocabulary)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    logger.info("spm.saved", path=path, bytes=len(text.encode("utf-8")), clauses=len(spm))
    return len(text.encode("utf-8"))


def read_spm(path: str) -> Spm:
    with open(path, "r", encoding="utf-8") as f:
        return parse_problog(f.read())


def spm_bytes(spm: Spm) -> int:
    """語彙パターン抜きのシリアライズ長（モデルサイズとして報告する値）"""
    return len(serialize_problog(spm).encode("utf-8"))
