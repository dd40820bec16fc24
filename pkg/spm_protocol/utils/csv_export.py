"""CSV書き出し（列順固定・改行コード固定で、同じ入力なら同じバイト列になる）"""
import csv
import math
import os
from typing import Dict, List, Optional, Sequence

import structlog

logger = structlog.get_logger(__name__)


def _cell(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value!r} cannot be written to CSV")
        return repr(value)
    if isinstance(value, bool):
        return int(value)
    return value


def write_csv(path: str, rows: List[Dict], columns: Optional[Sequence[str]] = None) -> str:
    """
    rows を path に書き出す。columns 省略時は先頭行のキー順。
    列にない余分なキーは無視する。
    """
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in columns})
    logger.info("csv.written", path=path, rows=len(rows))
    return path
