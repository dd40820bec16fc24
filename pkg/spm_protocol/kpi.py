"""
KPI集計

エピソード単位の KpiReport と、複数エピソードの平均・標準偏差をまとめる。
goodput は常に n_R / t_max から計算し、別途保持しない。
"""
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Sequence

import numpy as np

KPI_COLUMNS = (
    "goodput", "n_r", "n_c", "n_d", "mean_reward", "total_reward",
    "n_block_errors", "n_overflow", "n_access", "cm_bits", "model_bytes", "inference_flops",
)


@dataclass(frozen=True)
class KpiReport:
    t_max: int
    n_r: float
    n_c: float
    n_d: float
    total_reward: float
    n_block_errors: float = 0
    n_overflow: float = 0
    n_access: float = 0
    cm_bits: int = 0
    model_bytes: int = 0
    inference_flops: int = 0
    episodes: int = 1

    @classmethod
    def from_counts(cls, t_max: int, n_r: int, n_c: int, n_d: int, total_reward: float, **kwargs) -> "KpiReport":
        return cls(t_max=t_max, n_r=n_r, n_c=n_c, n_d=n_d, total_reward=total_reward, **kwargs)

    @property
    def goodput(self) -> float:
        return self.n_r / self.t_max

    @property
    def mean_reward(self) -> float:
        """1サイクルあたりの平均報酬"""
        return self.total_reward / self.t_max

    def with_model_info(self, cm_bits: int = 0, model_bytes: int = 0, inference_flops: int = 0) -> "KpiReport":
        return replace(self, cm_bits=cm_bits, model_bytes=model_bytes, inference_flops=inference_flops)

    def as_row(self) -> Dict[str, float]:
        row = asdict(self)
        row["goodput"] = self.goodput
        row["mean_reward"] = self.mean_reward
        return {k: row[k] for k in KPI_COLUMNS}

    @classmethod
    def mean(cls, reports: Sequence["KpiReport"]) -> "KpiReport":
        """エピソード平均。カウントは実数になる"""
        if not reports:
            raise ValueError("cannot average an empty report list")
        t_max = reports[0].t_max
        if any(r.t_max != t_max for r in reports):
            raise ValueError("reports with different t_max cannot be averaged")
        avg = lambda name: float(np.mean([getattr(r, name) for r in reports]))  # noqa: E731
        first = reports[0]
        return cls(
            t_max=t_max, n_r=avg("n_r"), n_c=avg("n_c"), n_d=avg("n_d"), total_reward=avg("total_reward"),
            n_block_errors=avg("n_block_errors"), n_overflow=avg("n_overflow"), n_access=avg("n_access"),
            cm_bits=first.cm_bits, model_bytes=first.model_bytes, inference_flops=first.inference_flops,
            episodes=sum(r.episodes for r in reports),
        )


def summarize(rows: List[Dict[str, float]], columns: Sequence[str] = KPI_COLUMNS) -> Dict[str, float]:
    """CSV行の列ごとの平均と標準偏差（母標準偏差）"""
    summary: Dict[str, float] = {"runs": len(rows)}
    for col in columns:
        values = np.asarray([float(r[col]) for r in rows], dtype=float)
        summary[f"{col}_mean"] = float(values.mean()) if len(values) else 0.0
        summary[f"{col}_std"] = float(values.std()) if len(values) else 0.0
    return summary
