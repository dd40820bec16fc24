"""
実験結果のSVGプロット

matplotlib は Agg バックエンドで使う（表示環境を前提にしない）。
svg.hashsalt を固定して、同じデータからは同じSVGが出るようにしている。
"""
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update({"svg.hashsalt": "spm-protocol", "axes.unicode_minus": False})
import matplotlib.pyplot as plt  # noqa: E402

X_LABELS = {"lambda": "arrival probability λ", "eps_block": "block error rate ε"}


def plot_sweep(summary: List[Dict], path: str, x_key: str = "lambda", y_key: str = "goodput") -> str:
    """プロトコルごとに {y_key}_mean を x_key に対して折れ線で描き、±std を帯で示す"""
    by_protocol: Dict[str, List[Dict]] = {}
    for row in summary:
        by_protocol.setdefault(row["protocol"], []).append(row)

    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    for name, rows in by_protocol.items():
        rows = sorted(rows, key=lambda r: r[x_key])
        xs = [float(r[x_key]) for r in rows]
        ys = [float(r[f"{y_key}_mean"]) for r in rows]
        sd = [float(r.get(f"{y_key}_std", 0.0)) for r in rows]
        ax.plot(xs, ys, marker="o", label=name)
        ax.fill_between(xs, [y - s for y, s in zip(ys, sd)], [y + s for y, s in zip(ys, sd)], alpha=0.15)
    ax.set_xlabel(X_LABELS.get(x_key, x_key))
    ax.set_ylabel(y_key)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_episode_series(
    series: Dict[str, Sequence[float]],
    path: str,
    ylabel: str = "mean reward",
    switches: Optional[Sequence[int]] = None,
) -> str:
    """エピソードごとの系列（ポートフォリオと継続学習の比較など）。switches に環境切替のエピソードを縦線で描く"""
    fig, ax = plt.subplots(figsize=(8, 3.5), constrained_layout=True)
    for name, values in series.items():
        ax.plot(range(len(values)), list(values), label=name, linewidth=1.0)
    for episode in switches or ():
        ax.axvline(episode, color="grey", alpha=0.3, linewidth=0.8)
    ax.set_xlabel("episode")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
