"""
実験ハーネス: プロトコル×λ×ε×反復のスイープ、ポリシーマップ、NPM/SPM一致率
"""
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from spm_protocol.config import EnvConfig, ExperimentConfig
from spm_protocol.errors import ConfigError, ModelFileError, NoRuleError
from spm_protocol.kpi import KPI_COLUMNS, summarize
from spm_protocol.services.analytics import access_probability
from spm_protocol.services.inference import select, spm_inference_flops, spm_policy
from spm_protocol.services.mac_env import BasePolicy, derive_rng, run_episode
from spm_protocol.services.neural_protocol import NPModel, NpmPolicy, full_cycle_forward, inference_flops
from spm_protocol.services.npm_io import read_npm, save_npm
from spm_protocol.services.policies import make_baseline
from spm_protocol.services.problog_io import read_spm, spm_bytes
from spm_protocol.services.semantic_model import Spm
from spm_protocol.utils.csv_export import write_csv
from spm_protocol.utils.svg_plots import plot_sweep

logger = structlog.get_logger(__name__)

KNOWN_PROTOCOLS = ("npm", "spm", "spm_cf", "aloha", "beb", "silent")
RUN_COLUMNS = ("protocol", "lambda", "eps_block", "rep", "seed", *KPI_COLUMNS, "fallback_events", "invalid_substitutions")


@dataclass(frozen=True)
class LoadedModels:
    npm: Optional[NPModel] = None
    spm: Optional[Spm] = None
    spm_cf: Optional[Spm] = None


def load_models(config: ExperimentConfig) -> LoadedModels:
    """使うプロトコルに必要なモデルファイルを読む。欠けていれば ModelFileError"""
    unknown = [p for p in config.protocols if p not in KNOWN_PROTOCOLS]
    if unknown:
        raise ConfigError(f"unknown protocol(s) {unknown}; choose from {list(KNOWN_PROTOCOLS)}")
    paths = {"npm": config.npm_path, "spm": config.spm_path, "spm_cf": config.spm_cf_path}
    loaded = {}
    for name, path in paths.items():
        if name not in config.protocols:
            continue
        if not path:
            raise ModelFileError(f"protocol {name!r} needs {name}_path")
        if not os.path.exists(path):
            raise ModelFileError(f"model file not found: {path}")
        loaded[name] = read_npm(path) if name == "npm" else read_spm(path)
    return LoadedModels(**loaded)


def build_policy(name: str, models: LoadedModels, config: ExperimentConfig) -> BasePolicy:
    if name == "npm":
        return NpmPolicy(models.npm)
    if name in ("spm", "spm_cf"):
        return spm_policy(getattr(models, name), name=name)
    policy = make_baseline(name, config.aloha_p, config.beb_base, config.beb_w_max)
    if policy is None:
        raise ConfigError(f"unknown protocol {name!r}")
    return policy


def model_info(name: str, models: LoadedModels) -> Dict[str, int]:
    """KPI表のモデル列（CM長・モデルサイズ・推論FLOPs）"""
    if name == "npm":
        model = models.npm
        return {
            "cm_bits": model.cm_width * 32,
            "model_bytes": len(save_npm(model)),
            "inference_flops": inference_flops(model),
        }
    if name in ("spm", "spm_cf"):
        spm = getattr(models, name)
        bits = spm.cm_bits()
        return {
            "cm_bits": max(bits.values()),
            "model_bytes": spm_bytes(spm),
            "inference_flops": spm_inference_flops(spm),
        }
    return {"cm_bits": 0, "model_bytes": 0, "inference_flops": 0}


def _sweep_point(args) -> List[Dict]:
    """1つの (λ, ε) で全プロトコル×反復を実行する。全プロトコルが同じ乱数ストリームを使う"""
    config, env_base, models, li, ei = args
    lam = config.lambdas[li]
    eps = config.eps_blocks[ei]
    env_config = env_base.model_copy(update={"lam": (lam, lam), "eps_block": eps})
    infos = {name: model_info(name, models) for name in config.protocols}
    rows = []
    for name in config.protocols:
        for rep in range(config.repetitions):
            policy = build_policy(name, models, config)
            env_rng = derive_rng(config.seed, li, ei, rep, 0)
            policy_rng = derive_rng(config.seed, li, ei, rep, 1)
            _, report = run_episode(policy, env_config, env_rng, policy_rng)
            report = report.with_model_info(**infos[name])
            row = {"protocol": name, "lambda": lam, "eps_block": eps, "rep": rep, "seed": config.seed}
            row.update(report.as_row())
            row["fallback_events"] = getattr(policy, "fallback_events", 0)
            row["invalid_substitutions"] = getattr(policy, "invalid_substitutions", 0)
            rows.append(row)
    return rows


def sweep(config: ExperimentConfig, env_base: EnvConfig, models: Optional[LoadedModels] = None) -> List[Dict]:
    """スイープを実行し、(プロトコル順, λ, ε, 反復) で並べた行を返す"""
    models = models or load_models(config)
    points = [(config, env_base, models, li, ei) for li in range(len(config.lambdas)) for ei in range(len(config.eps_blocks))]
    if config.workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(_sweep_point, points))
    else:
        chunks = [_sweep_point(p) for p in points]
    order = {name: k for k, name in enumerate(config.protocols)}
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (order[r["protocol"]], r["lambda"], r["eps_block"], r["rep"]))
    return rows


def run_experiment(config: ExperimentConfig, env_base: EnvConfig) -> Dict[str, str]:
    """
    スイープ結果を {scenario}_runs.csv と {scenario}_summary.csv に書き出す。
    plots=True なら goodput の SVG も作る。書き出したパスを返す。
    """
    models = load_models(config)
    try:
        os.makedirs(config.output_dir, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output directory {config.output_dir!r} is not writable: {e}") from e

    logger.info(
        "experiment.start", scenario=config.scenario, protocols=config.protocols,
        lambdas=config.lambdas, eps_blocks=config.eps_blocks, repetitions=config.repetitions,
    )
    rows = sweep(config, env_base, models)

    summary = []
    for name in config.protocols:
        for lam in config.lambdas:
            for eps in config.eps_blocks:
                group = [r for r in rows if r["protocol"] == name and r["lambda"] == lam and r["eps_block"] == eps]
                summary.append({"protocol": name, "lambda": lam, "eps_block": eps, **summarize(group)})

    paths = {
        "runs": os.path.join(config.output_dir, f"{config.scenario}_runs.csv"),
        "summary": os.path.join(config.output_dir, f"{config.scenario}_summary.csv"),
    }
    write_csv(paths["runs"], rows, RUN_COLUMNS)
    write_csv(paths["summary"], summary)
    if config.plots:
        paths["plot"] = os.path.join(config.output_dir, f"{config.scenario}_goodput.svg")
        plot_sweep(summary, paths["plot"], x_key="lambda" if len(config.lambdas) > 1 else "eps_block")
    logger.info("experiment.done", rows=len(rows), **paths)
    return paths


# --- ポリシーマップ -------------------------------------------------------

PolicyMap = Dict[Tuple[int, int], Dict]


def policy_map_export(model: Union[NPModel, Spm], b_max: Optional[int] = None) -> PolicyMap:
    """
    全 (b1, b2) の選択行動と、NPMならQ(Access)、SPMならAccessの真理確率。
    SPMのドメイン外の状態は行動を空文字で返す。
    """
    if isinstance(model, NPModel):
        b_max = model.b_max
    elif b_max is None:
        raise ValueError("b_max is required for an SPM policy map")
    grid: PolicyMap = {}
    for b1 in range(b_max + 1):
        for b2 in range(b_max + 1):
            if isinstance(model, NPModel):
                fwd = full_cycle_forward(model, (b1, b2))
                grid[(b1, b2)] = {
                    "a1": fwd.actions[0].symbol, "a2": fwd.actions[1].symbol,
                    "access1": float(fwd.q_values[0][1]), "access2": float(fwd.q_values[1][1]),
                }
                continue
            try:
                sel = select(model, (b1, b2))
            except NoRuleError:
                grid[(b1, b2)] = {"a1": "", "a2": "", "access1": 0.0, "access2": 0.0}
                continue
            grid[(b1, b2)] = {
                "a1": sel.actions[0].symbol, "a2": sel.actions[1].symbol,
                "access1": access_probability(model, (b1, b2), 0),
                "access2": access_probability(model, (b1, b2), 1),
            }
    return grid


def policy_map_rows(grid: PolicyMap) -> List[Dict]:
    return [{"b1": b1, "b2": b2, **values} for (b1, b2), values in sorted(grid.items())]


def policy_agreement(map_a: PolicyMap, map_b: PolicyMap) -> Tuple[float, List[Tuple[int, int]]]:
    """両UEの行動が一致する状態の割合と、一致しない状態の一覧"""
    states = sorted(set(map_a) & set(map_b))
    if not states:
        return 0.0, []
    mismatched = [
        s for s in states
        if (map_a[s]["a1"], map_a[s]["a2"]) != (map_b[s]["a1"], map_b[s]["a2"])
    ]
    return 1.0 - len(mismatched) / len(states), mismatched


def evaluate_policy(policy: BasePolicy, env_config: EnvConfig, episodes: int, seed: int) -> List[Dict]:
    """同じシード列でエピソードを回し、KPI行を返す"""
    rows = []
    for k in range(episodes):
        _, report = run_episode(policy, env_config, derive_rng(seed, k, 0), derive_rng(seed, k, 1))
        rows.append({"episode": k, **report.as_row()})
    return rows


def mean_of(rows: Sequence[Dict], key: str) -> float:
    return float(np.mean([r[key] for r in rows])) if rows else 0.0
