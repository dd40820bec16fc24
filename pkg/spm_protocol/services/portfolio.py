"""
非定常環境でのSPMポートフォリオ運用と、継続学習NPMとの比較

環境は2状態（一般にはN状態）のマルコフ連鎖で、エピソードの境界ごとに
transition_prob で別の状態へ切り替わる。状態ごとにUEの到着率が異なる。
"""
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import structlog

from spm_protocol.config import EnvConfig, MarkovEnvConfig, PortfolioMode, TrainConfig
from spm_protocol.errors import ConfigError, PortfolioError
from spm_protocol.kpi import KpiReport
from spm_protocol.services.inference import spm_policy
from spm_protocol.services.mac_env import BasePolicy, derive_rng, run_episode
from spm_protocol.services.neural_protocol import NPModel, NpmPolicy, train_npm
from spm_protocol.services.semantic_model import Spm

logger = structlog.get_logger(__name__)

_MARKOV_STREAM = 0x4D41524B


@dataclass(frozen=True)
class PortfolioEntry:
    descriptor: str
    spm: Spm


@dataclass
class Portfolio:
    entries: List[PortfolioEntry]
    mode: PortfolioMode = PortfolioMode.ORACLE
    window: int = 3
    threshold: float = 0.0

    def __post_init__(self):
        if not self.entries:
            raise PortfolioError("a portfolio needs at least one entry")
        names = [e.descriptor for e in self.entries]
        if len(set(names)) != len(names):
            raise PortfolioError(f"portfolio descriptors must be distinct: {names}")

    def index_of(self, descriptor: str) -> int:
        for k, e in enumerate(self.entries):
            if e.descriptor == descriptor:
                return k
        raise PortfolioError(f"no portfolio entry for environment {descriptor!r}")


def markov_states(config: MarkovEnvConfig, seed: int) -> List[int]:
    """各エピソードの環境状態の列。切替はエピソード境界でのみ起きる"""
    rng = derive_rng(seed, _MARKOV_STREAM)
    n = len(config.descriptors)
    states = [config.initial_state]
    for _ in range(config.n_episodes - 1):
        current = states[-1]
        if n > 1 and rng.random() < config.transition_prob:
            others = [k for k in range(n) if k != current]
            current = others[int(rng.integers(0, len(others)))]
        states.append(current)
    return states


@dataclass
class NonStationaryResult:
    records: List[Dict] = field(default_factory=list)
    report: Optional[KpiReport] = None

    @property
    def episode_rewards(self) -> List[float]:
        return [r["mean_reward"] for r in self.records]


def _episode(policy: BasePolicy, env_config: EnvConfig, rates, seed: int, episode: int) -> KpiReport:
    config = env_config.model_copy(update={"lam": tuple(rates)})
    _, report = run_episode(policy, config, derive_rng(seed, episode, 0), derive_rng(seed, episode, 1))
    return report


def portfolio_run(
    portfolio: Portfolio,
    markov: MarkovEnvConfig,
    env_config: EnvConfig,
    seed: int = 0,
) -> NonStationaryResult:
    """
    エピソードごとに選択モードに従ってポートフォリオのエントリを選び、SPM方策で実行する。
        oracle: 現在の環境記述子に対応するエントリ
        reward: 直近 window エピソードの平均報酬が threshold を下回ったら次のエントリへ
        fixed:  常に先頭のエントリ
    """
    if portfolio.mode == PortfolioMode.ORACLE:
        for name in markov.descriptors:
            portfolio.index_of(name)

    states = markov_states(markov, seed)
    policies = [spm_policy(e.spm, name=e.descriptor) for e in portfolio.entries]
    result = NonStationaryResult()
    reports = []
    active = 0
    recent: List[float] = []
    for episode, s in enumerate(states):
        descriptor = markov.descriptors[s]
        if portfolio.mode == PortfolioMode.ORACLE:
            active = portfolio.index_of(descriptor)
        elif portfolio.mode == PortfolioMode.FIXED:
            active = 0

        report = _episode(policies[active], env_config, markov.rates[s], seed, episode)
        reports.append(report)
        result.records.append({
            "episode": episode,
            "environment": descriptor,
            "model": portfolio.entries[active].descriptor,
            "mean_reward": report.mean_reward,
            "goodput": report.goodput,
            "n_r": report.n_r,
            "n_c": report.n_c,
            "n_d": report.n_d,
        })

        if portfolio.mode == PortfolioMode.REWARD:
            recent.append(report.mean_reward)
            recent = recent[-portfolio.window:]
            if len(recent) == portfolio.window and np.mean(recent) < portfolio.threshold:
                active = (active + 1) % len(portfolio.entries)
                recent = []
                logger.info("portfolio.switch", episode=episode, to=portfolio.entries[active].descriptor)

    result.report = KpiReport.mean(reports)
    logger.info("portfolio.done", mode=portfolio.mode.value, episodes=len(states), mean_reward=result.report.mean_reward)
    return result


def continual_learning_run(
    markov: MarkovEnvConfig,
    env_config: EnvConfig,
    train_config: TrainConfig,
    retrain_episodes: int,
    seed: int = 0,
    initial_model: Optional[NPModel] = None,
) -> NonStationaryResult:
    """
    1つのNPMを使い続け、環境が切り替わるたびに直前の重みから retrain_episodes だけ再学習する。
    """
    states = markov_states(markov, seed)
    rng = np.random.default_rng(derive_rng(seed, _MARKOV_STREAM, 1).integers(0, 2 ** 63))
    model = initial_model
    if model is None:
        first = env_config.model_copy(update={"lam": tuple(markov.rates[states[0]])})
        model, _ = train_npm(first, train_config, rng)
    retrain = train_config.model_copy(update={"total_episodes": retrain_episodes})

    result = NonStationaryResult()
    reports = []
    for episode, s in enumerate(states):
        if episode > 0 and s != states[episode - 1] and retrain_episodes > 0:
            config = env_config.model_copy(update={"lam": tuple(markov.rates[s])})
            model, _ = train_npm(config, retrain, rng, initial_model=model)
            logger.info("continual.retrained", episode=episode, environment=markov.descriptors[s])
        report = _episode(NpmPolicy(model), env_config, markov.rates[s], seed, episode)
        reports.append(report)
        result.records.append({
            "episode": episode,
            "environment": markov.descriptors[s],
            "model": "continual_npm",
            "mean_reward": report.mean_reward,
            "goodput": report.goodput,
            "n_r": report.n_r,
            "n_c": report.n_c,
            "n_d": report.n_d,
        })
    result.report = KpiReport.mean(reports)
    return result


def load_portfolio_file(path: str) -> Dict[str, str]:
    """`descriptor = path/to/model.pl` 形式のポートフォリオ設定。相対パスはファイルの場所から解決する"""
    if not os.path.exists(path):
        raise ConfigError(f"portfolio file not found: {path}")
    entries: Dict[str, str] = {}
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'descriptor = spm_path'")
            name, spm_path = (s.strip() for s in line.split("=", 1))
            if name in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate descriptor {name!r}")
            entries[name] = spm_path if os.path.isabs(spm_path) else os.path.join(base, spm_path)
    if not entries:
        raise ConfigError(f"portfolio file {path} lists no models")
    return entries
