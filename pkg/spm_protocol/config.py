import os
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from spm_protocol.errors import ConfigError

logger = structlog.get_logger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class MergeMode(str, Enum):
    """語彙マージの方式"""
    NONE = "none"
    ACTIVATION = "activation"
    CONNECTION = "connection"
    BOTH = "both"


class Weighting(str, Enum):
    """節の確率推定に使う状態の重み付け"""
    EMPIRICAL = "empirical"
    UNIFORM = "uniform"


class DomainSource(str, Enum):
    """状態ドメインの取り方（エピソード記憶 or 全グリッド）"""
    MEMORY = "memory"
    GRID = "grid"


class PortfolioMode(str, Enum):
    ORACLE = "oracle"
    REWARD = "reward"
    FIXED = "fixed"


def _split_list(value: Any) -> Any:
    """'0.5, 0.5' のようなカンマ区切り文字列をリストに変換する"""
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


class EnvConfig(BaseModel):
    """2UE・1BSの競合環境パラメータ"""
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    lam: Tuple[float, float] = Field(default=(0.5, 0.5), alias="lambda")
    b_max: int = Field(default=5, ge=1)
    d_max: int = Field(default=12, ge=1)
    rho1: float = Field(default=5.0, gt=0)
    rho2: float = Field(default=5.0, gt=0)
    t_max: int = Field(default=24, ge=1)
    eps_block: float = Field(default=0.02, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @field_validator("lam", mode="before")
    @classmethod
    def _parse_lambda(cls, value: Any) -> Any:
        value = _split_list(value)
        if isinstance(value, (int, float)):
            return (value, value)
        if isinstance(value, (list, tuple)) and len(value) == 1:
            return (value[0], value[0])
        return value

    @field_validator("lam")
    @classmethod
    def _check_lambda(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        for rate in value:
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"arrival probability {rate} outside [0, 1]")
        return value


class TrainConfig(BaseModel):
    """DQN学習のハイパーパラメータ（根拠のある値がなく独自に決めたものは UNSTATED_DEFAULTS に記録）"""
    model_config = ConfigDict(frozen=True, extra="ignore")

    learning_rate: float = Field(default=1e-4, gt=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-7, gt=0)
    gamma: float = Field(default=0.9, ge=0, lt=1)
    replay_capacity: int = Field(default=10_000, ge=1)
    batch_size: int = Field(default=32, ge=1)
    target_sync_interval: int = Field(default=200, ge=1)
    total_episodes: int = Field(default=3000, ge=1)
    epsilon_initial: float = Field(default=1.0, ge=0, le=1)
    epsilon_final: float = Field(default=0.05, ge=0, le=1)
    epsilon_decay_fraction: float = Field(default=0.6, gt=0, le=1)
    hidden_width: int = Field(default=16, ge=1)
    hidden_layers: int = Field(default=2, ge=1)
    cm_width: int = Field(default=8, ge=1)
    huber_delta: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check_batch(self) -> "TrainConfig":
        if self.batch_size > self.replay_capacity:
            raise ValueError("batch_size must not exceed replay_capacity")
        return self

    def epsilon_at(self, episode: int) -> float:
        """線形減衰するε-greedyの探索率"""
        horizon = max(1, int(self.total_episodes * self.epsilon_decay_fraction))
        frac = min(1.0, episode / horizon)
        return self.epsilon_initial + frac * (self.epsilon_final - self.epsilon_initial)


# 外部の根拠がなく、こちらで決めたデフォルト値
UNSTATED_DEFAULTS = {
    "gamma", "replay_capacity", "batch_size", "target_sync_interval", "total_episodes",
    "epsilon_initial", "epsilon_final", "epsilon_decay_fraction", "huber_delta",
}


class MergeOptions(BaseModel):
    """NPM→SPM変換のオプション"""
    model_config = ConfigDict(frozen=True, extra="ignore")

    merge_mode: MergeMode = MergeMode.BOTH
    weighting: Weighting = Weighting.EMPIRICAL
    domain_source: DomainSource = DomainSource.MEMORY
    grant_free: bool = False
    fallback_episodes: int = Field(default=5, ge=0)


class MarkovEnvConfig(BaseModel):
    """2状態マルコフ連鎖で到着率が切り替わる非定常環境"""
    model_config = ConfigDict(frozen=True, extra="ignore")

    descriptors: List[str] = Field(default_factory=lambda: ["ue1_burst", "ue2_burst"])
    rates: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.9, 0.1), (0.1, 0.9)])
    transition_prob: float = Field(default=0.8, ge=0, le=1)
    n_episodes: int = Field(default=200, ge=1)
    initial_state: int = Field(default=0, ge=0)

    @field_validator("descriptors", mode="before")
    @classmethod
    def _parse_descriptors(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("rates", mode="before")
    @classmethod
    def _parse_rates(cls, value: Any) -> Any:
        # "0.9:0.1, 0.1:0.9"
        value = _split_list(value)
        if isinstance(value, list) and value and isinstance(value[0], str):
            return [tuple(float(x) for x in item.split(":")) for item in value]
        return value

    @model_validator(mode="after")
    def _check_states(self) -> "MarkovEnvConfig":
        if len(self.descriptors) != len(self.rates) or not self.descriptors:
            raise ValueError("descriptors and rates must be non-empty and of equal length")
        if len(set(self.descriptors)) != len(self.descriptors):
            raise ValueError("descriptors must be distinct")
        if self.initial_state >= len(self.descriptors):
            raise ValueError("initial_state out of range")
        for pair in self.rates:
            if len(pair) != 2 or not all(0.0 <= r <= 1.0 for r in pair):
                raise ValueError(f"invalid rate pair {pair}")
        return self


class ExperimentConfig(BaseModel):
    """λ・εスイープ実験の設定"""
    model_config = ConfigDict(frozen=True, extra="ignore")

    scenario: str = "table1"
    protocols: List[str] = Field(default_factory=lambda: ["npm", "spm", "aloha", "beb"])
    lambdas: List[float] = Field(default_factory=lambda: [0.5])
    eps_blocks: List[float] = Field(default_factory=lambda: [0.02])
    repetitions: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    npm_path: Optional[str] = None
    spm_path: Optional[str] = None
    spm_cf_path: Optional[str] = None
    output_dir: str = "results"
    workers: int = Field(default=1, ge=1)
    plots: bool = False
    aloha_p: float = Field(default=0.5, ge=0, le=1)
    beb_base: int = Field(default=2, ge=2)
    beb_w_max: int = Field(default=16, ge=1)

    @field_validator("protocols", "lambdas", "eps_blocks", mode="before")
    @classmethod
    def _parse_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("protocols", "lambdas", "eps_blocks")
    @classmethod
    def _non_empty(cls, value: List[Any]) -> List[Any]:
        if not value:
            raise ValueError("sweep grid must not be empty")
        return value


class ConfigManager:
    """
    プレーンテキストのkey-value設定ファイル（`key = value`、`#`コメント）を読み込み、
    各Pydanticモデルに検証付きで提供するクラス。
    1つのファイルに複数モデル分のキーを書いてよく、各モデルは自分のフィールドだけを拾う。
    """

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        self.config_path = config_path
        self.values: Dict[str, Any] = {}
        if config_path:
            self.values.update(self._load_kv_file(config_path))
        if overrides:
            self.values.update({k: v for k, v in overrides.items() if v is not None})

    def _load_kv_file(self, file_path: str) -> Dict[str, str]:
        """key-valueファイルをロードするヘルパーメソッド"""
        if not os.path.exists(file_path):
            raise ConfigError(f"configuration file not found: {file_path}")
        values: Dict[str, str] = {}
        with open(file_path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{file_path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
                key, value = line.split("=", 1)
                key = key.strip()
                if not key:
                    raise ConfigError(f"{file_path}:{lineno}: empty key")
                values[key] = value.strip()
        logger.info("config.loaded", path=file_path, keys=len(values))
        return values

    def _build(self, model: Type[ModelT], **extra: Any) -> ModelT:
        data = {**self.values, **{k: v for k, v in extra.items() if v is not None}}
        try:
            return model.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid {model.__name__}: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e

    def env_config(self, **overrides: Any) -> EnvConfig:
        return self._build(EnvConfig, **overrides)

    def train_config(self, **overrides: Any) -> TrainConfig:
        return self._build(TrainConfig, **overrides)

    def merge_options(self, **overrides: Any) -> MergeOptions:
        return self._build(MergeOptions, **overrides)

    def experiment_config(self, **overrides: Any) -> ExperimentConfig:
        return self._build(ExperimentConfig, **overrides)

    def markov_config(self, **overrides: Any) -> MarkovEnvConfig:
        return self._build(MarkovEnvConfig, **overrides)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def describe(self, *models: BaseModel) -> str:
        """有効な設定値をkey-value形式で出力する。独自に決めたデフォルトには印を付ける"""
        lines = []
        for model in models:
            lines.append(f"# {type(model).__name__}")
            for name, value in model.model_dump(by_alias=True).items():
                if isinstance(value, Enum):
                    value = value.value
                flag = "  # chosen default" if name in UNSTATED_DEFAULTS and name not in self.values else ""
                lines.append(f"{name} = {_format_value(value)}{flag}")
        return "\n".join(lines) + "\n"


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ", ".join(":".join(str(x) for x in item) for item in value)
        return ", ".join(str(v.value if isinstance(v, Enum) else v) for v in value)
    return str(value)


class Settings(BaseSettings):
    """プロセス全体の設定（環境変数 SPM_* と .env から読み込む）"""
    model_config = SettingsConfigDict(env_prefix="SPM_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False
    WORKERS: int = 1
    OUTPUT_DIR: str = "results"


settings = Settings()
