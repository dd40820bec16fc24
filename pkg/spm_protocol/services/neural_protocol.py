"""
ニューラルプロトコルモデル（NPM）

UEごとのUCMセグメント・BSのDCMセグメント・UEごとの行動セグメントからなる小さなMLP群を
numpyのみで実装し、共有報酬のマルチエージェントDQN（CTDE）で学習する。

    u_i = g^U_i(onehot(b_i))
    d_i = g^D_i([u_1, u_2])
    q_i = g^A_i(d_i),  a_i = argmax q_i  (同点は S < A < D)
"""
import copy
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from spm_protocol.config import EnvConfig, TrainConfig
from spm_protocol.errors import BufferLevelError, ShapeMismatchError, TrainingDivergedError
from spm_protocol.services.episodic_memory import EpisodicMemory
from spm_protocol.services.mac_env import (
    N_UES,
    ActionPair,
    BasePolicy,
    EnvState,
    MacEnvironment,
    UeAction,
    derive_rng,
)

logger = structlog.get_logger(__name__)

N_ACTIONS = len(UeAction)
SEGMENT_ORDER = ("ucm0", "ucm1", "dcm0", "dcm1", "act0", "act1")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class MlpSegment:
    """全結合MLP。隠れ層はReLU、出力層は output_relu のときだけReLU"""
    layer_sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    output_relu: bool = False

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ShapeMismatchError("a segment needs at least an input and an output layer")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatchError("number of parameter tensors does not match layer_sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ShapeMismatchError(f"layer {k}: expected W{expected}, got W{w.shape} b{b.shape}")

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator, output_relu: bool) -> "MlpSegment":
        """He初期化（バイアスは0）"""
        weights = [
            rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:])
        ]
        biases = [np.zeros(n_out) for n_out in layer_sizes[1:]]
        return cls(list(layer_sizes), weights, biases, output_relu)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], output_relu: bool) -> "MlpSegment":
        weights = [np.zeros((n_in, n_out)) for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:])]
        biases = [np.zeros(n_out) for n_out in layer_sizes[1:]]
        return cls(list(layer_sizes), weights, biases, output_relu)

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_width(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def macs(self) -> int:
        return sum(w.size for w in self.weights)

    def _activate(self, k: int, h: np.ndarray) -> np.ndarray:
        last = k == len(self.weights) - 1
        return relu(h) if (not last or self.output_relu) else h

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.input_width:
            raise ShapeMismatchError(f"segment expects width {self.input_width}, got {x.shape[-1]}")
        a = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = self._activate(k, a @ w + b)
        return a

    def forward_cached(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
        """逆伝播用に各層の入力と前活性を保持する（xは (batch, width)）"""
        inputs, pre = [], []
        a = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            h = a @ w + b
            pre.append(h)
            a = self._activate(k, h)
        return a, inputs, pre

    def backward(self, inputs: List[np.ndarray], pre: List[np.ndarray], d_out: np.ndarray,
                 grads: Dict[str, np.ndarray], prefix: str) -> np.ndarray:
        """出力勾配から各パラメータ勾配を grads に加算し、入力勾配を返す"""
        d = d_out
        for k in reversed(range(len(self.weights))):
            last = k == len(self.weights) - 1
            if not last or self.output_relu:
                d = d * (pre[k] > 0)
            grads[f"{prefix}.W{k}"] += inputs[k].T @ d
            grads[f"{prefix}.b{k}"] += d.sum(axis=0)
            d = d @ self.weights[k].T
        return d

    def named_params(self, prefix: str) -> Dict[str, np.ndarray]:
        params = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.W{k}"] = w
            params[f"{prefix}.b{k}"] = b
        return params


@dataclass(frozen=True)
class CycleForward:
    """1サイクル分の順伝播結果（UE順のペア）"""
    ucms: Tuple[np.ndarray, np.ndarray]
    dcms: Tuple[np.ndarray, np.ndarray]
    q_values: Tuple[np.ndarray, np.ndarray]
    actions: ActionPair


@dataclass
class NPModel:
    b_max: int
    ucm_seg: List[MlpSegment]
    dcm_seg: List[MlpSegment]
    action_seg: List[MlpSegment]
    cm_width: int = 8
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for i in range(N_UES):
            if self.ucm_seg[i].input_width != self.b_max + 1:
                raise ShapeMismatchError(f"UCM segment {i} input must be b_max+1 = {self.b_max + 1}")
            if self.ucm_seg[i].output_width != self.cm_width or self.dcm_seg[i].output_width != self.cm_width:
                raise ShapeMismatchError("CM segments must output cm_width activations")
            if self.dcm_seg[i].input_width != N_UES * self.cm_width:
                raise ShapeMismatchError("DCM segment input must be the concatenated UCM pair")
            if self.action_seg[i].input_width != self.cm_width:
                raise ShapeMismatchError("action segment input must be cm_width")
            if self.action_seg[i].output_width != N_ACTIONS:
                raise ShapeMismatchError(f"action segment must output {N_ACTIONS} Q-values")

    @staticmethod
    def layer_plan(b_max: int, train_config: TrainConfig) -> Dict[str, List[int]]:
        hidden = [train_config.hidden_width] * train_config.hidden_layers
        cm = train_config.cm_width
        return {
            "ucm": [b_max + 1, *hidden, cm],
            "dcm": [N_UES * cm, *hidden, cm],
            "act": [cm, *hidden, N_ACTIONS],
        }

    @classmethod
    def initialize(cls, b_max: int, train_config: TrainConfig, rng: np.random.Generator) -> "NPModel":
        plan = cls.layer_plan(b_max, train_config)
        return cls(
            b_max=b_max,
            ucm_seg=[MlpSegment.initialize(plan["ucm"], rng, output_relu=True) for _ in range(N_UES)],
            dcm_seg=[MlpSegment.initialize(plan["dcm"], rng, output_relu=True) for _ in range(N_UES)],
            action_seg=[MlpSegment.initialize(plan["act"], rng, output_relu=False) for _ in range(N_UES)],
            cm_width=train_config.cm_width,
        )

    @classmethod
    def zeros(cls, b_max: int, train_config: Optional[TrainConfig] = None) -> "NPModel":
        train_config = train_config or TrainConfig()
        plan = cls.layer_plan(b_max, train_config)
        return cls(
            b_max=b_max,
            ucm_seg=[MlpSegment.zeros(plan["ucm"], output_relu=True) for _ in range(N_UES)],
            dcm_seg=[MlpSegment.zeros(plan["dcm"], output_relu=True) for _ in range(N_UES)],
            action_seg=[MlpSegment.zeros(plan["act"], output_relu=False) for _ in range(N_UES)],
            cm_width=train_config.cm_width,
        )

    def segments(self) -> Dict[str, MlpSegment]:
        return {
            "ucm0": self.ucm_seg[0], "ucm1": self.ucm_seg[1],
            "dcm0": self.dcm_seg[0], "dcm1": self.dcm_seg[1],
            "act0": self.action_seg[0], "act1": self.action_seg[1],
        }

    def params(self) -> Dict[str, np.ndarray]:
        """Adamが直接更新するパラメータ配列への参照"""
        params: Dict[str, np.ndarray] = {}
        for name, seg in self.segments().items():
            params.update(seg.named_params(name))
        return params

    @property
    def param_count(self) -> int:
        return sum(seg.param_count for seg in self.segments().values())

    def copy(self) -> "NPModel":
        return copy.deepcopy(self)

    def quantized(self) -> "NPModel":
        """パラメータをfloat32精度に丸めたコピー（重みファイルと同じ値になる）"""
        model = self.copy()
        for arr in model.params().values():
            arr[...] = arr.astype(np.float32).astype(np.float64)
        return model

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())

    def one_hot(self, levels: np.ndarray) -> np.ndarray:
        levels = np.asarray(levels, dtype=np.int64)
        out = np.zeros(levels.shape + (self.b_max + 1,))
        np.put_along_axis(out, levels[..., None], 1.0, axis=-1)
        return out


def _check_ue(ue: int) -> None:
    if ue not in range(N_UES):
        raise IndexError(f"UE index {ue} out of range")


def _check_width(v: np.ndarray, width: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (width,):
        raise ShapeMismatchError(f"{what} must have width {width}, got shape {v.shape}")
    return v


def greedy_action(q_values: np.ndarray) -> UeAction:
    """argmax、同点は S < A < D の順で最初のもの"""
    return UeAction(int(np.argmax(q_values)))


def forward_ucm(model: NPModel, ue: int, b: int) -> np.ndarray:
    _check_ue(ue)
    if not 0 <= int(b) <= model.b_max:
        raise BufferLevelError(f"buffer level {b} outside [0, {model.b_max}]")
    return model.ucm_seg[ue].forward(model.one_hot(np.asarray(int(b))))


def forward_dcm(model: NPModel, ue: int, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    _check_ue(ue)
    u1 = _check_width(u1, model.cm_width, "u1")
    u2 = _check_width(u2, model.cm_width, "u2")
    return model.dcm_seg[ue].forward(np.concatenate([u1, u2]))


def forward_action(model: NPModel, ue: int, d: np.ndarray) -> Tuple[np.ndarray, UeAction]:
    _check_ue(ue)
    d = _check_width(d, model.cm_width, "d")
    q = model.action_seg[ue].forward(d)
    return q, greedy_action(q)


def full_cycle_forward(model: NPModel, b: Tuple[int, int]) -> CycleForward:
    u = tuple(forward_ucm(model, i, b[i]) for i in range(N_UES))
    d = tuple(forward_dcm(model, i, u[0], u[1]) for i in range(N_UES))
    qa = [forward_action(model, i, d[i]) for i in range(N_UES)]
    return CycleForward(
        ucms=u, dcms=d,
        q_values=(qa[0][0], qa[1][0]),
        actions=(qa[0][1], qa[1][1]),
    )


def inference_flops(model: NPModel) -> int:
    """1サイクル分の推定FLOPs = 2 × 積和演算数"""
    return 2 * sum(seg.macs for seg in model.segments().values())


def huber(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    r = np.abs(residual)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def huber_grad(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(residual, -delta, delta)


def valid_action_mask(buffers: np.ndarray) -> np.ndarray:
    """(..., N_ACTIONS) のマスク。バッファが空ならSilenceのみ"""
    buffers = np.asarray(buffers)
    mask = np.ones(buffers.shape + (N_ACTIONS,), dtype=bool)
    mask[..., UeAction.ACCESS] = buffers > 0
    mask[..., UeAction.DISCARD] = buffers > 0
    return mask


def batch_forward(model: NPModel, states: np.ndarray, keep_cache: bool = False):
    """
    バッチ版の全サイクル順伝播。states は (batch, 2)。
    keep_cache=True のとき逆伝播用のキャッシュも返す。
    """
    xs = [model.one_hot(states[:, i]) for i in range(N_UES)]
    ucm_out = [model.ucm_seg[i].forward_cached(xs[i]) for i in range(N_UES)]
    z = np.concatenate([ucm_out[0][0], ucm_out[1][0]], axis=1)
    dcm_out = [model.dcm_seg[i].forward_cached(z) for i in range(N_UES)]
    act_out = [model.action_seg[i].forward_cached(dcm_out[i][0]) for i in range(N_UES)]
    q = np.stack([act_out[i][0] for i in range(N_UES)], axis=1)  # (batch, 2, 3)
    if keep_cache:
        return q, (ucm_out, dcm_out, act_out)
    return q


def td_loss_and_grads(
    model: NPModel,
    target: NPModel,
    batch: Dict[str, np.ndarray],
    gamma: float,
    delta: float = 1.0,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    両UEのHuber TD誤差の和をバッチ平均した共同損失と、その全パラメータ勾配。
    ターゲットは次状態で有効な行動に限った max Q（ターゲットネットワーク）。
    """
    states = batch["states"]
    actions = batch["actions"]
    n = states.shape[0]

    q, (ucm_out, dcm_out, act_out) = batch_forward(model, states, keep_cache=True)
    q_next = batch_forward(target, batch["next_states"])
    q_next = np.where(valid_action_mask(batch["next_states"]), q_next, -np.inf).max(axis=2)
    not_done = 1.0 - batch["done"].astype(np.float64)
    y = batch["rewards"][:, None] + gamma * not_done[:, None] * q_next  # (batch, 2)

    rows = np.arange(n)
    residual = np.stack([q[rows, i, actions[:, i]] for i in range(N_UES)], axis=1) - y
    loss = float(huber(residual, delta).sum(axis=1).mean())

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    dz = np.zeros((n, N_UES * model.cm_width))
    for i in range(N_UES):
        dq = np.zeros((n, N_ACTIONS))
        dq[rows, actions[:, i]] = huber_grad(residual[:, i], delta) / n
        _, inputs, pre = act_out[i]
        dd = model.action_seg[i].backward(inputs, pre, dq, grads, f"act{i}")
        _, inputs, pre = dcm_out[i]
        dz += model.dcm_seg[i].backward(inputs, pre, dd, grads, f"dcm{i}")
    for i in range(N_UES):
        du = dz[:, i * model.cm_width:(i + 1) * model.cm_width]
        _, inputs, pre = ucm_out[i]
        model.ucm_seg[i].backward(inputs, pre, du, grads, f"ucm{i}")
    return loss, grads


class AdamOptimizer:
    """パラメータ名→配列の辞書をインプレースで更新するAdam"""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamOptimizer":
        return cls(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


class NpmPolicy(BasePolicy):
    """NPMの貪欲方策。空バッファでのAccess/DiscardはSilenceに置き換えて数える"""

    name = "npm"

    def __init__(self, model: NPModel):
        self.model = model
        self.invalid_substitutions = 0
        self._last: Optional[CycleForward] = None

    def act(self, state: EnvState) -> ActionPair:
        fwd = full_cycle_forward(self.model, state.buffers)
        self._last = fwd
        actions = []
        for i, a in enumerate(fwd.actions):
            if a != UeAction.SILENCE and state.buffers[i] == 0:
                self.invalid_substitutions += 1
                logger.debug("npm.invalid_action_substituted", ue=i + 1, action=a.symbol)
                a = UeAction.SILENCE
            actions.append(a)
        return tuple(actions)

    @property
    def last_messages(self) -> Optional[dict]:
        if self._last is None:
            return None
        return {"u": [u.tolist() for u in self._last.ucms], "d": [d.tolist() for d in self._last.dcms]}


class DqnLearner:
    """
    オンラインネットワーク・ターゲットネットワーク・Adamの組。
    tick() を target_sync_interval 回呼ぶごとにターゲットをオンラインの複製に置き換える。
    """

    def __init__(self, model: NPModel, train_config: TrainConfig):
        self.model = model
        self.target = model.copy()
        self.optimizer = AdamOptimizer.from_config(train_config)
        self.gamma = train_config.gamma
        self.delta = train_config.huber_delta
        self.sync_interval = train_config.target_sync_interval
        self.steps = 0
        self._params = model.params()

    def learn(self, batch: Dict[str, np.ndarray]) -> float:
        loss, grads = td_loss_and_grads(self.model, self.target, batch, self.gamma, self.delta)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at step {self.steps}")
        self.optimizer.step(self._params, grads)
        if not self.model.is_finite():
            raise TrainingDivergedError(f"non-finite parameters after step {self.steps}")
        return loss

    def tick(self) -> bool:
        """環境ステップを1つ進める。ターゲットを同期したらTrue"""
        self.steps += 1
        if self.steps % self.sync_interval == 0:
            self.target = self.model.copy()
            return True
        return False


EpisodeCallback = Callable[[Dict[str, float]], None]


def _explore(q: np.ndarray, buffer: int, epsilon: float, rng: np.random.Generator) -> UeAction:
    """ε-greedy。探索時は有効な行動から一様に選ぶ。貪欲行動が無効ならSilence"""
    if rng.random() < epsilon:
        valid = np.flatnonzero(valid_action_mask(np.asarray(buffer)))
        return UeAction(int(rng.choice(valid)))
    a = greedy_action(q)
    if a != UeAction.SILENCE and buffer == 0:
        return UeAction.SILENCE
    return a


def train_npm(
    env_config: EnvConfig,
    train_config: TrainConfig,
    rng: np.random.Generator,
    initial_model: Optional[NPModel] = None,
    on_episode: Optional[EpisodeCallback] = None,
) -> Tuple[NPModel, EpisodicMemory]:
    """
    ε-greedyでエピソードを回し、遷移を活性付きでエピソード記憶に保存しながら
    ミニバッチの共同Huber TD損失をAdamで最小化する。

    Returns:
        (float32精度に丸めた学習済みモデル, 最終のエピソード記憶)
    """
    base_seed = int(rng.integers(0, 2 ** 63))
    init_rng = derive_rng(base_seed, 0xC0FFEE)
    model = initial_model.copy() if initial_model is not None else NPModel.initialize(env_config.b_max, train_config, init_rng)
    if model.b_max != env_config.b_max:
        raise ShapeMismatchError(f"initial model has b_max={model.b_max}, environment has {env_config.b_max}")
    learner = DqnLearner(model, train_config)
    memory = EpisodicMemory(train_config.replay_capacity, cm_width=model.cm_width)
    sample_rng = derive_rng(base_seed, 0xBA7C4)

    logger.info(
        "train.start",
        episodes=train_config.total_episodes, params=model.param_count,
        lam=list(env_config.lam), eps_block=env_config.eps_block, warm_start=initial_model is not None,
    )
    for episode in range(train_config.total_episodes):
        epsilon = train_config.epsilon_at(episode)
        env = MacEnvironment(env_config, derive_rng(base_seed, episode, 0))
        explore_rng = derive_rng(base_seed, episode, 1)
        state = env.reset()
        done = False
        total_reward = 0.0
        n_r = 0
        losses = []
        while not done:
            fwd = full_cycle_forward(model, state.buffers)
            actions = tuple(
                _explore(fwd.q_values[i], state.buffers[i], epsilon, explore_rng) for i in range(N_UES)
            )
            next_state, outcome, done = env.step(actions)
            memory.append(
                state.buffers, np.stack(fwd.ucms), np.stack(fwd.dcms), np.stack(fwd.q_values),
                actions, outcome.reward, next_state.buffers, done,
            )
            total_reward += outcome.reward
            n_r += outcome.events.acked_ue is not None

            if len(memory) >= train_config.batch_size:
                losses.append(learner.learn(memory.sample(train_config.batch_size, sample_rng)))
            learner.tick()
            state = next_state

        metrics = {
            "episode": episode,
            "epsilon": epsilon,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "mean_reward": total_reward / env_config.t_max,
            "goodput": n_r / env_config.t_max,
        }
        if on_episode is not None:
            on_episode(metrics)
        if (episode + 1) % 500 == 0:
            logger.info("train.progress", **metrics)

    logger.info("train.done", steps=learner.steps, memory=len(memory))
    return model.quantized(), memory


def policy_grid(model: NPModel) -> Dict[Tuple[int, int], CycleForward]:
    """全 (b1, b2) 状態での順伝播結果"""
    return {
        (b1, b2): full_cycle_forward(model, (b1, b2))
        for b1 in range(model.b_max + 1) for b2 in range(model.b_max + 1)
    }
