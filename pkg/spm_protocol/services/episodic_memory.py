"""
エピソード記憶（リプレイバッファ）

各サイクルの状態・UCM/DCMの活性・Q値・行動・報酬・次状態を固定長のリングバッファに保持する。
容量を超えると最も古いレコードから上書きされる。
"""
import io
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import structlog
import zstandard as zstd

from spm_protocol.errors import CorruptHeaderError, SizeMismatchError

logger = structlog.get_logger(__name__)

MEMORY_MAGIC = b"SPMM"
MEMORY_VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, capacity, size, payload bytes

_FIELDS = ("states", "ucms", "dcms", "q_values", "actions", "rewards", "next_states", "done")


@dataclass(frozen=True)
class Transition:
    state: Tuple[int, int]
    ucms: np.ndarray
    dcms: np.ndarray
    q_values: np.ndarray
    actions: Tuple[int, int]
    reward: float
    next_state: Tuple[int, int]
    done: bool


class EpisodicMemory:
    def __init__(self, capacity: int, cm_width: int = 8, n_actions: int = 3):
        if capacity <= 0:
            raise ValueError("capacity must be a positive integer.")
        self.capacity = capacity
        self.cm_width = cm_width
        self.states = np.zeros((capacity, 2), dtype=np.int64)
        self.ucms = np.zeros((capacity, 2, cm_width), dtype=np.float64)
        self.dcms = np.zeros((capacity, 2, cm_width), dtype=np.float64)
        self.q_values = np.zeros((capacity, 2, n_actions), dtype=np.float64)
        self.actions = np.zeros((capacity, 2), dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.next_states = np.zeros((capacity, 2), dtype=np.int64)
        self.done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def append(self, state, ucms, dcms, q_values, actions, reward, next_state, done) -> None:
        k = self._next
        self.states[k] = state
        self.ucms[k] = ucms
        self.dcms[k] = dcms
        self.q_values[k] = q_values
        self.actions[k] = [int(a) for a in actions]
        self.rewards[k] = reward
        self.next_states[k] = next_state
        self.done[k] = done
        # 満杯なら最古のレコードを上書き
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """古い順のインデックス"""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def __iter__(self) -> Iterator[Transition]:
        for k in self._order():
            yield Transition(
                state=(int(self.states[k, 0]), int(self.states[k, 1])),
                ucms=self.ucms[k].copy(), dcms=self.dcms[k].copy(), q_values=self.q_values[k].copy(),
                actions=(int(self.actions[k, 0]), int(self.actions[k, 1])),
                reward=float(self.rewards[k]),
                next_state=(int(self.next_states[k, 0]), int(self.next_states[k, 1])),
                done=bool(self.done[k]),
            )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        idx = rng.integers(0, self._size, size=batch_size)
        return {name: getattr(self, name)[idx] for name in ("states", "actions", "rewards", "next_states", "done")}

    def state_visits(self) -> Counter:
        """(b1, b2) ごとの出現回数"""
        counts: Counter = Counter()
        for k in self._order():
            counts[(int(self.states[k, 0]), int(self.states[k, 1]))] += 1
        return counts

    def save(self) -> bytes:
        """zstd圧縮したバイナリに書き出す（古い順に並べ直して保存）"""
        order = self._order()
        buf = io.BytesIO()
        np.savez(buf, **{name: getattr(self, name)[order] for name in _FIELDS})
        payload = zstd.ZstdCompressor(level=19).compress(buf.getvalue())
        header = _HEADER.pack(MEMORY_MAGIC, MEMORY_VERSION, self.capacity, self._size, len(payload))
        return header + payload

    @classmethod
    def load(cls, data: bytes) -> "EpisodicMemory":
        if len(data) < _HEADER.size:
            raise SizeMismatchError(f"memory file truncated: {len(data)} bytes")
        magic, version, capacity, size, payload_len = _HEADER.unpack_from(data)
        if magic != MEMORY_MAGIC or version != MEMORY_VERSION:
            raise CorruptHeaderError(f"not an episodic memory file (magic={magic!r}, version={version})")
        payload = data[_HEADER.size:]
        if len(payload) != payload_len:
            raise SizeMismatchError(f"memory payload is {len(payload)} bytes, header says {payload_len}")
        try:
            raw = zstd.ZstdDecompressor().decompress(payload)
            arrays = np.load(io.BytesIO(raw))
            fields = {name: arrays[name] for name in _FIELDS}
        except (zstd.ZstdError, ValueError, KeyError, OSError) as e:
            raise CorruptHeaderError(f"memory payload unreadable: {e}") from e

        cm_width = fields["ucms"].shape[2]
        memory = cls(capacity, cm_width=cm_width, n_actions=fields["q_values"].shape[2])
        for name in _FIELDS:
            getattr(memory, name)[:size] = fields[name]
        memory._size = size
        memory._next = size % capacity
        logger.debug("memory.loaded", records=size, capacity=capacity)
        return memory


def save_memory(memory: EpisodicMemory, path: str) -> None:
    with open(path, "wb") as f:
        f.write(memory.save())


def load_memory(path: str) -> EpisodicMemory:
    with open(path, "rb") as f:
        return EpisodicMemory.load(f.read())


def memory_or_none(path: Optional[str]) -> Optional[EpisodicMemory]:
    return load_memory(path) if path else None
