"""
NPM重みファイルのエンコード/デコード

フォーマット（すべてリトルエンディアン）:
    ヘッダー   <4sHHII  magic 'NPMW', version, b_max, セグメント数, パラメータ総数
    セグメント <BB      出力ReLUフラグ, 層数 n  に続けて <nI 層サイズ
    本体       float32  セグメント順に、層ごとに W（行優先）→ b
"""
import hashlib
import struct
from typing import List

import numpy as np
import structlog

from spm_protocol.errors import CorruptHeaderError, ModelFileError, NpmFormatError, SizeMismatchError
from spm_protocol.services.neural_protocol import N_ACTIONS, SEGMENT_ORDER, MlpSegment, NPModel

logger = structlog.get_logger(__name__)

NPM_MAGIC = b"NPMW"
NPM_VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_SEGMENT = struct.Struct("<BB")


def _segment_param_count(sizes: List[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def save_npm(model: NPModel) -> bytes:
    segments = model.segments()
    parts = [_HEADER.pack(NPM_MAGIC, NPM_VERSION, model.b_max, len(SEGMENT_ORDER), model.param_count)]
    for name in SEGMENT_ORDER:
        seg = segments[name]
        parts.append(_SEGMENT.pack(int(seg.output_relu), len(seg.layer_sizes)))
        parts.append(struct.pack(f"<{len(seg.layer_sizes)}I", *seg.layer_sizes))
    for name in SEGMENT_ORDER:
        seg = segments[name]
        for w, b in zip(seg.weights, seg.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def load_npm(data: bytes) -> NPModel:
    """
    バイト列からNPModelを復元する。

    Raises:
        CorruptHeaderError: マジック/バージョン/層構成が不正
        SizeMismatchError: 本体の長さがヘッダーのパラメータ数と合わない
    """
    if len(data) < _HEADER.size:
        raise SizeMismatchError(f"NPM stream truncated: {len(data)} bytes")
    magic, version, b_max, n_segments, param_count = _HEADER.unpack_from(data, 0)
    if magic != NPM_MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}, expected {NPM_MAGIC!r}")
    if version != NPM_VERSION:
        raise CorruptHeaderError(f"unsupported NPM version {version}")
    if n_segments != len(SEGMENT_ORDER):
        raise CorruptHeaderError(f"expected {len(SEGMENT_ORDER)} segments, header says {n_segments}")

    offset = _HEADER.size
    layouts = []
    try:
        for _ in range(n_segments):
            output_relu, n_sizes = _SEGMENT.unpack_from(data, offset)
            offset += _SEGMENT.size
            sizes = list(struct.unpack_from(f"<{n_sizes}I", data, offset))
            offset += 4 * n_sizes
            layouts.append((bool(output_relu), sizes))
    except struct.error as e:
        raise SizeMismatchError(f"NPM stream truncated inside segment table: {e}") from e

    if sum(_segment_param_count(sizes) for _, sizes in layouts) != param_count:
        raise CorruptHeaderError("segment table disagrees with header parameter count")
    body = data[offset:]
    if len(body) != 4 * param_count:
        raise SizeMismatchError(f"expected {4 * param_count} parameter bytes, found {len(body)}")

    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    cursor = 0
    segments = {}
    for name, (output_relu, sizes) in zip(SEGMENT_ORDER, layouts):
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(values[cursor:cursor + n_in * n_out].reshape(n_in, n_out).copy())
            cursor += n_in * n_out
            biases.append(values[cursor:cursor + n_out].copy())
            cursor += n_out
        segments[name] = MlpSegment(sizes, weights, biases, output_relu)

    cm_width = segments["ucm0"].output_width
    if segments["act0"].output_width != N_ACTIONS:
        raise CorruptHeaderError(f"action segment width {segments['act0'].output_width} != {N_ACTIONS}")
    try:
        return NPModel(
            b_max=b_max,
            ucm_seg=[segments["ucm0"], segments["ucm1"]],
            dcm_seg=[segments["dcm0"], segments["dcm1"]],
            action_seg=[segments["act0"], segments["act1"]],
            cm_width=cm_width,
        )
    except NpmFormatError:
        raise
    except ValueError as e:
        raise CorruptHeaderError(f"inconsistent segment layout: {e}") from e


def npm_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_npm(model: NPModel, path: str) -> int:
    data = save_npm(model)
    with open(path, "wb") as f:
        f.write(data)
    logger.info("npm.saved", path=path, bytes=len(data), params=model.param_count)
    return len(data)


def read_npm(path: str) -> NPModel:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise ModelFileError(f"NPM file not found: {path}") from e
    return load_npm(data)
