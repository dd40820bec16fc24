"""
spm_protocol 共通の例外階層
"""
from typing import Optional


class SpmError(Exception):
    """パッケージ内で送出されるすべての例外の基底クラス"""


class ConfigError(SpmError):
    """設定ファイル・設定値の不正"""


class InvalidActionError(SpmError):
    """空バッファでのAccess/Discardなど、環境が受け付けない行動"""

    def __init__(self, ue: int, action: str, buffer_level: int):
        self.ue = ue
        self.action = action
        self.buffer_level = buffer_level
        super().__init__(f"UE{ue + 1} chose {action} with buffer level {buffer_level}")


class ShapeMismatchError(SpmError, ValueError):
    """入力ベクトル幅がセグメントの入力層と一致しない"""


class BufferLevelError(SpmError, ValueError):
    """バッファレベルが [0, b_max] の範囲外"""


class TrainingDivergedError(SpmError):
    """DQN学習中に損失がNaN/Infになった"""


class NpmFormatError(SpmError):
    """NPM重みファイルの形式エラー"""


class CorruptHeaderError(NpmFormatError):
    pass


class SizeMismatchError(NpmFormatError):
    pass


class ProbLogSyntaxError(SpmError):
    """ProbLog形式テキストの構文エラー（行・列つき）"""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class NoRuleError(SpmError):
    """SPMのドメイン外の状態、あるいは対応する規則が存在しない"""

    def __init__(self, state, detail: Optional[str] = None):
        self.state = state
        msg = f"no rule for state {tuple(state)}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class EmptyDomainError(SpmError):
    """状態ドメインが空"""


class NonConvergenceError(SpmError):
    """再構成ループが上限回数内に収束しない"""


class PortfolioError(SpmError):
    """ポートフォリオに該当する環境エントリがない"""


class ModelFileError(SpmError):
    """実験で参照するモデルファイルが存在しない・読めない"""
