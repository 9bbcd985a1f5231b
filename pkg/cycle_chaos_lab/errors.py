"""ラボ全体で使う例外クラス"""


class LabError(Exception):
    """全てのラボ例外の基底クラス"""


class ShapeError(LabError, ValueError):
    """テンソル形状の不一致"""


class NonFiniteError(LabError, ArithmeticError):
    """NaN/Infの検出"""


class JacobianSizeError(LabError, MemoryError):
    """ヤコビ行列が設定上限を超える"""


class DataFormatError(LabError, ValueError):
    """ファイル形式の誤り（マジックナンバー等）"""


class ConsistencyError(LabError, ValueError):
    """件数や名前の整合性の誤り"""


class TruncatedFileError(LabError, EOFError):
    """ファイルが途中で切れている"""


class CheckpointVersionError(LabError, ValueError):
    """サポート外のチェックポイントバージョン"""


class UnsortedSpectrumError(LabError, ValueError):
    """リアプノフスペクトルが降順でない"""


class RankCollapseError(LabError, ArithmeticError):
    """接ベクトルの正規化係数がゼロになった"""

    def __init__(self, step: int, index: int):
        super().__init__(f"Tangent vector {index} collapsed at step {step}")
        self.step = step
        self.index = index


class TrainingDivergedError(LabError, ArithmeticError):
    """学習中の非有限な損失。直前の正常な状態を保持する"""

    def __init__(self, message: str, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state


class ProbeTrainingError(LabError, RuntimeError):
    """カテゴリ判定プローブの学習失敗"""

    def __init__(self, accuracy: float, threshold: float):
        super().__init__(
            f"Probe training degenerated: held-out accuracy {accuracy:.3f} < {threshold:.3f}"
        )
        self.accuracy = accuracy


class ConfigError(LabError, ValueError):
    """設定ファイルの誤り（行番号付き）"""

    def __init__(self, message: str, line: int | None = None, path=None):
        location = ""
        if path is not None and line is not None:
            location = f"{path}:{line}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")
        self.line = line
        self.path = path
