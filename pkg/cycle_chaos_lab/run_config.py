"""
コマンドごとの実行設定

`key = value` 形式のテキスト設定ファイルを読み込み、コマンドのスキーマで
検証します。`#` 以降はコメント、空行は無視されます。未知のキー、重複した
キー、書式の誤り、範囲外の値は行番号付きの ConfigError になります。
コマンドラインの指定はファイルの値を上書きします。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from cycle_chaos_lab.config import (
    CLOSING_DISCRIMINATORS,
    DEFAULT_BASE_CHANNELS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_CHECKPOINT_EVERY,
    DEFAULT_CLOSING_DISCRIMINATOR,
    DEFAULT_DIVERGENCE_EPSILON,
    DEFAULT_DIVERGENCE_STEPS,
    DEFAULT_DROPOUT_RATE,
    DEFAULT_EPOCHS,
    DEFAULT_HISTOGRAM_BINS,
    DEFAULT_HISTOGRAM_EXPONENTS,
    DEFAULT_K,
    DEFAULT_K_RANGE,
    DEFAULT_LAMBDA,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOG_EPSILON,
    DEFAULT_N_DOWNSAMPLES,
    DEFAULT_N_RESBLOCKS,
    DEFAULT_N_TRAJECTORIES,
    DEFAULT_PR_STEPS,
    DEFAULT_SEED,
    DEFAULT_SPECTRUM_STEPS,
    DEFAULT_TRANSIENT,
    MAX_LOG_EPSILON,
    SYNTH_IMAGE_SIZE,
    SYNTH_TEST_PER_CATEGORY,
    SYNTH_TRAIN_PER_CATEGORY,
)
from cycle_chaos_lab.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "runs"


def _as_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _as_int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = (int(v) for v in text.split("-", 1))
        return tuple(range(lo, hi + 1))
    return tuple(int(v) for v in text.split(",") if v.strip())


def _positive(value) -> str | None:
    return None if value > 0 else "must be positive"


def _non_negative(value) -> str | None:
    return None if value >= 0 else "must be non-negative"


def _probability(value) -> str | None:
    return None if 0 <= value < 1 else "must lie in [0, 1)"


def _log_epsilon(value) -> str | None:
    return None if 0 < value <= MAX_LOG_EPSILON else f"must lie in (0, {MAX_LOG_EPSILON:g}]"


def _choice(*options) -> Callable[[Any], str | None]:
    def check(value):
        return None if value in options else f"must be one of {', '.join(map(str, options))}"
    return check


def _three_labels(value) -> str | None:
    return None if len(value) == 3 and len(set(value)) == 3 else "needs three distinct labels"


def _k_range(value) -> str | None:
    return None if value and min(value) >= 1 else "needs at least one k >= 1"


@dataclass(frozen=True)
class Key:
    """設定キーの型・既定値・検証"""

    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], str | None] | None = None
    help: str = ""


KEYS: dict[str, Key] = {
    # データ
    "dataset_dir": Key(str, "", help="IDX dataset directory (empty: synthetic shapes)"),
    "labels": Key(_as_int_tuple, (0, 1, 2), _three_labels, "labels assigned to X, Y, Z"),
    "source": Key(str, "synth", _choice("synth", "idx")),
    "synth_size": Key(int, SYNTH_IMAGE_SIZE, _positive),
    "n_train": Key(int, SYNTH_TRAIN_PER_CATEGORY, _positive),
    "n_test": Key(int, SYNTH_TEST_PER_CATEGORY, _positive),
    # モデル
    "base_channels": Key(int, DEFAULT_BASE_CHANNELS, _positive),
    "n_resblocks": Key(int, DEFAULT_N_RESBLOCKS, _non_negative),
    "n_downsamples": Key(int, DEFAULT_N_DOWNSAMPLES, _non_negative),
    "dropout_rate": Key(float, DEFAULT_DROPOUT_RATE, _probability),
    # 学習
    "epochs": Key(int, DEFAULT_EPOCHS, _positive),
    "batch_size": Key(int, DEFAULT_BATCH_SIZE, _positive),
    "lambda": Key(float, DEFAULT_LAMBDA, _positive),
    "learning_rate": Key(float, DEFAULT_LEARNING_RATE, _non_negative),
    "beta1": Key(float, DEFAULT_BETA1, _probability),
    "beta2": Key(float, DEFAULT_BETA2, _probability),
    "log_epsilon": Key(float, DEFAULT_LOG_EPSILON, _log_epsilon),
    "closing_discriminator": Key(str, DEFAULT_CLOSING_DISCRIMINATOR, _choice(*CLOSING_DISCRIMINATORS)),
    "checkpoint_every": Key(int, DEFAULT_CHECKPOINT_EVERY, _non_negative),
    # 生成・解析
    "checkpoint": Key(str, "", help="trained checkpoint file"),
    "benchmark": Key(str, "", _choice("", "henon", "logistic")),
    "n_init": Key(int, 8, _positive),
    "steps": Key(int, DEFAULT_PR_STEPS, _non_negative),
    "probe": Key(_as_bool, False),
    "probe_transient": Key(int, 20, _non_negative),
    "trajectories": Key(int, DEFAULT_N_TRAJECTORIES, _positive),
    "transient": Key(int, DEFAULT_TRANSIENT, _non_negative),
    "spectrum_steps": Key(int, DEFAULT_SPECTRUM_STEPS, _positive),
    "exponents": Key(int, 0, _non_negative, "exponent count (0: min(N, 32))"),
    "histogram_exponents": Key(int, DEFAULT_HISTOGRAM_EXPONENTS, _positive),
    "bins": Key(int, DEFAULT_HISTOGRAM_BINS, _positive),
    "workers": Key(int, 1, _positive),
    "epsilon": Key(float, DEFAULT_DIVERGENCE_EPSILON, _positive),
    "divergence_steps": Key(int, DEFAULT_DIVERGENCE_STEPS, _positive),
    "points": Key(int, DEFAULT_N_TRAJECTORIES, _positive),
    # 評価
    "k": Key(int, DEFAULT_K, _positive),
    "k_range": Key(_as_int_tuple, DEFAULT_K_RANGE, _k_range),
    "embedder": Key(str, "pixels", _choice("pixels", "disc_feature", "external")),
    "feature_domain": Key(str, "X", _choice("X", "Y", "Z")),
    "features_real": Key(str, ""),
    "features_generated": Key(str, ""),
    "project_points": Key(int, 300, _positive),
}

_DATA_KEYS = ("dataset_dir", "labels", "synth_size", "n_train", "n_test")
_ARCH_KEYS = ("base_channels", "n_resblocks", "n_downsamples", "dropout_rate")

COMMAND_KEYS: dict[str, tuple[str, ...]] = {
    "dataset": ("source", *_DATA_KEYS),
    "train": (*_DATA_KEYS, *_ARCH_KEYS, "epochs", "batch_size", "lambda", "learning_rate", "beta1",
              "beta2", "log_epsilon", "closing_discriminator", "checkpoint_every"),
    "generate": (*_DATA_KEYS, "checkpoint", "n_init", "steps", "probe", "probe_transient"),
    "lyapunov": (*_DATA_KEYS, "checkpoint", "benchmark", "trajectories", "transient", "spectrum_steps",
                 "exponents", "histogram_exponents", "bins", "workers"),
    "diverge": (*_DATA_KEYS, "checkpoint", "benchmark", "points", "transient", "epsilon",
                "divergence_steps"),
    "pr": (*_DATA_KEYS, "checkpoint", "k", "k_range", "steps", "trajectories", "transient", "embedder",
           "feature_domain", "features_real", "features_generated"),
    "project": (*_DATA_KEYS, "checkpoint", "project_points", "transient"),
}
COMMAND_KEYS["pipeline"] = tuple(sorted({k for keys in COMMAND_KEYS.values() for k in keys}))


@dataclass(frozen=True)
class RunConfig:
    """検証済みのコマンド設定"""

    command: str
    values: dict[str, Any]
    seed: int = DEFAULT_SEED
    out_dir: Path = Path(DEFAULT_OUT_DIR)
    config_path: Path | None = None

    def __getitem__(self, key: str):
        if key not in self.values:
            raise KeyError(f"'{key}' is not a setting of the {self.command} command")
        return self.values[key]

    def for_command(self, command: str, out_dir: Path | None = None) -> "RunConfig":
        """パイプラインの設定から1段分の設定を取り出す"""
        keys = COMMAND_KEYS[command]
        return RunConfig(command, {k: self.values[k] for k in keys}, self.seed,
                         out_dir if out_dir is not None else self.out_dir, self.config_path)

    def with_values(self, **updates) -> "RunConfig":
        return RunConfig(self.command, {**self.values, **updates}, self.seed, self.out_dir,
                         self.config_path)

    def to_dict(self) -> dict:
        values = {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}
        return {"command": self.command, "seed": self.seed, "out": str(self.out_dir), "values": values}


def _parse_value(command: str, key: str, raw, line: int | None, path) -> Any:
    if key not in COMMAND_KEYS[command]:
        raise ConfigError(f"Unknown key '{key}' for command '{command}'", line, path)
    entry = KEYS[key]
    try:
        value = entry.parse(raw) if isinstance(raw, str) else raw
    except ValueError as e:
        raise ConfigError(f"Invalid value for '{key}': {e}", line, path) from e
    if entry.check is not None:
        problem = entry.check(value)
        if problem:
            raise ConfigError(f"'{key}' {problem} (got {value!r})", line, path)
    return value


def parse_config_text(text: str, command: str, path=None) -> dict[str, tuple[Any, int]]:
    """
    設定テキストを解析

    Returns:
        キー -> (値, 行番号)。seed と out も含む
    """
    if command not in COMMAND_KEYS:
        raise ConfigError(f"Unknown command '{command}'")
    entries: dict[str, tuple[Any, int]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"Expected 'key = value', got '{content}'", number, path)
        key, raw = (part.strip() for part in content.split("=", 1))
        if not key:
            raise ConfigError("Missing key before '='", number, path)
        if key in entries:
            raise ConfigError(f"Duplicate key '{key}' (first set on line {entries[key][1]})", number, path)
        if key == "seed":
            try:
                value = int(raw)
            except ValueError as e:
                raise ConfigError(f"Invalid value for 'seed': {e}", number, path) from e
        elif key == "out":
            if not raw:
                raise ConfigError("'out' must not be empty", number, path)
            value = raw
        else:
            value = _parse_value(command, key, raw, number, path)
        entries[key] = (value, number)
    return entries


def load_run_config(command: str, path=None, overrides: Mapping[str, Any] | None = None,
                    seed: int | None = None, out=None) -> RunConfig:
    """
    既定値 <- 設定ファイル <- コマンドラインの順に値を決める

    Args:
        command: コマンド名
        path: 設定ファイル（省略可）
        overrides: コマンドラインで指定された値（None は未指定として無視）
        seed: --seed
        out: --out
    """
    if command not in COMMAND_KEYS:
        raise ConfigError(f"Unknown command '{command}'")
    values = {key: KEYS[key].default for key in COMMAND_KEYS[command]}
    file_seed, file_out = DEFAULT_SEED, DEFAULT_OUT_DIR
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        entries = parse_config_text(path.read_text(encoding="utf-8"), command, path)
        file_seed = entries.pop("seed", (file_seed, 0))[0]
        file_out = entries.pop("out", (file_out, 0))[0]
        values.update({k: v for k, (v, _) in entries.items()})
        logger.info(f"Loaded {len(entries)} settings from {path}")

    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _parse_value(command, key, raw, None, None)

    return RunConfig(
        command,
        values,
        seed if seed is not None else file_seed,
        Path(out if out is not None else file_out),
        path,
    )

