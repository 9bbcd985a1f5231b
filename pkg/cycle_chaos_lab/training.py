"""
3ドメイン巡回GANの損失と学習ループ

6項の敵対的損失、6項のサイクル一貫性損失、その合計目的関数と、
識別器の上昇ステップと生成器の下降ステップを交互に行う学習ループを提供します。

主要機能：
- 損失の項別内訳（内訳の和は常に合計と一致）
- 非飽和形式の生成器更新
- Adam 最適化（モーメントバッファは TrainState が保持）
- 非有限な損失の検出と直前の正常状態の保持
- 損失履歴 CSV と定期的な部分チェックポイント
"""

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from cycle_chaos_lab.config import (
    DEFAULT_ADAM_EPSILON,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_CHECKPOINT_EVERY,
    DEFAULT_EPOCHS,
    DEFAULT_LAMBDA,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOG_EPSILON,
    DEFAULT_SEED,
    CLOSING_DISCRIMINATORS,
    DEFAULT_CLOSING_DISCRIMINATOR,
    MAX_LOG_EPSILON,
    NETWORK_NAMES,
)
from cycle_chaos_lab.data import TriDomain, batch_triples
from cycle_chaos_lab.errors import NonFiniteError, TrainingDivergedError
from cycle_chaos_lab.model import (
    ArchConfig,
    Checkpoint,
    build_discriminator,
    build_generator,
    save_checkpoint,
)
from cycle_chaos_lab.tensor_core import TRAIN, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdversarialTerm:
    """L_GAN(生成器, 識別器, 入力ドメイン, 実画像ドメイン) の1項"""

    name: str
    generator: str
    source: int
    discriminator: str
    real: int


@dataclass(frozen=True)
class CycleTerm:
    """E[|| second(first(v)) - v ||_1] の1項"""

    name: str
    first: str
    second: str
    domain: int


CYCLE_TERMS = (
    CycleTerm("cyc_FG_x", "G", "F", 0),
    CycleTerm("cyc_GF_y", "F", "G", 1),
    CycleTerm("cyc_FG_y", "G", "F", 1),
    CycleTerm("cyc_GF_z", "F", "G", 2),
    CycleTerm("cyc_FG_z", "G", "F", 2),
    CycleTerm("cyc_GF_x", "F", "G", 0),
)


def adversarial_terms(closing: str = DEFAULT_CLOSING_DISCRIMINATOR) -> tuple[AdversarialTerm, ...]:
    """
    巡回GANの敵対的損失を構成する6項

    最後の項 L_GAN(F, ?, X, Z) の判定には既定で D_X を使います。
    closing="D_Z" を指定すると Z の画像を D_Z で判定します。
    """
    if closing not in CLOSING_DISCRIMINATORS:
        raise ValueError(f"closing_discriminator must be one of {CLOSING_DISCRIMINATORS}, got '{closing}'")
    return (
        AdversarialTerm("adv_G_XY", "G", 0, "D_Y", 1),
        AdversarialTerm("adv_F_YX", "F", 1, "D_X", 0),
        AdversarialTerm("adv_G_YZ", "G", 1, "D_Z", 2),
        AdversarialTerm("adv_F_ZY", "F", 2, "D_Y", 1),
        AdversarialTerm("adv_G_ZX", "G", 2, "D_X", 0),
        AdversarialTerm("adv_F_XZ", "F", 0, closing, 2),
    )


ADV_TERM_NAMES = tuple(t.name for t in adversarial_terms())
CYC_TERM_NAMES = tuple(t.name for t in CYCLE_TERMS)


@dataclass(frozen=True)
class TrainConfig:
    """学習設定"""

    lam: float = DEFAULT_LAMBDA
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    adam_epsilon: float = DEFAULT_ADAM_EPSILON
    seed: int = DEFAULT_SEED
    log_epsilon: float = DEFAULT_LOG_EPSILON
    closing_discriminator: str = DEFAULT_CLOSING_DISCRIMINATOR
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Moment decays must lie in [0, 1)")
        if not 0 < self.log_epsilon <= MAX_LOG_EPSILON:
            raise ValueError(f"log_epsilon must lie in (0, {MAX_LOG_EPSILON}], got {self.log_epsilon}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        adversarial_terms(self.closing_discriminator)

    def to_metadata(self) -> dict:
        values = asdict(self)
        values.pop("arch")
        values["lambda"] = values.pop("lam")
        return values


@dataclass(frozen=True)
class LossBreakdown:
    """項名 -> 値。total は項の和"""

    terms: dict[str, float]

    @property
    def total(self) -> float:
        return sum(self.terms.values())


@dataclass(frozen=True)
class TotalLoss:
    total: float
    adversarial: LossBreakdown
    cycle: LossBreakdown


# ---------------------------------------------------------------------------
# 損失カーネル
# ---------------------------------------------------------------------------

def _clamp(p, log_eps: float) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), log_eps, 1.0 - log_eps)


def gan_loss_from_probs(p_real, p_fake, log_eps: float = DEFAULT_LOG_EPSILON) -> float:
    """mean log D(real) + mean log(1 - D(fake))（引数は [eps, 1-eps] にクランプ）"""
    p_real, p_fake = np.ravel(p_real), np.ravel(p_fake)
    if p_real.size == 0 or p_fake.size == 0:
        raise ValueError("GAN loss needs non-empty real and fake batches")
    return float(np.mean(np.log(_clamp(p_real, log_eps))) + np.mean(np.log1p(-_clamp(p_fake, log_eps))))


def gan_loss(D: Callable, real, fake, log_eps: float = DEFAULT_LOG_EPSILON) -> float:
    """
    1組の生成器・識別器の L_GAN を推論モードで評価

    Args:
        D: 画像バッチ -> 確率 [N] の識別器
        real: 実画像バッチ
        fake: 生成画像バッチ
        log_eps: log のクランプ幅
    """
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("GAN loss needs non-empty real and fake batches")
    return gan_loss_from_probs(D(real), D(fake), log_eps)


def adversarial_loss_total(G: Callable, F: Callable, D_X: Callable, D_Y: Callable, D_Z: Callable,
                           triple, log_eps: float = DEFAULT_LOG_EPSILON,
                           closing: str = DEFAULT_CLOSING_DISCRIMINATOR) -> LossBreakdown:
    """敵対的損失の6項の和と内訳"""
    generators = {"G": G, "F": F}
    discriminators = {"D_X": D_X, "D_Y": D_Y, "D_Z": D_Z}
    terms = {}
    for term in adversarial_terms(closing):
        fake = generators[term.generator](triple[term.source])
        terms[term.name] = gan_loss(discriminators[term.discriminator], triple[term.real], fake, log_eps)
    return LossBreakdown(terms)


def cycle_loss(G: Callable, F: Callable, triple) -> LossBreakdown:
    """
    サイクル一貫性損失の6項の和と内訳

    各項は画素平均の L1 距離のバッチ平均です。
    """
    generators = {"G": G, "F": F}
    terms = {}
    for term in CYCLE_TERMS:
        original = np.asarray(triple[term.domain])
        if len(original) == 0:
            raise ValueError("Cycle loss needs non-empty batches")
        restored = generators[term.second](generators[term.first](original))
        terms[term.name] = float(np.mean(np.abs(np.asarray(restored, np.float64) - original)))
    return LossBreakdown(terms)


def combine_losses(adversarial: float, cycle: float, lam: float) -> float:
    """L_ADV + lambda * L_CYC"""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return adversarial + lam * cycle


def total_loss(G, F, D_X, D_Y, D_Z, triple, lam: float = DEFAULT_LAMBDA,
               log_eps: float = DEFAULT_LOG_EPSILON, closing: str = DEFAULT_CLOSING_DISCRIMINATOR) -> TotalLoss:
    adversarial = adversarial_loss_total(G, F, D_X, D_Y, D_Z, triple, log_eps, closing)
    cycle = cycle_loss(G, F, triple)
    return TotalLoss(combine_losses(adversarial.total, cycle.total, lam), adversarial, cycle)


# ---------------------------------------------------------------------------
# 最適化
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Adam:
    """適応的モーメント推定。新しい配列を返し、入力は変更しない"""

    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    epsilon: float = DEFAULT_ADAM_EPSILON

    def init(self, params: Mapping[str, np.ndarray]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}

    def update(self, params, grads, moments, t: int):
        """
        t ステップ目（1始まり）の更新

        Returns:
            (新しいパラメータ, 新しいモーメント)
        """
        new_params, new_moments = {}, {}
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, value in params.items():
            grad = grads.get(name)
            m, v = moments[name]
            if grad is None:
                new_params[name], new_moments[name] = value, (m, v)
                continue
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            m_hat = m / np.float32(correction1)
            v_hat = v / np.float32(correction2)
            step = np.float32(self.learning_rate) * m_hat / (np.sqrt(v_hat) + np.float32(self.epsilon))
            new_params[name] = (value - step).astype(value.dtype, copy=False)
            new_moments[name] = (m.astype(value.dtype, copy=False), v.astype(value.dtype, copy=False))
        return new_params, new_moments


# ---------------------------------------------------------------------------
# 学習状態
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    """1エポックの項別平均損失"""

    epoch: int
    adversarial: dict[str, float]
    cycle: dict[str, float]

    @property
    def adv_total(self) -> float:
        return sum(self.adversarial.values())

    @property
    def cyc_total(self) -> float:
        return sum(self.cycle.values())


@dataclass(frozen=True)
class TrainState:
    """5つのネットワーク、モーメントバッファ、エポック数、損失履歴"""

    networks: dict
    moments: dict
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    history: tuple[EpochRecord, ...] = ()
    last_losses: tuple[LossBreakdown, LossBreakdown] | None = None

    @property
    def optimizer(self) -> Adam:
        c = self.config
        return Adam(c.learning_rate, c.beta1, c.beta2, c.adam_epsilon)


def init_train_state(config: TrainConfig, image_shape) -> TrainState:
    """シードから5つのネットワークを初期化"""
    rng = np.random.default_rng(config.seed)
    networks = {}
    for name in NETWORK_NAMES:
        build = build_generator if name in ("G", "F") else build_discriminator
        networks[name] = build(config.arch, image_shape, rng)
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_epsilon)
    moments = {name: optimizer.init(net.graph.params) for name, net in networks.items()}
    return TrainState(networks, moments, config)


def _log_grad(p: np.ndarray, log_eps: float) -> np.ndarray:
    """d/dp log(clamp(p))"""
    inside = (p >= log_eps) & (p <= 1.0 - log_eps)
    return np.where(inside, 1.0 / np.clip(p, log_eps, None), 0.0)


def _log1m_grad(p: np.ndarray, log_eps: float) -> np.ndarray:
    """d/dp log(1 - clamp(p))"""
    inside = (p >= log_eps) & (p <= 1.0 - log_eps)
    return np.where(inside, -1.0 / np.clip(1.0 - p, log_eps, None), 0.0)


def _add_grads(total: dict, grads: Mapping[str, np.ndarray]) -> None:
    for key, value in grads.items():
        total[key] = total[key] + value if key in total else value


def _split(array: np.ndarray, sizes) -> list[np.ndarray]:
    return np.split(array, np.cumsum(sizes)[:-1])


def _check_finite_losses(breakdown: LossBreakdown, grads: Mapping[str, Mapping[str, np.ndarray]], phase: str):
    bad_terms = [k for k, v in breakdown.terms.items() if not np.isfinite(v)]
    if bad_terms:
        raise NonFiniteError(f"Non-finite {phase} loss terms: {bad_terms}")
    for net, tensors in grads.items():
        for name, value in tensors.items():
            if not np.isfinite(value).all():
                raise NonFiniteError(f"Non-finite {phase} gradient for {net}/{name}")


def _discriminator_step(state: TrainState, domains, rng):
    cfg = state.config
    nets = state.networks
    sizes = [len(d) for d in domains]
    stacked = np.concatenate(domains)
    fakes = {name: _split(nets[name].graph(stacked, TRAIN, rng), sizes) for name in ("G", "F")}

    grads = {name: {} for name in ("D_X", "D_Y", "D_Z")}
    values = {}
    for term in adversarial_terms(cfg.closing_discriminator):
        graph = nets[term.discriminator].graph
        real, fake = domains[term.real], fakes[term.generator][term.source]
        probs, tape = graph.forward(np.concatenate([real, fake]), TRAIN, rng)
        p = probs.reshape(-1).astype(np.float64)
        p_real, p_fake = p[:len(real)], p[len(real):]
        values[term.name] = gan_loss_from_probs(p_real, p_fake, cfg.log_epsilon)
        # 上昇ステップ: -L_GAN を最小化
        upstream = -np.concatenate([
            _log_grad(p_real, cfg.log_epsilon) / len(p_real),
            _log1m_grad(p_fake, cfg.log_epsilon) / len(p_fake),
        ])
        result = graph.backward(tape, upstream.reshape(probs.shape).astype(probs.dtype))
        _add_grads(grads[term.discriminator], result.params)
    return LossBreakdown(values), grads


def _generator_step(state: TrainState, networks, domains, rng):
    cfg = state.config
    G, F = networks["G"].graph, networks["F"].graph
    sizes = [len(d) for d in domains]
    stacked = np.concatenate(domains)

    g_out, g_tape = G.forward(stacked, TRAIN, rng)
    f_out, f_tape = F.forward(stacked, TRAIN, rng)
    fg_out, fg_tape = F.forward(g_out, TRAIN, rng)
    gf_out, gf_tape = G.forward(f_out, TRAIN, rng)
    outputs = {"G": g_out, "F": f_out}
    restored = {("G", "F"): fg_out, ("F", "G"): gf_out}

    # サイクル一貫性項
    upstream_restored = {key: np.zeros_like(value) for key, value in restored.items()}
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    cycle_values = {}
    for term in CYCLE_TERMS:
        lo, hi = offsets[term.domain], offsets[term.domain + 1]
        diff = restored[(term.first, term.second)][lo:hi].astype(np.float64) - domains[term.domain]
        cycle_values[term.name] = float(np.mean(np.abs(diff)))
        upstream_restored[(term.first, term.second)][lo:hi] += \
            (cfg.lam * np.sign(diff) / diff.size).astype(np.float32)

    # 非飽和形式の敵対項: -mean log D(fake)
    upstream_out = {name: np.zeros_like(value) for name, value in outputs.items()}
    for term in adversarial_terms(cfg.closing_discriminator):
        lo, hi = offsets[term.source], offsets[term.source + 1]
        fake = outputs[term.generator][lo:hi]
        graph = networks[term.discriminator].graph
        probs, tape = graph.forward(fake, TRAIN, rng)
        p = probs.reshape(-1).astype(np.float64)
        upstream = -_log_grad(p, cfg.log_epsilon) / len(p)
        result = graph.backward(tape, upstream.reshape(probs.shape).astype(probs.dtype), need_params=False)
        upstream_out[term.generator][lo:hi] += result.input

    fg = F.backward(fg_tape, upstream_restored[("G", "F")])
    gf = G.backward(gf_tape, upstream_restored[("F", "G")])
    upstream_out["G"] += fg.input
    upstream_out["F"] += gf.input
    g = G.backward(g_tape, upstream_out["G"])
    f = F.backward(f_tape, upstream_out["F"])

    grads = {"G": dict(g.params), "F": dict(f.params)}
    _add_grads(grads["G"], gf.params)
    _add_grads(grads["F"], fg.params)
    return LossBreakdown(cycle_values), grads


def train_step(state: TrainState, triple) -> TrainState:
    """
    1回の学習ステップ

    識別器の上昇ステップ（生成器固定）の後に、合計目的関数に対する生成器の
    下降ステップ（識別器固定）を行います。損失や勾配が非有限になった場合は
    TrainingDivergedError を送出し、引数の state をそのまま保持します。

    Args:
        state: 現在の学習状態
        triple: (x, y, z) のバッチ

    Returns:
        更新後の TrainState（last_losses に敵対的損失とサイクル損失の内訳）
    """
    domains = tuple(as_tensor(v, "training batch", np.float32) for v in triple)
    if any(len(d) == 0 for d in domains):
        raise ValueError("Training batches must be non-empty")
    # ドロップアウトのマスクはステップ番号から決定的に生成
    rng = np.random.default_rng([state.config.seed, state.step])
    optimizer = state.optimizer
    t = state.step + 1
    try:
        adversarial, d_grads = _discriminator_step(state, domains, rng)
        _check_finite_losses(adversarial, d_grads, "discriminator")
        networks, moments = dict(state.networks), dict(state.moments)
        for name, grads in d_grads.items():
            net = networks[name]
            params, moments[name] = optimizer.update(net.graph.params, grads, moments[name], t)
            networks[name] = net.with_params(params)

        cycle, g_grads = _generator_step(state, networks, domains, rng)
        _check_finite_losses(cycle, g_grads, "generator")
        for name, grads in g_grads.items():
            net = networks[name]
            params, moments[name] = optimizer.update(net.graph.params, grads, moments[name], t)
            networks[name] = net.with_params(params)
    except NonFiniteError as e:
        logger.error(f"❌ Training step {t} diverged: {e}")
        raise TrainingDivergedError(str(e), last_good_state=state) from e

    return replace(state, networks=networks, moments=moments, step=t,
                   last_losses=(adversarial, cycle))


# ---------------------------------------------------------------------------
# 学習ループ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainResult:
    checkpoint: Checkpoint
    history: tuple[EpochRecord, ...]
    state: TrainState


def checkpoint_from_state(state: TrainState) -> Checkpoint:
    metadata = state.config.to_metadata()
    metadata.update({"epochs_completed": state.epoch, "steps": state.step})
    return Checkpoint.from_networks(state.networks, metadata)


def loss_csv_header() -> list[str]:
    return ["epoch", "adv_total", "cyc_total", *ADV_TERM_NAMES, *CYC_TERM_NAMES]


def write_loss_csv(path, history) -> Path:
    """損失履歴 CSV: epoch, adv_total, cyc_total, 敵対項6つ, サイクル項6つ"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(loss_csv_header())
        for record in history:
            row = [record.epoch, record.adv_total, record.cyc_total]
            row += [record.adversarial[k] for k in ADV_TERM_NAMES]
            row += [record.cycle[k] for k in CYC_TERM_NAMES]
            writer.writerow([row[0]] + [format(v, ".10g") for v in row[1:]])
    return path


def train(config: TrainConfig, tri: TriDomain, out_dir=None,
          progress: Callable[[int, EpochRecord], None] | None = None) -> TrainResult:
    """
    epochs x バッチ数の train_step を実行

    Args:
        config: 学習設定
        tri: 学習用 TriDomain
        out_dir: 指定するとチェックポイント、部分チェックポイント、損失 CSV を書き出す
        progress: エポックごとに呼ばれるコールバック

    Returns:
        TrainResult（最終チェックポイントと損失履歴）
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    state = init_train_state(config, tri.image_shape)
    logger.info(f"🚀 Training for {config.epochs} epochs (batch {config.batch_size}, lambda {config.lam})")

    for epoch in range(1, config.epochs + 1):
        sums: dict[str, float] = defaultdict(float)
        # 3要素目でドロップアウト系列 [seed, step] と区別
        batch_rng = np.random.default_rng([config.seed, epoch, 1])
        count = 0
        try:
            for triple in batch_triples(tri, config.batch_size, batch_rng):
                state = train_step(state, triple)
                adversarial, cycle = state.last_losses
                for key, value in {**adversarial.terms, **cycle.terms}.items():
                    sums[key] += value
                count += 1
        except TrainingDivergedError as e:
            if out_dir is not None:
                partial = replace(e.last_good_state, epoch=epoch - 1)
                save_checkpoint(out_dir / "checkpoint_last_good.ccgn", checkpoint_from_state(partial))
                write_loss_csv(out_dir / "loss_history.csv", partial.history)
            raise

        record = EpochRecord(
            epoch,
            {k: sums[k] / count for k in ADV_TERM_NAMES},
            {k: sums[k] / count for k in CYC_TERM_NAMES},
        )
        state = replace(state, epoch=epoch, history=state.history + (record,))
        logger.info(f"📊 Epoch {epoch}: adv={record.adv_total:.4f} cyc={record.cyc_total:.4f}")

        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0 \
                and epoch < config.epochs:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.ccgn", checkpoint_from_state(state))
        if progress is not None:
            progress(epoch, record)

    checkpoint = checkpoint_from_state(state)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.ccgn", checkpoint)
        write_loss_csv(out_dir / "loss_history.csv", state.history)
    logger.info("✅ Training completed")
    return TrainResult(checkpoint, state.history, state)
