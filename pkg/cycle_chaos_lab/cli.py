"""
cycle-chaos-lab コマンドラインツール

データセットの準備、学習、生成器の反復、リアプノフ解析、軌道の発散、
精度・再現率、PCA 射影の各段階を実行し、表を CSV、図を SVG で書き出します。
各コマンドは出力ディレクトリに入力・シード・設定・内容ハッシュを記録した
manifest.json を残します。

終了コード: 0 成功 / 1 使用法・設定の誤り / 2 実行時エラー
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Callable

import click
import numpy as np
from rich.console import Console
from rich.markup import escape
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from cycle_chaos_lab.config import DOMAIN_NAMES, LOG_FORMAT, MANIFEST_FILENAME
from cycle_chaos_lab.data import (
    TriDomain,
    concat_domains,
    dataset_paths,
    load_tridomain,
    synth_tridomain,
    write_idx,
)
from cycle_chaos_lab.dynamics import (
    direct_divergence,
    ensemble_states,
    generator_map,
    henon,
    logistic,
    lyapunov_dimension,
    spectrum_ensemble,
    write_divergence_csv,
    write_ensemble_csv,
    write_spectrum_csv,
)
from cycle_chaos_lab.errors import ConfigError, LabError, ShapeError
from cycle_chaos_lab.evaluation import (
    DiscFeature,
    Pixels,
    classify,
    cyclicity_rate,
    embed,
    load_feature_file,
    pca_project,
    pr_vs_k,
    pr_vs_k_trajectories,
    pr_vs_step,
    reference_pr_vs_k,
    save_features_csv,
    train_probe,
    write_pr_csv,
)
from cycle_chaos_lab.model import ArchConfig, Checkpoint, load_checkpoint
from cycle_chaos_lab.plotting import histogram_grid, image_grid, line_plot, scatter_plot, write_pgm
from cycle_chaos_lab.run_config import RunConfig, load_run_config
from cycle_chaos_lab.training import TrainConfig, train

logger = logging.getLogger(__name__)
console = Console()


# ---------------------------------------------------------------------------
# 共通処理
# ---------------------------------------------------------------------------

def configure_logging(verbose: bool = False, debug: bool = False) -> None:
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.ERROR
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=[logging.StreamHandler()], force=True)


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(cfg: RunConfig, artifacts: list[Path], inputs: list[Path]) -> Path:
    """
    出力ディレクトリに manifest.json を書き出す

    Args:
        cfg: 実行設定
        artifacts: 出力ファイル（出力ディレクトリからの相対パスで記録）
        inputs: 入力ファイル
    """
    out_dir = Path(cfg.out_dir)
    manifest = {
        "command": cfg.command,
        "seed": cfg.seed,
        "config": cfg.to_dict()["values"],
        "inputs": {str(p): sha256_of(p) for p in sorted(set(inputs))},
        "artifacts": {
            Path(p).relative_to(out_dir).as_posix(): sha256_of(p) for p in sorted(set(artifacts))
        },
    }
    path = out_dir / MANIFEST_FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote manifest with {len(manifest['artifacts'])} artifacts to {path}")
    return path


def _write_rows(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".10g")


def _load_data(cfg: RunConfig) -> tuple[TriDomain, TriDomain]:
    if cfg["dataset_dir"]:
        directory = Path(cfg["dataset_dir"])
        for split in ("train", "test"):
            for path in dataset_paths(directory, split):
                if not path.exists():
                    raise ConfigError(f"Dataset file not found: {path}")
        return (load_tridomain(directory, cfg["labels"], "train"),
                load_tridomain(directory, cfg["labels"], "test"))
    return synth_tridomain(cfg["n_train"], cfg["n_test"], cfg["synth_size"], cfg.seed)


def _data_inputs(cfg: RunConfig) -> list[Path]:
    if not cfg["dataset_dir"]:
        return []
    return [p for split in ("train", "test") for p in dataset_paths(cfg["dataset_dir"], split)]


def _load_checkpoint(cfg: RunConfig) -> Checkpoint:
    if not cfg["checkpoint"]:
        raise ConfigError(f"The {cfg.command} command needs 'checkpoint'")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise ConfigError(f"Checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_image_shape(checkpoint: Checkpoint, tri: TriDomain) -> None:
    if tuple(checkpoint.image_shape) != tuple(tri.image_shape):
        raise ShapeError(
            f"Checkpoint expects images of shape {tuple(checkpoint.image_shape)}, "
            f"dataset has {tuple(tri.image_shape)}"
        )


def pick_initial_images(tri: TriDomain, count: int, seed: int) -> np.ndarray:
    """軌道の初期値としてカテゴリ X のテスト画像から count 枚を再現可能に選ぶ（元の順序を保つ）"""
    images = tri.x.images
    count = min(count, len(images))
    chosen = np.sort(np.random.default_rng([seed, count]).choice(len(images), size=count, replace=False))
    return images[chosen]


def generate_sequences(G: Callable, init_images, n_steps: int) -> np.ndarray:
    """
    初期画像ごとの軌道 [n_init, n_steps + 1, H, W, C]

    列 0 が初期画像で、列 n は G を n 回適用した画像です。
    """
    states = np.asarray(init_images)
    frames = [states]
    for _ in range(n_steps):
        states = np.asarray(G(states))
        frames.append(states)
    return np.stack(frames, axis=1)


def _dynamics_setup(cfg: RunConfig, count: int):
    """ベンチマーク写像または生成器写像と、初期点の集合"""
    rng = np.random.default_rng(cfg.seed)
    if cfg["benchmark"] == "henon":
        return henon(), rng.uniform(-0.1, 0.1, size=(count, 2)), []
    if cfg["benchmark"] == "logistic":
        return logistic(), rng.uniform(0.05, 0.95, size=(count, 1)), []
    checkpoint = _load_checkpoint(cfg)
    _, test = _load_data(cfg)
    _check_image_shape(checkpoint, test)
    initial = pick_initial_images(test, count, cfg.seed)
    inputs = [Path(cfg["checkpoint"]), *_data_inputs(cfg)]
    return generator_map(checkpoint.generator("G")), initial.reshape(len(initial), -1), inputs


# ---------------------------------------------------------------------------
# 各段階
# ---------------------------------------------------------------------------

def _run_dataset(cfg: RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    if cfg["source"] == "synth":
        train_tri, test_tri = synth_tridomain(cfg["n_train"], cfg["n_test"], cfg["synth_size"], cfg.seed)
        artifacts = []
        for split, tri in (("train", train_tri), ("test", test_tri)):
            artifacts.extend(write_idx(*dataset_paths(out, split), concat_domains(tri)))
        inputs = []
    else:
        if not cfg["dataset_dir"]:
            raise ConfigError("source = idx needs 'dataset_dir'")
        train_tri, test_tri = _load_data(cfg)
        artifacts, inputs = [], _data_inputs(cfg)

    rows = [
        [split, name, label, len(domain)]
        for split, tri in (("train", train_tri), ("test", test_tri))
        for name, label, domain in zip(DOMAIN_NAMES, tri.labels, tri.domains)
    ]
    artifacts.append(_write_rows(out / "dataset_summary.csv", ["split", "domain", "label", "count"], rows))
    console.print(f"✅ Dataset ready: {len(concat_domains(train_tri))} train / "
                  f"{len(concat_domains(test_tri))} test images")
    return artifacts, inputs


def _train_config(cfg: RunConfig) -> TrainConfig:
    try:
        arch = ArchConfig(
            base_channels=cfg["base_channels"],
            n_resblocks=cfg["n_resblocks"],
            n_downsamples=cfg["n_downsamples"],
            dropout_rate=cfg["dropout_rate"],
        )
        return TrainConfig(
            lam=cfg["lambda"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            learning_rate=cfg["learning_rate"],
            beta1=cfg["beta1"],
            beta2=cfg["beta2"],
            seed=cfg.seed,
            log_epsilon=cfg["log_epsilon"],
            closing_discriminator=cfg["closing_discriminator"],
            checkpoint_every=cfg["checkpoint_every"],
            arch=arch,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _run_train(cfg: RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    config = _train_config(cfg)
    train_tri, _ = _load_data(cfg)
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task("Training...", total=config.epochs)

        def on_epoch(epoch, record):
            progress.update(task, completed=epoch,
                            description=f"Training (adv {record.adv_total:.3f}, cyc {record.cyc_total:.3f})")

        train(config, train_tri, out, progress=on_epoch)

    artifacts = [out / "checkpoint.ccgn", out / "loss_history.csv", *sorted(out.glob("checkpoint_epoch*.ccgn"))]
    console.print(f"✅ Training completed: {out / 'checkpoint.ccgn'}")
    return artifacts, _data_inputs(cfg)


def _run_generate(cfg: RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    checkpoint = _load_checkpoint(cfg)
    train_tri, test_tri = _load_data(cfg)
    _check_image_shape(checkpoint, test_tri)
    init = pick_initial_images(test_tri, cfg["n_init"], cfg.seed)
    sequences = generate_sequences(checkpoint.generator("G"), init, cfg["steps"])

    labels = [f"n={n}" for n in range(sequences.shape[1])]
    artifacts = [image_grid(out / "generated_grid.svg", list(sequences), labels)]
    for r, row in enumerate(sequences):
        for n, image in enumerate(row):
            artifacts.append(write_pgm(out / "pgm" / f"row{r:02d}_step{n:04d}.pgm", image))

    if cfg["probe"]:
        probe = train_probe(train_tri, seed=cfg.seed)
        categories = [[classify(probe, image) for image in row] for row in sequences]
        artifacts.append(_write_rows(
            out / "categories.csv", ["row", "step", "category"],
            [[r, n, c] for r, row in enumerate(categories) for n, c in enumerate(row)],
        ))
        transient = cfg["probe_transient"]
        if sequences.shape[1] - transient >= 2:
            rates = [cyclicity_rate(row, transient) for row in categories]
            rows = [[r, _fmt(rate)] for r, rate in enumerate(rates)] + [["mean", _fmt(np.mean(rates))]]
            artifacts.append(_write_rows(out / "cyclicity.csv", ["row", "cyclicity_rate"], rows))
            console.print(f"📊 Cyclicity rate X->Y->Z->X: {np.mean(rates):.3f} "
                          f"(probe accuracy {probe.accuracy:.3f})")
        else:
            logger.warning(f"⚠️ Orbit too short for a cyclicity rate after {transient} transient steps")

    console.print(f"✅ Generated {len(sequences)} sequences of {cfg['steps']} steps")
    return artifacts, [Path(cfg["checkpoint"]), *_data_inputs(cfg)]


def _run_lyapunov(cfg: RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    dyn, initial, inputs = _dynamics_setup(cfg, cfg["trajectories"])
    ensemble = spectrum_ensemble(dyn, initial, cfg["transient"], cfg["spectrum_steps"],
                                 cfg["exponents"] or None, cfg["workers"])
    dimension = lyapunov_dimension(ensemble.spectrum)
    n_hist = min(cfg["histogram_exponents"], ensemble.per_trajectory.shape[1])

    index = np.arange(1, len(ensemble.mean) + 1)
    summary = [
        ["lambda_1", _fmt(ensemble.mean[0])],
        ["lambda_1_std", _fmt(ensemble.std[0])],
        ["exponent_sum", _fmt(ensemble.mean.sum())],
        ["lyapunov_dimension", _fmt(dimension.value)],
        ["dimension_j", _fmt(dimension.j)],
        ["saturated", _fmt(dimension.saturated)],
        ["trajectories_used", _fmt(len(ensemble.per_trajectory))],
        ["trajectories_failed", _fmt(len(ensemble.failures))],
    ]
    artifacts = [
        write_spectrum_csv(out / "spectrum.csv", ensemble),
        write_ensemble_csv(out / "spectrum_trajectories.csv", ensemble),
        _write_rows(out / "lyapunov_summary.csv", ["quantity", "value"], summary),
        line_plot(out / "spectrum.svg", index, {"lambda_i": ensemble.mean}, "i", "Lyapunov exponent",
                  f"{dyn.name}: D_L = {dimension.value:.3f}", errors={"lambda_i": ensemble.std}),
        histogram_grid(out / "histograms.svg", ensemble.per_trajectory[:, :n_hist], cfg["bins"]),
    ]
    console.print(f"📊 lambda_1 = {ensemble.mean[0]:.4f} ± {ensemble.std[0]:.4f}, "
                  f"D_L = {dimension.value:.3f}")
    return artifacts, inputs


def _run_diverge(cfg: RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    dyn, initial, inputs = _dynamics_setup(cfg, cfg["points"])
    base = ensemble_states(dyn, initial, [cfg["transient"]])[cfg["transient"]]
    curve = direct_divergence(dyn, base, cfg["epsilon"], cfg["divergence_steps"])
    steps = np.arange(len(curve.mean_log))
    summary = [
        ["slope", _fmt(curve.slope)],
        ["intercept", _fmt(curve.intercept)],
        ["fit_start", _fmt(curve.fit_window[0])],
        ["fit_stop", _fmt(curve.fit_window[1])],
        ["pairs", _fmt(len(curve.distances))],
        ["skipped", _fmt(curve.skipped)],
    ]
    artifacts = [
        write_divergence_csv(out / "divergence.csv", curve),
        _write_rows(out / "divergence_summary.csv", ["quantity", "value"], summary),
        line_plot(out / "divergence.svg", steps, {"mean log distance": curve.mean_log}, "n",
                  "mean log d_n", dyn.name, fit=(curve.slope, curve.intercept, curve.fit_window),
                  markers=False),
    ]
    console.print(f"📊 Divergence slope = {curve.slope:.4f} over steps {curve.fit_window}")
    return artifacts, inputs


def _pr_plot(path: Path, table, reference=None) -> Path:
    series = {"precision": table.precision, "recall": table.recall}
    errors = None
    if table.precision_std is not None:
        errors = {"precision": table.precision_std, "recall": table.recall_std}
    if reference is not None:
        series.update({"precision (train vs test)": reference.precision,
                       "recall (train vs test)": reference.recall})
    return line_plot(path, table.index, series, table.index_name, "value", errors=errors)


def _run_pr(cfg: RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    k_range = list(cfg["k_range"])
    if cfg["embedder"] == "external":
        paths = [Path(cfg["features_real"]), Path(cfg["features_generated"])]
        if not all(str(p) not in ("", ".") and p.is_file() for p in paths):
            raise ConfigError("embedder = external needs existing 'features_real' and 'features_generated'")
        table = pr_vs_k(load_feature_file(paths[0]), load_feature_file(paths[1]), k_range)
        artifacts = [write_pr_csv(out / "pr_vs_k.csv", table), _pr_plot(out / "pr_vs_k.svg", table)]
        return artifacts, paths

    checkpoint = _load_checkpoint(cfg)
    train_tri, test_tri = _load_data(cfg)
    _check_image_shape(checkpoint, test_tri)
    G = checkpoint.generator("G")
    if cfg["embedder"] == "disc_feature":
        domain = cfg["feature_domain"]
        embedder = DiscFeature(checkpoint.discriminator(f"D_{domain}"), domain)
    else:
        embedder = Pixels()

    test_images = concat_domains(test_tri).images
    train_images = concat_domains(train_tri).images
    initial = pick_initial_images(test_tri, cfg["trajectories"], cfg.seed)
    trajectories = pr_vs_k_trajectories(test_images, G, initial, k_range, cfg["transient"], embedder)
    reference = reference_pr_vs_k(embed(train_images, embedder), embed(test_images, embedder), k_range, cfg.seed)
    by_step = pr_vs_step(test_images, G, cfg["steps"], cfg["k"], embedder)

    artifacts = [
        write_pr_csv(out / "pr_vs_k.csv", trajectories),
        write_pr_csv(out / "pr_vs_k_reference.csv", reference),
        write_pr_csv(out / "pr_vs_step.csv", by_step),
        _pr_plot(out / "pr_vs_k.svg", trajectories, reference),
        _pr_plot(out / "pr_vs_step.svg", by_step),
    ]
    console.print(f"📊 k={k_range[0]}..{k_range[-1]}: precision {trajectories.precision[-1]:.3f}, "
                  f"recall {trajectories.recall[-1]:.3f} at k={k_range[-1]}")
    return artifacts, [Path(cfg["checkpoint"]), *_data_inputs(cfg)]


def _run_project(cfg: RunConfig, out: Path) -> tuple[list[Path], list[Path]]:
    checkpoint = _load_checkpoint(cfg)
    train_tri, test_tri = _load_data(cfg)
    _check_image_shape(checkpoint, test_tri)
    G = checkpoint.generator("G")
    n_points = cfg["project_points"]

    start = pick_initial_images(test_tri, 1, cfg.seed)
    for _ in range(cfg["transient"]):
        start = G(start)
    orbit = generate_sequences(G, start, n_points)[0, 1:]

    rng = np.random.default_rng(cfg.seed)
    groups, blocks = [], []
    for name, domain in zip(DOMAIN_NAMES, train_tri.domains):
        count = min(n_points, len(domain))
        chosen = np.sort(rng.choice(len(domain), size=count, replace=False))
        blocks.append(domain.images[chosen])
        groups += [name] * count
    blocks.append(orbit)
    groups += ["generated"] * len(orbit)

    vectors = embed(np.concatenate(blocks)).vectors
    projection = pca_project(vectors, 2)
    group_array = np.asarray(groups)
    scatter_groups = {g: projection.points[group_array == g] for g in (*DOMAIN_NAMES, "generated")}

    artifacts = [
        _write_rows(out / "projection.csv", ["group", "pc1", "pc2"],
                    [[g, _fmt(p[0]), _fmt(p[1])] for g, p in zip(groups, projection.points)]),
        _write_rows(out / "pca_explained_variance.csv", ["component", "ratio"],
                    [[i + 1, _fmt(v)] for i, v in enumerate(projection.explained_variance_ratio)]),
        scatter_plot(out / "projection.svg", scatter_groups),
        save_features_csv(out / "features.csv", vectors, groups),
    ]
    console.print(f"✅ Projected {len(vectors)} points "
                  f"(explained variance {projection.explained_variance_ratio.sum():.3f})")
    return artifacts, [Path(cfg["checkpoint"]), *_data_inputs(cfg)]


STAGES = {
    "dataset": _run_dataset,
    "train": _run_train,
    "generate": _run_generate,
    "lyapunov": _run_lyapunov,
    "diverge": _run_diverge,
    "pr": _run_pr,
    "project": _run_project,
}


def _run_command(cfg: RunConfig) -> Path:
    artifacts, inputs = STAGES[cfg.command](cfg, Path(cfg.out_dir))
    if cfg.config_path is not None:
        inputs = [cfg.config_path, *inputs]
    return write_manifest(cfg, artifacts, inputs)


def cmd_dataset(cfg: RunConfig) -> Path:
    """合成図形の生成、または IDX データセットの読み込みと検証"""
    return _run_command(cfg)


def cmd_train(cfg: RunConfig) -> Path:
    """学習してチェックポイントと損失履歴 CSV を書き出す"""
    return _run_command(cfg)


def cmd_generate(cfg: RunConfig) -> Path:
    """生成器を反復した画像グリッド (SVG) と PGM 列"""
    return _run_command(cfg)


def cmd_lyapunov(cfg: RunConfig) -> Path:
    """スペクトル CSV・図、リアプノフ次元、指数ごとのヒストグラム"""
    return _run_command(cfg)


def cmd_diverge(cfg: RunConfig) -> Path:
    """発散曲線 CSV と回帰直線付きの図"""
    return _run_command(cfg)


def cmd_pr(cfg: RunConfig) -> Path:
    """k と時間ステップに対する精度・再現率"""
    return _run_command(cfg)


def cmd_project(cfg: RunConfig) -> Path:
    """学習データと生成軌道の PCA 散布図と生ベクトルの書き出し"""
    return _run_command(cfg)


def cmd_pipeline(cfg: RunConfig) -> Path:
    """
    dataset -> train -> generate -> lyapunov -> diverge -> pr -> project を順に実行

    各段階は出力ディレクトリのサブディレクトリに書き出し、最上位に
    全成果物を列挙した manifest を残します。
    """
    root = Path(cfg.out_dir)
    artifacts, inputs = [], [cfg.config_path] if cfg.config_path is not None else []
    current = cfg
    for stage in STAGES:
        stage_cfg = current.for_command(stage, root / stage)
        console.print(f"[bold blue]🚀 Stage: {stage}[/bold blue]")
        produced, used = STAGES[stage](stage_cfg, root / stage)
        artifacts += produced
        inputs += [p for p in used if root not in Path(p).parents]
        if stage == "dataset" and cfg["source"] == "synth":
            current = current.with_values(dataset_dir=str(root / "dataset"))
        if stage == "train":
            current = current.with_values(checkpoint=str(root / "train" / "checkpoint.ccgn"))
    return write_manifest(cfg, artifacts, inputs)


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "generate": cmd_generate,
    "lyapunov": cmd_lyapunov,
    "diverge": cmd_diverge,
    "pr": cmd_pr,
    "project": cmd_project,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------------------
# click
# ---------------------------------------------------------------------------

def common_options(func):
    func = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory")(func)
    func = click.option("--seed", type=int, default=None, help="Global random seed")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                        help="key = value configuration file")(func)
    return func


def _execute(command: str, config_path, seed, out, **overrides) -> None:
    cfg = load_run_config(command, config_path, overrides, seed, out)
    console.print(f"[bold blue]🚀 {command}: output to {cfg.out_dir}[/bold blue]")
    manifest = COMMANDS[command](cfg)
    console.print(f"[bold green]✅ Done. Manifest: {manifest}[/bold green]")


@click.group()
@click.option("--verbose", is_flag=True, help="Log progress (INFO)")
@click.option("--debug", is_flag=True, help="Log details (DEBUG)")
def cli(verbose: bool, debug: bool):
    """Cyclic three-domain GAN as a dynamical system"""
    configure_logging(verbose, debug)


@cli.command()
@common_options
@click.option("--source", type=click.Choice(["synth", "idx"]), default=None)
@click.option("--dataset-dir", default=None, help="IDX dataset directory")
def dataset(config_path, seed, out, source, dataset_dir):
    """Generate synthetic shapes or verify an IDX dataset"""
    _execute("dataset", config_path, seed, out, source=source, dataset_dir=dataset_dir)


@cli.command("train")
@common_options
@click.option("--epochs", type=int, default=None)
@click.option("--lambda", "lam", type=float, default=None, help="Cycle-consistency weight")
@click.option("--batch-size", type=int, default=None)
@click.option("--dataset-dir", default=None)
def train_command(config_path, seed, out, epochs, lam, batch_size, dataset_dir):
    """Train the generators and discriminators"""
    _execute("train", config_path, seed, out, epochs=epochs, batch_size=batch_size, dataset_dir=dataset_dir,
             **{"lambda": lam})


@cli.command()
@common_options
@click.option("--checkpoint", default=None)
@click.option("--steps", type=int, default=None)
@click.option("--n-init", type=int, default=None)
@click.option("--probe/--no-probe", default=None, help="Classify generated images with a category probe")
def generate(config_path, seed, out, checkpoint, steps, n_init, probe):
    """Iterate the generator from test images"""
    _execute("generate", config_path, seed, out, checkpoint=checkpoint, steps=steps, n_init=n_init, probe=probe)


@cli.command()
@common_options
@click.option("--checkpoint", default=None)
@click.option("--benchmark", type=click.Choice(["henon", "logistic"]), default=None)
@click.option("--steps", type=int, default=None, help="Measured steps per trajectory")
@click.option("--transient", type=int, default=None)
@click.option("--trajectories", type=int, default=None)
@click.option("--exponents", type=int, default=None)
@click.option("--workers", type=int, default=None)
def lyapunov(config_path, seed, out, checkpoint, benchmark, steps, transient, trajectories, exponents, workers):
    """Lyapunov spectrum, dimension and histograms"""
    _execute("lyapunov", config_path, seed, out, checkpoint=checkpoint, benchmark=benchmark,
             spectrum_steps=steps, transient=transient, trajectories=trajectories, exponents=exponents,
             workers=workers)


@cli.command()
@common_options
@click.option("--checkpoint", default=None)
@click.option("--benchmark", type=click.Choice(["henon", "logistic"]), default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--transient", type=int, default=None)
@click.option("--points", type=int, default=None)
def diverge(config_path, seed, out, checkpoint, benchmark, epsilon, steps, transient, points):
    """Direct divergence of nearby trajectories"""
    _execute("diverge", config_path, seed, out, checkpoint=checkpoint, benchmark=benchmark, epsilon=epsilon,
             divergence_steps=steps, transient=transient, points=points)


@cli.command()
@common_options
@click.option("--checkpoint", default=None)
@click.option("--k", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--transient", type=int, default=None)
@click.option("--embedder", type=click.Choice(["pixels", "disc_feature", "external"]), default=None)
def pr(config_path, seed, out, checkpoint, k, steps, transient, embedder):
    """Manifold precision and recall sweeps"""
    _execute("pr", config_path, seed, out, checkpoint=checkpoint, k=k, steps=steps, transient=transient,
             embedder=embedder)


@cli.command()
@common_options
@click.option("--checkpoint", default=None)
@click.option("--transient", type=int, default=None)
def project(config_path, seed, out, checkpoint, transient):
    """PCA projection of training images and a generated orbit"""
    _execute("project", config_path, seed, out, checkpoint=checkpoint, transient=transient)


@cli.command()
@common_options
@click.option("--epochs", type=int, default=None)
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--k", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--transient", type=int, default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--embedder", type=click.Choice(["pixels", "disc_feature"]), default=None)
def pipeline(config_path, seed, out, epochs, lam, k, steps, transient, epsilon, embedder):
    """Run every stage on one configuration"""
    _execute("pipeline", config_path, seed, out, epochs=epochs, k=k, steps=steps, transient=transient,
             epsilon=epsilon, embedder=embedder, **{"lambda": lam})


def run(argv: list[str] | None = None) -> int:
    """
    CLI を実行して終了コードを返す

    Returns:
        0 成功 / 1 使用法・設定の誤り / 2 実行時エラー
    """
    try:
        result = cli.main(args=argv, prog_name="cycle-chaos-lab", standalone_mode=False)
        return result if isinstance(result, int) else 0
    except click.exceptions.Abort:
        console.print("[bold red]❌ Aborted[/bold red]")
        return 1
    except click.ClickException as e:
        console.print(f"[bold red]❌ Error: {escape(e.format_message())}[/bold red]")
        return 1
    except ConfigError as e:
        console.print(f"[bold red]❌ Config error: {escape(str(e))}[/bold red]")
        return 1
    except (LabError, ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        console.print(f"[bold red]❌ Error: {escape(type(e).__name__ + ': ' + str(e))}[/bold red]")
        return 2


def main() -> int:
    return run()
