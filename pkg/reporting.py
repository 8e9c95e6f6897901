"""
Report emission: CSV summaries, reconstruction grids and trajectory plots.
"""

import csv
import logging
import math
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402

from attacks import AttackResult, TrajectoryRecord  # noqa: E402
from fedsim import RoundLog  # noqa: E402
from metrics import asr  # noqa: E402
from persistence import ResultsBundle  # noqa: E402

logger = logging.getLogger("reporting")
logger.setLevel(logging.DEBUG)

SUMMARY_HEADER = ["defense", "params", "ssim_mean", "ssim_std", "asr", "psnr_mean", "accuracy"]
VICTIM_HEADER = ["attack", "victim", "sample", "label", "ssim", "psnr", "mse", "iterations", "stop_reason", "best_loss", "error"]
ROUND_HEADER = ["round", "mean_train_loss", "mean_val_loss", "test_loss", "test_accuracy", "wall_time", "client_train_loss", "client_val_loss"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.6g}"
    return str(value)


def summary_rows(bundle: ResultsBundle) -> List[List[str]]:
    rows = []
    for run in bundle.runs:
        defense = bundle.defense_label if len(bundle.runs) == 1 else f"{bundle.defense_label} [{run.attack.label()}]"
        report = run.report
        rows.append(
            [
                defense,
                str(bundle.parameter_count),
                _fmt(report.ssim_mean),
                _fmt(report.ssim_std),
                _fmt(report.asr),
                _fmt(report.psnr_mean),
                _fmt(bundle.accuracy),
            ]
        )
    return rows


def write_summary_csv(bundles: Sequence[ResultsBundle], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_HEADER)
        for bundle in bundles:
            writer.writerows(summary_rows(bundle))
    return path


def write_victims_csv(bundle: ResultsBundle, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(VICTIM_HEADER)
        for run in bundle.runs:
            for victim, result in enumerate(run.results):
                metrics = result.metrics
                writer.writerow(
                    [
                        run.attack.label(),
                        victim,
                        bundle.victim_indices[victim],
                        bundle.victim_labels[victim],
                        _fmt(metrics.ssim if metrics else None),
                        _fmt(metrics.psnr if metrics else None),
                        _fmt(metrics.mse if metrics else None),
                        result.iterations,
                        result.stop_reason,
                        _fmt(result.best_loss),
                        result.error or "",
                    ]
                )
    return path


def write_rounds_csv(rounds: Sequence[RoundLog], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ROUND_HEADER)
        for log in rounds:
            train = [value for value in log.client_train_loss if not math.isnan(value)]
            writer.writerow(
                [
                    log.round,
                    _fmt(sum(train) / len(train) if train else None),
                    _fmt(log.mean_val_loss),
                    _fmt(log.test_loss),
                    _fmt(log.test_accuracy),
                    _fmt(log.wall_time),
                    ";".join(_fmt(value) for value in log.client_train_loss),
                    ";".join(_fmt(value) for value in log.client_val_loss),
                ]
            )
    return path


def _as_image(tensor: torch.Tensor):
    image = tensor.detach().to(torch.float32).clamp(0.0, 1.0)
    if image.shape[0] == 1:
        return image[0].numpy(), "gray"
    return image.permute(1, 2, 0).numpy(), None


def save_reconstruction_grid(
    originals: torch.Tensor, results: Sequence[AttackResult], path: Path, title: str = "", columns: int = 8
) -> Path:
    """Originals on odd rows, reconstructions (with SSIM) below them"""
    count = len(results)
    columns = max(1, min(columns, count))
    blocks = math.ceil(count / columns)
    figure, axes = plt.subplots(2 * blocks, columns, figsize=(1.4 * columns, 2.9 * blocks), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for victim, result in enumerate(results):
        row, column = 2 * (victim // columns), victim % columns
        image, cmap = _as_image(originals[victim])
        axes[row][column].imshow(image, cmap=cmap, vmin=0.0, vmax=1.0)
        image, cmap = _as_image(result.reconstruction)
        axes[row + 1][column].imshow(image, cmap=cmap, vmin=0.0, vmax=1.0)
        if result.metrics is not None:
            axes[row + 1][column].set_title(f"{result.metrics.ssim:.2f}", fontsize=7)
    if title:
        figure.suptitle(title, fontsize=9)
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(figure)
    return path


def trajectory_figure(record: TrajectoryRecord, title: str = ""):
    """One cosine-similarity series per layer and, below, the tracked entries"""
    rows = 2 if record.tracked else 1
    figure, axes = plt.subplots(rows, 1, figsize=(7, 3.2 * rows), squeeze=False)
    cosine_axis = axes[0][0]
    steps = list(range(1, record.iterations + 1))
    for layer in record.layers:
        cosine_axis.plot(steps, record.cosine[layer], label=layer, linewidth=0.9)
    cosine_axis.set_xlabel("iteration")
    cosine_axis.set_ylabel("cosine similarity")
    cosine_axis.set_ylim(-1.05, 1.05)
    cosine_axis.legend(fontsize=6, ncol=2)
    if record.tracked:
        entry_axis = axes[1][0]
        for entry in record.tracked:
            line = entry_axis.plot(steps, entry.values, linewidth=0.8, label=f"{entry.layer}[{entry.index}]")[0]
            entry_axis.axhline(entry.target, color=line.get_color(), linestyle="--", linewidth=0.6)
        entry_axis.set_xlabel("iteration")
        entry_axis.set_ylabel("gradient value")
        entry_axis.legend(fontsize=6, ncol=2)
    if title:
        figure.suptitle(title, fontsize=9)
    return figure


def plot_trajectory(record: TrajectoryRecord, path: Path, title: str = "") -> Path:
    figure = trajectory_figure(record, title)
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, format="svg", bbox_inches="tight")
    plt.close(figure)
    return path


def emit_report(bundle: ResultsBundle, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    written = [
        write_summary_csv([bundle], out_dir / "summary.csv"),
        write_victims_csv(bundle, out_dir / "victims.csv"),
    ]
    if bundle.rounds:
        written.append(write_rounds_csv(bundle.rounds, out_dir / "rounds.csv"))
    for index, run in enumerate(bundle.runs):
        label = run.attack.label()
        if run.results:
            written.append(
                save_reconstruction_grid(
                    bundle.originals,
                    run.results,
                    out_dir / "plots" / f"run{index:02d}_reconstructions.png",
                    title=f"{bundle.defense_label} / {label}: ASR {asr(run.report.ssim):.1f}%",
                )
            )
        for victim, result in enumerate(run.results):
            if result.trajectory is not None and result.trajectory.iterations > 0:
                written.append(
                    plot_trajectory(
                        result.trajectory,
                        out_dir / "plots" / f"run{index:02d}_trajectory_{victim:04d}.svg",
                        title=f"{label}, victim {victim}",
                    )
                )
    logger.info(f"📋 Report: {len(written)} files under {out_dir}")
    return written
