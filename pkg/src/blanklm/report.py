"""Render training-report figures from a metrics CSV.

Figures land next to the CSV (or in --out-dir): a loss curve with a
rolling mean, the realized learning-rate schedule, and throughput when
the run recorded it. A small summary CSV with headline numbers is written
alongside.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError, DegenerateInputError
from .train import METRICS_HEADER

FIGSIZE = (6.0, 3.6)
DPI = 130


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ContractError(
                f"unexpected metrics header {header}, want {METRICS_HEADER}"
            )
        rows = [row for row in reader if row]
    if not rows:
        raise DegenerateInputError(f"no metric rows in {path}")
    cols = np.asarray(rows, dtype=np.float64).T
    return dict(zip(METRICS_HEADER, cols))


def _rolling_mean(x: np.ndarray, k: int) -> np.ndarray:
    k = max(1, min(k, len(x)))
    kernel = np.ones(k) / k
    return np.convolve(x, kernel, mode="valid")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def write_report(metrics_path: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render figures + summary for one metrics file; returns written paths."""
    metrics_path = Path(metrics_path)
    out = Path(out_dir) if out_dir else metrics_path.parent
    out.mkdir(parents=True, exist_ok=True)
    m = read_metrics(metrics_path)
    stem = metrics_path.stem
    written: list[Path] = []

    step, loss = m["step"], m["loss"]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(step, loss, lw=0.8, alpha=0.5, label="per step")
    k = max(1, len(loss) // 50)
    if len(loss) >= 2 * k:
        smooth = _rolling_mean(loss, k)
        ax.plot(step[k - 1 :], smooth, lw=1.6, label=f"rolling mean ({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats / fill token)")
    ax.legend(frameon=False)
    written.append(_save(fig, out / f"{stem}_loss.png"))

    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(step, m["lr"], lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    written.append(_save(fig, out / f"{stem}_lr.png"))

    tps = m["tokens_per_sec"]
    if np.any(tps > 0):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.plot(step, tps, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("tokens / sec")
        written.append(_save(fig, out / f"{stem}_throughput.png"))

    tail = loss[-10:] if len(loss) >= 10 else loss
    head = loss[:10] if len(loss) >= 10 else loss
    summary = out / f"{stem}_summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["steps", int(step[-1])])
        w.writerow(["final_loss", f"{loss[-1]:.6f}"])
        w.writerow(["mean_loss_first_10", f"{head.mean():.6f}"])
        w.writerow(["mean_loss_last_10", f"{tail.mean():.6f}"])
        w.writerow(["min_loss", f"{loss.min():.6f}"])
        w.writerow(["peak_lr", f"{m['lr'].max():.8g}"])
    written.append(summary)
    return written
