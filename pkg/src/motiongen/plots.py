"""Figure rendering: per-frame feature trajectories and metric summaries.

Every figure is written next to a delimited (CSV) dump of the plotted values,
so the numbers behind each plot stay scriptable.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import MotionSequence
from .errors import DomainError
from .io_utils import atomic_write_bytes, atomic_write_text


def render_trajectories(
    motion: MotionSequence,
    dims: list[int],
    out_dir: Path | str,
    stem: str = "trajectory",
) -> tuple[Path, Path]:
    """Plot selected feature dimensions over frames; returns (png, csv) paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t, d = motion.frames.shape
    for dim in dims:
        if not 0 <= dim < d:
            raise DomainError(f"feature dim {dim} outside [0, {d})")

    fig, ax = plt.subplots(figsize=(8, 4))
    for dim in dims:
        ax.plot(range(t), motion.frames[:, dim], label=f"dim {dim}")
    ax.set_xlabel("frame")
    ax.set_ylabel("feature value")
    ax.set_title(motion.source_id or stem)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    atomic_write_bytes(png_path, buf.getvalue())

    csv_path = out_dir / f"{stem}.csv"
    text = io.StringIO()
    writer = csv.writer(text)
    writer.writerow(["frame"] + [f"dim_{d}" for d in dims])
    for i in range(t):
        writer.writerow([i] + [f"{motion.frames[i, d]:.6g}" for d in dims])
    atomic_write_text(csv_path, text.getvalue())
    return png_path, csv_path


def render_metrics(metrics: dict, out_dir: Path | str, stem: str = "metrics") -> tuple[Path, Path]:
    """Bar chart + CSV of a metric dictionary; returns (png, csv) paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(metrics)
    values = [metrics[n] for n in names]

    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names)), 4))
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize="small")
    ax.set_ylabel("value")
    fig.tight_layout()
    png_path = out_dir / f"{stem}.png"
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    atomic_write_bytes(png_path, buf.getvalue())

    csv_path = out_dir / f"{stem}.csv"
    text = io.StringIO()
    writer = csv.writer(text)
    writer.writerow(["metric", "value"])
    for name, value in zip(names, values):
        writer.writerow([name, repr(float(value))])
    atomic_write_text(csv_path, text.getvalue())
    return png_path, csv_path
