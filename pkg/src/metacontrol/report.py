"""Report artifacts: CSV logs, PPM sample mosaics and matplotlib figures.

Figures are written with fixed metadata and a fixed SVG hash salt so that
reruns produce identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import ComparisonTable  # noqa: E402
from .meta import GRAD_COLUMNS, LOG_COLUMNS  # noqa: E402
from .tasks import to_uint8, write_ppm  # noqa: E402

plt.rcParams["svg.hashsalt"] = "metacontrol"
_METADATA = {"svg": {"Date": None}, "png": {"Software": None}, "pdf": {"CreationDate": None, "ModDate": None}}


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, columns: Sequence[str], rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def write_loss_csv(path, rows: Sequence[Mapping]) -> None:
    write_rows(path, LOG_COLUMNS, rows)


def write_grad_csv(path, rows: Sequence[Mapping]) -> None:
    write_rows(path, GRAD_COLUMNS, rows)


def read_rows(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path) -> None:
    fmt = Path(path).suffix.lstrip(".").lower() or "svg"
    fig.savefig(path, format=fmt, metadata=_METADATA.get(fmt))
    plt.close(fig)


def plot_loss_curves(path, rows: Sequence[Mapping], title: str = "training loss") -> None:
    """One line per task, loss against step."""
    by_task: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        by_task.setdefault(str(r["task"]), []).append((int(r["step"]), float(r["loss"])))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for task in sorted(by_task):
        pts = sorted(by_task[task])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=task, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if by_task:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_comparison(path, table: ComparisonTable) -> None:
    """Grouped bars: one group per task, one bar per method."""
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(table.tasks) + 2), 3.5))
    width = 0.8 / max(1, len(table.methods))
    x = np.arange(len(table.tasks))
    for i, m in enumerate(table.methods):
        ax.bar(x + i * width, [table.values[(m, t)] for t in table.tasks], width, label=m)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(table.tasks)
    arrow = "lower is better" if table.lower_is_better else "higher is better"
    ax.set_ylabel(table.metric)
    ax.set_title(f"{table.metric} ({arrow})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def mosaic(rows: Sequence[Sequence[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Tile [1,H,W] or [H,W] images in [-1,1] into a gray uint8 RGB mosaic."""
    tiles = [[to_uint8(np.asarray(im).reshape(np.asarray(im).shape[-2:])) for im in r] for r in rows]
    if not tiles or not tiles[0]:
        raise ValueError("mosaic needs at least one image")
    h, w = tiles[0][0].shape
    ncols = max(len(r) for r in tiles)
    out = np.full((len(tiles) * (h + pad) + pad, ncols * (w + pad) + pad), 128, dtype=np.uint8)
    for i, r in enumerate(tiles):
        for j, t in enumerate(r):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y : y + h, x : x + w] = t
    return np.repeat(out[:, :, None], 3, axis=2)


def write_sample_grid(path, controls: np.ndarray, samples: np.ndarray, references: np.ndarray | None = None) -> None:
    """PPM mosaic with one row per item: control, sample[, reference]."""
    rows = []
    for i in range(len(samples)):
        row = [controls[i], samples[i]]
        if references is not None:
            row.append(references[i])
        rows.append(row)
    write_ppm(path, mosaic(rows))
