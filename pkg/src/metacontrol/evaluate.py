"""Control-fidelity metrics, a random-feature perceptual distance and
comparison tables (task x method).

The perceptual distance is a stand-in: cosine distance between globally
pooled features of a fixed, seeded, untrained three-layer conv stack run
on standardized images with coordinate channels. Its
values are only comparable with each other, never with learned metrics.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from skimage.metrics import structural_similarity

from . import tensor as T
from .rng import substream
from .tasks import Dataset, TaskSpec, control_map, control_support
from .tensor import Tensor

METRICS = ("mse", "psnr", "ssim", "edge-iou", "perceptual-proxy")
DATA_RANGE = 2.0  # pixels live in [-1, 1]
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 2.0  # radius 3 -> 7x7 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE) -> float:
    m = mse(a, b)
    if m == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / m))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE) -> float:
    """Mean SSIM with a 7x7 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, borders cropped."""
    x = np.asarray(a, dtype=np.float64).squeeze()
    y = np.asarray(b, dtype=np.float64).squeeze()
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    value = structural_similarity(
        x,
        y,
        data_range=data_range,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        truncate=SSIM_TRUNCATE,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
    )
    return float(np.clip(value, -1.0, 1.0))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def edge_iou(generated: np.ndarray, control: np.ndarray, kind: str, reference: np.ndarray | None = None) -> float:
    """IoU between the marked pixels of ``control`` and of control_map(generated).

    For the inverse skeleton task the generated image is itself a line map,
    so its foreground is compared with the reference target instead.
    """
    if kind == "skeleton-inverse":
        if reference is None:
            raise ValueError("skeleton-inverse edge-iou needs the reference target")
        return iou(np.asarray(generated) > 0, np.asarray(reference) > 0)
    if kind == "skeleton" and not (np.asarray(generated) > 0).any():
        return iou(np.zeros_like(control, dtype=bool), control_support(control, kind))
    return iou(control_support(control_map(generated, kind), kind), control_support(control, kind))


class PerceptualProxy:
    """1 - cosine similarity of pooled random-conv features, in [0, 2].

    Each image is standardized and given two coordinate channels, so the
    features respond to where structure sits rather than to overall
    intensity. Layers are 3x3 conv + tanh, with 2x2 average pooling after
    the first two.
    """

    def __init__(self, seed: int = 0, channels: Sequence[int] = (8, 16, 32)):
        rng = substream(seed, "eval", 1)
        self.layers = []
        cin = 3
        for cout in channels:
            w = rng.standard_normal((cout, cin, 3, 3)) / math.sqrt(cin * 9)
            self.layers.append((Tensor(w), Tensor(np.zeros(cout))))
            cin = cout

    @staticmethod
    def _prepare(images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[None]
        n, _, h, w = x.shape
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        sd = x.std(axis=(1, 2, 3), keepdims=True)
        x = (x - mu) / np.where(sd > 1e-6, sd, 1.0)
        yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
        coords = np.broadcast_to(np.stack([yy, xx])[None], (n, 2, h, w))
        return np.concatenate([x, coords], axis=1)

    def features(self, images: np.ndarray) -> np.ndarray:
        h = Tensor(self._prepare(images))
        with T.no_grad():
            for k, (w, b) in enumerate(self.layers):
                h = Tensor(np.tanh(T.conv2d(h, w, b, 1, 1).data))
                if k < len(self.layers) - 1 and h.shape[2] % 2 == 0 and h.shape[3] % 2 == 0:
                    h = T.avgpool2x(h)
        return h.data.mean(axis=(2, 3))

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if np.shape(a) != np.shape(b):
            raise ValueError(f"perceptual distance needs equal shapes, got {np.shape(a)} and {np.shape(b)}")
        fa = self.features(a)[0]
        fb = self.features(b)[0]
        if np.array_equal(fa, fb):
            return 0.0
        na, nb = float(np.sqrt(fa @ fa)), float(np.sqrt(fb @ fb))
        if na == 0.0 or nb == 0.0:
            return 2.0
        return float(np.clip(1.0 - float(fa @ fb) / (na * nb), 0.0, 2.0))


def perceptual_proxy(a: np.ndarray, b: np.ndarray, seed: int = 0) -> float:
    return PerceptualProxy(seed).distance(a, b)


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    task: str
    method: str
    per_sample: dict[str, list[float]]
    config_hash: str = ""
    checkpoint_id: str = ""

    @property
    def means(self) -> dict[str, float]:
        return {m: float(np.mean(v)) if len(v) else float("nan") for m, v in self.per_sample.items()}

    def rows(self) -> list[dict]:
        n = len(next(iter(self.per_sample.values())))
        return [
            {"task": self.task, "method": self.method, "sample": i, **{m: self.per_sample[m][i] for m in METRICS}}
            for i in range(n)
        ]


# generator(control [N,1,H,W], class_ids or None, seed) -> images [N,1,H,W]
Generator = Callable[[np.ndarray, "np.ndarray | None", int], np.ndarray]


def control_fidelity(
    generator: Generator,
    task: TaskSpec,
    test_set: Dataset,
    n: int,
    seed: int,
    method: str = "",
    proxy: PerceptualProxy | None = None,
    config_hash: str = "",
    checkpoint_id: str = "",
    batch_size: int = 32,
) -> MetricsReport:
    """Generate from each test item's control map and score against the reference."""
    if n > len(test_set):
        raise ValueError(f"asked for {n} test items but the split has {len(test_set)}")
    proxy = proxy or PerceptualProxy(seed)
    scores: dict[str, list[float]] = {m: [] for m in METRICS}
    for start in range(0, n, batch_size):
        ids = list(range(start, min(n, start + batch_size)))
        batch = test_set.batch(ids, task, np.float32)
        gen = np.asarray(generator(batch.control, batch.class_ids, seed + start))
        for j in range(len(ids)):
            ref, ctl, out = batch.x0[j], batch.control[j], gen[j]
            scores["mse"].append(mse(out, ref))
            scores["psnr"].append(min(psnr(out, ref), 100.0))
            scores["ssim"].append(ssim(out, ref))
            scores["edge-iou"].append(edge_iou(out, ctl, task.kind, reference=ref))
            scores["perceptual-proxy"].append(proxy.distance(out, ref))
    return MetricsReport(task.name, method, scores, config_hash, checkpoint_id)


@dataclass
class ComparisonTable:
    """Mean ``metric`` per (method, task); rows keep the input method order."""

    metric: str
    tasks: list[str]
    methods: list[str]
    values: dict[tuple[str, str], float]
    lower_is_better: bool = True

    def best(self, task: str) -> str:
        col = [(self.values[(m, task)], i, m) for i, m in enumerate(self.methods)]
        pick = min(col) if self.lower_is_better else max(col, key=lambda x: (x[0], -x[1]))
        return pick[2]

    def deltas(self, reference: str | None = None) -> dict[tuple[str, str], float]:
        ref = reference or self.methods[0]
        return {(m, t): self.values[(m, t)] - self.values[(ref, t)] for m in self.methods for t in self.tasks}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "lower_is_better"])
        w.writerow([self.metric, int(self.lower_is_better)])
        w.writerow(["method"] + self.tasks)
        for m in self.methods:
            w.writerow([m] + [repr(float(self.values[(m, t)])) for t in self.tasks])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        rows = list(csv.reader(io.StringIO(text)))
        metric, lib = rows[1][0], bool(int(rows[1][1]))
        tasks = rows[2][1:]
        methods, values = [], {}
        for r in rows[3:]:
            methods.append(r[0])
            for t, v in zip(tasks, r[1:]):
                values[(r[0], t)] = float(v)
        return cls(metric, tasks, methods, values, lib)

    def render(self) -> str:
        arrow = "lower is better" if self.lower_is_better else "higher is better"
        width = max([len("method")] + [len(m) for m in self.methods]) + 2
        colw = max([10] + [len(t) + 2 for t in self.tasks])
        lines = [f"{self.metric} ({arrow})", "method".ljust(width) + "".join(t.rjust(colw) for t in self.tasks)]
        best = {t: self.best(t) for t in self.tasks}
        for m in self.methods:
            cells = []
            for t in self.tasks:
                mark = "*" if best[t] == m else " "
                cells.append(f"{self.values[(m, t)]:.4f}{mark}".rjust(colw))
            lines.append(m.ljust(width) + "".join(cells))
        return "\n".join(lines)


def compare_report(reports: Sequence[MetricsReport], metric: str = "perceptual-proxy") -> ComparisonTable:
    """Arrange report means as a method x task table with columns in sorted task order."""
    if len(reports) < 2:
        raise ValueError("comparison needs at least two reports")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    by_method: dict[str, dict[str, MetricsReport]] = {}
    for r in reports:
        by_method.setdefault(r.method, {})[r.task] = r
    task_sets = {frozenset(d) for d in by_method.values()}
    if len(task_sets) != 1:
        raise ValueError("reports cover different task sets across methods")
    tasks = sorted(next(iter(task_sets)))
    methods = list(by_method)
    values = {(m, t): by_method[m][t].means[metric] for m in methods for t in tasks}
    lower = metric not in ("psnr", "ssim", "edge-iou")
    return ComparisonTable(metric, tasks, methods, values, lower)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def write_report_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "method", "sample"] + list(METRICS) + ["config_hash", "checkpoint_id"])
        for r in reports:
            for row in r.rows():
                w.writerow(
                    [row["task"], row["method"], row["sample"]]
                    + [repr(float(row[m])) for m in METRICS]
                    + [r.config_hash, r.checkpoint_id]
                )
