"""Procedural shape images and the control-map task family.

Meta-training tasks are the Sobel edge, label quantization and distance
transform maps. Canny edges and gradient orientation are held out for
zero-shot transfer; the skeleton pair is the few-shot (non-edge) family.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage
from skimage.feature import canny
from skimage.morphology import skeletonize

from .diffusion import Batch
from .rng import substream

CLASS_NAMES = ("circle", "rectangle", "triangle", "multi")
KINDS = (
    "edge-sobel",
    "seg-quantize",
    "depth-distance",
    "edge-canny",
    "normal-orientation",
    "skeleton",
    "skeleton-inverse",
)
EDGE_KINDS = ("edge-sobel", "edge-canny")
ROLES = ("meta-train", "zero-shot", "few-shot")
FG_MIN, FG_MAX = 0.05, 0.6
SOBEL_THRESHOLD = 2.0
CANNY_SIGMA, CANNY_LOW, CANNY_HIGH = 1.0, 0.3, 0.6
ORIENT_THRESHOLD = 0.5


class DataError(ValueError):
    pass


@dataclass
class ShapeImage:
    pixels: np.ndarray  # [1, H, W] float32, background -1, foreground +1
    class_id: int
    labels: np.ndarray | None = None  # [H, W] int8, 0 background, 1..3 shape kind
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]

    @property
    def mask(self) -> np.ndarray:
        return self.pixels[0] > 0

    def foreground_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    role: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown task role {self.role!r}")


TASKS = {
    t.name: t
    for t in (
        TaskSpec("sobel", "edge-sobel", "meta-train"),
        TaskSpec("seg", "seg-quantize", "meta-train"),
        TaskSpec("depth", "depth-distance", "meta-train"),
        TaskSpec("canny", "edge-canny", "zero-shot"),
        TaskSpec("normal", "normal-orientation", "zero-shot"),
        TaskSpec("skeleton", "skeleton", "few-shot"),
        TaskSpec("skeleton-inverse", "skeleton-inverse", "few-shot"),
    )
}
META_TASKS = ("depth", "seg", "sobel")


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def meta_train_tasks() -> list[TaskSpec]:
    return [TASKS[n] for n in META_TASKS]


# ---------------------------------------------------------------- generation


def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def _raster(kind: str, params: dict, size: int) -> np.ndarray:
    xx, yy = _grid(size)
    cx, cy = params["cx"], params["cy"]
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= params["r"] ** 2
    ang = params["rot"]
    dx, dy = xx - cx, yy - cy
    if kind == "rectangle":
        u = dx * np.cos(ang) + dy * np.sin(ang)
        v = -dx * np.sin(ang) + dy * np.cos(ang)
        return (np.abs(u) <= params["hw"]) & (np.abs(v) <= params["hh"])
    if kind == "triangle":
        r = params["r"]
        verts = [(cx + r * np.cos(ang + k * 2 * np.pi / 3), cy + r * np.sin(ang + k * 2 * np.pi / 3)) for k in range(3)]
        inside = np.ones_like(xx, dtype=bool)
        for k in range(3):
            (x1, y1), (x2, y2) = verts[k], verts[(k + 1) % 3]
            inside &= (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1) >= 0
        return inside
    raise ValueError(kind)


def _random_object(rng: np.random.Generator, kind: str, size: int, scale: float) -> dict:
    s = size * scale
    p = {
        "kind": kind,
        "cx": float(rng.uniform(0.3, 0.7) * size),
        "cy": float(rng.uniform(0.3, 0.7) * size),
        "rot": float(rng.uniform(0, np.pi)),
    }
    if kind == "circle":
        p["r"] = float(rng.uniform(0.18, 0.38) * s)
    elif kind == "rectangle":
        p["hw"] = float(rng.uniform(0.15, 0.38) * s)
        p["hh"] = float(rng.uniform(0.15, 0.38) * s)
    else:
        p["r"] = float(rng.uniform(0.28, 0.48) * s)
    return p


def gen_image(seed: int, index: int, class_id: int, size: int) -> ShapeImage:
    """Deterministic shape image for (seed, index); rejection-samples until
    the foreground fraction lies in [0.05, 0.6]."""
    rng = substream(seed, "data", index + 1)
    kinds = CLASS_NAMES[:3]
    for _ in range(1000):
        if class_id < 3:
            objs = [_random_object(rng, kinds[class_id], size, 1.0)]
        else:
            count = int(rng.integers(2, 4))
            objs = []
            for _k in range(count):
                o = _random_object(rng, kinds[int(rng.integers(0, 3))], size, 0.7)
                o["cx"] = float(rng.uniform(0.2, 0.8) * size)
                o["cy"] = float(rng.uniform(0.2, 0.8) * size)
                objs.append(o)
        labels = np.zeros((size, size), dtype=np.int8)
        for o in objs:
            labels[_raster(o["kind"], o, size)] = kinds.index(o["kind"]) + 1
        frac = (labels > 0).mean()
        if FG_MIN <= frac <= FG_MAX:
            pixels = np.where(labels > 0, 1.0, -1.0).astype(np.float32)[None]
            return ShapeImage(pixels, class_id, labels, {"objects": objs, "seed": seed, "index": index})
    raise DataError(f"could not place shapes for image {index}")


def gen_dataset(n: int, size: int, seed: int) -> list[ShapeImage]:
    """``n`` images with classes balanced to within one of uniform."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 16 or size % 16:
        raise ValueError(f"size must be a positive multiple of 16, got {size}")
    classes = substream(seed, "data").permutation(np.arange(n) % len(CLASS_NAMES))
    return [gen_image(seed, i, int(c), size) for i, c in enumerate(classes)]


# ---------------------------------------------------------------- control maps


def _as_pixels(image) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(image, ShapeImage):
        return image.pixels[0].astype(np.float64), image.labels
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected [1,H,W] or [H,W] image, got shape {np.shape(image)}")
    return arr, None


def _sobel_mag(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy), gx, gy


def _component_labels(mask: np.ndarray) -> np.ndarray:
    lab, _ = ndimage.label(mask)
    # cycle component index over the three object labels
    return np.where(lab > 0, (lab - 1) % 3 + 1, 0).astype(np.int8)


def control_map(image, kind: str) -> np.ndarray:
    """Control map of ``image`` for ``kind`` as float32 [1, H, W] in [-1, 1].

    Accepts a ShapeImage or a raw [1,H,W] / [H,W] array (e.g. a generated
    sample); raw arrays are thresholded at 0 where a mask is needed.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown control kind {kind!r}")
    img, labels = _as_pixels(image)
    mask = img > 0
    if kind == "edge-sobel":
        mag, _, _ = _sobel_mag(img)
        out = (mag > SOBEL_THRESHOLD).astype(np.float64)
    elif kind == "edge-canny":
        out = canny(img, sigma=CANNY_SIGMA, low_threshold=CANNY_LOW, high_threshold=CANNY_HIGH, mode="nearest").astype(np.float64)
    elif kind == "seg-quantize":
        if labels is None:
            labels = _component_labels(mask)
        out = -1.0 + 2.0 * labels.astype(np.float64) / 3.0
    elif kind == "depth-distance":
        d = ndimage.distance_transform_edt(mask)
        d = np.where(mask, d - 1.0, 0.0)
        top = d.max()
        out = d / top if top > 0 else d
    elif kind == "normal-orientation":
        smooth = ndimage.gaussian_filter(img, 1.0, mode="nearest")
        mag, gx, gy = _sobel_mag(smooth)
        ang = (np.arctan2(gy, gx) + np.pi) / (2 * np.pi)
        out = np.where(mag > ORIENT_THRESHOLD, np.maximum(ang, 1e-3), 0.0)
    else:  # skeleton, skeleton-inverse
        if not mask.any():
            raise DataError(f"{kind}: image has no foreground")
        skel = skeletonize(mask)
        out = skel.astype(np.float64) if kind == "skeleton" else img.copy()
    return np.clip(out, -1.0, 1.0).astype(np.float32)[None]


def background_value(kind: str) -> float:
    return -1.0 if kind == "seg-quantize" else 0.0


def control_support(cmap: np.ndarray, kind: str) -> np.ndarray:
    """Boolean mask of the pixels a control map marks."""
    if kind == "skeleton-inverse":
        return np.asarray(cmap) > 0
    return np.abs(np.asarray(cmap) - background_value(kind)) > 1e-6


def task_pair(image: ShapeImage, task: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """(generation target, control) for one image under ``task``."""
    if task.kind == "skeleton-inverse":
        skel = control_map(image, "skeleton")
        return np.where(skel > 0, 1.0, -1.0).astype(np.float32), image.pixels
    return image.pixels, control_map(image, task.kind)


# ---------------------------------------------------------------- batching


class Dataset:
    """A list of ShapeImages with a memo of per-task (target, control) pairs."""

    def __init__(self, images: Sequence[ShapeImage]):
        if not images:
            raise DataError("empty dataset")
        self.images = list(images)
        self._pairs: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> ShapeImage:
        return self.images[i]

    def pair(self, i: int, task: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
        key = (i, task.kind)
        if key not in self._pairs:
            self._pairs[key] = task_pair(self.images[i], task)
        return self._pairs[key]

    def batch(self, ids: Sequence[int], task: TaskSpec, dtype=np.float32) -> Batch:
        ids = np.asarray(ids, dtype=np.int64)
        pairs = [self.pair(int(i), task) for i in ids]
        return Batch(
            x0=np.stack([p[0] for p in pairs]).astype(dtype),
            control=np.stack([p[1] for p in pairs]).astype(dtype),
            class_ids=np.array([self.images[int(i)].class_id for i in ids], dtype=np.int64),
            ids=ids,
        )

    def split(self, n_test: int) -> tuple["Dataset", "Dataset"]:
        """Train / test split; the last ``n_test`` images are held out."""
        if not 0 < n_test < len(self):
            raise DataError(f"cannot hold out {n_test} of {len(self)} images")
        return Dataset(self.images[:-n_test]), Dataset(self.images[-n_test:])


class BatchStream:
    """Rounds of ``total_batch`` distinct images split evenly across tasks.

    Images are drawn without replacement within an epoch; an exhausted
    epoch is reshuffled with the next seeded permutation.
    """

    def __init__(self, dataset: Dataset, tasks: Sequence[TaskSpec], total_batch: int, seed: int, dtype=np.float32):
        if not tasks:
            raise ValueError("need at least one task")
        if total_batch % len(tasks):
            raise ValueError(f"total batch {total_batch} not divisible by {len(tasks)} tasks")
        if total_batch > len(dataset):
            raise DataError(f"total batch {total_batch} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.tasks = sorted(tasks, key=lambda t: t.name)
        self.total_batch = total_batch
        self.per_task = total_batch // len(tasks)
        self.dtype = dtype
        self._rng = substream(seed, "training", 1)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0
        self.epoch = -1
        self.drawn = 0

    def _next_ids(self) -> np.ndarray:
        if self._pos + self.total_batch > len(self._order):
            self._order = self._rng.permutation(len(self.dataset))
            self._pos = 0
            self.epoch += 1
        ids = self._order[self._pos : self._pos + self.total_batch]
        self._pos += self.total_batch
        self.drawn += self.total_batch
        return ids

    def __iter__(self) -> Iterator[dict[str, Batch]]:
        return self

    def __next__(self) -> dict[str, Batch]:
        ids = self._next_ids()
        return {
            task.name: self.dataset.batch(ids[k * self.per_task : (k + 1) * self.per_task], task, self.dtype)
            for k, task in enumerate(self.tasks)
        }


def make_batches(dataset, tasks: Sequence[TaskSpec], total_batch: int, seed: int, dtype=np.float32) -> BatchStream:
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    return BatchStream(dataset, tasks, total_batch, seed, dtype)


# ---------------------------------------------------------------- PGM / PPM


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round((np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError("PGM needs a 2-d array")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM needs an [H, W, 3] array")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit (max 255) images are supported")
    return np.frombuffer(data[pos + 1 :], dtype=np.uint8), w, h


def read_pgm(path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, b"P5")
    return raw[: w * h].reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    raw, w, h = _read_netpbm(path, b"P6")
    return raw[: w * h * 3].reshape(h, w, 3).copy()


MANIFEST_COLUMNS = ("id", "class", "file", "seed")


def save_dataset(out_dir, images: Sequence[ShapeImage], seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for i, img in enumerate(images):
            name = f"img_{i:06d}.pgm"
            write_pgm(out / name, to_uint8(img.pixels[0]))
            w.writerow([i, CLASS_NAMES[img.class_id], name, seed])
    return out / "manifest.csv"


def load_dataset(data_dir) -> list[ShapeImage]:
    """Read a PGM directory; regenerates shape metadata from the manifest
    seed when the stored pixels match the generator."""
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DataError(f"no manifest.csv in {root}")
    images = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DataError(f"manifest columns must be {MANIFEST_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            path = root / row["file"]
            if not path.is_file():
                raise DataError(f"missing image file {path}")
            pixels = from_uint8(read_pgm(path))[None]
            try:
                cls = CLASS_NAMES.index(row["class"])
            except ValueError:
                raise DataError(f"unknown class {row['class']!r} in manifest") from None
            size = pixels.shape[-1]
            regen = gen_image(int(row["seed"]), int(row["id"]), cls, size) if size % 16 == 0 else None
            if regen is not None and np.array_equal(to_uint8(regen.pixels), to_uint8(pixels)):
                images.append(regen)
            else:
                images.append(ShapeImage(pixels, cls, None, {"file": row["file"]}))
    if not images:
        raise DataError(f"manifest in {root} lists no images")
    return images


def dir_is_nonempty(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))
