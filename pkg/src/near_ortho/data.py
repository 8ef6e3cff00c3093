"""Synthetic open-set tasks, IDX loading, batching and task files.

Normal images are smooth fields made of random Gaussian blobs. Anomalous
images are normal backgrounds with a texture from one *family* blended into a
random square patch. Test anomalies only come from families that training
and validation never see.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .tensor import Rng

FAMILY_LIBRARY_VERSION = 1
FAMILIES = ("stripes_low", "stripes_high", "checkerboard", "ring", "salt_noise")
NORMAL = "normal"


@dataclass
class TaskConfig:
    image_size: int = 32
    channels: int = 1
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    # relative counts (normal, anomalous); test/val use the same ratio
    imbalance: tuple[float, float] = (1.0, 1.0)
    train_families: tuple[str, ...] = ("stripes_low", "checkerboard")
    test_families: tuple[str, ...] = ("stripes_high", "ring", "salt_noise")
    noise_std: float = 0.03
    overlay_strength: tuple[float, float] = (0.25, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.imbalance = tuple(float(v) for v in self.imbalance)
        self.train_families = tuple(self.train_families)
        self.test_families = tuple(self.test_families)
        self.overlay_strength = tuple(float(v) for v in self.overlay_strength)
        unknown = set(self.train_families + self.test_families) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown anomaly families: {sorted(unknown)}")
        if not self.train_families or not self.test_families:
            raise ConfigError("train and test family sets must be non-empty")
        overlap = set(self.train_families) & set(self.test_families)
        if overlap:
            raise ConfigError(f"train and test families overlap: {sorted(overlap)}")
        if len(self.imbalance) != 2 or min(self.imbalance) <= 0:
            raise ConfigError("imbalance must be two positive numbers (normal, anomalous)")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        for name in ("n_train", "n_val", "n_test"):
            n = getattr(self, name)
            normal, anomalous = self.class_counts(n)
            if normal < 1 or anomalous < 1:
                raise ConfigError(f"{name}={n} leaves a class empty at imbalance {self.imbalance}")

    def class_counts(self, n: int) -> tuple[int, int]:
        normal = int(round(n * self.imbalance[0] / sum(self.imbalance)))
        return normal, n - normal


@dataclass
class Split:
    images: np.ndarray  # N x C x H x W, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    ids: np.ndarray  # N, int64, unique across the whole task
    families: list[str]

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def family_set(self, label: int | None = None) -> set[str]:
        return {f for f, y in zip(self.families, self.labels) if label is None or y == label}


@dataclass
class OpenSetTask:
    train: Split
    val: Split
    test: Split
    config: TaskConfig | None
    n_classes: int = 2
    open_set: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}

    @property
    def generator_families(self) -> dict[str, set[str]]:
        return {name: s.family_set(1) for name, s in self.splits.items()}

    def check_open_set(self):
        seen = self.train.family_set(1) | self.val.family_set(1)
        leaked = self.test.family_set(1) & seen
        if leaked:
            raise AssertionError(f"test anomaly families seen in training: {sorted(leaked)}")
        ids = [set(s.ids.tolist()) for s in self.splits.values()]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise AssertionError("splits share sample ids")


# ---------------------------------------------------------------- textures


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y / size, x / size


def normal_field(rng: np.random.Generator, size: int, channels: int = 1) -> np.ndarray:
    y, x = _grid(size)
    img = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(-0.1, 1.1, 2)
            width = rng.uniform(0.12, 0.35)
            amp = rng.uniform(-1.0, 1.0)
            img[c] += amp * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * width**2))
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo + 1e-12)
    return 0.2 + 0.6 * img


def _stripes(rng, size, cycles):
    y, x = _grid(size)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(2 * np.pi * cycles * (x * np.cos(theta) + y * np.sin(theta)) + phase)


def _texture(family: str, rng: np.random.Generator, size: int) -> np.ndarray:
    if family == "stripes_low":
        return _stripes(rng, size, rng.uniform(2.0, 4.0))
    if family == "stripes_high":
        return _stripes(rng, size, rng.uniform(7.0, 11.0))
    if family == "checkerboard":
        cell = int(rng.integers(2, 5))
        oy, ox = rng.integers(0, cell, 2)
        y, x = np.mgrid[0:size, 0:size]
        return (((y + oy) // cell + (x + ox) // cell) % 2).astype(np.float64)
    if family == "ring":
        y, x = _grid(size)
        cy, cx = rng.uniform(0.35, 0.65, 2)
        radius = rng.uniform(0.15, 0.3)
        thickness = rng.uniform(0.03, 0.06)
        r = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
        return np.exp(-((r - radius) ** 2) / (2 * thickness**2))
    if family == "salt_noise":
        density = rng.uniform(0.15, 0.3)
        return (rng.random((size, size)) < density).astype(np.float64)
    raise ConfigError(f"unknown family {family!r}")


def anomalous_image(family, rng, size, channels, strength_range):
    bg = normal_field(rng, size, channels)
    tex = _texture(family, rng, size)
    patch = int(rng.integers(size // 3, size // 2 + 1))
    py, px = rng.integers(0, size - patch + 1, 2)
    mask = np.zeros((size, size))
    mask[py:py + patch, px:px + patch] = 1.0
    strength = rng.uniform(*strength_range)
    img = bg + strength * mask * (tex - 0.5) * 2.0
    return img


def _make_split(cfg: TaskConfig, n: int, families, rng: Rng, first_id: int) -> Split:
    g = rng.generator
    normal, anomalous = cfg.class_counts(n)
    images, labels, fams = [], [], []
    for _ in range(normal):
        images.append(normal_field(g, cfg.image_size, cfg.channels))
        labels.append(0)
        fams.append(NORMAL)
    for i in range(anomalous):
        fam = families[i % len(families)]
        images.append(anomalous_image(fam, g, cfg.image_size, cfg.channels, cfg.overlay_strength))
        labels.append(1)
        fams.append(fam)
    x = np.stack(images)
    if cfg.noise_std > 0:
        x = x + g.normal(0.0, cfg.noise_std, x.shape)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    order = g.permutation(n)
    return Split(images=x[order], labels=np.asarray(labels, dtype=np.int64)[order],
                 ids=np.arange(first_id, first_id + n, dtype=np.int64),
                 families=[fams[i] for i in order])


def generate_openset_task(cfg: TaskConfig, rng: Rng | None = None) -> OpenSetTask:
    """Build a task deterministically from ``cfg.seed`` (or from ``rng`` if given)."""
    rng = rng if rng is not None else Rng(cfg.seed)
    train = _make_split(cfg, cfg.n_train, cfg.train_families, rng.child("task/train"), 0)
    val = _make_split(cfg, cfg.n_val, cfg.train_families, rng.child("task/val"), cfg.n_train)
    test = _make_split(cfg, cfg.n_test, cfg.test_families, rng.child("task/test"),
                       cfg.n_train + cfg.n_val)
    task = OpenSetTask(train, val, test, cfg,
                       meta={"seed": rng.seed, "family_library_version": FAMILY_LIBRARY_VERSION})
    task.check_open_set()
    return task


def reference_task_config(seed: int = 2024) -> TaskConfig:
    """The desk-scale task used by the experiment scripts and acceptance runs.

    Training size and class ratio follow the iris presentation-attack split
    (198 live / 567 spoof); val and test keep the same ratio.
    """
    return TaskConfig(n_train=765, n_val=150, n_test=300, imbalance=(198, 567), seed=seed)


# ---------------------------------------------------------------- batching


def batches(split: Split, batch_size: int, rng: Rng):
    """Yield ``(images, labels, ids)`` over one seeded shuffle of ``split``.

    The last batch may be smaller than ``batch_size``.
    """
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    if len(split) == 0:
        raise InputError("cannot batch an empty split")
    order = rng.generator.permutation(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield split.images[idx], split.labels[idx], split.ids[idx]


# ---------------------------------------------------------------- IDX


_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(buf))
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise FormatError(f"{path}: bad IDX magic 0x{buf[:4].hex()}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = np.dtype(_IDX_DTYPES[code])
    need = header + math.prod(dims) * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"{path}: truncated IDX payload, expected {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError(f"{path}: trailing bytes after IDX payload", need)
    return np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=header).reshape(dims)


def write_idx(path, array) -> None:
    """Write an unsigned-byte IDX file (images: 3-D, labels: 1-D)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, a.ndim))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_idx(images_path, labels_path) -> list[tuple[np.ndarray, int]]:
    """Pairs of (1 x H x W image scaled to [0, 1], label)."""
    for path, magic in ((images_path, 0x00000803), (labels_path, 0x00000801)):
        head = Path(path).read_bytes()[:4]
        if len(head) < 4:
            raise FormatError(f"{path}: file too short for an IDX header", len(head))
        if struct.unpack(">I", head)[0] != magic:
            raise FormatError(f"{path}: expected magic 0x{magic:08x}, got 0x{head.hex()}", 0)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    scaled = images.astype(np.float64) / 255.0
    return [(img[None, :, :], int(y)) for img, y in zip(scaled, labels)]


def closed_set_task(pairs, val_fraction: float, rng: Rng, test_pairs=None) -> OpenSetTask:
    """Wrap IDX samples as train/val/test splits for closed-set accuracy runs."""
    images = np.stack([p[0] for p in pairs]).astype(np.float32)
    labels = np.asarray([p[1] for p in pairs], dtype=np.int64)
    order = rng.generator.permutation(len(labels))
    n_val = max(1, int(round(val_fraction * len(labels))))
    parts = {"val": order[:n_val], "train": order[n_val:]}
    splits = {}
    next_id = 0
    for name in ("train", "val"):
        idx = np.sort(parts[name])
        splits[name] = Split(images[idx], labels[idx], np.arange(next_id, next_id + len(idx)),
                             ["idx"] * len(idx))
        next_id += len(idx)
    if test_pairs is None:
        raise InputError("closed-set tasks need a test set")
    t_img = np.stack([p[0] for p in test_pairs]).astype(np.float32)
    t_lab = np.asarray([p[1] for p in test_pairs], dtype=np.int64)
    splits["test"] = Split(t_img, t_lab, np.arange(next_id, next_id + len(t_lab)), ["idx"] * len(t_lab))
    n_classes = int(max(labels.max(), t_lab.max())) + 1
    return OpenSetTask(splits["train"], splits["val"], splits["test"], None,
                       n_classes=n_classes, open_set=False, meta={"source": "idx"})


# ---------------------------------------------------------------- task files
#
# <dir>/manifest.json plus <split>_images.f32 (little-endian float32, N*C*H*W)
# and <split>_labels.i64 (little-endian int64).


def export_task(task: OpenSetTask, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "near-ortho-task",
        "format_version": 1,
        "seed": task.meta.get("seed"),
        "config": asdict(task.config) if task.config is not None else None,
        "n_classes": task.n_classes,
        "open_set": task.open_set,
        "meta": task.meta,
        "splits": {},
    }
    for name, s in task.splits.items():
        (d / f"{name}_images.f32").write_bytes(np.ascontiguousarray(s.images, dtype="<f4").tobytes())
        (d / f"{name}_labels.i64").write_bytes(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
        manifest["splits"][name] = {
            "shape": list(s.images.shape),
            "ids": s.ids.tolist(),
            "families": list(s.families),
        }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def import_task(manifest_path) -> OpenSetTask:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != "near-ortho-task":
        raise FormatError(f"{path}: not a task manifest")
    d = path.parent
    splits = {}
    for name in ("train", "val", "test"):
        info = manifest["splits"][name]
        shape = tuple(info["shape"])
        raw = (d / f"{name}_images.f32").read_bytes()
        if len(raw) != 4 * math.prod(shape):
            raise FormatError(f"{name}_images.f32 holds {len(raw)} bytes, expected {4 * math.prod(shape)}")
        images = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        labels = np.frombuffer((d / f"{name}_labels.i64").read_bytes(), dtype="<i8").astype(np.int64)
        if labels.shape[0] != shape[0]:
            raise FormatError(f"{name}: {labels.shape[0]} labels for {shape[0]} images")
        splits[name] = Split(images, labels, np.asarray(info["ids"], dtype=np.int64), list(info["families"]))
    cfg = TaskConfig(**manifest["config"]) if manifest["config"] is not None else None
    return OpenSetTask(splits["train"], splits["val"], splits["test"], cfg,
                       n_classes=manifest["n_classes"], open_set=manifest["open_set"],
                       meta=manifest.get("meta", {}))
