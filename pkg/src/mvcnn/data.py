"""Folder-per-class datasets, image decoding, splits and batching.

Layout is ``root/<class_name>/<image files>``. Class indices follow the
lexicographic order of the folder names.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, DecodeError, DimensionError, ParameterError, SplitError, StaleCacheError
from .views import ViewCombination, ViewParams, read_mvvs, read_mvvs_header, stack_views, write_mvvs

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = frozenset({".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".ppm", ".gif", ".webp"})
CACHE_DIRNAME = ".mvcache"


@dataclass
class Dataset:
    root: Path
    classes: list[str]
    samples: list[tuple[Path, int]]
    split_tag: str = "all"
    skipped: int = 0

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("class names must be unique")
        for path, idx in self.samples:
            if not 0 <= idx < len(self.classes):
                raise DatasetError(f"{path}: class index {idx} out of range")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.samples], dtype=np.int64)

    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.class_count).tolist()

    def subset(self, samples: Sequence[tuple[Path, int]], split_tag: str) -> "Dataset":
        return replace(self, samples=sorted(samples, key=lambda s: str(s[0])), split_tag=split_tag)


def scan_dataset(root: "str | Path") -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")), key=lambda p: p.name
    )
    if not class_dirs:
        raise DatasetError(f"empty dataset: {root} has no class subdirectories")
    samples = []
    skipped = 0
    for idx, d in enumerate(class_dirs):
        found = 0
        for f in sorted(d.iterdir(), key=lambda p: p.name):
            if not f.is_file() or f.name.startswith("."):
                continue
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                skipped += 1
                continue
            samples.append((f, idx))
            found += 1
        if found == 0:
            raise DatasetError(f"class {d.name!r} has no image files")
    if skipped:
        log.warning("ignored %d non-image file(s) under %s", skipped, root)
    samples.sort(key=lambda s: str(s[0]))
    return Dataset(root, [d.name for d in class_dirs], samples, "all", skipped)


def _class_rng(seed: int, class_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, class_index]))


def _shuffled_by_class(dataset: Dataset, seed: int) -> list[list[tuple[Path, int]]]:
    by_class: list[list[tuple[Path, int]]] = [[] for _ in dataset.classes]
    for s in dataset.samples:
        by_class[s[1]].append(s)
    out = []
    for k, items in enumerate(by_class):
        order = _class_rng(seed, k).permutation(len(items))
        out.append([items[i] for i in order])
    return out


def limit_per_class(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Keep the first ``n`` samples of each class's seeded shuffle."""
    if n < 1:
        raise ParameterError(f"limit per class must be >= 1, got {n}")
    keep = [s for items in _shuffled_by_class(dataset, seed) for s in items[:n]]
    return dataset.subset(keep, dataset.split_tag)


def split_stratified(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-class seeded shuffle, then ``round(count * val_fraction)`` (min 1) to validation."""
    if not 0 < val_fraction < 1:
        raise ParameterError(f"val_fraction must be in (0, 1), got {val_fraction}")
    train, val = [], []
    for k, items in enumerate(_shuffled_by_class(dataset, seed)):
        if len(items) < 2:
            raise SplitError(f"class {dataset.classes[k]!r} has {len(items)} sample(s); need at least 2")
        n_val = min(max(1, round(len(items) * val_fraction)), len(items) - 1)
        val += items[:n_val]
        train += items[n_val:]
    return dataset.subset(train, "train"), dataset.subset(val, "val")


def write_split_manifest(path: "str | Path", train: Dataset, val: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class", "split"])
        for ds in (train, val):
            for p, c in ds.samples:
                w.writerow([p.relative_to(ds.root).as_posix(), ds.classes[c], ds.split_tag])


def read_split_manifest(path: "str | Path", dataset: Dataset) -> dict[str, Dataset]:
    """Rebuild the splits recorded in a manifest against a scanned dataset."""
    index = {p.relative_to(dataset.root).as_posix(): (p, c) for p, c in dataset.samples}
    parts: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rel = row["path"]
            if rel not in index:
                raise DatasetError(f"manifest entry {rel} not found under {dataset.root}")
            p, c = index[rel]
            if dataset.classes[c] != row["class"]:
                raise DatasetError(f"manifest entry {rel}: class {row['class']!r} != {dataset.classes[c]!r}")
            parts.setdefault(row["split"], []).append((p, c))
    return {tag: dataset.subset(items, tag) for tag, items in parts.items()}


def load_image(path: "str | Path") -> np.ndarray:
    """Decode to an H x W x 3 float32 array in [0, 1]; grayscale is replicated."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "L"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(path, f"cannot decode image ({exc.__class__.__name__})") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr.astype(np.float32) / np.float32(255.0)


def resize_bilinear(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an H x W (x C) array."""
    h, w = image.shape[:2]
    if min(h, w, target_h, target_w) < 2:
        raise DimensionError("bilinear resize needs at least 2 rows and columns on both sides")
    if (h, w) == (target_h, target_w):
        return image
    ys = np.linspace(0.0, h - 1, target_h)
    xs = np.linspace(0.0, w - 1, target_w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    fy = (ys - y0).reshape(-1, 1, *([1] * (image.ndim - 2)))
    fx = (xs - x0).reshape(1, -1, *([1] * (image.ndim - 2)))
    img = image.astype(np.float64)
    a = img[y0][:, x0]
    b = img[y0][:, x0 + 1]
    c = img[y0 + 1][:, x0]
    d = img[y0 + 1][:, x0 + 1]
    top = a + (b - a) * fx
    bottom = c + (d - c) * fx
    return (top + (bottom - top) * fy).astype(image.dtype)


def load_rgb(path: "str | Path", size: Optional[tuple[int, int]] = None) -> np.ndarray:
    img = load_image(path)
    if size is not None and img.shape[:2] != tuple(size):
        img = np.clip(resize_bilinear(img, *size), 0.0, 1.0)
    return img


# --- view cache ------------------------------------------------------------------


def cache_key(combo: ViewCombination, params: ViewParams, size: Optional[tuple[int, int]]) -> str:
    text = f"{combo.value}|{params.sigma!r}|{params.d}|{params.mode}|{size}"
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def cache_dir(root: "str | Path", combo, params: ViewParams, size) -> Path:
    return Path(root) / CACHE_DIRNAME / cache_key(ViewCombination.parse(combo), params, size)


def cache_path(dataset: Dataset, path: Path, combo, params: ViewParams, size) -> Path:
    rel = path.relative_to(dataset.root)
    return cache_dir(dataset.root, combo, params, size) / rel.with_name(rel.name + ".mvvs")


def compute_stack(path: Path, combo, params: ViewParams, size) -> np.ndarray:
    return stack_views(load_rgb(path, size), combo, params).data


def load_stack(dataset: Dataset, path: Path, combo, params: ViewParams, size) -> np.ndarray:
    """View stack for one image, read from the ``prepare`` cache when present."""
    combo = ViewCombination.parse(combo)
    cp = cache_path(dataset, path, combo, params, size)
    if cp.exists():
        c, h, w = read_mvvs_header(cp)
        if c != combo.channel_count or (size is not None and (h, w) != tuple(size)):
            raise StaleCacheError(
                f"{cp}: cached stack is {c}x{h}x{w}, requested {combo.channel_count} channels at {size}"
            )
        return read_mvvs(cp)
    return compute_stack(path, combo, params, size)


# --- batching ----------------------------------------------------------------------


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a final batch of one sample is merged into the previous one."""
    if batch_size < 2:
        raise ParameterError(f"batch_size must be >= 2, got {batch_size}")
    bounds = list(range(0, n, batch_size)) + [n]
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start < 2:
        last = slices.pop()
        slices[-1] = slice(slices[-1].start, last.stop)
    return slices


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.Philox(key=[seed, epoch])).permutation(n)


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    out = np.zeros((len(labels), class_count), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def batch_iter(
    dataset: Dataset,
    batch_size: int,
    combo,
    view_params: ViewParams = ViewParams(),
    seed: int = 0,
    epoch: int = 0,
    size: Optional[tuple[int, int]] = None,
    shuffle: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(stack batch (n, c, h, w), one-hot labels)`` over one epoch."""
    n = len(dataset)
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    for sl in batch_slices(n, batch_size):
        idx = order[sl]
        stacks = [load_stack(dataset, dataset.samples[i][0], combo, view_params, size) for i in idx]
        labels = np.array([dataset.samples[i][1] for i in idx])
        yield np.stack(stacks), one_hot(labels, dataset.class_count)


class ArraySource:
    """In-memory ``(n, c, h, w)`` stacks with integer labels."""

    def __init__(self, x: np.ndarray, labels: Sequence[int], class_count: int):
        self.x = np.ascontiguousarray(x, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_count = class_count
        if len(self.x) != len(self.labels):
            raise DimensionError(f"{len(self.x)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True):
        n = len(self)
        order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
        for sl in batch_slices(n, batch_size):
            idx = order[sl]
            yield self.x[idx], one_hot(self.labels[idx], self.class_count)


@dataclass
class ImageSource:
    """A dataset bound to a view combination, view parameters and input size.

    With ``in_memory`` the stacks are computed once and kept, which is the
    sensible choice for desk-scale subsets.
    """

    dataset: Dataset
    combo: ViewCombination
    view_params: ViewParams = ViewParams()
    size: Optional[tuple[int, int]] = None
    in_memory: bool = False
    _stacks: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.combo = ViewCombination.parse(self.combo)

    def __len__(self) -> int:
        return len(self.dataset)

    @property
    def class_count(self) -> int:
        return self.dataset.class_count

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels

    def materialize(self) -> ArraySource:
        if self._stacks is None:
            self._stacks = np.stack(
                [load_stack(self.dataset, p, self.combo, self.view_params, self.size) for p, _ in self.dataset.samples]
            )
        return ArraySource(self._stacks, self.labels, self.class_count)

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True):
        if self.in_memory:
            yield from self.materialize().batches(batch_size, seed, epoch, shuffle)
        else:
            yield from batch_iter(
                self.dataset, batch_size, self.combo, self.view_params, seed, epoch, self.size, shuffle
            )
