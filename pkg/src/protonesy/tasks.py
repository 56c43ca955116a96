"""MNIST-EvenOdd construction and a Gaussian-cluster stand-in."""

from __future__ import annotations

import gzip
import json
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
EVEN_ODD_SIZES = (6720, 1920, 960)
SPLITS = ("train", "val", "test")


class IdxFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


@dataclass
class MnistStore:
    pixels: np.ndarray  # (N, rows*cols) uint8
    labels: np.ndarray  # (N,) uint8
    rows: int = 28
    cols: int = 28
    images: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.pixels.shape[0] != self.labels.shape[0]:
            raise IdxFormatError(f"{self.pixels.shape[0]} images but {self.labels.shape[0]} labels")
        self.images = self.pixels.astype(np.float64) / 255.0

    def __len__(self) -> int:
        return self.labels.shape[0]


def _read_bytes(path) -> bytes:
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def parse_idx_images(raw: bytes) -> tuple[np.ndarray, int, int]:
    if len(raw) < 16:
        raise IdxFormatError("truncated image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"wrong magic {magic} for an image file (expected {IMAGE_MAGIC})")
    need = 16 + n * rows * cols
    if len(raw) != need:
        raise IdxFormatError(f"image file has {len(raw)} bytes, header implies {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows * cols).copy(), rows, cols


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise IdxFormatError("truncated label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"wrong magic {magic} for a label file (expected {LABEL_MAGIC})")
    if len(raw) != 8 + n:
        raise IdxFormatError(f"label file has {len(raw)} bytes, header implies {8 + n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).copy()


def load_idx(images_path, labels_path) -> MnistStore:
    """Read an IDX image/label file pair (optionally gzipped)."""
    pixels, rows, cols = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    return MnistStore(pixels, labels, rows, cols)


def idx_image_bytes(store: MnistStore) -> bytes:
    return struct.pack(">IIII", IMAGE_MAGIC, len(store), store.rows, store.cols) + store.pixels.tobytes()


def idx_label_bytes(store: MnistStore) -> bytes:
    return struct.pack(">II", LABEL_MAGIC, len(store)) + store.labels.tobytes()


def write_idx(store: MnistStore, images_path, labels_path) -> None:
    Path(images_path).write_bytes(idx_image_bytes(store))
    Path(labels_path).write_bytes(idx_label_bytes(store))


def find_mnist(directory) -> dict[str, tuple[Path, Path]]:
    """Locate the standard MNIST file pairs in ``directory``."""
    d = Path(directory)
    out = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        found = []
        for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
            cands = [d / f"{prefix}-{kind}", d / f"{prefix}-{kind}.gz",
                     d / f"{prefix}-{kind.replace('-idx', '.idx')}"]
            hit = next((c for c in cands if c.exists()), None)
            if hit is None:
                raise FileNotFoundError(f"no {prefix}-{kind} in {d}")
            found.append(hit)
        out[split] = tuple(found)
    return out


# ---------------------------------------------------------------------------
# Pair datasets
# ---------------------------------------------------------------------------


@dataclass
class PairDataset:
    """Pairs of pool images labelled with the sum of their digits."""

    split: str
    images: np.ndarray  # image pool, (N, d)
    digits: np.ndarray  # ground-truth class of each pool image
    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.left.shape[0]

    @property
    def concepts(self) -> np.ndarray:
        return np.stack([self.digits[self.left], self.digits[self.right]], axis=1)

    def image_ids(self) -> np.ndarray:
        return np.unique(np.concatenate([self.left, self.right]))


@dataclass
class SupportIndex:
    """Labelled pool image ids for each concept class."""

    ids: dict[int, list[int]]
    n_classes: int

    @property
    def classes(self) -> list[int]:
        return sorted(c for c, v in self.ids.items() if v)

    def __len__(self) -> int:
        return sum(len(v) for v in self.ids.values())


def even_odd_combinations() -> list[tuple[int, int]]:
    """The bundled ordered training pairs, read from the package data file."""
    text = resources.files("protonesy").joinpath("data/even_odd_pairs.txt").read_text()
    return parse_combination_text(text)


def parse_combination_text(text: str) -> list[tuple[int, int]]:
    pairs = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            a, b = line.split()
            pairs.append((int(a), int(b)))
    return pairs


def _draw_pairs(rng, combos: Sequence[tuple[int, int]], n: int) -> np.ndarray:
    return np.asarray(combos, dtype=np.int64)[rng.integers(0, len(combos), size=n)]


def _needed(pairs: np.ndarray) -> np.ndarray:
    return np.bincount(pairs.ravel(), minlength=10)


def build_even_odd(train_store: MnistStore, test_store: MnistStore, seed: int = 0,
                   sizes: Sequence[int] = EVEN_ODD_SIZES,
                   combos: Sequence[tuple[int, int]] | None = None) -> dict[str, PairDataset]:
    """Train/val pairs from the admissible combinations, test pairs over all 100.

    Train and val draw disjoint images from ``train_store``; test images
    come from ``test_store``. When a store is too small the split sizes are
    scaled down proportionally.
    """
    combos = list(combos or even_odd_combinations())
    all_pairs = [(a, b) for a in range(10) for b in range(10)]
    rng = np.random.default_rng(seed)
    sizes = [int(s) for s in sizes]

    train_pool = [np.flatnonzero(train_store.labels == d) for d in range(10)]
    test_pool = [np.flatnonzero(test_store.labels == d) for d in range(10)]
    for d in {x for pair in combos for x in pair}:
        if len(train_pool[d]) < 2:
            raise ValueError(f"training store has too few images of digit {d}")
    for d in range(10):
        if len(test_pool[d]) == 0:
            raise ValueError(f"test store has no images of digit {d}")

    scale = 1.0
    while True:
        cur = [max(1, int(s * scale)) for s in sizes]
        draws = {
            "train": _draw_pairs(rng, combos, cur[0]),
            "val": _draw_pairs(rng, combos, cur[1]),
            "test": _draw_pairs(rng, all_pairs, cur[2]),
        }
        need_train = _needed(draws["train"]) + _needed(draws["val"])
        need_test = _needed(draws["test"])
        have_train = np.array([len(p) for p in train_pool])
        have_test = np.array([len(p) for p in test_pool])
        ratio = min(
            np.min(np.where(need_train > 0, have_train / np.maximum(need_train, 1), np.inf)),
            np.min(np.where(need_test > 0, have_test / np.maximum(need_test, 1), np.inf)),
        )
        if ratio >= 1.0:
            break
        scale *= 0.95 * ratio
        log.warning("image stores too small for the requested split sizes; scaling by %.3f", scale)

    shuffled_train = [rng.permutation(p) for p in train_pool]
    shuffled_test = [rng.permutation(p) for p in test_pool]
    cursor = np.zeros(10, dtype=np.int64)

    def take(pools, cursor, digits):
        out = np.empty(len(digits), dtype=np.int64)
        for i, d in enumerate(digits):
            out[i] = pools[d][cursor[d]]
            cursor[d] += 1
        return out

    out = {}
    for split in SPLITS:
        pairs = draws[split]
        if split == "test":
            pools, cur_, store = shuffled_test, np.zeros(10, dtype=np.int64), test_store
        else:
            pools, cur_, store = shuffled_train, cursor, train_store
        left = take(pools, cur_, pairs[:, 0])
        right = take(pools, cur_, pairs[:, 1])
        digits = store.labels.astype(np.int64)
        out[split] = PairDataset(split, store.images, digits, left, right, digits[left] + digits[right])
    return out


def build_support(dataset: PairDataset, labels_per_class: int = 1, seed: int = 0,
                  classes: Iterable[int] | None = None, n_classes: int = 10) -> SupportIndex:
    """Sample labelled image ids per concept class from the dataset's images."""
    if labels_per_class < 1:
        raise ValueError("labels_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    pool = dataset.image_ids()
    pool_digits = dataset.digits[pool]
    targets = sorted(range(n_classes) if classes is None else set(int(c) for c in classes))
    ids = {}
    for c in targets:
        cands = pool[pool_digits == c]
        if len(cands) == 0:
            raise ValueError(f"class {c} does not occur in the {dataset.split} split")
        n = min(labels_per_class, len(cands))
        ids[c] = sorted(int(i) for i in rng.choice(cands, size=n, replace=False))
    return SupportIndex(ids, n_classes)


# ---------------------------------------------------------------------------
# Synthetic Gaussian clusters
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTask:
    means: np.ndarray
    variance: float
    seed: int
    splits: dict[str, PairDataset]


def gen_synthetic(h: int = 10, d: int = 20, separation: float = 10.0,
                  sizes: Sequence[int] = (1000, 200, 200), seed: int = 0,
                  variance: float = 1.0,
                  combos: Sequence[tuple[int, int]] | None = None) -> SyntheticTask:
    """Isotropic Gaussian classes with pairwise mean distance ``separation``.

    Class ``c`` has mean ``separation / sqrt(2) * e_c``. Pair structure and
    labels follow the MNIST-EvenOdd convention.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if h != 10:
        raise ValueError("the digit-sum pair structure needs exactly 10 classes")
    if d < h:
        raise ValueError(f"dimension {d} cannot hold {h} orthogonal class means")
    combos = list(combos or even_odd_combinations())
    all_pairs = [(a, b) for a in range(10) for b in range(10)]
    rng = np.random.default_rng(seed)
    means = np.zeros((h, d))
    means[np.arange(h), np.arange(h)] = separation / np.sqrt(2.0)
    splits = {}
    for split, n in zip(SPLITS, sizes):
        pairs = _draw_pairs(rng, all_pairs if split == "test" else combos, int(n))
        digits = pairs.T.ravel()
        images = means[digits] + np.sqrt(variance) * rng.standard_normal((digits.shape[0], d))
        left = np.arange(n)
        right = np.arange(n, 2 * n)
        splits[split] = PairDataset(split, images, digits.astype(np.int64), left, right, pairs.sum(axis=1))
    return SyntheticTask(means, float(variance), int(seed), splits)


def save_synthetic(task: SyntheticTask, directory, params: dict) -> Path:
    """Write ``synthetic.npz`` plus a JSON manifest into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"means": task.means}
    manifest = {"kind": "synthetic", "params": params, "data": "synthetic.npz", "splits": {}}
    for name, ds in task.splits.items():
        for key in ("images", "digits", "left", "right", "labels"):
            arrays[f"{name}/{key}"] = getattr(ds, key)
        manifest["splits"][name] = {"pairs": len(ds), "images": int(ds.images.shape[0])}
    with open(d / "synthetic.npz", "wb") as fh:
        np.savez(fh, **arrays)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d / "manifest.json"


def load_synthetic(directory) -> SyntheticTask:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    with np.load(d / manifest["data"]) as data:
        splits = {
            name: PairDataset(name, *(data[f"{name}/{k}"].copy() for k in ("images", "digits", "left", "right", "labels")))
            for name in manifest["splits"]
        }
        means = data["means"].copy()
    p = manifest["params"]
    return SyntheticTask(means, float(p.get("variance", 1.0)), int(p.get("seed", 0)), splits)
