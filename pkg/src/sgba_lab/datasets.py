"""Deterministic image-classification datasets.

Every loader returns a :class:`DatasetHandle` with pixels normalized to
``[0, 1]`` as float32 ``(N, H, W, C)`` arrays, so trigger masks and patterns
are defined in one normalized space regardless of the source dataset.
Splits are realized as index lists into the originally loaded arrays, which
makes them cheap to persist and bit-reproducible.

The ``synthetic`` dataset (class-conditional geometric shapes on noise
backgrounds, MNIST-shaped) needs no files on disk and is the default
fixture for tests and desk-scale experiments.
"""

from __future__ import annotations

import gzip
import json
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "SGBA_DATA_ROOT"

SYNTHETIC_TRAIN = 6000
SYNTHETIC_TEST = 1500

# (height, width, channels), num_classes, train size for the named datasets
DATASET_INFO = {
    "mnist": ((28, 28, 1), 10, 60000),
    "cifar10": ((32, 32, 3), 10, 50000),
    "gtsrb": ((32, 32, 3), 43, 39252),
    "synthetic": ((28, 28, 1), 10, SYNTHETIC_TRAIN),
}


class DatasetNotFoundError(FileNotFoundError):
    """Raised when the on-disk source for a named dataset is missing.

    The raw files must be fetched manually (or the data root pointed at an
    existing copy via the ``SGBA_DATA_ROOT`` environment variable).
    """


@dataclass(frozen=True)
class DatasetHandle:
    """An immutable, seeded view of one dataset.

    ``train_indices`` / ``test_indices`` index into the originally loaded
    split arrays, so a handle can be reconstructed exactly from a JSON
    manifest plus a fresh base load.
    """

    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    seed: int
    train_images: np.ndarray = field(repr=False)
    train_labels: np.ndarray = field(repr=False)
    test_images: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)
    train_indices: np.ndarray = field(repr=False)
    test_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.train_images, self.train_labels, self.test_images,
                    self.test_labels, self.train_indices, self.test_indices):
            arr.setflags(write=False)

    @property
    def n_train(self) -> int:
        return len(self.train_labels)

    @property
    def n_test(self) -> int:
        return len(self.test_labels)

    def subset(self, train_positions: np.ndarray) -> "DatasetHandle":
        """A new handle whose train split is the given positional subset."""
        train_positions = np.asarray(train_positions, dtype=np.int64)
        return DatasetHandle(
            name=self.name,
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            seed=self.seed,
            train_images=self.train_images[train_positions],
            train_labels=self.train_labels[train_positions],
            test_images=self.test_images,
            test_labels=self.test_labels,
            train_indices=self.train_indices[train_positions],
            test_indices=self.test_indices,
        )

    def split_manifest(self) -> dict:
        """JSON-serializable record sufficient to rebuild this handle."""
        return {
            "name": self.name,
            "seed": int(self.seed),
            "input_shape": list(self.input_shape),
            "num_classes": int(self.num_classes),
            "train_indices": self.train_indices.tolist(),
            "test_indices": self.test_indices.tolist(),
        }


def _stratified_take(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-stratified subset covering ``fraction`` of ``labels``.

    Per-class counts are ``round(fraction * class_count)``, which keeps class
    proportions within one sample of the originals.
    """
    chosen = []
    for cls in np.unique(labels):
        pool = np.flatnonzero(labels == cls)
        k = int(round(fraction * len(pool)))
        if k == 0:
            raise ValueError(
                f"subsample fraction {fraction} leaves class {cls} empty")
        pool = pool[rng.permutation(len(pool))]
        chosen.append(pool[:k])
    return np.sort(np.concatenate(chosen))


def resolve_data_root(data_root: str | os.PathLike | None = None) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    if data_root is not None:
        return Path(data_root)
    if env:
        return Path(env)
    return Path("data")


def load_dataset(name: str, seed: int, subsample_fraction: float = 1.0,
                 data_root: str | os.PathLike | None = None,
                 n_train: int | None = None, n_test: int | None = None) -> DatasetHandle:
    """Load a registered dataset deterministically.

    Parameters
    ----------
    name:
        One of ``mnist``, ``cifar10``, ``gtsrb`` or ``synthetic``
        (case-insensitive).
    seed:
        Controls subsampling order and, for ``synthetic``, generation.
        Identical ``(name, seed)`` yield byte-identical splits.
    subsample_fraction:
        In ``(0, 1]``; stratified by class.
    n_train, n_test:
        Size overrides for the synthetic dataset only.
    """
    key = name.lower()
    if key not in DATASET_INFO:
        raise KeyError(f"unknown dataset {name!r}; registered: {sorted(DATASET_INFO)}")
    if not (0.0 < subsample_fraction <= 1.0):
        raise ValueError(f"subsample_fraction must be in (0, 1], got {subsample_fraction}")

    if key == "synthetic":
        tr_x, tr_y, te_x, te_y = _make_synthetic(
            seed, n_train or SYNTHETIC_TRAIN, n_test or SYNTHETIC_TEST)
    else:
        root = resolve_data_root(data_root)
        loader = {"mnist": _load_mnist, "cifar10": _load_cifar10, "gtsrb": _load_gtsrb}[key]
        tr_x, tr_y, te_x, te_y = loader(root)

    shape, num_classes, _ = DATASET_INFO[key]
    handle = DatasetHandle(
        name=key,
        input_shape=shape,
        num_classes=num_classes,
        seed=seed,
        train_images=tr_x,
        train_labels=tr_y,
        test_images=te_x,
        test_labels=te_y,
        train_indices=np.arange(len(tr_y), dtype=np.int64),
        test_indices=np.arange(len(te_y), dtype=np.int64),
    )
    if subsample_fraction < 1.0:
        rng = np.random.default_rng(seed)
        keep = _stratified_take(handle.train_labels, subsample_fraction, rng)
        handle = handle.subset(keep)
    return handle


def defender_holdout(handle: DatasetHandle, fraction: float) -> DatasetHandle:
    """The defender's clean, class-stratified holdout carved from the train split.

    ``fraction`` must be in ``(0, 0.1]``: the inspection schemes studied here
    assume the defender holds at most ten percent of the clean training data.
    The returned handle's train split is the holdout; disjointness from any
    poisoning pool is checked downstream via ``train_indices``.
    """
    if not (0.0 < fraction <= 0.1):
        raise ValueError(f"holdout fraction must be in (0, 0.1], got {fraction}")
    rng = np.random.default_rng(handle.seed + 0x5EED)
    keep = _stratified_take(handle.train_labels, fraction, rng)
    return handle.subset(keep)


def apply_split_manifest(base: DatasetHandle, manifest: dict) -> DatasetHandle:
    """Rebuild a handle from :meth:`DatasetHandle.split_manifest` output."""
    if manifest["name"] != base.name:
        raise ValueError(f"manifest is for {manifest['name']!r}, base is {base.name!r}")
    positions = np.searchsorted(base.train_indices,
                                np.asarray(manifest["train_indices"], dtype=np.int64))
    return base.subset(positions)


def save_split_manifest(handle: DatasetHandle, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(handle.split_manifest()))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _draw_shape(rng: np.random.Generator, cls: int, H: int = 28, W: int = 28) -> np.ndarray:
    """One 28x28x1 sample of shape class ``cls`` on a noise background."""
    img = rng.uniform(0.0, 0.25, size=(H, W)).astype(np.float32)
    cy = H // 2 + int(rng.integers(-3, 4))
    cx = W // 2 + int(rng.integers(-3, 4))
    s = int(rng.integers(10, 14))
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = yy - cy, xx - cx

    def put(m: np.ndarray) -> None:
        img[m] = rng.uniform(0.70, 1.0, size=int(m.sum())).astype(np.float32)

    if cls == 0:    # filled disc
        put(dy ** 2 + dx ** 2 <= (s // 2) ** 2)
    elif cls == 1:  # vertical bar
        put((np.abs(dx) <= 1) & (np.abs(dy) <= s // 2 + 2))
    elif cls == 2:  # horizontal bar
        put((np.abs(dy) <= 1) & (np.abs(dx) <= s // 2 + 2))
    elif cls == 3:  # cross
        put(((np.abs(dx) <= 1) | (np.abs(dy) <= 1))
            & (np.maximum(np.abs(dx), np.abs(dy)) <= s // 2 + 1))
    elif cls == 4:  # hollow square
        d = np.maximum(np.abs(dx), np.abs(dy))
        put((d <= s // 2) & (d >= s // 2 - 1))
    elif cls == 5:  # main-diagonal stroke
        put((np.abs(dy - dx) <= 1) & (np.abs(dx) <= s // 2 + 1))
    elif cls == 6:  # anti-diagonal stroke
        put((np.abs(dy + dx) <= 1) & (np.abs(dx) <= s // 2 + 1))
    elif cls == 7:  # two horizontal bars
        put((np.abs(yy - (cy - 4)) <= 1) & (np.abs(dx) <= s // 2 + 2))
        put((np.abs(yy - (cy + 4)) <= 1) & (np.abs(dx) <= s // 2 + 2))
    elif cls == 8:  # filled square
        put(np.maximum(np.abs(dx), np.abs(dy)) <= s // 3)
    elif cls == 9:  # ring
        r2 = dy ** 2 + dx ** 2
        put((r2 <= (s // 2 + 1) ** 2) & (r2 >= (s // 2 - 1) ** 2))
    else:
        raise ValueError(f"synthetic class out of range: {cls}")
    return img[..., None]


def _make_synthetic(seed: int, n_train: int, n_test: int):
    rng = np.random.default_rng(seed)

    def gen(n: int):
        labels = np.arange(n, dtype=np.int64) % 10
        rng.shuffle(labels)
        images = np.stack([_draw_shape(rng, int(c)) for c in labels])
        return images.astype(np.float32), labels

    tr_x, tr_y = gen(n_train)
    te_x, te_y = gen(n_test)
    return tr_x, tr_y, te_x, te_y


# ---------------------------------------------------------------------------
# on-disk loaders
# ---------------------------------------------------------------------------

def _open_maybe_gz(path: Path):
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return open(path, "rb")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise DatasetNotFoundError(
        f"missing {path} (or {gz.name}); fetch the dataset into {path.parent}")


def _read_idx(path: Path) -> np.ndarray:
    """Parse an IDX-format array file (the MNIST container format)."""
    with _open_maybe_gz(path) as f:
        header = f.read(4)
        if len(header) != 4 or header[0] != 0 or header[1] != 0:
            raise ValueError(f"{path}: not an IDX file")
        dtype_code, ndim = header[2], header[3]
        if dtype_code != 0x08:
            raise ValueError(f"{path}: only unsigned-byte IDX supported")
        dims = np.frombuffer(f.read(4 * ndim), dtype=">i4")
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: truncated IDX payload")
    return data.reshape(dims)


def _load_mnist(root: Path):
    d = root / "mnist"
    tr_x = _read_idx(d / "train-images-idx3-ubyte").astype(np.float32) / 255.0
    tr_y = _read_idx(d / "train-labels-idx1-ubyte").astype(np.int64)
    te_x = _read_idx(d / "t10k-images-idx3-ubyte").astype(np.float32) / 255.0
    te_y = _read_idx(d / "t10k-labels-idx1-ubyte").astype(np.int64)
    return tr_x[..., None], tr_y, te_x[..., None], te_y


def _load_cifar10(root: Path):
    d = root / "cifar-10-batches-py"
    if not d.exists():
        raise DatasetNotFoundError(f"missing {d}; fetch the python-format CIFAR10 batches")

    def read_batch(name: str):
        with open(d / name, "rb") as f:
            blob = pickle.load(f, encoding="bytes")
        x = blob[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        return x.astype(np.float32) / 255.0, np.asarray(blob[b"labels"], dtype=np.int64)

    xs, ys = zip(*(read_batch(f"data_batch_{i}") for i in range(1, 6)))
    te_x, te_y = read_batch("test_batch")
    return np.concatenate(xs), np.concatenate(ys), te_x, te_y


def _load_gtsrb(root: Path):
    """GTSRB from per-class image directories, resized to 32x32.

    The published images vary in size; resizing to 32x32 matches the input
    shape used throughout. Expected layout: ``gtsrb/{train,test}/<class>/*``.
    """
    from PIL import Image

    d = root / "gtsrb"
    if not d.exists():
        raise DatasetNotFoundError(f"missing {d}; fetch GTSRB into per-class folders")

    def read_split(split: str):
        images, labels = [], []
        split_dir = d / split
        if not split_dir.exists():
            raise DatasetNotFoundError(f"missing {split_dir}")
        for cls_dir in sorted(split_dir.iterdir()):
            if not cls_dir.is_dir():
                continue
            cls = int(cls_dir.name)
            for img_path in sorted(cls_dir.iterdir()):
                if img_path.suffix.lower() not in (".png", ".ppm", ".jpg", ".jpeg"):
                    continue
                with Image.open(img_path) as im:
                    im = im.convert("RGB").resize((32, 32), Image.BILINEAR)
                    images.append(np.asarray(im, dtype=np.float32) / 255.0)
                labels.append(cls)
        if not images:
            raise DatasetNotFoundError(f"no images under {split_dir}")
        return np.stack(images), np.asarray(labels, dtype=np.int64)

    tr_x, tr_y = read_split("train")
    te_x, te_y = read_split("test")
    return tr_x, tr_y, te_x, te_y
