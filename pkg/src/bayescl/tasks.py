"""Datasets and task streams.

Image data travels as flat float64 rows in [0, 1]; labels are int64.  The
on-disk format is the classic big-endian IDX pair (magic 2051 for image
tensors, 2049 for label vectors), read transparently whether plain or
gzip-compressed.  Error classes are split so callers can tell a malformed
file from a truncated one from a mismatched pair.

Task streams come in three flavors:

* ``permuted_tasks``: one fixed pixel permutation per task (task 0 keeps the
  identity), single shared head, all ten classes;
* ``split_tasks``: one binary task per class pair, labels remapped to {0, 1},
  one fresh head per task;
* ``linreg_sequence``: scalar linear-Gaussian tasks y ~ N(w x + b, var) for a
  list of (w, b) ground truths.

``ensure_digit_corpus`` synthesizes a small MNIST-shaped corpus (rendered
glyphs with random shift / rotation / blur / noise) so the full pipeline runs
on machines without the real digits; point the data root at actual IDX files
to use them instead.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core_math import make_rng

__all__ = [
    "DataError",
    "IdxFormatError",
    "IdxTruncatedError",
    "IdxCountError",
    "TaskData",
    "TaskSplit",
    "load_idx",
    "write_idx_images",
    "write_idx_labels",
    "load_image_pair",
    "permuted_tasks",
    "split_tasks",
    "linreg_sequence",
    "ensure_digit_corpus",
    "generate_digit_corpus",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class DataError(Exception):
    """Base class for dataset problems (maps to the CLI's data exit code)."""


class IdxFormatError(DataError):
    """Magic number or header does not describe the expected tensor."""


class IdxTruncatedError(DataError):
    """File ends before the payload the header promised."""


class IdxCountError(DataError):
    """Image file and label file disagree on the number of examples."""


@dataclass
class TaskData:
    """One labeled set: x is (N, D) float64, y is (N,) int64 for
    classification or (N, K) float64 for regression."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise IdxCountError(
                f"x has {len(self.x)} rows but y has {len(self.y)}")

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "TaskData":
        return TaskData(self.x[idx], self.y[idx])

    def without(self, idx) -> "TaskData":
        mask = np.ones(len(self.x), dtype=bool)
        mask[idx] = False
        return TaskData(self.x[mask], self.y[mask])

    def concat(self, other: "TaskData") -> "TaskData":
        return TaskData(np.concatenate([self.x, other.x]),
                        np.concatenate([self.y, other.y]))


@dataclass
class TaskSplit:
    """Train/test pair plus which head handles it."""

    train: TaskData
    test: TaskData
    head: int = 0
    name: str = ""


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxTruncatedError(
            f"{path}: expected {n} more bytes, got {len(buf)}")
    return buf


def _read_idx_images(path):
    with _open_maybe_gzip(path) as fh:
        header = _read_exact(fh, 16, path)
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"{path}: image magic {magic}, want {IMAGE_MAGIC}")
        raw = _read_exact(fh, n * rows * cols, path)
        extra = fh.read(1)
    if extra:
        raise IdxFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    return data.astype(np.float64) / 255.0


def _read_idx_labels(path):
    with _open_maybe_gzip(path) as fh:
        header = _read_exact(fh, 8, path)
        magic, n = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"{path}: label magic {magic}, want {LABEL_MAGIC}")
        raw = _read_exact(fh, n, path)
        extra = fh.read(1)
    if extra:
        raise IdxFormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path) -> TaskData:
    """Read an IDX image/label pair into flat [0, 1] rows."""
    x = _read_idx_images(images_path)
    y = _read_idx_labels(labels_path)
    if len(x) != len(y):
        raise IdxCountError(
            f"{images_path} has {len(x)} images, {labels_path} has {len(y)} labels")
    return TaskData(x, y)


def write_idx_images(path, images, rows=28, cols=28):
    """Write uint8 images (N, rows*cols) or (N, rows, cols) as IDX."""
    arr = np.asarray(images, dtype=np.uint8).reshape(-1, rows, cols)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, arr.shape[0], rows, cols))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels):
    arr = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, arr.shape[0]))
        fh.write(arr.tobytes())


TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def _find_file(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DataError(f"missing {stem}[.gz] under {root}")


def load_image_pair(root) -> TaskSplit:
    """Load the train/test IDX quadruple living under ``root``."""
    root = Path(root)
    train = load_idx(_find_file(root, TRAIN_IMAGES), _find_file(root, TRAIN_LABELS))
    test = load_idx(_find_file(root, TEST_IMAGES), _find_file(root, TEST_LABELS))
    return TaskSplit(train=train, test=test, head=0, name="base")


def permuted_tasks(base: TaskSplit, n_tasks: int, seed: int) -> list:
    """Pixel-permutation task stream; task 0 is the untouched base."""
    if n_tasks < 1:
        raise ValueError("permuted_tasks: need n_tasks >= 1")
    out = []
    for t in range(n_tasks):
        if t == 0:
            tr, te = base.train, base.test
        else:
            perm = make_rng(seed, "permutation", t).permutation(base.train.x.shape[1])
            tr = TaskData(base.train.x[:, perm], base.train.y)
            te = TaskData(base.test.x[:, perm], base.test.y)
        out.append(TaskSplit(train=tr, test=te, head=0, name=f"permuted-{t}"))
    return out


def split_tasks(base: TaskSplit, pairs) -> list:
    """One binary task per (a, b) class pair, labels remapped to 0/1, each
    with its own head."""
    out = []
    for h, (a, b) in enumerate(pairs):
        if a == b:
            raise ValueError(f"split_tasks: degenerate pair {(a, b)}")

        def pick(d: TaskData) -> TaskData:
            mask = (d.y == a) | (d.y == b)
            x = d.x[mask]
            y = (d.y[mask] == b).astype(np.int64)
            return TaskData(x, y)

        out.append(TaskSplit(train=pick(base.train), test=pick(base.test),
                             head=h, name=f"split-{a}v{b}"))
    return out


def linreg_sequence(true_params, n_per_task: int, seed: int,
                    noise_var: float = 0.1) -> list:
    """Scalar y ~ N(w x + b, noise_var) tasks with x ~ N(0, 1)."""
    out = []
    for t, (w, b) in enumerate(true_params):
        rng = make_rng(seed, "linreg", t)

        def draw(n):
            x = rng.standard_normal((n, 1))
            y = w * x + b + np.sqrt(noise_var) * rng.standard_normal((n, 1))
            return TaskData(x, y)

        out.append(TaskSplit(train=draw(n_per_task), test=draw(n_per_task),
                             head=0, name=f"linreg-{t}"))
    return out


# 5x7 glyph bitmaps used to synthesize a digits corpus when no real IDX
# files are available.
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _render_digit(digit: int, rng) -> np.ndarray:
    glyph = np.array([[float(c) for c in row] for row in _GLYPHS[digit]])
    scale = rng.uniform(2.4, 3.2)
    img = ndimage.zoom(glyph, scale, order=1)
    canvas = np.zeros((28, 28))
    h, w = img.shape
    top = (28 - h) // 2 + rng.integers(-3, 4)
    left = (28 - w) // 2 + rng.integers(-3, 4)
    top = int(np.clip(top, 0, 28 - h))
    left = int(np.clip(left, 0, 28 - w))
    canvas[top:top + h, left:left + w] = img
    canvas = ndimage.rotate(canvas, rng.uniform(-20.0, 20.0), reshape=False, order=1)
    canvas = ndimage.gaussian_filter(canvas, rng.uniform(0.4, 0.9))
    canvas *= rng.uniform(0.7, 1.0)
    canvas += rng.normal(0.0, 0.03, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def generate_digit_corpus(root, n_train: int = 12000, n_test: int = 2000,
                          seed: int = 0):
    """Render a synthetic digits corpus and write the four IDX files."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for n, img_name, lab_name, tag in (
        (n_train, TRAIN_IMAGES, TRAIN_LABELS, "train"),
        (n_test, TEST_IMAGES, TEST_LABELS, "test"),
    ):
        rng = make_rng(seed, "digits", tag)
        labels = rng.integers(0, 10, size=n)
        images = np.empty((n, 784), dtype=np.uint8)
        for i, lab in enumerate(labels):
            images[i] = np.round(255.0 * _render_digit(int(lab), rng)).reshape(-1)
        write_idx_images(root / img_name, images)
        write_idx_labels(root / lab_name, labels)
    return root


def ensure_digit_corpus(root, n_train: int = 12000, n_test: int = 2000,
                        seed: int = 0) -> Path:
    """Return ``root`` with a full IDX quadruple present.

    An empty root gets a synthesized corpus; a complete root (real digits or
    an earlier synthesis) is left untouched.  A partial root is an error:
    regenerating would clobber whatever the user put there.
    """
    root = Path(root)
    stems = (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)
    present = []
    for stem in stems:
        try:
            _find_file(root, stem)
            present.append(stem)
        except DataError:
            pass
    if len(present) == len(stems):
        return root
    if present:
        missing = sorted(set(stems) - set(present))
        raise DataError(
            f"{root} holds a partial corpus; missing {missing}")
    generate_digit_corpus(root, n_train=n_train, n_test=n_test, seed=seed)
    return root
