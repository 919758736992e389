"""Synthetic 8x8 cross/square x green/violet benchmark.

Images are built in HSV: saturation 0.75, value 1.0 on the shape and 0.2 on the
background, hue 0.3 (green) or 0.9 (violet); hue and value then receive
independent U[-0.1, 0.1] noise per pixel before conversion to RGB.

Setup I uses the shape as label and the mean hue as bias variable; Setup II
uses the hue class as label and the value difference between the square and
cross masks as bias variable.
"""

from __future__ import annotations

import colorsys
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIZE = 8
HUES = {"green": 0.3, "violet": 0.9}
SHAPES = ("cross", "square")
SHAPE_VALUE = 1.0
BACKGROUND_VALUE = 0.2
SATURATION = 0.75
NOISE = 0.1

# 12-pixel masks as (row, col). Square: outline of the centred 4x4 block.
SQUARE_MASK = tuple(
    (r, c) for r in range(2, 6) for c in range(2, 6) if r in (2, 5) or c in (2, 5)
)
# Cross: both diagonals of the centred 6x6 block (disjoint for even size).
CROSS_MASK = tuple(sorted({(i, i) for i in range(1, 7)} | {(i, 7 - i) for i in range(1, 7)}))
MASKS = {"cross": CROSS_MASK, "square": SQUARE_MASK}

SETUPS = ("I", "II")
DATASET_MAGIC = b"CDDS1"


def mask_array(shape_tag: str) -> np.ndarray:
    m = np.zeros((SIZE, SIZE), dtype=bool)
    rows, cols = zip(*MASKS[shape_tag])
    m[list(rows), list(cols)] = True
    return m


def normalize_setup(setup) -> str:
    s = str(setup).upper()
    s = {"1": "I", "2": "II"}.get(s, s)
    if s not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}; expected I/II (or 1/2)")
    return s


@dataclass
class SynthImage:
    pixels: np.ndarray  # (8, 8, 3) RGB in [0, 1]
    hue: np.ndarray  # post-noise hue plane
    value: np.ndarray  # post-noise value plane, clamped to [0, 1]
    shape_tag: str
    hue_tag: str


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    rgb = [colorsys.hsv_to_rgb(a, b, c) for a, b, c in zip(h.ravel(), s.ravel(), v.ravel())]
    return np.asarray(rgb).reshape(h.shape + (3,))


def render_image(shape_tag: str, hue_tag: str, seed=None, noise: bool = True) -> SynthImage:
    """Render one image; ``seed`` may be an int or a ``numpy.random.Generator``."""
    if shape_tag not in MASKS:
        raise ValueError(f"unknown shape {shape_tag!r}")
    if hue_tag not in HUES:
        raise ValueError(f"unknown hue {hue_tag!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    value = np.where(mask_array(shape_tag), SHAPE_VALUE, BACKGROUND_VALUE)
    hue = np.full((SIZE, SIZE), HUES[hue_tag])
    if noise:
        hue = hue + rng.uniform(-NOISE, NOISE, size=hue.shape)
        value = value + rng.uniform(-NOISE, NOISE, size=value.shape)
    value = np.clip(value, 0.0, 1.0)
    pixels = np.clip(_hsv_to_rgb(hue % 1.0, np.full_like(hue, SATURATION), value), 0.0, 1.0)
    return SynthImage(pixels, hue, value, shape_tag, hue_tag)


def compute_bias_variable(image: SynthImage, setup) -> float:
    setup = normalize_setup(setup)
    if setup == "I":
        return float(image.hue.mean())
    sq = image.value[mask_array("square")].mean()
    cr = image.value[mask_array("cross")].mean()
    return float(sq - cr)


def label_of(shape_tag: str, hue_tag: str, setup) -> int:
    if normalize_setup(setup) == "I":
        return SHAPES.index(shape_tag)
    return list(HUES).index(hue_tag)


@dataclass
class Split:
    """Column-oriented examples: images (n, 8, 8, 3), labels, bias values, tags."""

    images: np.ndarray
    labels: np.ndarray
    bias: np.ndarray
    shape_tags: np.ndarray
    hue_tags: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def inputs(self) -> np.ndarray:
        """Channels-first network input (n, 3, 8, 8)."""
        return self.images.transpose(0, 3, 1, 2)

    def subset(self, idx) -> "Split":
        return Split(self.images[idx], self.labels[idx], self.bias[idx], self.shape_tags[idx], self.hue_tags[idx])

    def contingency(self) -> np.ndarray:
        """2x2 counts, rows = shape (cross, square), cols = hue (green, violet)."""
        t = np.zeros((2, 2), dtype=int)
        for s, h in zip(self.shape_tags, self.hue_tags):
            t[SHAPES.index(s), list(HUES).index(h)] += 1
        return t


@dataclass
class SplitDataset:
    """Train/val/test splits. Reads of ``test`` are counted."""

    train: Split
    val: Split
    _test: Split
    setup: str
    seed: int
    test_reads: int = field(default=0, compare=False)

    @property
    def test(self) -> Split:
        self.test_reads += 1
        return self._test

    def peek_test(self) -> Split:
        """Access without accounting (serialization and summaries only)."""
        return self._test


def _build_split(cells: list[tuple[str, str, int]], setup: str, rng: np.random.Generator) -> Split:
    tags = [(s, h) for s, h, n in cells for _ in range(n)]
    order = rng.permutation(len(tags))
    tags = [tags[i] for i in order]
    images, labels, bias = [], [], []
    for s, h in tags:
        img = render_image(s, h, rng)
        images.append(img.pixels)
        labels.append(label_of(s, h, setup))
        bias.append(compute_bias_variable(img, setup))
    return Split(
        np.asarray(images).reshape(len(tags), SIZE, SIZE, 3),
        np.asarray(labels, dtype=np.int64),
        np.asarray(bias, dtype=np.float64),
        np.asarray([s for s, _ in tags]),
        np.asarray([h for _, h in tags]),
    )


def _balanced_cells(n: int) -> list[tuple[str, str, int]]:
    # label-balanced, shape and hue independent up to rounding
    half = n // 2
    a, b = (half + 1) // 2, half // 2
    return [("cross", "green", a), ("cross", "violet", b), ("square", "green", b), ("square", "violet", a)]


def generate_dataset(setup, n_train: int = 600, n_val: int = 400, n_test: int = 400, seed: int = 0) -> SplitDataset:
    """Biased train split (cross <-> green, square <-> violet) and unbiased val/test."""
    setup = normalize_setup(setup)
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n <= 0 or n % 2:
            raise ValueError(f"{name} must be a positive even count, got {n}")
    rng = np.random.default_rng(seed)
    train_rng, val_rng, test_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(3))
    half = n_train // 2
    train = _build_split([("cross", "green", half), ("square", "violet", half)], setup, train_rng)
    val = _build_split(_balanced_cells(n_val), setup, val_rng)
    test = _build_split(_balanced_cells(n_test), setup, test_rng)
    return SplitDataset(train, val, test, setup, seed)


def make_batches(split: Split | np.ndarray, batch_size: int, balanced: bool, rng) -> list[np.ndarray]:
    """Shuffled index batches of exactly ``batch_size``; the remainder is dropped.

    ``split`` may be a :class:`Split` or a label array. When ``balanced``, every
    batch holds ``batch_size / 2`` examples of each label.
    """
    if batch_size < 8:
        raise ValueError(f"batch_size must be >= 8, got {batch_size}")
    if balanced and batch_size % 2:
        raise ValueError(f"balanced batches need an even batch_size, got {batch_size}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels = split.labels if isinstance(split, Split) else np.asarray(split)
    if not balanced:
        order = rng.permutation(len(labels))
        n = len(order) // batch_size
        return [order[i * batch_size : (i + 1) * batch_size] for i in range(n)]
    half = batch_size // 2
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in (0, 1)]
    n = min(len(p) for p in pools) // half
    batches = []
    for i in range(n):
        idx = np.concatenate([p[i * half : (i + 1) * half] for p in pools])
        batches.append(rng.permutation(idx))
    return batches


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_dataset(ds: SplitDataset, path: str | Path) -> None:
    """CDDS1: magic, setup byte, three u32 counts, then per example
    192 float64 pixels (row-major HWC), a label byte and a float64 bias."""
    splits = (ds.train, ds.val, ds.peek_test())
    buf = bytearray(DATASET_MAGIC)
    buf += struct.pack("<B", SETUPS.index(ds.setup) + 1)
    buf += struct.pack("<3I", *(len(s) for s in splits))
    for s in splits:
        for img, lab, b in zip(s.images, s.labels, s.bias):
            buf += np.ascontiguousarray(img, dtype="<f8").tobytes()
            buf += struct.pack("<Bd", int(lab), float(b))
    Path(path).write_bytes(bytes(buf))


def _tags_from(setup: str, label: int, bias: float, img: np.ndarray) -> tuple[str, str]:
    if setup == "I":
        shape = SHAPES[label]
        hue = "green" if bias < 0.6 else "violet"
    else:
        hue = list(HUES)[label]
        shape = "square" if bias > 0 else "cross"
    return shape, hue


def load_dataset(path: str | Path) -> SplitDataset:
    blob = Path(path).read_bytes()
    if not blob.startswith(DATASET_MAGIC):
        raise ValueError(f"{path}: not a CDDS1 dataset file")
    pos = len(DATASET_MAGIC)
    (tag,) = struct.unpack_from("<B", blob, pos)
    setup = SETUPS[tag - 1]
    counts = struct.unpack_from("<3I", blob, pos + 1)
    pos += 13
    splits = []
    for n in counts:
        imgs = np.empty((n, SIZE, SIZE, 3))
        labels = np.empty(n, dtype=np.int64)
        bias = np.empty(n)
        for i in range(n):
            imgs[i] = np.frombuffer(blob, "<f8", 192, pos).reshape(SIZE, SIZE, 3)
            pos += 192 * 8
            labels[i], bias[i] = struct.unpack_from("<Bd", blob, pos)
            pos += 9
        tags = [_tags_from(setup, int(l), float(b), im) for l, b, im in zip(labels, bias, imgs)]
        splits.append(
            Split(imgs, labels, bias, np.asarray([t[0] for t in tags]), np.asarray([t[1] for t in tags]))
        )
    # the file format carries no seed
    return SplitDataset(splits[0], splits[1], splits[2], setup, seed=-1)


def export_csv(ds: SplitDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "index", "shape", "hue", "label", "bias"] + [f"p{i}" for i in range(192)])
        for name, s in (("train", ds.train), ("val", ds.val), ("test", ds.peek_test())):
            for i in range(len(s)):
                row = [name, i, s.shape_tags[i], s.hue_tags[i], int(s.labels[i]), repr(float(s.bias[i]))]
                w.writerow(row + [repr(float(v)) for v in s.images[i].ravel()])
