"""Benchmark construction: Binary Adding and permuted sequential MNIST.

Also the two on-disk formats the package reads and writes: MNIST IDX files
(as distributed) and the ``STPD`` dataset container.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng64, fisher_yates, fisher_yates_head_rows

N_MARKS = 9
N_CLASSES = 10
PS_MNIST_DEFAULT_SEED = 2024

STPD_MAGIC = b"STPD"
STPD_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass(frozen=True)
class BinaryAddingSpec:
    T: int = 100
    train_size: int = 50_000
    test_size: int = 2_000
    seed: int = 0
    balance: str = "balanced"
    n_marks: int = N_MARKS
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.n_marks != N_MARKS or self.n_classes != N_CLASSES:
            raise ValueError("binary adding uses exactly 9 marks and 10 classes")
        if self.T < 10:
            raise ValueError(f"binary adding needs T >= 10 (9 marks must fit), got T={self.T}")
        if self.balance not in ("natural", "balanced"):
            raise ValueError(f"balance must be 'natural' or 'balanced', not {self.balance!r}")
        if self.train_size < 0 or self.test_size < 0:
            raise ValueError("split sizes must be non-negative")
        if self.balance == "balanced":
            for n in (self.train_size, self.test_size):
                if n % self.n_classes:
                    raise ValueError(f"balanced mode needs split sizes divisible by 10, got {n}")

    def spec_hash(self) -> str:
        blob = json.dumps({"task": "binary_adding", **asdict(self)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class SequenceDataset:
    inputs: np.ndarray   # (N, T, C)
    labels: np.ndarray   # (N,)
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ValueError("inputs must be (N, T, C)")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per sample is required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def steps(self) -> int:
        return self.inputs.shape[1]

    @property
    def channels(self) -> int:
        return self.inputs.shape[2]

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset(self.inputs[idx], self.labels[idx], self.n_classes, dict(self.meta))


# -- Binary Adding ----------------------------------------------------------

def brute_force_label(x1, x2) -> int:
    """Literal sum of x1[t] * x2[t] over the sequence."""
    x1 = [int(v) for v in np.asarray(x1).ravel()]
    x2 = [int(v) for v in np.asarray(x2).ravel()]
    if len(x1) != len(x2):
        raise ValueError("value and mark channels differ in length")
    if any(v not in (0, 1) for v in x2) or sum(x2) != N_MARKS:
        raise ValueError(f"mark channel must hold exactly {N_MARKS} ones")
    return sum(a * b for a, b in zip(x1, x2))


def _binary_adding_block(rng: Rng64, count: int, T: int):
    """``count`` consecutive samples: T bit draws then T-1 shuffle draws each.

    Returns each sample's stream offset, its mark positions and its label.
    Value bits are only drawn at the marks here; the dense channels are built
    later, and only for samples that are kept.
    """
    width = 2 * T - 1
    base = np.arange(count, dtype=np.uint64)[:, None] * np.uint64(width)
    draws = rng.peek(base[:, 0] + np.arange(T, width, dtype=np.uint64)[:, None])
    marks = fisher_yates_head_rows(draws, T, N_MARKS, transposed=True)
    bits = rng.peek(base + marks.astype(np.uint64))
    labels = ((bits >> np.uint64(11)) & np.uint64(1)).sum(axis=1).astype(np.int64)
    start = rng.state
    rng.skip(count * width)
    return (start, base[:, 0]), marks, labels


def _materialize(origin, marks, T):
    start, offsets = origin
    bits = Rng64(start).peek(offsets[:, None] + np.arange(T, dtype=np.uint64))
    x1 = ((bits >> np.uint64(11)) & np.uint64(1)).astype(np.uint8)
    x2 = np.zeros((marks.shape[0], T), np.uint8)
    x2[np.arange(marks.shape[0])[:, None], marks] = 1
    return x1, x2


def _binary_adding_split(seed: int, size: int, T: int, balanced: bool, block: int = 50_000):
    rng = Rng64(seed)
    if not balanced or size == 0:
        origin, marks, y = _binary_adding_block(rng, size, T)
        return (*_materialize(origin, marks, T), y)
    quota = size // N_CLASSES
    filled = np.zeros(N_CLASSES, np.int64)
    parts = []
    while filled.sum() < size:
        (start, offsets), marks, y = _binary_adding_block(rng, block, T)
        keep = []
        for c in range(N_CLASSES):
            room = quota - filled[c]
            if room > 0:
                hit = np.flatnonzero(y == c)[:room]
                keep.append(hit)
                filled[c] += hit.size
        keep = np.sort(np.concatenate(keep))
        parts.append((*_materialize((start, offsets[keep]), marks[keep], T), y[keep]))
    return tuple(np.concatenate(p) for p in zip(*parts))


def gen_binary_adding(spec: BinaryAddingSpec):
    """Train and test splits; streams are seeded with ``seed`` and ``seed + 1``.

    Each sample consumes 2T-1 draws: T value bits via ``rng_below(2)`` followed
    by a downward Fisher-Yates shuffle whose first nine entries are the marks.
    Balanced mode keeps samples in generation order and drops any whose label
    bucket is already full.
    """
    out = []
    for split, seed, size in (("train", spec.seed, spec.train_size),
                              ("test", spec.seed + 1, spec.test_size)):
        x1, x2, y = _binary_adding_split(seed, size, spec.T, spec.balance == "balanced")
        inputs = np.stack([x1, x2], axis=2).astype(np.float32)
        meta = {"task": f"binary_adding/{split}", "seed": seed, "spec_hash": spec.spec_hash(),
                "balance": spec.balance}
        out.append(SequenceDataset(inputs, y, N_CLASSES, meta))
    return tuple(out)


# -- MNIST ------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def load_mnist_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise DataFormatError("image file truncated before header end")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"bad image magic 0x{magic:08X}")
    if len(img) != 16 + n * rows * cols:
        raise DataFormatError(f"image payload holds {len(img) - 16} bytes, "
                              f"header promises {n * rows * cols}")
    if len(lab) < 8:
        raise DataFormatError("label file truncated before header end")
    lmagic, ln = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"bad label magic 0x{lmagic:08X}")
    if len(lab) != 8 + ln:
        raise DataFormatError("label payload length disagrees with header")
    if ln != n:
        raise DataFormatError(f"{n} images but {ln} labels")
    images = np.frombuffer(img, np.uint8, offset=16).reshape(n, rows, cols)
    labels = np.frombuffer(lab, np.uint8, offset=8).astype(np.int64)
    return images.astype(np.float32) / np.float32(255.0), labels


def write_mnist_idx(images_u8, labels, images_path, labels_path):
    """Write raw uint8 images and labels in IDX layout (used for fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def ps_mnist_permutation(seed: int = PS_MNIST_DEFAULT_SEED) -> np.ndarray:
    return fisher_yates(Rng64(seed), 784)


def make_ps_mnist(images, labels, seed: int = PS_MNIST_DEFAULT_SEED,
                  permutation=None) -> SequenceDataset:
    """Row-major flatten, then reorder every image by one shared permutation.

    ``permutation`` overrides the seeded one (e.g. the identity, to recover a
    plain sequential scan).
    """
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise ValueError(f"expected (N, 28, 28) images, got {images.shape}")
    perm = ps_mnist_permutation(seed) if permutation is None else np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(784)):
        raise ValueError("permutation must be a bijection on 784 positions")
    flat = images.reshape(images.shape[0], 784)
    seq = flat[:, perm][:, :, None].astype(np.float32)
    meta = {"task": "ps_mnist", "seed": seed, "permutation": perm}
    return SequenceDataset(seq, labels, 10, meta)


def unpermute_ps_mnist(dataset: SequenceDataset) -> np.ndarray:
    """Invert :func:`make_ps_mnist` back to (N, 28, 28) images."""
    perm = dataset.meta["permutation"]
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    return dataset.inputs[:, :, 0][:, inverse].reshape(-1, 28, 28)


# -- STPD container -----------------------------------------------------------

def dataset_bytes(ds: SequenceDataset) -> bytes:
    name = ds.meta.get("task", "").encode("utf-8")
    N, T, C = ds.inputs.shape
    head = STPD_MAGIC + struct.pack("<I", STPD_VERSION) + struct.pack("<I", len(name)) + name
    head += struct.pack("<QIIII", int(ds.meta.get("seed", 0)), N, T, C, ds.n_classes)
    body = np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes()
    if ds.labels.size and ds.labels.max() > 0xFFFF:
        raise ValueError("labels do not fit u16")
    tail = ds.labels.astype("<u2").tobytes()
    return head + body + tail


def save_dataset(ds: SequenceDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> SequenceDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != STPD_MAGIC:
        raise DataFormatError(f"{path}: not an STPD file")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != STPD_VERSION:
            raise DataFormatError(f"{path}: unsupported STPD version {version}")
        (name_len,) = struct.unpack_from("<I", raw, 8)
        name = raw[12:12 + name_len].decode("utf-8")
        pos = 12 + name_len
        seed, N, T, C, n_classes = struct.unpack_from("<QIIII", raw, pos)
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated header") from exc
    pos += 24
    n_vals = N * T * C
    if len(raw) != pos + 4 * n_vals + 2 * N:
        raise DataFormatError(f"{path}: payload size disagrees with header")
    inputs = np.frombuffer(raw, "<f4", count=n_vals, offset=pos).reshape(N, T, C).astype(np.float32)
    labels = np.frombuffer(raw, "<u2", count=N, offset=pos + 4 * n_vals).astype(np.int64)
    meta = {"task": name, "seed": seed}
    return SequenceDataset(inputs, labels, n_classes, meta)
