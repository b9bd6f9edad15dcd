"""Datasets: IDX files, synthetic Gaussian blobs, and a text dump format."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .textio import LineReader, ParseError, write_array

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATASET_FORMAT = "lipforge-dataset"
DATASET_VERSION = 1


class IdxError(ParseError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"
    provenance: str = ""
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("inputs must lie in [0, 1]")
        if len(self.labels) == 0 and "empty" not in self.flags:
            self.flags.append("empty")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def take(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.classes,
                       split or self.split, f"{self.provenance}[subset {len(idx)}]")

    def head(self, n: int) -> "Dataset":
        return self.take(np.arange(min(n, len(self))))

    def sample(self, n: int, seed: int = 0) -> "Dataset":
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(self), size=min(n, len(self)), replace=False))
        return self.take(idx)

    def split_off(self, n_test: int) -> tuple["Dataset", "Dataset"]:
        n_train = len(self) - n_test
        tr = self.take(np.arange(n_train), "train")
        te = self.take(np.arange(n_train, len(self)), "test")
        return tr, te


# -- IDX -------------------------------------------------------------------------


def _read_idx(path, magic: int) -> tuple[tuple, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IdxError(f"{path}: file too short for an IDX header", len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IdxError(f"{path}: truncated payload ({len(raw) - header} of {need} bytes)", len(raw))
    if len(raw) - header > need:
        raise IdxError(f"{path}: {len(raw) - header - need} trailing bytes", header + need)
    return dims, np.frombuffer(raw, dtype=np.uint8, count=need, offset=header)


def load_idx(images_path, labels_path, classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] with shape (N, 1, H, W)."""
    dims, pix = _read_idx(images_path, IDX_IMAGES_MAGIC)
    ldims, lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(dims) != 3:
        raise IdxError(f"{images_path}: expected 3 dimensions, got {len(dims)}", 3)
    if dims[0] != ldims[0]:
        raise IdxError(f"count mismatch: {dims[0]} images but {ldims[0]} labels", 4)
    n, h, w = dims
    images = pix.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Dataset(images, lab.astype(np.int64), classes, split, f"idx:{images_path}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- synthetic -------------------------------------------------------------------


def synth_blobs(classes: int = 3, dim: int = 20, count: int = 600, separation: float = 2.0,
                seed: int = 0, split: str = "train") -> Dataset:
    """Gaussian clusters in [0, 1]^dim.

    Centers are uniform in [0.2, 0.8]^dim; the per-coordinate noise std is
    ``0.25 / separation``, so larger separation means tighter clusters.
    Samples are clipped to the unit box and labels are balanced.
    """
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, dim))
    labels = rng.permutation(np.arange(count) % classes)
    noise = rng.standard_normal((count, dim)) * (0.25 / separation)
    inputs = np.clip(centers[labels] + noise, 0.0, 1.0)
    prov = f"blobs:classes={classes};dim={dim};count={count};separation={separation!r};seed={seed}"
    ds = Dataset(inputs, labels, classes, split, prov)
    if count == 0:
        logger.warning("synth_blobs produced an empty dataset")
    return ds


# -- text dump -------------------------------------------------------------------


def dumps_dataset(ds: Dataset) -> str:
    lines = [
        f"{DATASET_FORMAT} {DATASET_VERSION}",
        f"classes {ds.classes}",
        f"split {ds.split}",
        f"provenance {ds.provenance}",
        "input_shape " + " ".join(map(str, ds.input_shape)),
    ]
    write_array(lines, "labels", ds.labels.reshape(1, -1) if len(ds) else np.zeros((1, 0)))
    write_array(lines, "inputs", ds.inputs.reshape(len(ds), -1) if len(ds) else np.zeros((0, 0)))
    lines.append("end-dataset")
    return "\n".join(lines) + "\n"


def loads_dataset(raw: bytes | str) -> Dataset:
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    r = LineReader(raw)
    r.expect_magic(DATASET_FORMAT, DATASET_VERSION)
    classes = r.scalar("classes", int)
    split = r.scalar("split")
    prov = r.scalar("provenance")
    shape = r.ints("input_shape")
    labels = r.array("labels").reshape(-1)
    flat = r.array("inputs")
    line, off = r.next_line()
    if line != "end-dataset":
        raise ParseError(f"expected 'end-dataset', got {line[:40]!r}", off)
    if len(flat) != len(labels):
        raise ParseError(f"{len(flat)} input rows but {len(labels)} labels", off)
    if not np.all(labels == np.round(labels)):
        raise ParseError("non-integer label", off)
    try:
        return Dataset(flat.reshape(len(flat), *shape), labels.astype(np.int64), classes, split, prov)
    except ValueError as e:
        raise ParseError(f"invalid dataset: {e}", off) from None


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())

