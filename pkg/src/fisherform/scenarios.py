"""Datasets, loaders and the perturbation / split scenario generators."""

from __future__ import annotations

import csv
import gzip
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .netcore import pass_generator

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_MAX_IDX_ITEMS = 2**31 - 1


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class DatasetConsistencyError(ValueError):
    pass


class MissingColumnError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NonNumericCellError(ValueError):
    def __init__(self, message: str, row: int, column: str):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    class_count: int
    feature_names: tuple[str, ...] | None = None
    is_image: bool = False

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise DatasetConsistencyError("inputs must be a 2-D array (rows x features)")
        if labels.shape != (inputs.shape[0],):
            raise DatasetConsistencyError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DatasetConsistencyError("labels outside [0, class_count)")
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))
            if len(self.feature_names) != inputs.shape[1]:
                raise DatasetConsistencyError("feature_names length differs from input width")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def width(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.class_count, self.feature_names, self.is_image)

    def with_inputs(self, inputs) -> "Dataset":
        return Dataset(inputs, self.labels, self.class_count, self.feature_names, self.is_image)


def _open_maybe_gz(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> tuple[list[int], bytes]:
    with _open_maybe_gz(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = list(struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim]))
    total = 1
    for d in dims:
        total *= d
        if d > _MAX_IDX_ITEMS or total > _MAX_IDX_ITEMS:
            raise IdxDimensionError(f"{path}: dimensions {dims} overflow")
    payload = data[4 + 4 * ndim:]
    if len(payload) < total:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {total}")
    return dims, payload[:total]


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label file pair (unsigned bytes, big-endian header).

    Pixels are scaled by 1/255 and every image is flattened row-major.
    """
    dims, pixels = _read_idx(images_path, IDX_IMAGE_MAGIC)
    ldims, labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if ldims[0] != dims[0]:
        raise DatasetConsistencyError(f"{dims[0]} images but {ldims[0]} labels")
    count = dims[0]
    width = int(np.prod(dims[1:]))
    inputs = np.frombuffer(pixels, dtype=np.uint8).reshape(count, width) / 255.0
    label_arr = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(inputs, label_arr, class_count, is_image=True)


def load_csv(path, label_column: str, class_count: int | None = None) -> Dataset:
    """Read a headed CSV; every column except ``label_column`` is a feature."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetConsistencyError(f"{path}: empty file") from None
        if label_column not in header:
            raise MissingColumnError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        names = [header[i] for i in feature_idx]
        rows: list[list[float]] = []
        labels: list[int] = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetConsistencyError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            try:
                labels.append(int(float(row[label_idx])))
            except ValueError:
                raise NonNumericCellError(
                    f"{path}: row {row_no}: label {row[label_idx]!r} is not numeric", row_no, label_column
                ) from None
            values = []
            for i in feature_idx:
                try:
                    values.append(float(row[i]))
                except ValueError:
                    raise NonNumericCellError(
                        f"{path}: row {row_no}, column {header[i]!r}: {row[i]!r} is not numeric", row_no, header[i]
                    ) from None
            rows.append(values)
    if not rows:
        raise DatasetConsistencyError(f"{path}: no data rows")
    label_arr = np.asarray(labels, dtype=np.int64)
    if class_count is None:
        class_count = int(label_arr.max()) + 1
    return Dataset(np.asarray(rows, dtype=np.float64), label_arr, class_count, names)


def write_csv(path, data: Dataset, label_column: str = "label") -> None:
    names = list(data.feature_names) if data.feature_names else [f"f{i}" for i in range(data.width)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names + [label_column])
        for x, y in zip(data.inputs, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def noise_path(x, lam: float, seed: int, clip: bool = True, stream: int = 0) -> np.ndarray:
    """``x + lam * eps`` with seeded standard normal ``eps``; clipped to [0,1] if ``clip``.

    ``stream`` selects an independent noise draw for the same seed, so a
    dataset can give each row its own noise.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if lam == 0.0:
        return x.copy()
    eps = pass_generator(seed, stream).standard_normal(x.shape)
    out = x + lam * eps
    return np.clip(out, 0.0, 1.0) if clip else out


def invert_channel(x, layout: tuple[int, int, int], channel: int) -> np.ndarray:
    """Replace one channel of an interleaved (height, width, channels) image by ``1 - value``."""
    x = np.asarray(x, dtype=np.float64)
    h, w, c = layout
    if x.ndim != 1 or x.size != h * w * c:
        raise ValueError(f"image of length {x.size} does not match layout {layout}")
    if not 0 <= channel < c:
        raise ValueError(f"channel {channel} outside 0..{c - 1}")
    out = x.copy()
    out[channel::c] = 1.0 - out[channel::c]
    return out


def noise_dataset(data: Dataset, lam: float, seed: int, clip: bool | None = None) -> Dataset:
    """Row ``i`` gets noise stream ``i``; by default image data is clipped, tabular is not."""
    clip = data.is_image if clip is None else clip
    rows = [noise_path(x, lam, seed, clip=clip, stream=i) for i, x in enumerate(data.inputs)]
    return data.with_inputs(np.array(rows).reshape(data.inputs.shape))


def invert_dataset(data: Dataset, layout: tuple[int, int, int], channel: int) -> Dataset:
    return data.with_inputs(np.array([invert_channel(x, layout, channel) for x in data.inputs]))


@dataclass(frozen=True)
class SplitSpec:
    feature_index: int
    threshold: float
    train_side: str = "below"

    def __post_init__(self):
        if self.train_side not in ("below", "above_or_equal"):
            raise ValueError(f"unknown train_side {self.train_side!r}")


def threshold_split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Partition rows by ``feature < threshold``; warns if a side is empty."""
    if not 0 <= spec.feature_index < data.width:
        raise ValueError(f"feature_index {spec.feature_index} outside 0..{data.width - 1}")
    below = data.inputs[:, spec.feature_index] < spec.threshold
    train_mask = below if spec.train_side == "below" else ~below
    train, held = data.subset(train_mask), data.subset(~train_mask)
    if len(train) == 0 or len(held) == 0:
        warnings.warn(f"threshold split left an empty side (train={len(train)}, held_out={len(held)})", stacklevel=2)
    return train, held


def synth_blobs(
    C: int,
    per_class: int,
    dim: int,
    centers_seed: int,
    spread: float,
    *,
    sample_seed: int | None = None,
    center_scale: float = 5.0,
    centers: Sequence[Sequence[float]] | np.ndarray | None = None,
) -> Dataset:
    """Isotropic Gaussian clusters, ``per_class`` points per class.

    Centers are drawn uniformly from ``[-center_scale, center_scale]^dim``
    unless given explicitly.  Rows are ordered class by class.
    """
    if C < 2 or per_class < 1:
        raise ValueError("need C >= 2 and per_class >= 1")
    if centers is None:
        centers = pass_generator(centers_seed, 0).uniform(-center_scale, center_scale, (C, dim))
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (C, dim):
        raise ValueError(f"centers must have shape {(C, dim)}")
    rng = pass_generator(centers_seed if sample_seed is None else sample_seed, 1)
    noise = rng.standard_normal((C * per_class, dim))
    labels = np.repeat(np.arange(C), per_class)
    inputs = centers[labels] + spread * noise
    return Dataset(inputs, labels, C)
