"""Dataset sources for the harness.

``synthetic:<classes>:<per_class>:<seed>``
    Seeded Gaussian-blob RGB images, 16x16. Each class has its own blob
    position, width and colour; samples jitter those and add pixel noise.
``idx:<images>:<labels>[:<seed>]``
    An IDX image file (N,H,W) or (N,H,W,C) plus an IDX label file (N,).

Both are shuffled with the seed and split 80/20 into train/validation.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
TRAIN_FRACTION = 0.8


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int

    @property
    def in_channels(self):
        return self.train_x.shape[1]


def read_idx(path):
    """Parse one IDX file into a numpy array (native byte order)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(
            f"{path}: bad magic number at offset 0: expected 0x0000, got 0x{raw[0]:02x}{raw[1]:02x}")
    code, ndim = raw[2], raw[3]
    if code not in IDX_TYPES:
        raise IdxFormatError(f"{path}: unknown element type 0x{code:02x} at offset 2")
    if ndim == 0:
        raise IdxFormatError(f"{path}: zero dimensions at offset 3")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(f"{path}: truncated dimension list at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    dt = IDX_TYPES[code]
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) - end != need:
        raise IdxFormatError(
            f"{path}: payload at offset {end} has {len(raw) - end} bytes, expected {need}")
    return np.frombuffer(raw, dtype=dt, offset=end).reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, array):
    """Write an array as IDX (element type from its dtype)."""
    a = np.asarray(array)
    for code, dt in IDX_TYPES.items():
        if a.dtype.kind == dt.kind and a.dtype.itemsize == dt.itemsize:
            break
    else:
        raise ValueError(f"dtype {a.dtype} has no IDX encoding")
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.astype(dt).tobytes())


def synthetic_blobs(num_classes, per_class, seed, size=16, channels=3):
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("need at least 1 sample per class")
    rng = np.random.default_rng([seed, 0])
    centers = rng.uniform(3.0, size - 4.0, size=(num_classes, 2))
    widths = rng.uniform(1.5, 3.0, size=num_classes)
    colors = rng.uniform(0.2, 1.0, size=(num_classes, channels))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xs, ys = [], []
    for k in range(num_classes):
        jitter = rng.normal(0.0, 1.0, size=(per_class, 2))
        amp = rng.uniform(0.8, 1.2, size=per_class)
        cy = centers[k, 0] + jitter[:, 0]
        cx = centers[k, 1] + jitter[:, 1]
        blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
                      / (2.0 * widths[k] ** 2))
        img = amp[:, None, None, None] * colors[k][None, :, None, None] * blob[:, None]
        img += rng.normal(0.0, 0.05, size=img.shape)
        xs.append(img)
        ys.append(np.full(per_class, k))
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.int64)


def _split(x, y, seed, num_classes):
    order = np.random.default_rng([seed, 1]).permutation(len(y))
    x, y = x[order], y[order]
    n_train = int(round(TRAIN_FRACTION * len(y)))
    return Dataset(np.ascontiguousarray(x[:n_train]), y[:n_train],
                   np.ascontiguousarray(x[n_train:]), y[n_train:], num_classes)


def load_dataset(source):
    """Load and split a dataset described by a source string (see module docs)."""
    kind, _, rest = source.partition(":")
    if kind == "synthetic":
        try:
            k, n, seed = (int(v) for v in rest.split(":"))
        except ValueError:
            raise ValueError(f"expected synthetic:<classes>:<per_class>:<seed>, got {source!r}") from None
        x, y = synthetic_blobs(k, n, seed)
        return _split(x, y, seed, k)
    if kind == "idx":
        parts = rest.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"expected idx:<images>:<labels>[:<seed>], got {source!r}")
        seed = int(parts[2]) if len(parts) == 3 else 0
        images, labels = read_idx(parts[0]), read_idx(parts[1])
        if labels.ndim != 1 or images.shape[0] != labels.shape[0]:
            raise IdxFormatError("image and label counts differ")
        if images.ndim == 3:
            images = images[:, None]
        elif images.ndim == 4:
            images = images.transpose(0, 3, 1, 2)
        else:
            raise IdxFormatError(f"images must have 3 or 4 dimensions, got {images.ndim}")
        x = images.astype(np.float32)
        if images.dtype == np.uint8:
            x /= 255.0
        y = labels.astype(np.int64)
        k = int(y.max()) + 1
        if k < 2 or y.min() < 0:
            raise ValueError("labels must cover at least 2 non-negative classes")
        return _split(x, y, seed, k)
    raise ValueError(f"unknown dataset source {source!r}")


def batches(x, y, batch_size, seed, epoch, drop_last=True):
    """Deterministically shuffled mini-batches for one epoch."""
    order = np.random.default_rng([seed, 2, epoch]).permutation(len(y))
    stop = len(y) - len(y) % batch_size if drop_last else len(y)
    for s in range(0, stop, batch_size):
        idx = order[s:s + batch_size]
        yield x[idx], y[idx]


def steps_per_epoch(n, batch_size, drop_last=True):
    return n // batch_size if drop_last else -(-n // batch_size)
