"""Datasets: the small-image binary container and synthetic generators.

Binary layout (all little-endian)::

    offset  size  field
    0       4     magic b"DCSS"
    4       1     u8 version (1)
    5       1     u8 C
    6       2     u16 H
    8       2     u16 W
    10      4     u32 N
    14      2     u16 num_classes
    16      ...   N records of 1 + C*H*W bytes: label byte, then pixels
                  channel-planar, row-major
"""

import struct

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"DCSS"
VERSION = 1
HEADER = struct.Struct("<4sBBHHIH")
assert HEADER.size == 16


class FormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class Dataset:
    """Images in ``[0, 1]`` (float64) plus labels or regression targets.

    ``raw`` keeps the original bytes when the data came from (or can be
    written to) the binary container. Normalization is applied at most once.
    """

    def __init__(self, images, labels=None, targets=None, num_classes=0, raw=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.targets = None if targets is None else np.asarray(targets, dtype=np.float64)
        self.num_classes = int(num_classes)
        self.raw = raw
        self.mean = None
        self.std = None
        self.dtype = np.float32
        if self.labels is not None and self.labels.size and self.labels.max() >= max(self.num_classes, 1):
            raise FormatError(f"label {self.labels.max()} >= num_classes {self.num_classes}")

    def __len__(self):
        return self.images.shape[0]

    @property
    def task(self):
        return "classify" if self.labels is not None else "regress"

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def normalized(self):
        return self.mean is not None

    def channel_stats(self, idx=None):
        imgs = self.images if idx is None else self.images[np.asarray(idx)]
        mean = imgs.mean(axis=(0, 2, 3))
        std = imgs.std(axis=(0, 2, 3))
        return mean, np.where(std > 0, std, 1.0)

    def normalize(self, mean, std):
        if self.normalized:
            raise RuntimeError("dataset is already normalized")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.images = (self.images - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return self

    def batch(self, idx):
        x = self.images[idx].astype(self.dtype)
        y = self.labels[idx] if self.labels is not None else self.targets[idx].astype(self.dtype)
        return x, y

    def subset(self, idx):
        idx = np.asarray(idx)
        ds = Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                     None if self.targets is None else self.targets[idx], self.num_classes)
        ds.mean, ds.std, ds.dtype = self.mean, self.std, self.dtype
        return ds


def to_bytes(ds):
    """Serialize a classification dataset; pixels are quantized to u8 if needed."""
    if ds.labels is None:
        raise FormatError("only labelled datasets fit the binary container")
    if ds.normalized:
        raise FormatError("write the dataset before normalizing it")
    n = len(ds)
    if n == 0:
        raise EmptyDatasetError("cannot write an empty dataset")
    c, h, w = ds.shape
    if ds.raw is not None:
        pix = ds.raw
    else:
        pix = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    recs = np.empty((n, 1 + c * h * w), dtype=np.uint8)
    recs[:, 0] = ds.labels.astype(np.uint8)
    recs[:, 1:] = pix.reshape(n, -1)
    return HEADER.pack(MAGIC, VERSION, c, h, w, n, ds.num_classes) + recs.tobytes()


def write_binary_dataset(path, ds):
    data = to_bytes(ds)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def from_bytes(buf, normalize=False):
    if len(buf) < HEADER.size:
        raise FormatError(f"file too short for header: {len(buf)} bytes at offset 0, need {HEADER.size}")
    magic, version, c, h, w, n, k = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    rec = 1 + c * h * w
    expected = HEADER.size + n * rec
    if len(buf) != expected:
        full = (len(buf) - HEADER.size) // rec if rec else 0
        raise FormatError(
            f"expected {expected} bytes for {n} records of {rec} bytes, got {len(buf)}; "
            f"record {full} is truncated at offset {HEADER.size + full * rec}"
            if len(buf) < expected else
            f"expected {expected} bytes for {n} records of {rec} bytes, got {len(buf)} (trailing data)"
        )
    if n == 0:
        raise EmptyDatasetError("dataset holds no records")
    recs = np.frombuffer(buf, dtype=np.uint8, offset=HEADER.size).reshape(n, rec)
    labels = recs[:, 0].astype(np.int64)
    raw = recs[:, 1:].reshape(n, c, h, w).copy()
    ds = Dataset(raw.astype(np.float64) / 255.0, labels=labels, num_classes=k, raw=raw)
    if normalize:
        ds.normalize(*ds.channel_stats())
    return ds


def load_binary_dataset(path, normalize=False):
    """Read the binary container; pixels scaled to [0, 1], optionally normalized
    per channel with statistics of this file."""
    with open(path, "rb") as f:
        return from_bytes(f.read(), normalize=normalize)


def make_synthetic(task="classify", n_classes=10, n_samples=1000, image_size=16, channels=3,
                   noise=0.1, seed=0, blobs=3):
    """Class-conditional Gaussian-blob images (classify) or blob images with
    blurred targets (regress). Each class owns a fixed prototype; samples are
    the prototype plus white noise, so noise 0 gives identical (separable)
    class members.
    """
    if n_samples < 1:
        raise EmptyDatasetError("n_samples must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0x5EED,)))
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    def blob_image(r):
        img = np.zeros((channels, image_size, image_size))
        for c in range(channels):
            for _ in range(blobs):
                cy, cx = r.uniform(0, image_size - 1, size=2)
                s = r.uniform(0.08, 0.25) * image_size
                amp = r.uniform(0.3, 1.0)
                img[c] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        return img / max(img.max(), 1e-12)

    if task == "classify":
        protos = np.stack([blob_image(rng) for _ in range(n_classes)])
        labels = np.arange(n_samples) % n_classes
        labels = rng.permutation(labels)
        imgs = protos[labels] + noise * rng.normal(size=(n_samples, channels, image_size, image_size))
        imgs = np.clip(imgs, 0.0, 1.0)
        return Dataset(imgs, labels=labels, num_classes=n_classes)
    if task == "regress":
        imgs = np.stack([blob_image(rng) for _ in range(n_samples)])
        targets = np.stack([[gaussian_filter(ch, 1.5) for ch in im] for im in imgs])
        imgs = np.clip(imgs + noise * rng.normal(size=imgs.shape), 0.0, 1.0)
        return Dataset(imgs, targets=targets)
    raise ValueError(f"unknown synthetic task {task!r}")
