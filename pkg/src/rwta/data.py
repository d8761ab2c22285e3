"""Image ingestion, synthetic video construction, ZCA whitening and batching."""
from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .engine import SeededRng
from .errors import ConfigError, ContractError, DataError, FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageDataset:
    images: np.ndarray  # N x C x H x W
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], self.class_count)


@dataclass
class VideoDataset:
    videos: np.ndarray  # N x T x C x h x w
    labels: np.ndarray
    class_count: int
    source_ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.videos.ndim != 5:
            raise ShapeError(f"videos must be N x T x C x h x w, got {self.videos.shape}")
        if len(self.videos) != len(self.labels):
            raise DataError(f"{len(self.videos)} videos but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if self.source_ids is None:
            self.source_ids = np.arange(len(self.labels), dtype=np.int64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def frames(self) -> int:
        return self.videos.shape[1]

    def subset(self, idx) -> "VideoDataset":
        return VideoDataset(self.videos[idx], self.labels[idx], self.class_count, self.source_ids[idx], dict(self.meta))

    def astype(self, dtype) -> "VideoDataset":
        return VideoDataset(self.videos.astype(dtype), self.labels, self.class_count, self.source_ids, dict(self.meta))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"{what} file too short for a magic number", len(buf))
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{what} file has magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{what} header truncated", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = header + math.prod(dims)
    if len(buf) < need:
        raise FormatError(f"{what} file truncated: {need} bytes expected, {len(buf)} present", len(buf))
    if len(buf) > need:
        raise FormatError(f"{what} file has {len(buf) - need} trailing bytes", need)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> ImageDataset:
    """Read an IDX image/label pair (big-endian, ubyte). Pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} does not match label count {len(labels)}", 4)
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = max(int(labels.max()) + 1, 2) if labels.size else 2
    return ImageDataset(images[:, None].astype(np.float64) / 255.0, labels, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N x H x W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# video synthesis
# ---------------------------------------------------------------------------


def _as_chw(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[None]
    if image.ndim == 3 and image.shape[0] in (1, 3):
        return image
    raise ShapeError(f"image must be H x W or C x H x W with 1 or 3 channels, got {image.shape}")


def rotate_image(image, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre; bilinear, zero fill."""
    img = _as_chw(image)
    _, h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = cols - cx, cy - rows
    th = math.radians(degrees)
    cos, sin = math.cos(th), math.sin(th)
    src_c = cos * x + sin * y + cx
    src_r = cy - (-sin * x + cos * y)
    for a in (src_c, src_r):
        near = np.round(a)
        snap = np.abs(a - near) < 1e-9
        a[snap] = near[snap]
    r0, c0 = np.floor(src_r).astype(int), np.floor(src_c).astype(int)
    fr, fc = src_r - r0, src_c - c0
    padded = np.pad(img, ((0, 0), (1, 2), (1, 2)))

    def tap(r, c):
        inside = (r >= -1) & (r <= h) & (c >= -1) & (c <= w)
        return np.where(inside, padded[:, np.clip(r, -1, h) + 1, np.clip(c, -1, w) + 1], 0.0)

    out = (
        (1 - fr) * (1 - fc) * tap(r0, c0)
        + (1 - fr) * fc * tap(r0, c0 + 1)
        + fr * (1 - fc) * tap(r0 + 1, c0)
        + fr * fc * tap(r0 + 1, c0 + 1)
    )
    return out


def rotate_video(image, frames: int = 5, step_degrees: float = 18.0) -> np.ndarray:
    """Frame k is the image rotated counter-clockwise by k * step_degrees. Returns T x C x H x W."""
    if frames < 2:
        raise ContractError(f"a rotation video needs at least 2 frames, got {frames}")
    return np.stack([rotate_image(image, k * step_degrees) for k in range(frames)])


def scan_video(image, window: int = 16, stride: int = 8) -> np.ndarray:
    """Slide a window over the image, vertical first, from the upper-left corner."""
    img = _as_chw(image)
    _, h, w = img.shape
    if window > min(h, w) or (h - window) % stride or (w - window) % stride:
        raise ConfigError(f"window {window} with stride {stride} does not tile a {h}x{w} image")
    rows = range(0, h - window + 1, stride)
    cols = range(0, w - window + 1, stride)
    return np.stack([img[:, r : r + window, c : c + window] for c in cols for r in rows])


def pad_to(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad N x C x H x W images symmetrically up to size x size."""
    h, w = images.shape[2:]
    if h > size or w > size:
        raise ShapeError(f"cannot pad {h}x{w} down to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(images, ((0, 0), (0, 0), (top, size - h - top), (left, size - w - left)))


def synthesize_rotations(ds: ImageDataset, frames: int = 5, step_degrees: float = 18.0) -> VideoDataset:
    videos = np.stack([rotate_video(img, frames, step_degrees) for img in ds.images])
    meta = {"mode": "rotate", "frames": frames, "step": step_degrees}
    return VideoDataset(videos, ds.labels.copy(), ds.class_count, np.arange(len(ds)), meta)


def synthesize_scans(ds: ImageDataset, window: int = 16, stride: int = 8, size: int | None = None) -> VideoDataset:
    images = ds.images if size is None else pad_to(ds.images, size)
    videos = np.stack([scan_video(img, window, stride) for img in images])
    meta = {"mode": "scan", "window": window, "stride": stride, "size": int(images.shape[-1])}
    return VideoDataset(videos, ds.labels.copy(), ds.class_count, np.arange(len(ds)), meta)


# ---------------------------------------------------------------------------
# ZCA
# ---------------------------------------------------------------------------


@dataclass
class ZcaTransform:
    mean: np.ndarray
    whiten: np.ndarray
    epsilon: float

    @property
    def dim(self) -> int:
        return self.mean.size


def zca_fit(data, epsilon: float | None = None) -> ZcaTransform:
    """Fit on N x D samples.

    ``whiten = E diag((lam + epsilon)^-1/2) E^T`` with the eigenpairs of the
    1/N sample covariance. ``epsilon=None`` uses 1% of the mean eigenvalue.
    """
    x = np.asarray(data, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if not np.all(np.isfinite(x)):
        raise DataError("zca_fit: input contains non-finite values")
    n, d = x.shape
    if epsilon is not None and epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    if n <= d and not epsilon:
        raise ContractError(f"zca_fit with {n} samples in {d} dims needs epsilon > 0")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    lam, vec = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    if epsilon is None:
        epsilon = 0.01 * float(lam.mean())
    whiten = (vec / np.sqrt(lam + epsilon)) @ vec.T
    whiten = (whiten + whiten.T) / 2
    return ZcaTransform(mean, whiten, float(epsilon))


def zca_apply(t: ZcaTransform, frames) -> np.ndarray:
    """Whiten frames whose trailing dims flatten to the fitted dimension."""
    x = np.asarray(frames)
    lead = x.shape
    dims = 1
    cut = len(lead)
    while cut > 0 and dims < t.dim:
        cut -= 1
        dims *= lead[cut]
    if dims != t.dim:
        raise ShapeError(f"frames {x.shape} do not flatten to the fitted dimension {t.dim}")
    flat = x.reshape(-1, t.dim).astype(np.float64)
    out = (flat - t.mean) @ t.whiten
    return out.reshape(lead).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def zca_video_dataset(train: VideoDataset, *others: VideoDataset, epsilon: float | None = None):
    """Fit ZCA on every frame of ``train`` and apply it to ``train`` and ``others``."""
    frames = train.videos.reshape(-1, int(np.prod(train.videos.shape[2:])))
    t = zca_fit(frames, epsilon)
    out = []
    for ds in (train, *others):
        meta = dict(ds.meta, zca_epsilon=t.epsilon)
        out.append(VideoDataset(zca_apply(t, ds.videos), ds.labels, ds.class_count, ds.source_ids, meta))
    return t, out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class Batch(NamedTuple):
    indices: np.ndarray
    videos: np.ndarray  # n x T x C x h x w
    labels: np.ndarray

    def time_major(self) -> np.ndarray:
        return np.ascontiguousarray(self.videos.transpose(1, 0, 2, 3, 4))


def batch_order(n: int, shuffle: bool, rng: SeededRng | None) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    if rng is None:
        raise ContractError("shuffling needs an rng")
    return rng.permutation(n)


def batch_iter(ds: VideoDataset, batch_size: int, shuffle: bool = False, rng: SeededRng | None = None) -> Iterator[Batch]:
    """Partition the dataset into batches; the last one may be short."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = batch_order(len(ds), shuffle, rng)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(idx, ds.videos[idx], ds.labels[idx])


# ---------------------------------------------------------------------------
# container file
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"RWTADSET"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<8sIIQIIIIIIQQ")
assert _DS_HEADER.size == 64


def save_dataset(ds: VideoDataset, path) -> None:
    """Write the dataset container.

    Layout (little-endian): 64-byte header
    ``magic[8] version:u32 precision:u32 count:u64 T:u32 C:u32 H:u32 W:u32
    class_count:u32 reserved:u32 label_offset:u64 meta_offset:u64``,
    then the videos as raw floats, the labels as int32, the source ids as
    int64 and finally UTF-8 JSON metadata up to end of file.
    """
    videos = np.ascontiguousarray(ds.videos)
    if videos.dtype == np.float32:
        precision = 32
    else:
        videos = videos.astype("<f8", copy=False)
        precision = 64
    n, t, c, h, w = videos.shape
    label_offset = _DS_HEADER.size + videos.nbytes
    meta_offset = label_offset + 4 * n + 8 * n
    header = _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, precision, n, t, c, h, w, ds.class_count, 0, label_offset, meta_offset)
    meta = json.dumps(ds.meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(videos.astype(videos.dtype.newbyteorder("<"), copy=False).tobytes())
        f.write(ds.labels.astype("<i4").tobytes())
        f.write(ds.source_ids.astype("<i8").tobytes())
        f.write(meta)


def load_dataset(path) -> VideoDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _DS_HEADER.size:
        raise FormatError("dataset header truncated", len(buf))
    magic, version, precision, n, t, c, h, w, classes, _, label_offset, meta_offset = _DS_HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 8)
    if precision not in (32, 64):
        raise FormatError(f"bad precision field {precision}", 12)
    dtype = np.dtype("<f4" if precision == 32 else "<f8")
    count = n * t * c * h * w
    if label_offset != _DS_HEADER.size + count * dtype.itemsize or meta_offset != label_offset + 12 * n:
        raise FormatError("inconsistent section offsets", 48)
    if len(buf) < meta_offset:
        raise FormatError(f"dataset truncated: {meta_offset} bytes expected, {len(buf)} present", len(buf))
    videos = np.frombuffer(buf, dtype=dtype, count=count, offset=_DS_HEADER.size).reshape(n, t, c, h, w)
    labels = np.frombuffer(buf, dtype="<i4", count=n, offset=label_offset).astype(np.int64)
    sources = np.frombuffer(buf, dtype="<i8", count=n, offset=label_offset + 4 * n).astype(np.int64)
    try:
        meta = json.loads(buf[meta_offset:].decode()) if len(buf) > meta_offset else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", meta_offset) from None
    return VideoDataset(videos.astype(dtype.newbyteorder("=")), labels, classes, sources, meta)
