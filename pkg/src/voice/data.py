"""Image containers and dataset ingestion.

Three dataset sources are supported:
  * a directory of class subfolders holding PNG/JPEG files,
  * the CIFAR-10 binary batch layout (``*.bin`` records of 1 label byte
    followed by 3072 channel-major pixel bytes),
  * a procedurally generated 10-class texture/shape dataset used as the
    desk-scale stand-in when no real corpus is available.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_NORM_MEAN = (0.5, 0.5, 0.5)
DEFAULT_NORM_STD = (0.25, 0.25, 0.25)

SYNTHETIC_CLASSES = [
    "stripes_h",
    "stripes_v",
    "stripes_diag",
    "checker",
    "disk",
    "ring",
    "square",
    "cross",
    "dots",
    "radial",
]

CIFAR10_CLASSES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]


@dataclass
class ImageTensor:
    """A single image in [0, 1] with its normalization constants.

    ``pixels`` is (height, width, channels) float32. ``norm_mean`` and
    ``norm_std`` are applied per channel just before inference; the pixel
    payload itself always stays un-normalized.
    """

    pixels: np.ndarray
    norm_mean: tuple[float, ...] = DEFAULT_NORM_MEAN
    norm_std: tuple[float, ...] = DEFAULT_NORM_STD
    source_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be (H, W, C), got shape {self.pixels.shape}")
        h, w, c = self.pixels.shape
        if h < 8 or w < 8:
            raise ValueError(f"image must be at least 8x8, got {h}x{w}")
        if not np.isfinite(self.pixels).all():
            raise ValueError(f"non-finite pixel values in image {self.source_id!r}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError(
                f"pixels must lie in [0, 1], got range "
                f"[{self.pixels.min():.4g}, {self.pixels.max():.4g}]"
            )
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)
        if len(self.norm_mean) != c or len(self.norm_std) != c:
            raise ValueError("norm_mean/norm_std length must match channel count")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, pixels: np.ndarray, source_id: str | None = None) -> "ImageTensor":
        """Copy of this image with new pixel data and the same normalization."""
        return ImageTensor(
            pixels=pixels,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            source_id=self.source_id if source_id is None else source_id,
        )


@dataclass
class ImageDataset:
    """An in-memory labeled image collection."""

    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    source_ids: list[str]
    class_names: list[str]
    norm_mean: tuple[float, ...] = DEFAULT_NORM_MEAN
    norm_std: tuple[float, ...] = DEFAULT_NORM_STD
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.images) != len(self.source_ids):
            raise ValueError("images, labels and source_ids must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def image(self, i: int) -> ImageTensor:
        return ImageTensor(
            pixels=self.images[i],
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            source_id=self.source_ids[i],
        )

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            source_ids=[self.source_ids[i] for i in indices],
            class_names=self.class_names,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
        )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _pattern_mask(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """Render one (size, size) foreground mask in [0, 1] for a class.

    Pattern scales span a wide range within every class so corruption
    severity degrades the corpus gradually: each extra blur or noise
    level erases a fresh slice of images instead of the whole class at
    once.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = rng.uniform(size * 0.3, size * 0.7)
    cy = rng.uniform(size * 0.3, size * 0.7)

    if kind == "stripes_h":
        period = rng.integers(3, 17)
        phase = rng.integers(0, period)
        return (((yy + phase) // max(1, period // 2)) % 2).astype(np.float64)
    if kind == "stripes_v":
        period = rng.integers(3, 17)
        phase = rng.integers(0, period)
        return (((xx + phase) // max(1, period // 2)) % 2).astype(np.float64)
    if kind == "stripes_diag":
        period = rng.integers(4, 17)
        phase = rng.integers(0, period)
        return (((xx + yy + phase) // max(1, period // 2)) % 2).astype(np.float64)
    if kind == "checker":
        cell = rng.integers(2, 9)
        px, py = rng.integers(0, cell, size=2)
        return ((((xx + px) // cell) + ((yy + py) // cell)) % 2).astype(np.float64)
    if kind == "disk":
        r = rng.uniform(3.0, size * 0.42)
        return ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.float64)
    if kind == "ring":
        r_out = rng.uniform(5.0, size * 0.45)
        r_in = r_out - rng.uniform(1.5, 4.5)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return ((d2 <= r_out * r_out) & (d2 >= r_in * r_in)).astype(np.float64)
    if kind == "square":
        half = rng.uniform(3.0, size * 0.4)
        return ((np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)).astype(np.float64)
    if kind == "cross":
        arm = rng.uniform(1.0, 3.5)
        span = rng.uniform(size * 0.2, size * 0.45)
        horiz = (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= span)
        vert = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= span)
        return (horiz | vert).astype(np.float64)
    if kind == "dots":
        period = rng.integers(4, 13)
        r = rng.uniform(1.2, max(1.3, period / 3.5))
        px, py = rng.integers(0, period, size=2)
        dx = ((xx + px) % period) - period / 2.0
        dy = ((yy + py) % period) - period / 2.0
        return (dx * dx + dy * dy <= r * r).astype(np.float64)
    if kind == "radial":
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        reach = rng.uniform(size * 0.3, size * 0.9)
        return np.clip(1.0 - d / reach, 0.0, 1.0)
    raise ValueError(f"unknown synthetic class {kind!r}")


def make_synthetic_dataset(
    n: int,
    seed: int,
    size: int = 32,
    noise_range: tuple[float, float] = (0.04, 0.16),
    contrast_range: tuple[float, float] = (0.12, 0.9),
    id_prefix: str = "syn",
) -> ImageDataset:
    """Generate an n-image, 10-class, 32x32 RGB texture/shape dataset.

    Class identity is carried by the pattern only; colors are random, so
    low-contrast noisy draws are genuinely ambiguous. Deterministic for a
    fixed (n, seed, size).
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(SYNTHETIC_CLASSES)).astype(np.int64)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    ids = []
    for i in range(n):
        cls = SYNTHETIC_CLASSES[labels[i]]
        mask = _pattern_mask(cls, rng, size)
        bg = rng.uniform(0.15, 0.85, size=3)
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-9)
        contrast = rng.uniform(*contrast_range)
        fg = np.clip(bg + contrast * direction, 0.0, 1.0)
        img = bg[None, None, :] + mask[:, :, None] * (fg - bg)[None, None, :]
        img = img + rng.uniform(-0.12, 0.12)  # global brightness jitter
        sigma = rng.uniform(*noise_range)
        img = img + rng.normal(0.0, sigma, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        ids.append(f"{id_prefix}-{seed}-{i:05d}")
    return ImageDataset(
        images=images,
        labels=labels,
        source_ids=ids,
        class_names=list(SYNTHETIC_CLASSES),
    )


# ---------------------------------------------------------------------------
# filesystem loaders
# ---------------------------------------------------------------------------

def load_image_folder(
    root: str | Path,
    size: int | None = 32,
    norm_mean: tuple[float, ...] = DEFAULT_NORM_MEAN,
    norm_std: tuple[float, ...] = DEFAULT_NORM_STD,
) -> ImageDataset:
    """Load a directory-of-class-folders dataset of PNG/JPEG files.

    Unreadable files are skipped and recorded in ``dataset.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subdirectories under {root}")
    class_names = [d.name for d in class_dirs]
    images, labels, ids, skipped = [], [], [], []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in {".png", ".jpg", ".jpeg"}:
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if size is not None and im.size != (size, size):
                        im = im.resize((size, size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception:
                skipped.append(str(f))
                continue
            images.append(arr)
            labels.append(label)
            ids.append(f"{d.name}/{f.name}")
    if not images:
        raise ValueError(f"no readable images under {root}")
    return ImageDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        source_ids=ids,
        class_names=class_names,
        norm_mean=norm_mean,
        norm_std=norm_std,
        skipped=skipped,
    )


def load_cifar10_binary(
    root: str | Path,
    split: str = "test",
    norm_mean: tuple[float, ...] = DEFAULT_NORM_MEAN,
    norm_std: tuple[float, ...] = DEFAULT_NORM_STD,
) -> ImageDataset:
    """Read CIFAR-10 binary batches (data_batch_*.bin / test_batch.bin).

    Each record is 1 label byte followed by 3072 bytes laid out as three
    1024-byte channel planes of a row-major 32x32 image.
    """
    root = Path(root)
    if split == "train":
        files = sorted(root.glob("data_batch_*.bin"))
    elif split == "test":
        files = sorted(root.glob("test_batch*.bin"))
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches (*.bin) under {root}")
    record = 1 + 3 * 32 * 32
    images, labels, ids = [], [], []
    for f in files:
        raw = np.frombuffer(f.read_bytes(), dtype=np.uint8)
        if raw.size % record != 0:
            raise ValueError(f"{f} is not a whole number of {record}-byte records")
        rows = raw.reshape(-1, record)
        labels.append(rows[:, 0].astype(np.int64))
        planes = rows[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0)
        ids.extend(f"{f.stem}/{i}" for i in range(rows.shape[0]))
    return ImageDataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        source_ids=ids,
        class_names=list(CIFAR10_CLASSES),
        norm_mean=norm_mean,
        norm_std=norm_std,
    )


def load_dataset(spec: str, split: str = "test") -> ImageDataset:
    """Resolve a dataset spec string.

    ``synthetic[:n[:seed]]`` generates the bundled synthetic set (the split
    name is folded into the seed so train/test never overlap); any other
    value is a path, read as CIFAR-10 binary batches when ``*.bin`` files
    are present and as a class-folder tree otherwise.
    """
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        n = int(parts[1]) if len(parts) > 1 and parts[1] else 2000
        seed = int(parts[2]) if len(parts) > 2 and parts[2] else 0
        split_offset = {"train": 1, "test": 2}.get(split, 3)
        return make_synthetic_dataset(n=n, seed=seed * 10 + split_offset, id_prefix=f"syn-{split}")
    root = Path(spec)
    if not root.exists():
        raise FileNotFoundError(f"dataset path not found: {root}")
    if root.is_dir() and list(root.glob("*.bin")):
        return load_cifar10_binary(root, split=split)
    return load_image_folder(root)
