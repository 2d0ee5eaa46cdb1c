"""Image loading, preprocessing and a synthetic dataset generator."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}


@dataclass
class ImageSample:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    label: int
    source: str = ""


@dataclass(frozen=True)
class DatasetStats:
    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have the same channel count")


# per-channel statistics reported for the public medical datasets and CIFAR-10
MELANOMA = DatasetStats((0.7160, 0.5668, 0.5441), (0.2207, 0.2087, 0.2222))
COVID_XRAY = DatasetStats((0.4949, 0.4950, 0.4953), (0.2687, 0.2687, 0.2688))
BRAIN_MRI = DatasetStats((0.1869, 0.1869, 0.1870), (0.1763, 0.1763, 0.1763))
CIFAR10 = DatasetStats((0.4914, 0.4822, 0.4467), (0.2471, 0.2434, 0.2615))

KNOWN_STATS = {"melanoma": MELANOMA, "covid_xray": COVID_XRAY, "brain_mri": BRAIN_MRI, "cifar10": CIFAR10}


@dataclass
class LoadedImages:
    samples: list
    class_names: list
    skipped: list = field(default_factory=list)

    @property
    def warning_count(self) -> int:
        return len(self.skipped)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def read_image(path) -> np.ndarray:
    """Decode an 8-bit grey or RGB image to a (3, H, W) float array in [0, 1].

    Grey images are replicated to three channels.
    """
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            arr = np.repeat(arr[None], 3, axis=0)
        elif im.mode in ("RGB", "RGBA", "P", "LA"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
        else:
            raise ValueError(f"unsupported image mode {im.mode!r} in {path}")
    return arr / 255.0


def write_png(path, img: np.ndarray) -> None:
    """Write a (3, H, W) or (H, W) image in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_image_dir(root, size: int | None = 32) -> LoadedImages:
    """Load ``root/<class>/<image>`` files; labels follow sorted class names.

    Unreadable files are skipped and reported in ``skipped``.  Images are
    resized to ``size`` x ``size`` unless ``size`` is None.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise ValueError(f"{root} has no class subdirectories")
    samples, skipped = [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                img = read_image(path)
            except Exception as exc:  # noqa: BLE001 - any decode failure means skip
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped.append(str(path))
                continue
            if size is not None:
                img = resize_bilinear(img, (size, size))
            samples.append(ImageSample(img, label, str(path)))
    if not samples:
        raise ValueError(f"no readable images under {root}")
    return LoadedImages(samples, classes, skipped)


def resize_bilinear(img: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image using half-pixel centres.

    Source coordinates are ``(i + 0.5) * in / out - 0.5`` clamped to the
    image, so a same-size resize is the identity.
    """
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    oh, ow = int(size[0]), int(size[1])
    if (oh, ow) == (h, w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)


def _channel_arrays(stats: DatasetStats, channels: int):
    mean = np.asarray(stats.mean).reshape(-1, 1, 1)
    std = np.asarray(stats.std).reshape(-1, 1, 1)
    if mean.shape[0] != channels:
        raise ValueError(f"stats have {mean.shape[0]} channels, image has {channels}")
    return mean, std


def normalize(img: np.ndarray, stats: DatasetStats) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` for (C, H, W) or (N, C, H, W) input."""
    img = np.asarray(img, dtype=np.float64)
    mean, std = _channel_arrays(stats, img.shape[-3])
    if np.any(std <= 0):
        raise ValueError("normalize needs a strictly positive std in every channel")
    return (img - mean) / std


def denormalize(img: np.ndarray, stats: DatasetStats) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    mean, std = _channel_arrays(stats, img.shape[-3])
    if np.any(std <= 0):
        raise ValueError("denormalize needs a strictly positive std in every channel")
    return img * std + mean


def to_image_space(img: np.ndarray, stats: DatasetStats) -> np.ndarray:
    """Denormalize and clamp to [0, 1]; what metrics and PNGs see."""
    return np.clip(denormalize(img, stats), 0.0, 1.0)


def compute_stats(samples) -> DatasetStats:
    """Per-channel mean and population std over every pixel of every sample."""
    arrays = [s.pixels if isinstance(s, ImageSample) else np.asarray(s) for s in samples]
    if not arrays:
        raise ValueError("compute_stats needs at least one sample")
    c = arrays[0].shape[0]
    flat = np.concatenate([a.reshape(c, -1) for a in arrays], axis=1)
    mean = flat.mean(axis=1)
    std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
    return DatasetStats(tuple(mean), tuple(std))


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """(N, C, H, W) pixel array and (N,) label array."""
    x = np.stack([s.pixels for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------- synthetic


def synth_dataset(seed: int, n: int, num_classes: int, kind: str = "blobs",
                  size: int = 32, noise: float = 0.02) -> list[ImageSample]:
    """Deterministic class-structured RGB images.

    ``blobs``: class k places Gaussian blobs around a class-specific angle.
    ``stripes``: class k draws sinusoidal stripes at angle pi*k/K.
    Labels cycle through the classes, so every class gets n//K or n//K + 1
    images.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if n < num_classes:
        raise ValueError("need n >= num_classes")
    if kind not in ("blobs", "stripes"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    out = []
    for i in range(n):
        label = i % num_classes
        rng = np.random.default_rng([seed, i])
        base = rng.uniform(0.2, 0.8, size=3)
        tilt = rng.normal(0.0, 0.15, size=(3, 2))
        img = base[:, None, None] + tilt[:, :1, None] * (xx - 0.5) + tilt[:, 1:, None] * (yy - 0.5)
        if kind == "blobs":
            angle = 2 * np.pi * label / num_classes + rng.normal(0, 0.15)
            for j in range(rng.integers(1, 3) + 1):
                r = 0.22 + 0.06 * j
                cx = 0.5 + r * np.cos(angle + 0.6 * j)
                cy = 0.5 + r * np.sin(angle + 0.6 * j)
                sigma = rng.uniform(0.07, 0.14)
                amp = rng.uniform(-0.45, 0.45, size=3)
                blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
                img = img + amp[:, None, None] * blob
        else:
            theta = np.pi * label / num_classes + rng.normal(0, 0.05)
            freq = rng.uniform(2.0, 4.0)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            amp = rng.uniform(0.1, 0.3, size=3) * rng.choice([-1, 1], size=3)
            img = img + amp[:, None, None] * wave
        img = img + rng.normal(0.0, noise, size=img.shape)
        out.append(ImageSample(np.clip(img, 0.0, 1.0), label, f"synth:{kind}:{seed}:{i}"))
    return out


def iter_image_files(root) -> list[str]:
    return sorted(
        os.path.join(d, f)
        for d, _, files in os.walk(root)
        for f in files
        if Path(f).suffix.lower() in IMAGE_SUFFIXES
    )
