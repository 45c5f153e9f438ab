"""Datasets, episodic sampling, augmentation and synthetic crack imagery."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_EXTENSIONS = (".png",)


class DatasetError(ValueError):
    """Raised for malformed dataset directories or unusable datasets."""


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3, float64 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"{self.id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class Dataset:
    samples: list[ImageSample]
    split_tag: str = "base"

    def __post_init__(self):
        if not self.samples:
            raise DatasetError("dataset is empty")
        if self.split_tag not in ("base", "novel"):
            raise DatasetError(f"split_tag must be 'base' or 'novel', got {self.split_tag!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids are not unique")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


@dataclass
class Episode:
    support: list[ImageSample]
    query: ImageSample

    def __post_init__(self):
        if not self.support:
            raise ValueError("an episode needs at least one support sample")
        if self.query.id in {s.id for s in self.support}:
            raise ValueError(f"query {self.query.id!r} is also a support sample")

    @property
    def shot_count(self) -> int:
        return len(self.support)


@dataclass
class CrackStyle:
    crack_width_px: float = 6.0
    contrast: float = 0.6
    texture_scale: float = 8.0


# --------------------------------------------------------------------------- io


def _check_size(size: Sequence[int]) -> tuple[int, int]:
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise DatasetError(f"target size must be positive multiples of 8, got {(h, w)}")
    return h, w


def read_image(path, size: Optional[Sequence[int]] = None) -> np.ndarray:
    """Read an RGB image as float64 in [0, 1], bilinearly resized to ``size`` (H, W)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def read_mask(path, size: Optional[Sequence[int]] = None) -> np.ndarray:
    """Read a mask as {0, 1} uint8; nearest-neighbour resize, then threshold at 0.5."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.NEAREST)
        values = np.asarray(im, dtype=np.float64) / 255.0
    return (values >= 0.5).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    Image.fromarray(data).save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def load_dataset(root_path, target_size: Sequence[int], split_tag: str = "base") -> Dataset:
    """Load ``<root>/images/*.png`` paired by stem with ``<root>/masks/*.png``."""
    size = _check_size(target_size)
    root = Path(root_path)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root} must contain images/ and masks/ subdirectories")
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not images:
        raise DatasetError(f"no images found in {image_dir}")
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS}

    samples = []
    for path in sorted(images, key=lambda p: p.stem):
        if path.stem not in masks:
            raise DatasetError(f"missing mask for image {path.stem!r}")
        samples.append(
            ImageSample(path.stem, read_image(path, size), read_mask(masks[path.stem], size))
        )
    return Dataset(samples, split_tag)


def save_dataset(dataset: Dataset, root_path) -> None:
    root = Path(root_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask)


# --------------------------------------------------------------------- sampling


def sample_episode(dataset: Dataset, K: int, seed: int) -> Episode:
    """Draw K supports and one query uniformly without replacement."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if len(dataset) < K + 1:
        raise DatasetError(f"dataset has {len(dataset)} samples, need at least {K + 1}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=K + 1, replace=False)
    return Episode([dataset[int(i)] for i in idx[:K]], dataset[int(idx[K])])


def hflip(sample: ImageSample) -> ImageSample:
    return ImageSample(
        sample.id,
        np.ascontiguousarray(sample.image[:, ::-1]),
        np.ascontiguousarray(sample.mask[:, ::-1]),
    )


def augment_hflip(sample: ImageSample, seed, force: Optional[bool] = None) -> ImageSample:
    """Flip image and mask together with probability 0.5 (or always/never via ``force``)."""
    flip = force if force is not None else np.random.default_rng(seed).random() < 0.5
    return hflip(sample) if flip else sample


# --------------------------------------------------------------------- synthesis


def synthesize_lowlight(image: np.ndarray, gamma: float, gain: float, noise_sigma: float,
                        seed) -> np.ndarray:
    """Darken an image: clamp(gain * image**gamma + N(0, noise_sigma), 0, 1)."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if not 0 < gain <= 1:
        raise ValueError(f"gain must be in (0, 1], got {gain}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    out = gain * np.power(np.asarray(image, dtype=np.float64), gamma)
    if noise_sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def lowlight_dataset(dataset: Dataset, gamma: float, gain: float, noise_sigma: float,
                     seed: int) -> Dataset:
    samples = [
        ImageSample(s.id, synthesize_lowlight(s.image, gamma, gain, noise_sigma, (seed, i)), s.mask)
        for i, s in enumerate(dataset.samples)
    ]
    return Dataset(samples, "novel")


def _value_noise(rng: np.random.Generator, H: int, W: int, scale: float) -> np.ndarray:
    """Smooth noise in [0, 1] from cubic-interpolated random lattices at three octaves."""
    total = np.zeros((H, W))
    amplitude, weight = 1.0, 0.0
    for octave in range(3):
        cell = max(scale / 2 ** octave, 1.0)
        gh, gw = int(np.ceil(H / cell)) + 4, int(np.ceil(W / cell)) + 4
        lattice = rng.random((gh, gw))
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        layer = ndimage.map_coordinates(lattice, [yy / cell + 1.5, xx / cell + 1.5],
                                        order=3, mode="nearest")
        total += amplitude * layer
        weight += amplitude
        amplitude *= 0.5
    total /= weight
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.full((H, W), 0.5)


def _random_walk(rng: np.random.Generator, H: int, W: int, step: float) -> np.ndarray:
    """Polyline that starts on one edge and wanders across the image."""
    if rng.random() < 0.5:
        start = np.array([rng.uniform(0.2, 0.8) * H, 0.0])
        heading = rng.normal(0.0, 0.4)
    else:
        start = np.array([0.0, rng.uniform(0.2, 0.8) * W])
        heading = np.pi / 2 + rng.normal(0.0, 0.4)
    points = [start]
    p = start.copy()
    for _ in range(int(4 * (H + W) / step)):
        heading += rng.normal(0.0, 0.35)
        # cos drives x (columns), sin drives y (rows)
        p = p + step * np.array([np.sin(heading), np.cos(heading)])
        points.append(p.copy())
        if not (-step <= p[0] <= H + step and -step <= p[1] <= W + step):
            break
    return np.array(points)


def _segment_distance(yy, xx, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((yy - a[0]) * d[0] + (xx - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(yy - (a[0] + t * d[0]), xx - (a[1] + t * d[1]))


def generate_synthetic_crack(H: int, W: int, seed, style: Optional[CrackStyle] = None,
                             sample_id: Optional[str] = None) -> ImageSample:
    """Textured background with a dark random-walk crack; the mask marks the crack pixels.

    Background pixels lie in [0.5, 0.9] and crack pixels strictly below 0.5, so
    crack pixels are always darker on average than the background.
    """
    style = style or CrackStyle()
    H, W = _check_size((H, W))
    if not 0 < style.crack_width_px < min(H, W) / 2:
        raise ValueError(
            f"crack_width_px must be in (0, {min(H, W) / 2}), got {style.crack_width_px}"
        )
    if not 0 < style.contrast <= 1:
        raise ValueError(f"contrast must be in (0, 1], got {style.contrast}")
    if style.texture_scale <= 0:
        raise ValueError(f"texture_scale must be > 0, got {style.texture_scale}")

    rng = np.random.default_rng(seed)
    background = 0.5 + 0.4 * _value_noise(rng, H, W, style.texture_scale)
    grain = _value_noise(rng, H, W, max(style.texture_scale / 4, 1.0))
    crack_value = 0.5 * (1.0 - style.contrast) * (0.8 + 0.2 * grain)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    radius = style.crack_width_px / 2
    step = max(2.0, min(H, W) / 16)
    # keep the first walk that stays inside for at least half the short side
    best = None
    for _ in range(20):
        path = _random_walk(rng, H, W, step)
        inside = ((path[:, 0] >= 0) & (path[:, 0] < H) & (path[:, 1] >= 0) & (path[:, 1] < W)).sum()
        if best is None or inside > best[0]:
            best = (inside, path)
        if inside * step >= min(H, W) / 2:
            break
    path = best[1]
    dist = np.full((H, W), np.inf)
    mask = np.zeros((H, W), dtype=bool)
    for a, b in zip(path[:-1], path[1:]):
        dist_next = np.minimum(dist, _segment_distance(yy, xx, a, b))
        mask_next = dist_next <= radius
        if mask_next.mean() >= 0.5:
            break
        dist, mask = dist_next, mask_next
    if not mask.any():
        # the walk never grazed a pixel centre; fall back to its first point
        dist = _segment_distance(yy, xx, path[0], path[0])
        mask = dist <= max(radius, 0.75)
        if not mask.any():
            mask[min(int(path[0][0]), H - 1), min(int(path[0][1]), W - 1)] = True

    gray = np.where(mask, crack_value, background)
    tint = rng.uniform(0.9, 1.0, size=3)
    image = np.clip(gray[..., None] * tint[None, None, :], 0.0, 1.0)
    if sample_id is None:
        sample_id = f"synth_{seed}" if np.isscalar(seed) else "synth"
    return ImageSample(sample_id, image, mask.astype(np.uint8))


def synthetic_dataset(count: int, H: int, W: int, seed: int,
                      style: Optional[CrackStyle] = None, split_tag: str = "base") -> Dataset:
    samples = [
        generate_synthetic_crack(H, W, (seed, i), style, sample_id=f"crack_{i:04d}")
        for i in range(count)
    ]
    return Dataset(samples, split_tag)
