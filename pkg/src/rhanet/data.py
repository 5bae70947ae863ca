"""Loading, augmentation, padding and batching of image/mask pairs."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image


class DataError(Exception):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray  # H x W float32 in {0, 1}
    image_path: Optional[Path] = None
    mask_path: Optional[Path] = None

    @property
    def name(self) -> str:
        return self.image_path.stem if self.image_path is not None else ""

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class Batch:
    images: np.ndarray  # N x 3 x H x W
    masks: np.ndarray  # N x H x W
    names: list


def read_split(path, data_root) -> list[tuple[Path, Path]]:
    """Parse ``image<TAB>mask`` lines (``#`` comments allowed) relative to ``data_root``."""
    path, root = Path(path), Path(data_root)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read split list {path}: {e}") from e
    pairs = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask', got {line!r}")
        img, msk = root / parts[0].strip(), root / parts[1].strip()
        for f in (img, msk):
            if not f.is_file():
                raise DataError(f"{path}:{lineno}: missing file {f}")
        pairs.append((img, msk))
    return pairs


def read_image(path) -> np.ndarray:
    """8-bit image file -> 3 x H x W float32 in [0, 1]; grayscale is replicated."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1)) / np.float32(255)


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            raw = np.asarray(im.convert("L"))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read mask {path}: {e}") from e
    return binarize_mask(raw)


def binarize_mask(raw: np.ndarray) -> np.ndarray:
    return (np.asarray(raw) >= 128).astype(np.float32)


def load_sample(image_path, mask_path) -> Sample:
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if image.shape[1:] != mask.shape:
        raise DataError(f"size mismatch: {image_path} is {image.shape[1:]}, {mask_path} is {mask.shape}")
    return Sample(image, mask, Path(image_path), Path(mask_path))


def load_split(path, data_root) -> list[Sample]:
    return [load_sample(i, m) for i, m in read_split(path, data_root)]


# -- augmentation ------------------------------------------------------------
def geometric(arr: np.ndarray, rotate: bool, hflip: bool, vflip: bool) -> np.ndarray:
    """Apply rotate-180 / flips to the last two axes."""
    if rotate:
        arr = arr[..., ::-1, ::-1]
    if hflip:
        arr = arr[..., :, ::-1]
    if vflip:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def photometric(image: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Contrast ``alpha`` around the image mean, brightness shift ``beta``, clamped to [0, 1]."""
    mu = image.mean(dtype=np.float64)
    out = alpha * (image.astype(np.float64) - mu) + mu + beta
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_augment(s: Sample, rotate=False, hflip=False, vflip=False, alpha=1.0, beta=0.0) -> Sample:
    image = geometric(s.image, rotate, hflip, vflip)
    if alpha != 1.0 or beta != 0.0:
        image = photometric(image, alpha, beta)
    return replace(s, image=image, mask=geometric(s.mask, rotate, hflip, vflip))


def augment(s: Sample, seed) -> Sample:
    """Random rotate-180, flips (p = 0.5 each) and brightness/contrast jitter, fully seeded."""
    rng = np.random.default_rng(seed)
    rotate, hflip, vflip = (bool(v) for v in rng.random(3) < 0.5)
    alpha = rng.uniform(0.8, 1.2)
    beta = rng.uniform(-0.1, 0.1)
    return apply_augment(s, rotate, hflip, vflip, alpha, beta)


# -- padding -------------------------------------------------------------------
def pad_array(arr: np.ndarray, multiple: int = 16) -> np.ndarray:
    """Reflect-pad the last two axes on the bottom/right up to multiples of ``multiple``."""
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    h, w = arr.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return arr
    widths = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(arr, widths, mode=mode)


def pad_to_multiple(s: Sample, multiple: int = 16) -> tuple[Sample, tuple[int, int]]:
    size = s.size
    return replace(s, image=pad_array(s.image, multiple), mask=pad_array(s.mask, multiple)), size


def crop(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    return arr[..., :h, :w]


# -- batching --------------------------------------------------------------------
def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(samples: Sequence[Sample], batch_size: int, seed: int, augment_flag: bool = False,
            epoch: int = 0, pad: Optional[int] = 16) -> list[Batch]:
    """Shuffle with a (seed, epoch)-derived permutation and group into batches.

    Augmentation seeds are derived from (seed, epoch, position), so any epoch
    can be regenerated independently (needed for resuming from checkpoints).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(samples), seed, epoch)
    out = []
    for start in range(0, len(order), batch_size):
        chunk = []
        for pos in order[start : start + batch_size]:
            s = samples[pos]
            if augment_flag:
                s = augment(s, [seed, epoch, int(pos)])
            if pad:
                s = pad_to_multiple(s, pad)[0]
            chunk.append(s)
        sizes = {c.size for c in chunk}
        if len(sizes) > 1:
            raise DataError(f"mixed image sizes {sorted(sizes)} in one batch; use batch size 1")
        out.append(Batch(np.stack([c.image for c in chunk]), np.stack([c.mask for c in chunk]),
                         [c.name for c in chunk]))
    return out


def negative_positive_ratio(samples: Sequence[Sample]) -> float:
    """Non-crack / crack pixel ratio over a split (the automatic loss weight)."""
    pos = sum(float(s.mask.sum()) for s in samples)
    total = sum(s.mask.size for s in samples)
    return (total - pos) / pos if pos > 0 else 1.0


def stripe_samples(n: int = 4, size: int = 32, width: int = 2) -> list[Sample]:
    """Synthetic black images with one white stripe each (horizontal, vertical, diagonals)."""
    out = []
    for k in range(n):
        mask = np.zeros((size, size), dtype=np.float32)
        kind = k % 4
        off = size // 4 + (k // 4) * 3
        if kind == 0:
            mask[off : off + width, :] = 1
        elif kind == 1:
            mask[:, off : off + width] = 1
        else:
            idx = np.arange(size)
            for d in range(width):
                cols = np.clip(idx + d, 0, size - 1)
                if kind == 2:
                    mask[idx, cols] = 1
                else:
                    mask[idx, size - 1 - cols] = 1
        image = np.repeat(mask[None], 3, axis=0).astype(np.float32)
        out.append(Sample(image, mask, Path(f"stripe{k}.png"), Path(f"stripe{k}_mask.png")))
    return out
