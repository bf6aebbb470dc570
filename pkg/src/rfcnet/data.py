"""Synthetic blob datasets, image/mask directory ingestion and mask rasters."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .errors import ArgumentError, DataLoadError
from .net import DOWNSAMPLE

logger = logging.getLogger(__name__)

RASTER_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST_NAME = "manifest.txt"


@dataclass
class Sample:
    image: Tensor  # (1, 3, h, w) in [0, 1]
    mask: np.ndarray  # (h, w) integer class ids
    name: str = ""
    # (h, w) before reflect-padding to a multiple of 4, if padding happened
    orig_hw: Optional[tuple] = None


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    resize: tuple = (64, 64)
    split: tuple = (160, 40)
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ArgumentError(f"source must be 'synthetic' or 'directory', got {self.source!r}")
        if self.source == "directory" and not self.path:
            raise ArgumentError("directory datasets need a path")
        if self.source == "synthetic" and any(d % DOWNSAMPLE for d in self.resize):
            raise ArgumentError(f"synthetic size {self.resize} must be divisible by {DOWNSAMPLE}")

    @property
    def network_hw(self) -> tuple:
        """Size tensors actually reach the network with (after padding)."""
        return tuple(-(-d // DOWNSAMPLE) * DOWNSAMPLE for d in self.resize)


def load_dataset(spec: DatasetSpec, threads: int = 1) -> tuple:
    """(train, val) lists for a dataset spec."""
    if spec.source == "synthetic":
        samples = gen_synthetic(sum(spec.split), *spec.resize, seed=spec.seed)
        return samples[:spec.split[0]], samples[spec.split[0]:]
    root = Path(spec.path)
    if (root / MANIFEST_NAME).exists():
        return (load_directory(root, spec.resize, split="train", threads=threads),
                load_directory(root, spec.resize, split="test", threads=threads))
    return split_dataset(load_directory(root, spec.resize, threads=threads))


def split_dataset(samples: Sequence, train_fraction: float = 0.8) -> tuple:
    n_train = int(round(len(samples) * train_fraction))
    return list(samples[:n_train]), list(samples[n_train:])


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v


def _synthetic_one(rng: np.random.Generator, h: int, w: int) -> tuple:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    while True:
        mask = np.zeros((h, w), dtype=bool)
        shade = np.zeros((h, w))
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
            ry, rx = rng.uniform(0.08, 0.22, size=2) * min(h, w)
            r2 = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi))
            inside = r2 <= 1.0
            mask |= inside
            shade = np.maximum(shade, np.where(inside, 1.0 - 0.35 * r2, 0.0))
        frac = mask.mean()
        if 0.02 <= frac <= 0.6:
            break

    # low-frequency texture: a few random plane waves plus pixel noise
    base = rng.uniform(0.25, 0.45, size=3)
    texture = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2) * 2 * np.pi / np.array([h, w])
        texture += rng.uniform(0.03, 0.07) * np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
    bg = base[:, None, None] + texture[None] + rng.normal(0, 0.02, size=(3, h, w))

    tint = np.array([0.38, 0.18, -0.05]) * rng.uniform(0.8, 1.1)
    fg = bg + tint[:, None, None] * (0.6 + 0.4 * shade)[None]
    image = np.clip(np.where(mask[None], fg, bg), 0.0, 1.0)
    return image.astype(np.float32), mask.astype(np.int64)


def gen_synthetic(count: int, h: int = 64, w: int = 64, seed: int = 0) -> list:
    """Textured backgrounds with 1-3 tinted filled ellipses as class 1."""
    if h < 32 or w < 32 or h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ArgumentError(f"synthetic images need h, w >= 32 and divisible by {DOWNSAMPLE}, got {(h, w)}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        image, mask = _synthetic_one(rng, h, w)
        out.append(Sample(Tensor(image[None]), mask, name=f"synthetic_{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# directories
# ---------------------------------------------------------------------------


def _read_manifest(root: Path) -> Optional[dict]:
    path = root / MANIFEST_NAME
    if not path.exists():
        return None
    splits = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            name, split = (part.strip() for part in line.split(","))
        except ValueError:
            raise DataLoadError(f"{path}:{lineno}: expected 'filename,split'") from None
        splits[Path(name).stem] = split
    return splits


def _rasters(folder: Path) -> dict:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in RASTER_SUFFIXES}


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise OSError(f"cannot read raster {path}: {e}") from e
    return img


def resize_image(img: Image.Image, hw: tuple) -> np.ndarray:
    """RGB float32 (3, h, w) in [0, 1], bilinear; same-size input is returned untouched."""
    img = img.convert("RGB")
    if img.size != (hw[1], hw[0]):
        img = img.resize((hw[1], hw[0]), Image.BILINEAR)
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def resize_mask(img: Image.Image, hw: tuple) -> np.ndarray:
    """Nearest-neighbour resize then binarise at 0.5 of full scale."""
    img = img.convert("L")
    if img.size != (hw[1], hw[0]):
        img = img.resize((hw[1], hw[0]), Image.NEAREST)
    return (np.asarray(img, dtype=np.float64) / 255.0 >= 0.5).astype(np.int64)


def pad_to_multiple(image: np.ndarray, mask: np.ndarray, multiple: int = DOWNSAMPLE) -> tuple:
    h, w = mask.shape
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return image, mask
    image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    mask = np.pad(mask, ((0, ph), (0, pw)), mode="reflect")
    return image, mask


def load_directory(path, resize: tuple, split: Optional[str] = None, threads: int = 1) -> list:
    """Pairs ``images/<stem>.*`` with ``masks/<stem>.*`` under ``path``.

    If ``split`` is given, ``manifest.txt`` (``filename,split`` per line) picks the
    members. Sizes not divisible by 4 are reflect-padded; ``Sample.orig_hw``
    records the unpadded size so predictions can be cropped back.
    """
    root = Path(path)
    images, masks = _rasters(root / "images"), _rasters(root / "masks")
    for stem in sorted(set(images) ^ set(masks)):
        where = images.get(stem) or masks.get(stem)
        raise DataLoadError(f"unpaired file: {where}")
    stems = sorted(images)
    if split is not None:
        manifest = _read_manifest(root)
        if manifest is None:
            raise DataLoadError(f"split {split!r} requested but {root / MANIFEST_NAME} is missing")
        stems = [s for s in stems if manifest.get(s) == split]

    def load_one(stem: str) -> Sample:
        image = resize_image(_open(images[stem]), resize)
        mask = resize_mask(_open(masks[stem]), resize)
        orig = None
        if mask.shape[0] % DOWNSAMPLE or mask.shape[1] % DOWNSAMPLE:
            orig = mask.shape
            image, mask = pad_to_multiple(image, mask)
        return Sample(Tensor(image[None]), mask, name=stem, orig_hw=orig)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(load_one, stems))
    else:
        out = [load_one(s) for s in stems]
    padded = sum(s.orig_hw is not None for s in out)
    if padded:
        logger.info("reflect-padded %d images from %s to %s; logits are cropped back",
                    padded, tuple(resize), out[0].mask.shape)
    return out


def save_mask(mask, path) -> None:
    """Write a class-id mask as an 8-bit raster with foreground at 255."""
    mask = np.asarray(mask)
    Image.fromarray(np.where(mask > 0, 255, 0).astype(np.uint8), mode="L").save(path)


def save_image(image: np.ndarray, path) -> None:
    """Write a (3, h, w) float image in [0, 1] as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
