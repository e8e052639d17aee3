"""Dataset ingestion and the patch pipeline.

Supported sources:

* CIFAR-10 binary batches: 3073-byte records, one label byte (discarded,
  denoising is self-supervised) followed by 3072 pixel bytes in channel-major
  R,G,B planes of a row-major 32x32 image, scaled to [0,1] by 1/255.
* Directories of 8-bit RGB PNGs, tiled into fixed-size patches.

Patch extraction reflect-pads the right/bottom remainders up to the next
stride multiple; reassembly places patches row-major (later patches overwrite
overlaps) and crops the padding, so extract -> reassemble is bit-exact.

A small synthetic corpus generator writes CIFAR-format files of structured
images (smooth gratings, soft blobs, hard-edged rectangles) for fully offline
training and tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "DataError",
    "Dataset",
    "PatchGrid",
    "CIFAR_RECORD_BYTES",
    "load_cifar10",
    "load_png_corpus",
    "read_png",
    "write_png",
    "extract_patches",
    "reassemble",
    "synth_image",
    "make_cifar_corpus",
]

log = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_COUNT = 45000
CIFAR_VAL_COUNT = 5000


class DataError(Exception):
    """Dataset or image-format violation."""


@dataclass
class Dataset:
    """A list of (C, H, W) float32 images in [0,1] with provenance labels."""

    images: list[np.ndarray]
    source: str
    split: str

    def __post_init__(self):
        for img in self.images:
            if img.ndim != 3:
                raise DataError(f"dataset image must be (C, H, W), got shape {img.shape}")

    def __len__(self) -> int:
        return len(self.images)

    def stack(self) -> np.ndarray:
        """(N, C, H, W) float32 block; requires homogeneous image shapes."""
        if not self.images:
            raise DataError("dataset is empty")
        shapes = {img.shape for img in self.images}
        if len(shapes) > 1:
            raise DataError(f"cannot stack images of mixed shapes {sorted(shapes)}")
        return np.stack(self.images).astype(np.float32, copy=False)


def _decode_cifar_bytes(blob: bytes, path: Path) -> np.ndarray:
    if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
        raise DataError(
            f"{path}: size {len(blob)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)  # label byte discarded
    return pixels.astype(np.float32) / 255.0


def load_cifar10(directory, split: str = "train", limit: int | None = None) -> Dataset:
    """Load a CIFAR-10-format binary directory and return one split.

    Standard ``data_batch_*.bin`` files are read in sorted order when
    present, otherwise every ``*.bin`` file.  The first 45000 images form the
    train split and the following 5000 the val split; smaller corpora split
    90/10 by the same first-train-then-val rule.
    """
    directory = Path(directory)
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    paths = sorted(directory.glob("data_batch_*.bin")) or sorted(directory.glob("*.bin"))
    if not paths:
        raise DataError(f"no .bin batch files in {directory}")
    blocks = [_decode_cifar_bytes(p.read_bytes(), p) for p in paths]
    images = np.concatenate(blocks)
    total = images.shape[0]
    if total >= CIFAR_TRAIN_COUNT + CIFAR_VAL_COUNT:
        n_train = CIFAR_TRAIN_COUNT
        n_val = CIFAR_VAL_COUNT
    else:
        n_train = max(1, int(total * 0.9)) if total > 1 else total
        n_val = total - n_train
    if split == "train":
        chosen = images[:n_train]
    else:
        chosen = images[n_train : n_train + n_val]
    if limit is not None:
        chosen = chosen[: int(limit)]
    return Dataset(images=list(chosen), source="cifar10-binary", split=split)


def _png_bit_depth(path: Path) -> int:
    head = path.read_bytes()[:25]
    if len(head) < 25 or head[:8] != b"\x89PNG\r\n\x1a\n":
        raise DataError(f"{path}: not a PNG file")
    return head[24]


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as (3, H, W) float32 in [0,1]."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    depth = _png_bit_depth(path)
    if depth == 16:
        raise DataError(f"{path}: 16-bit PNG not supported, re-encode as 8-bit RGB")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DataError(f"{path}: mode {im.mode!r} not supported, need 8-bit RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_png(path, img: np.ndarray) -> None:
    """Write (3, H, W) float intensities as an 8-bit RGB PNG, clipping to [0,1]."""
    path = Path(path)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"write_png expects (3, H, W), got shape {img.shape}")
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_png_corpus(directory, patch: int, stride: int) -> Dataset:
    """Tile every readable RGB PNG under ``directory`` into patches.

    Files that are unreadable, non-RGB or smaller than the patch size are
    skipped with a logged warning; the total skip count is logged once.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"corpus directory not found: {directory}")
    patches: list[np.ndarray] = []
    skipped = 0
    for path in sorted(directory.glob("*.png")):
        try:
            img = read_png(path)
        except DataError as exc:
            skipped += 1
            log.warning("skipping %s: %s", path.name, exc)
            continue
        if img.shape[1] < patch or img.shape[2] < patch:
            skipped += 1
            log.warning(
                "skipping %s: %dx%d smaller than patch size %d",
                path.name, img.shape[1], img.shape[2], patch,
            )
            continue
        patches.extend(extract_patches(img, patch, stride).patches)
    if skipped:
        log.warning("png corpus: skipped %d file(s) in %s", skipped, directory)
    return Dataset(images=patches, source="png-directory", split="train")


@dataclass
class PatchGrid:
    """Row-major tiling of one image, with the geometry needed to reassemble it."""

    patch_size: int
    stride: int
    orig_hw: tuple[int, int]
    padded_hw: tuple[int, int]
    rows: int
    cols: int
    patches: np.ndarray = field(repr=False)  # (rows*cols, C, size, size)


def _padded_extent(extent: int, size: int, stride: int) -> int:
    if extent <= size:
        return size
    steps = -(-(extent - size) // stride)  # ceil division
    return size + steps * stride


def extract_patches(img: np.ndarray, size: int, stride: int | None = None) -> PatchGrid:
    """Tile (C, H, W) into size*size patches, reflect-padding right/bottom remainders."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise DataError(f"extract_patches expects (C, H, W), got shape {img.shape}")
    if size < 1:
        raise DataError(f"patch size must be positive, got {size}")
    stride = size if stride is None else int(stride)
    if stride < 1:
        raise DataError(f"stride must be positive, got {stride}")
    _, h, w = img.shape
    if size > h or size > w:
        raise DataError(f"patch size {size} exceeds image extents ({h}, {w})")
    ph = _padded_extent(h, size, stride)
    pw = _padded_extent(w, size, stride)
    if ph > h or pw > w:
        # reflect never needs pad >= extent here since pad < stride <= size <= extent
        img = np.pad(img, ((0, 0), (0, ph - h), (0, pw - w)), mode="reflect")
    rows = (ph - size) // stride + 1
    cols = (pw - size) // stride + 1
    tiles = np.empty((rows * cols,) + (img.shape[0], size, size), dtype=img.dtype)
    for r in range(rows):
        for c in range(cols):
            y, x = r * stride, c * stride
            tiles[r * cols + c] = img[:, y : y + size, x : x + size]
    return PatchGrid(
        patch_size=size,
        stride=stride,
        orig_hw=(h, w),
        padded_hw=(ph, pw),
        rows=rows,
        cols=cols,
        patches=tiles,
    )


def reassemble(grid: PatchGrid, patches: np.ndarray | None = None) -> np.ndarray:
    """Invert :func:`extract_patches`; later row-major patches overwrite overlaps.

    ``patches`` defaults to the grid's own tiles (bit-exact round trip) and
    may be replaced by processed tiles of the same shape.
    """
    tiles = grid.patches if patches is None else np.asarray(patches)
    expected = (grid.rows * grid.cols, tiles.shape[1], grid.patch_size, grid.patch_size)
    if tiles.shape != expected:
        raise DataError(f"patch block has shape {tiles.shape}, expected {expected}")
    ph, pw = grid.padded_hw
    canvas = np.zeros((tiles.shape[1], ph, pw), dtype=tiles.dtype)
    for r in range(grid.rows):
        for c in range(grid.cols):
            y, x = r * grid.stride, c * grid.stride
            canvas[:, y : y + grid.patch_size, x : x + grid.patch_size] = tiles[r * grid.cols + c]
    h, w = grid.orig_hw
    return canvas[:, :h, :w]


def synth_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One structured synthetic image: smooth gratings, soft blobs, sharp rectangles.

    Channels are correlated (shared luminance field with per-channel gain)
    so the statistics are closer to photographs than white noise would be.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        base += rng.uniform(0.2, 0.5) * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)
    for _ in range(2):
        cx, cy = rng.uniform(0.0, 1.0, size=2)
        rad = rng.uniform(0.1, 0.35)
        base += rng.uniform(-0.7, 0.7) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * rad * rad))
    n_rects = rng.integers(1, 3)
    for _ in range(n_rects):
        y0, x0 = rng.integers(0, size - 4, size=2)
        hh, ww = rng.integers(3, max(4, size // 2), size=2)
        base[y0 : y0 + hh, x0 : x0 + ww] += rng.uniform(-0.6, 0.6)
    img = np.empty((3, size, size))
    for ch in range(3):
        img[ch] = base * rng.uniform(0.6, 1.0) + rng.uniform(-0.15, 0.15)
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)
    return (img * 0.9 + 0.05).astype(np.float32)


def make_cifar_corpus(directory, n_records: int, seed: int = 0) -> Path:
    """Write ``n_records`` synthetic images as one CIFAR-format binary batch file.

    Pixels are quantized to uint8 exactly like real CIFAR data; the label
    byte cycles 0..9 and is ignored by the loader.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=(0xC1FA,))))
    out = bytearray()
    for i in range(n_records):
        img = synth_image(rng, 32)
        u8 = np.round(img * 255.0).astype(np.uint8)
        out.append(i % 10)
        out.extend(u8.tobytes())
    path = directory / "data_batch_1.bin"
    path.write_bytes(bytes(out))
    return path
