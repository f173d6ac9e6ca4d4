"""Raster primitives: grayscale, Otsu thresholding, binarization, tessellation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

PATCH_SIDE = 150

GRAYSCALE_WEIGHTS = (0.299, 0.587, 0.114)


def round_half_up(x: float) -> int:
    """Round with halves going up, so grids come out platform-identical."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Raster:
    """8-bit image; pixels shaped (h, w) for single channel or (h, w, 3) for RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError(f"raster samples must be uint8, got {px.dtype}")
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[2] == 3:
            pass
        else:
            raise ValueError(f"raster shape must be (h, w) or (h, w, 3), got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def channel(self, index: int) -> np.ndarray:
        """2-D view of one channel (0=R, 1=G, 2=B for RGB rasters)."""
        if self.channels == 1:
            if index != 0:
                raise IndexError(f"single-channel raster has no channel {index}")
            return self.pixels
        return self.pixels[:, :, index]

    def crop(self, x: int, y: int, w: int, h: int) -> "Raster":
        if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise ValueError(f"crop ({x},{y})+{w}x{h} exceeds {self.width}x{self.height}")
        return Raster(np.ascontiguousarray(self.pixels[y : y + h, x : x + w]))


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel boolean mask matching the source raster's dimensions."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.dtype != np.bool_ or b.ndim != 2:
            raise ValueError("mask bits must be a 2-D boolean array")
        object.__setattr__(self, "bits", b)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def complement(self) -> "BinaryMask":
        return BinaryMask(~self.bits)


@dataclass(frozen=True)
class PatchRecord:
    """One tessellated tile plus where it came from."""

    pixels: Raster
    origin: tuple[int, int]
    grid_pos: tuple[int, int]
    source_image_id: str = ""
    patient_id: str = ""
    magnification: Optional[int] = None
    binary_label: Optional[str] = None

    @property
    def provenance(self) -> tuple[str, str, tuple[int, int]]:
        return (self.patient_id, self.source_image_id, self.grid_pos)


def grid_offsets(dim: int, patch: int) -> list[int]:
    """Evenly placed offsets covering [0, dim); count is round(dim/patch), min 1.

    For n > 1 the first offset is 0 and the last is dim - patch, so the grid
    spans the full extent. Adjacent tiles overlap when n*patch > dim and gap
    when n*patch < dim.
    """
    if dim < patch:
        raise ValueError(f"dimension {dim} smaller than patch side {patch}")
    n = max(1, round_half_up(dim / patch))
    if n == 1:
        return [0]
    return [round_half_up(i * (dim - patch) / (n - 1)) for i in range(n)]


def tessellate(
    img: Raster,
    patch: int = PATCH_SIDE,
    *,
    source_image_id: str = "",
    patient_id: str = "",
    magnification: Optional[int] = None,
    binary_label: Optional[str] = None,
) -> list[PatchRecord]:
    """Cut a raster into a deterministic grid of patch x patch tiles.

    Tiles come back in row-major order; grid_pos is (col, row). A 700x460
    raster yields 5 x 3 = 15 tiles of 150 pixels.
    """
    if img.width < patch or img.height < patch:
        raise ValueError(
            f"image {img.width}x{img.height} smaller than patch side {patch}"
        )
    xs = grid_offsets(img.width, patch)
    ys = grid_offsets(img.height, patch)
    records = []
    for row, y in enumerate(ys):
        for col, x in enumerate(xs):
            records.append(
                PatchRecord(
                    pixels=img.crop(x, y, patch, patch),
                    origin=(x, y),
                    grid_pos=(col, row),
                    source_image_id=source_image_id,
                    patient_id=patient_id,
                    magnification=magnification,
                    binary_label=binary_label,
                )
            )
    return records


def patch_grid_shape(width: int, height: int, patch: int = PATCH_SIDE) -> tuple[int, int]:
    """(n_cols, n_rows) the tessellation of a width x height raster produces."""
    return (
        max(1, round_half_up(width / patch)),
        max(1, round_half_up(height / patch)),
    )


def to_grayscale(img: Raster) -> Raster:
    """Luma conversion with fixed weights 0.299/0.587/0.114, rounded half up."""
    if img.channels != 3:
        raise ValueError("grayscale conversion expects a 3-channel raster")
    wr, wg, wb = GRAYSCALE_WEIGHTS
    px = img.pixels.astype(np.float64)
    gray = np.floor(wr * px[:, :, 0] + wg * px[:, :, 1] + wb * px[:, :, 2] + 0.5)
    return Raster(gray.astype(np.uint8))


def otsu_threshold(channel) -> int:
    """Threshold maximizing between-class variance; ties resolve to the smallest T.

    The split at T puts values <= T in one class and values > T in the other.
    The comparison runs in exact integer arithmetic so results are identical
    across platforms; a constant image degenerates to T = 0.
    """
    if isinstance(channel, Raster):
        if channel.channels != 1:
            raise ValueError("otsu_threshold expects a single channel")
        values = channel.pixels
    else:
        values = np.asarray(channel)
    flat = values.ravel()
    if flat.size == 0:
        raise ValueError("otsu_threshold needs at least one pixel")
    if flat.dtype != np.uint8:
        if flat.min() < 0 or flat.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        flat = flat.astype(np.uint8)

    hist = np.bincount(flat, minlength=256).tolist()
    total = int(flat.size)
    weighted = [h * v for v, h in enumerate(hist)]
    grand_sum = sum(weighted)

    # Between-class variance is (s0*w1 - s1*w0)^2 / (w0*w1) up to a constant
    # factor; comparing as exact integer fractions avoids float tie ambiguity.
    best_t = 0
    best_num = -1
    best_den = 1
    w0 = 0
    s0 = 0
    for t in range(256):
        w0 += hist[t]
        s0 += weighted[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            num, den = 0, 1
        else:
            diff = s0 * w1 - (grand_sum - s0) * w0
            num, den = diff * diff, w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def binarize(channel, low: int, high: int) -> BinaryMask:
    """Mask of pixels with low <= value <= high, both bounds inclusive."""
    if low > high:
        raise ValueError(f"binarize bounds inverted: [{low}, {high}]")
    if isinstance(channel, Raster):
        if channel.channels != 1:
            raise ValueError("binarize expects a single channel")
        values = channel.pixels
    else:
        values = np.asarray(channel)
    return BinaryMask((values >= low) & (values <= high))
