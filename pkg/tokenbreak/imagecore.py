"""Images, resizing and lossless patch grids.

Pixels are float64 arrays of shape (H, W, C) with values in [0, 1]; C is 1
or 3. A PatchGrid stores its patches as one (M, ph, pw, C) array in
row-major grid order.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import GridError, ImageFormatError
from .utils import atomic_write_bytes

SUPPORTED_EXTS = {".png", ".ppm"}


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ImageFormatError(f"pixels must be (H, W, C), got shape {px.shape}")
        h, w, c = px.shape
        if h == 0 or w == 0:
            raise ImageFormatError("zero-dimension image")
        if c not in (1, 3):
            raise ImageFormatError(f"channels must be 1 or 3, got {c}")
        if not np.all(np.isfinite(px)):
            raise ImageFormatError("non-finite pixel values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImageFormatError("pixel values outside [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels


def to_image(array: np.ndarray) -> Image:
    """Build an Image from raw values, clamping to [0, 1]."""
    return Image(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0))


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise GridError(f"grid sides must be positive, got {self.rows}x{self.cols}")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def divides(self, height: int, width: int) -> bool:
        return height % self.rows == 0 and width % self.cols == 0

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


@dataclass(frozen=True)
class PatchGrid:
    grid: GridSpec
    patches: np.ndarray  # (M, ph, pw, C)

    def __post_init__(self) -> None:
        p = np.asarray(self.patches)
        if p.ndim != 4:
            raise GridError(f"patches must be (M, ph, pw, C), got shape {p.shape}")
        if p.shape[0] != self.grid.size:
            raise GridError(f"grid {self.grid} needs {self.grid.size} patches, got {p.shape[0]}")
        object.__setattr__(self, "patches", p)

    @property
    def num_patches(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patch_h(self) -> int:
        return int(self.patches.shape[1])

    @property
    def patch_w(self) -> int:
        return int(self.patches.shape[2])

    @property
    def channels(self) -> int:
        return int(self.patches.shape[3])

    def with_patches(self, patches: np.ndarray) -> "PatchGrid":
        patches = np.asarray(patches)
        if patches.shape != self.patches.shape:
            raise GridError(f"patch array shape {patches.shape} does not match {self.patches.shape}")
        return PatchGrid(self.grid, patches)


# --- I/O ---

def load_image(path: str) -> Image:
    if not os.path.isfile(path):
        raise ImageFormatError(f"no such file: {path}")
    try:
        with PILImage.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"unsupported format {im.format} for {path}")
            im.load()
            arr = _pil_to_array(im)
    except ImageFormatError:
        raise
    except (UnidentifiedImageError, PILImage.DecompressionBombError, OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError(f"cannot read {path}: {e}") from e
    return Image(arr)


def _pil_to_array(im: PILImage.Image) -> np.ndarray:
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        raw = np.asarray(im, dtype=np.float64)
        return np.clip(raw / 65535.0, 0.0, 1.0)
    if mode == "1" or mode == "LA":
        im = im.convert("L")
    elif mode not in ("L", "RGB"):
        im = im.convert("RGB")
    return np.asarray(im, dtype=np.float64) / 255.0


def quantize(img: Image) -> np.ndarray:
    """8-bit quantization, round to nearest."""
    return np.rint(img.pixels * 255.0).astype(np.uint8)


def encode_image(img: Image, fmt: str) -> bytes:
    q = quantize(img)
    if img.channels == 1:
        pil = PILImage.fromarray(q[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(q, mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format=fmt)
    return buf.getvalue()


def save_image(img: Image, path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        fmt = "PNG"
    elif ext == ".ppm":
        fmt = "PPM"
    else:
        raise ImageFormatError(f"unsupported output extension: {ext or '(none)'}")
    return atomic_write_bytes(path, encode_image(img, fmt))


# --- resize ---

def _axis_weights(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align-corners: output sample 0 and n_out-1 land on input 0 and n_in-1
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out, dtype=np.float64)
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.clip(i0, 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    if out_h <= 0 or out_w <= 0:
        raise GridError(f"target size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (img.height, img.width):
        return img

    px = img.pixels
    y0, y1, fy = _axis_weights(img.height, out_h)
    x0, x1, fx = _axis_weights(img.width, out_w)

    # rows first, then columns; a + (b - a) * f keeps constants exact
    top = px[y0]
    bottom = px[y1]
    rows = top + (bottom - top) * fy[:, None, None]
    left = rows[:, x0]
    right = rows[:, x1]
    out = left + (right - left) * fx[None, :, None]
    return to_image(out)


def resize_to_grid(img: Image, grid: GridSpec, resize_to: int) -> Image:
    """Return img unchanged if grid divides it, else resized to resize_to x resize_to."""
    if grid.divides(img.height, img.width):
        return img
    if not grid.divides(resize_to, resize_to):
        raise GridError(f"grid {grid} divides neither {img.height}x{img.width} nor {resize_to}x{resize_to}")
    return resize_bilinear(img, resize_to, resize_to)


# --- patches ---

def patchify(img: Image, grid: GridSpec) -> PatchGrid:
    if not grid.divides(img.height, img.width):
        raise GridError(f"grid {grid} does not divide image {img.height}x{img.width}")
    ph = img.height // grid.rows
    pw = img.width // grid.cols
    c = img.channels
    blocks = img.pixels.reshape(grid.rows, ph, grid.cols, pw, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(grid, blocks.reshape(grid.size, ph, pw, c).copy())


def unpatchify_array(pg: PatchGrid) -> np.ndarray:
    g = pg.grid
    ph, pw, c = pg.patch_h, pg.patch_w, pg.channels
    blocks = pg.patches.reshape(g.rows, g.cols, ph, pw, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(g.rows * ph, g.cols * pw, c)


def unpatchify(pg: PatchGrid) -> Image:
    """Reassemble an Image; values from spectral pipelines are clamped to [0, 1] here."""
    return to_image(unpatchify_array(pg))


def patch_mean(pg: PatchGrid, i: int) -> np.ndarray:
    if not 0 <= i < pg.num_patches:
        raise GridError(f"patch index {i} out of range [0, {pg.num_patches})")
    return pg.patches[i].reshape(-1, pg.channels).mean(axis=0)


def patch_means(pg: PatchGrid) -> np.ndarray:
    return pg.patches.reshape(pg.num_patches, -1, pg.channels).mean(axis=1)


def match_channels(img: Image, channels: int) -> Image:
    """Gray to RGB by replication, RGB to gray by channel mean."""
    if img.channels == channels:
        return img
    if channels == 3:
        return Image(np.repeat(img.pixels, 3, axis=2))
    if channels == 1:
        return Image(img.pixels.mean(axis=2, keepdims=True))
    raise ImageFormatError(f"cannot convert {img.channels} channels to {channels}")
