"""Image buffers, PNG I/O, patch sampling, and full-reference metrics."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

C1 = 0.01 ** 2
C2 = 0.03 ** 2
PSNR_CAP = 100.0
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


class ImageIOError(IOError):
    """PNG read/write failure, with path context."""


class UnsupportedFormatError(ImageIOError):
    """Color type or bit depth outside 8/16-bit gray/RGB."""


@dataclass
class ImageBuf:
    """Planar float image: [channels, height, width], values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"ImageBuf expects [1|3, H, W], got {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def clamped(self) -> "ImageBuf":
        return ImageBuf(np.clip(self.data, 0.0, 1.0))

    def to_rgb(self) -> "ImageBuf":
        if self.channels == 3:
            return self
        return ImageBuf(np.repeat(self.data, 3, axis=0))

    def luma(self) -> "ImageBuf":
        """ITU-R BT.601 luma, for the optional luma-only metric mode."""
        if self.channels == 1:
            return self
        r, g, b = self.data
        return ImageBuf((0.299 * r + 0.587 * g + 0.114 * b)[None])


class Rng:
    """Seeded generator with named, independent sub-streams."""

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = _path
        self._gen = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=_path))

    def stream(self, name: str) -> "Rng":
        return Rng(self.seed, self._path + (zlib.crc32(name.encode("utf-8")),))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size)


# -- PNG I/O ----------------------------------------------------------------


def load_png(path) -> ImageBuf:
    """Load an 8/16-bit gray or RGB PNG, mapped to [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as exc:
        raise ImageIOError(f"cannot read PNG {path}: {exc}") from exc
    mode = img.mode
    if mode == "RGB":
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return ImageBuf(arr.transpose(2, 0, 1))
    if mode == "L":
        return ImageBuf(np.asarray(img, dtype=np.float32)[None] / 255.0)
    if mode in ("I", "I;16"):
        return ImageBuf(np.asarray(img, dtype=np.float32)[None] / 65535.0)
    raise UnsupportedFormatError(
        f"unsupported PNG color type {mode!r} in {path} (need 8/16-bit gray or RGB)")


def save_png(img: ImageBuf, path) -> None:
    """Quantize to 8-bit (round half up), clamped to [0, 1]."""
    arr = np.clip(img.data, 0.0, 1.0)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    try:
        if img.channels == 1:
            Image.fromarray(q[0], mode="L").save(path)
        else:
            Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)
    except OSError as exc:
        raise ImageIOError(f"cannot write PNG {path}: {exc}") from exc


# -- patch sampling ---------------------------------------------------------


def sample_patches(img: ImageBuf, n: int, size: int, rng: Rng):
    """Draw ``n`` square patches uniformly over valid top-left offsets.

    Returns (patches, offsets) with offsets as (row, col) tuples.  Patches
    are copies; the draw is deterministic under ``rng``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size > img.height or size > img.width:
        raise ValueError(
            f"patch size {size} exceeds image extent {img.height}x{img.width}")
    rows = rng.integers(0, img.height - size + 1, size=n)
    cols = rng.integers(0, img.width - size + 1, size=n)
    patches = [ImageBuf(img.data[:, r:r + size, c:c + size].copy())
               for r, c in zip(rows, cols)]
    return patches, [(int(r), int(c)) for r, c in zip(rows, cols)]


# -- metrics ----------------------------------------------------------------


def _crop(a: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return a
    return a[:, border:-border, border:-border]


def psnr(a: ImageBuf, b: ImageBuf, border_crop: int = 0) -> float:
    """10*log10(1/MSE) on [0,1] data; capped at 100 dB for (near-)identical pairs."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    if border_crop < 0:
        raise ValueError("border_crop must be >= 0")
    da = _crop(a.data, border_crop).astype(np.float64)
    db = _crop(b.data, border_crop).astype(np.float64)
    mse = np.mean((da - db) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gauss_win(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(plane: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation
    v = np.lib.stride_tricks.sliding_window_view(plane, len(win), axis=0) @ win
    return np.lib.stride_tricks.sliding_window_view(v, len(win), axis=1) @ win


def ssim(a: ImageBuf, b: ImageBuf) -> float:
    """Mean structural similarity, 11x11 Gaussian window (sigma 1.5), L=1.

    Computed per channel on the valid region, then averaged.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    if a.height < _SSIM_WIN or a.width < _SSIM_WIN:
        raise ValueError(
            f"image {a.height}x{a.width} smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    win = _gauss_win(_SSIM_WIN, _SSIM_SIGMA)
    vals = []
    for ca, cb in zip(a.data.astype(np.float64), b.data.astype(np.float64)):
        mu_a = _filter_valid(ca, win)
        mu_b = _filter_valid(cb, win)
        var_a = _filter_valid(ca * ca, win) - mu_a * mu_a
        var_b = _filter_valid(cb * cb, win) - mu_b * mu_b
        cov = _filter_valid(ca * cb, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
        den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
