"""Blur kernels and the learnable degradation operator.

Covers synthetic anisotropic-Gaussian kernel generation, the ground-truth
degradation pipeline (blur -> bicubic downsample -> noise), the three-layer
deep linear degradation network, and impulse-response extraction of its
effective kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .imaging import ImageBuf, Rng

# conv-layer spatial extents of the degradation net, per scale factor
GD_LAYER_SIZES = {2: (3, 7, 9), 4: (9, 15, 17)}

# default synthesized-kernel support, per scale factor
DEFAULT_KERNEL_SIZE = {1: 15, 2: 15, 4: 21}


@dataclass
class Kernel2D:
    """Odd-sized 2-D blur kernel, normalized to unit sum."""

    size: int
    taps: np.ndarray

    def __post_init__(self):
        if self.size % 2 == 0 or self.size < 1:
            raise ValueError(f"kernel size must be odd and positive, got {self.size}")
        taps = np.asarray(self.taps, dtype=np.float64).reshape(self.size, self.size)
        s = taps.sum()
        if abs(s) < 1e-12:
            raise ValueError("kernel taps sum to zero; cannot normalize")
        self.taps = taps / s

    @staticmethod
    def delta(size: int = 1) -> "Kernel2D":
        taps = np.zeros((size, size))
        taps[size // 2, size // 2] = 1.0
        return Kernel2D(size, taps)

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{self.size}\n")
            for row in self.taps:
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    @staticmethod
    def load_csv(path) -> "Kernel2D":
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines:
            raise ValueError(f"empty kernel file {path}")
        size = int(lines[0])
        if len(lines) != size + 1:
            raise ValueError(f"kernel file {path}: expected {size} rows, got {len(lines) - 1}")
        taps = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        return Kernel2D(size, taps)


@dataclass
class DegradationSpec:
    """Ground-truth degradation: blur kernel, integer downscale, AWGN sigma."""

    kernel: Kernel2D
    scale: int = 2
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.scale not in (1, 2, 4):
            raise ValueError(f"scale must be 1, 2 or 4, got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def gaussian_kernel(size: int, lam1: float, lam2: float, theta: float) -> np.ndarray:
    """Anisotropic Gaussian density on the centered integer grid.

    ``lam1``/``lam2`` are the covariance eigenvalues (axis variances) and
    ``theta`` the rotation of the first axis.  Unnormalized.
    """
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    inv_cov = rot @ np.diag([1.0 / lam1, 1.0 / lam2]) @ rot.T
    r = size // 2
    yy, xx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    pts = np.stack([yy, xx], axis=-1).astype(np.float64)
    quad = np.einsum("hwi,ij,hwj->hw", pts, inv_cov, pts)
    return np.exp(-0.5 * quad)


def synth_kernel(rng: Rng, size: int, lambda_range=(0.6, 5.0), noise_amp: float = 0.25):
    """Draw a DIV2KRK-style random kernel.

    Axis variances are uniform over ``lambda_range``, the rotation uniform
    over [-pi, pi], and each tap gets independent multiplicative noise
    uniform in [1 - noise_amp, 1 + noise_amp] before renormalization.

    Returns (kernel, (lam1, lam2, theta)).
    """
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    lam1 = float(rng.uniform(*lambda_range))
    lam2 = float(rng.uniform(*lambda_range))
    theta = float(rng.uniform(-np.pi, np.pi))
    taps = gaussian_kernel(size, lam1, lam2, theta)
    if noise_amp > 0:
        taps = taps * rng.uniform(1.0 - noise_amp, 1.0 + noise_amp, size=taps.shape)
    return Kernel2D(size, taps), (lam1, lam2, theta)


# -- ground-truth degradation ----------------------------------------------


def blur(x: np.ndarray, kernel: Kernel2D) -> np.ndarray:
    """Reflect-padded cross-correlation of a [C,H,W] array with the kernel."""
    k = kernel.taps.astype(np.float64)
    r = kernel.size // 2
    xp = ad._pad2d(x.astype(np.float64)[:, None], r, r, "reflect")
    out = ad._corr2d(xp, k[None, None], 1)
    return out[:, 0]


def degrade(x: ImageBuf, spec: DegradationSpec, rng: Rng | None = None) -> ImageBuf:
    """Apply blur -> bicubic downsample -> AWGN -> clamp (the forward model)."""
    s = spec.scale
    if x.height % s or x.width % s:
        raise ValueError(f"extents {x.height}x{x.width} not divisible by scale {s}")
    out = blur(x.data, spec.kernel)
    if s > 1:
        with no_grad():
            out = ad.bicubic_resample(Tensor(out), s, "down").data
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return ImageBuf(np.clip(out, 0.0, 1.0))


# -- deep linear degradation network ---------------------------------------


@dataclass
class GdNet:
    """Three bias-free single-kernel conv layers plus fixed bicubic downsampling.

    Each layer holds one spatial kernel applied identically to every channel,
    so the whole network is a linear operator for fixed weights.
    """

    scale: int
    layers: list  # Tensor[1,1,k,k] each, grad-enabled

    def parameters(self):
        return list(self.layers)


def _isotropic_gaussian(size: int, sigma: float = 1.0) -> np.ndarray:
    g = gaussian_kernel(size, sigma ** 2, sigma ** 2, 0.0)
    return g / g.sum()


def gd_init(scale: int, rng: Rng | None = None) -> GdNet:
    """Fresh degradation net: every layer an isotropic sigma=1 Gaussian.

    Deterministic; the rng parameter is reserved for perturbed init.
    """
    if scale not in GD_LAYER_SIZES:
        raise ValueError(f"unsupported scale {scale}; expected one of {sorted(GD_LAYER_SIZES)}")
    layers = []
    for k in GD_LAYER_SIZES[scale]:
        taps = _isotropic_gaussian(k).astype(np.float32)
        layers.append(Tensor(taps[None, None], requires_grad=True))
    return GdNet(scale, layers)


def gd_forward(net: GdNet, x: Tensor) -> Tensor:
    """Degrade [C,H,W] or [N,C,H,W] input: three same-size convs, bicubic down."""
    squeeze = len(x.shape) == 3
    if squeeze:
        x = ad.reshape(x, (1,) + tuple(x.shape))
    n, c, h, w = x.shape
    s = net.scale
    if h % s or w % s:
        raise ValueError(f"extents {h}x{w} not divisible by scale {s}")
    # channels are filtered identically: fold them into the batch axis
    out = ad.reshape(x, (n * c, 1, h, w))
    for layer in net.layers:
        out = ad.conv2d(out, layer, padding="zero", stride=1)
    out = ad.bicubic_resample(out, s, "down")
    out = ad.reshape(out, (n, c, h // s, w // s))
    if squeeze:
        out = ad.reshape(out, (c, h // s, w // s))
    return out


def effective_kernel(net: GdNet, support: int | None = None) -> Kernel2D:
    """Recover the single kernel equivalent to the three conv layers.

    Runs a centered unit impulse through the conv stack (downsampler
    excluded) on a zero field and flips the response, which by linearity
    equals the plain discrete convolution of the layer kernels.  Normalized
    to unit sum.
    """
    extents = [layer.shape[-1] for layer in net.layers]
    min_support = sum(extents) - 2
    if support is None:
        support = min_support
    if support % 2 == 0 or support < min_support:
        raise ValueError(
            f"support must be odd and >= {min_support} (layer extents {extents}), got {support}")
    field = np.zeros((1, 1, support, support), dtype=np.float32)
    field[0, 0, support // 2, support // 2] = 1.0
    with no_grad():
        out = Tensor(field)
        for layer in net.layers:
            out = ad.conv2d(out, layer, padding="zero", stride=1)
    response = out.data[0, 0][::-1, ::-1]
    return Kernel2D(support, response)


def gd_to_params(net: GdNet):
    """Pack the degradation net into a serializable parameter bundle."""
    from .models import ModelParams

    params = ModelParams("Gd")
    for i, layer in enumerate(net.layers):
        params.add(f"layer{i}.w", layer.data)
    return params


def gd_from_params(params) -> GdNet:
    names = sorted(params.tensors)
    layers = []
    for name in names:
        t = params[name]
        t.requires_grad = True
        layers.append(t)
    sizes = tuple(t.shape[-1] for t in layers)
    scale = next((s for s, ext in GD_LAYER_SIZES.items() if ext == sizes), None)
    if scale is None:
        raise ValueError(f"layer extents {sizes} match no supported scale")
    return GdNet(scale, layers)


def kernel_correlation(a: Kernel2D, b: Kernel2D) -> float:
    """Normalized cross-correlation between two kernels at the shared center."""
    size = max(a.size, b.size)

    def centered(k: Kernel2D) -> np.ndarray:
        pad = (size - k.size) // 2
        return np.pad(k.taps, pad)

    ta, tb = centered(a).ravel(), centered(b).ravel()
    na, nb = np.linalg.norm(ta), np.linalg.norm(tb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(ta, tb) / (na * nb))
