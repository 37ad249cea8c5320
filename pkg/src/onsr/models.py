"""Reconstruction network, patch discriminator, and parameter files.

The reconstructor is a residual-in-residual dense network (RRDB lineage)
with a nearest+conv upsampler; the discriminator is a VGG-style stride-2
ladder ending in one logit.  Both are pure functions of a ``ModelParams``
bundle, which round-trips bit-exactly through a small binary format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import Rng

MAGIC = b"ONSR"
FORMAT_VERSION = 1
ROLE_TAGS = {"Gr": 0, "Gd": 1, "Dl": 2}
_TAG_ROLES = {v: k for k, v in ROLE_TAGS.items()}


class ModelFormatError(ValueError):
    """Malformed or unsupported model file."""


@dataclass
class GrConfig:
    """Reconstructor architecture knobs.

    The ``lite`` defaults run at desk scale; ``paper_preset`` matches the
    full-size 23-block network.
    """

    num_blocks: int = 3
    base_channels: int = 32
    growth_channels: int = 16
    dense_layers_per_block: int = 4
    residual_scale: float = 0.2
    scale: int = 2

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")

    @staticmethod
    def paper_preset(scale: int = 2) -> "GrConfig":
        return GrConfig(num_blocks=23, base_channels=64, growth_channels=32, scale=scale)


@dataclass
class DlConfig:
    """VGG-style patch discriminator: stride-2 conv ladder down to 2x2, one logit."""

    input_size: int = 32
    channels: tuple = (32, 64, 128, 256)
    lrelu_slope: float = 0.2

    def __post_init__(self):
        if self.input_size != 2 * 2 ** len(self.channels):
            raise ValueError(
                f"input_size {self.input_size} needs {len(self.channels)} stride-2 stages "
                f"to reach 2x2; expected {2 * 2 ** len(self.channels)}")

    @staticmethod
    def for_input(input_size: int) -> "DlConfig":
        n = int(np.log2(input_size)) - 1
        if 2 * 2 ** n != input_size:
            raise ValueError(f"input_size must be a power of two >= 4, got {input_size}")
        ladder = tuple(min(32 * 2 ** i, 256) for i in range(n))
        return DlConfig(input_size=input_size, channels=ladder)


@dataclass
class ModelParams:
    """Ordered name -> Tensor map with a role tag, serializable."""

    role: str
    tensors: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.role not in ROLE_TAGS:
            raise ValueError(f"role must be one of {sorted(ROLE_TAGS)}, got {self.role!r}")

    def add(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def num_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        out = ModelParams(self.role)
        for name, t in self.tensors.items():
            out.add(name, t.data.copy(), requires_grad=t.requires_grad)
        return out

    def state_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(t.data).tobytes()
                        for t in self.tensors.values())


# -- parameter naming / shapes ----------------------------------------------


def _gr_shapes(cfg: GrConfig):
    """Ordered (name, shape) pairs for the reconstructor; biases everywhere
    except the zero-init final conv."""
    c, g, L = cfg.base_channels, cfg.growth_channels, cfg.dense_layers_per_block
    out = [("head.w", (c, 3, 3, 3)), ("head.b", (c,))]
    for bi in range(cfg.num_blocks):
        for di in range(3):
            for li in range(L):
                name = f"block{bi}.dense{di}.conv{li}"
                out += [(name + ".w", (g, c + li * g, 3, 3)), (name + ".b", (g,))]
            name = f"block{bi}.dense{di}.fuse"
            out += [(name + ".w", (c, c + L * g, 3, 3)), (name + ".b", (c,))]
    out += [("fuse.w", (c, c, 3, 3)), ("fuse.b", (c,))]
    for ui in range(cfg.scale // 2):
        out += [(f"up{ui}.w", (c, c, 3, 3)), (f"up{ui}.b", (c,))]
    out += [("tail.w", (3, c, 3, 3))]
    return out


def _dl_shapes(cfg: DlConfig):
    out = []
    prev = 3
    for i, ch in enumerate(cfg.channels):
        out += [(f"stage{i}.w", (ch, prev, 3, 3)), (f"stage{i}.b", (ch,))]
        prev = ch
    out += [("head.w", (1, prev * 4)), ("head.b", (1,))]
    return out


def init_params(cfg, rng: Rng) -> ModelParams:
    """He fan-in random init; biases zero; the reconstructor's final conv zero."""
    if isinstance(cfg, GrConfig):
        role, shapes = "Gr", _gr_shapes(cfg)
    elif isinstance(cfg, DlConfig):
        role, shapes = "Dl", _dl_shapes(cfg)
    else:
        raise TypeError(f"unsupported config type {type(cfg).__name__}")
    params = ModelParams(role)
    for name, shape in shapes:
        if len(shape) == 1 or name == "tail.w":
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params.add(name, data)
    return params


def _check_params(cfg, params: ModelParams, shapes) -> None:
    for name, shape in shapes:
        t = params.tensors.get(name)
        if t is None:
            raise ValueError(f"params missing tensor {name!r}")
        if t.shape != tuple(shape):
            raise ValueError(f"params tensor {name!r} has shape {t.shape}, expected {shape}")


# -- forward passes ---------------------------------------------------------


def _dense_block(x, params, prefix, cfg):
    feats = x
    for li in range(cfg.dense_layers_per_block):
        y = ad.conv2d(feats, params[f"{prefix}.conv{li}.w"], params[f"{prefix}.conv{li}.b"])
        y = ad.leaky_relu(y, 0.2)
        feats = ad.concat([feats, y], axis=1)
    fused = ad.conv2d(feats, params[f"{prefix}.fuse.w"], params[f"{prefix}.fuse.b"])
    return ad.add(x, ad.scalar_mul(fused, cfg.residual_scale))


def _rrdb(x, params, prefix, cfg):
    # outer residual over three chained dense blocks, same scaling as inside
    z = x
    for di in range(3):
        z = _dense_block(z, params, f"{prefix}.dense{di}", cfg)
    return ad.add(x, ad.scalar_mul(ad.sub(z, x), cfg.residual_scale))


def gr_forward(cfg: GrConfig, params: ModelParams, y: Tensor) -> Tensor:
    """Super-resolve [3,h,w] or [N,3,h,w] by the configured scale factor."""
    _check_params(cfg, params, _gr_shapes(cfg))
    squeeze = len(y.shape) == 3
    if squeeze:
        y = ad.reshape(y, (1,) + tuple(y.shape))
    if y.shape[1] != 3:
        raise ValueError(f"expected 3 input channels, got {y.shape[1]}")
    shallow = ad.conv2d(y, params["head.w"], params["head.b"])
    feat = shallow
    for bi in range(cfg.num_blocks):
        feat = _rrdb(feat, params, f"block{bi}", cfg)
    feat = ad.conv2d(feat, params["fuse.w"], params["fuse.b"])
    feat = ad.add(feat, shallow)
    for ui in range(cfg.scale // 2):
        feat = ad.nearest_upsample(feat, 2)
        feat = ad.leaky_relu(ad.conv2d(feat, params[f"up{ui}.w"], params[f"up{ui}.b"]), 0.2)
    out = ad.conv2d(feat, params["tail.w"])
    if squeeze:
        out = ad.reshape(out, tuple(out.shape[1:]))
    return out


def dl_forward(cfg: DlConfig, params: ModelParams, patch: Tensor) -> Tensor:
    """One logit per patch; input spatial extent must equal cfg.input_size."""
    _check_params(cfg, params, _dl_shapes(cfg))
    squeeze = len(patch.shape) == 3
    if squeeze:
        patch = ad.reshape(patch, (1,) + tuple(patch.shape))
    n, c, h, w = patch.shape
    if h != cfg.input_size or w != cfg.input_size:
        raise ValueError(f"discriminator expects {cfg.input_size}x{cfg.input_size} patches, got {h}x{w}")
    feat = patch
    for i in range(len(cfg.channels)):
        feat = ad.conv2d(feat, params[f"stage{i}.w"], params[f"stage{i}.b"], stride=2)
        feat = ad.leaky_relu(feat, cfg.lrelu_slope)
    flat = ad.reshape(feat, (n, cfg.channels[-1] * 4))
    logit = ad.linear(flat, params["head.w"], params["head.b"])
    logit = ad.reshape(logit, (n,))
    if squeeze:
        logit = ad.reshape(logit, ())
    return logit


# -- serialization ----------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBI", FORMAT_VERSION, ROLE_TAGS[params.role],
                             len(params.tensors)))
        for name, t in params.tensors.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", 0, len(t.shape)))
            for d in t.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise ModelFormatError(f"truncated model file {path}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise ModelFormatError(f"not a model file: {path}")
    version, tag, count = struct.unpack("<HBI", take(7))
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version} (supported: {FORMAT_VERSION})")
    if tag not in _TAG_ROLES:
        raise ModelFormatError(f"unknown role tag {tag}")
    params = ModelParams(_TAG_ROLES[tag])
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != 0:
            raise ModelFormatError(f"unsupported dtype code {dtype} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        payload = take(4 * int(np.prod(dims)) if rank else 4)
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if name in params.tensors:
            raise ModelFormatError(f"duplicate tensor name {name!r} in {path}")
        params.add(name, data)
    if off != len(raw):
        raise ModelFormatError(f"trailing bytes in model file {path}")
    return params
