"""Online adaptation: losses, phased optimization, and the update loop.

The degradation net learns from the test image (internal branch), the
reconstructor learns from external HR images degraded by the current
degradation estimate (external branch), and an optional LR-patch
discriminator sharpens the degradation estimate adversarially.  In
``separate`` mode the three parameter sets are stepped by disjoint losses
in isolated phases; ``joint`` mode steps everything on one combined loss.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor, no_grad
from .degradation import (DegradationSpec, GdNet, Kernel2D, degrade,
                          effective_kernel, gd_forward, gd_init)
from .imaging import ImageBuf, Rng, psnr, sample_patches, ssim
from .models import (DlConfig, GrConfig, ModelParams, dl_forward, gr_forward,
                     init_params)

VARIANTS = ("IBSR", "EBSR", "IB-EBSR", "ONSR", "IB-EB-GSR")
MODES = ("separate", "joint")


class NumericalAbort(ArithmeticError):
    """A loss went non-finite; carries the step index and loss name."""

    def __init__(self, step: int, loss_name: str):
        super().__init__(f"non-finite {loss_name} at step {step}")
        self.step = step
        self.loss_name = loss_name


@dataclass
class TrainConfig:
    """Every knob of the online loop."""

    steps: int = 500
    test_interval: int = 10
    n_patches: int = 10
    lr_patch: int = 32
    lambda_gan: float = 1.0
    lr_gr: float = 1e-4
    lr_gd: float = 2e-4
    lr_dl: float = 2e-4
    mode: str = "separate"
    variant: str = "ONSR"
    blind: bool = True
    gt_kernel: Kernel2D | None = None
    external_limit: int | None = None
    seed: int = 0
    scale: int = 2
    gr_config: GrConfig | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.test_interval < 1:
            raise ValueError("test_interval must be >= 1")
        if self.n_patches < 1:
            raise ValueError("n_patches must be >= 1")
        if self.lambda_gan < 0:
            raise ValueError("lambda_gan must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.blind and self.gt_kernel is None:
            raise ValueError("blind=False requires gt_kernel")
        if self.gr_config is None:
            self.gr_config = GrConfig(scale=self.scale)
        if self.gr_config.scale != self.scale:
            raise ValueError("gr_config.scale disagrees with cfg.scale")

    @property
    def uses_ib(self) -> bool:
        return self.variant != "EBSR"

    @property
    def uses_eb(self) -> bool:
        return self.variant != "IBSR"

    @property
    def uses_gan(self) -> bool:
        return self.variant in ("ONSR", "IB-EB-GSR", "IBSR") and self.lambda_gan > 0

    @property
    def uses_hr_gan(self) -> bool:
        return self.variant == "IB-EB-GSR" and self.lambda_gan > 0


@dataclass
class ExternalPool:
    """HR images backing the external branch, optionally capped."""

    images: list
    scale: int = 2
    lr_patch: int = 32
    limit: int | None = None

    def __post_init__(self):
        if self.limit is not None:
            self.images = self.images[:self.limit]
        if not self.images:
            raise ValueError("external HR pool is empty")
        need = self.scale * self.lr_patch
        for i, img in enumerate(self.images):
            if img.height < need or img.width < need:
                raise ValueError(
                    f"pool image {i} is {img.height}x{img.width}; needs >= {need}x{need}")

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        """[n,3,s*lr_patch,s*lr_patch] batch of HR patches from random images."""
        size = self.scale * self.lr_patch
        out = np.empty((n, 3, size, size), dtype=np.float32)
        for j in range(n):
            idx = int(rng.integers(0, len(self.images)))
            img = self.images[idx].to_rgb()
            r = int(rng.integers(0, img.height - size + 1))
            c = int(rng.integers(0, img.width - size + 1))
            out[j] = img.data[:, r:r + size, c:c + size]
        return out


@contextlib.contextmanager
def frozen(params):
    """Temporarily disable grad accumulation into the given tensors."""
    ts = list(params)
    prev = [t.requires_grad for t in ts]
    for t in ts:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, p in zip(ts, prev):
            t.requires_grad = p


# -- losses -----------------------------------------------------------------


def loss_margin(gd: GdNet) -> int:
    """LR-side border width polluted by the degradation net's zero padding.

    The conv stack reaches sum(extents)//2 - 1 pixels past any edge at HR
    resolution; the antialiased downsampler widens that slightly.  Patch
    losses exclude this ring so border artifacts never become a training
    signal (the full-image interior is what inference cares about).
    """
    support = sum(layer.shape[-1] for layer in gd.layers) - 2
    return int(np.ceil(support / (2 * gd.scale))) + 2


def loss_ib(y_patches: Tensor, gr, gd: GdNet, detach_gr: bool = True) -> Tensor:
    """Internal-branch reconstruction loss: L1(y, Gd(Gr(y))), border-cropped.

    With ``detach_gr`` (separate mode) the reconstructor stage runs without
    gradient recording, so only the degradation net learns from it.
    """
    if y_patches.size == 0:
        raise ValueError("empty internal batch")
    if detach_gr:
        with no_grad():
            sr = gr(y_patches)
        sr = sr.detach()
    else:
        sr = gr(y_patches)
    fake = gd_forward(gd, sr)
    m = loss_margin(gd)
    return ad.l1_loss(ad.crop2d(fake, m), ad.crop2d(y_patches, m))


def loss_eb(x_patches: Tensor, gr, gd: GdNet) -> Tensor:
    """External-branch loss: degrade HR patches (detached), reconstruct, L1.

    The degraded patches are cropped to their valid interior before the
    reconstructor sees them, so it trains on the same statistics it meets
    at full-image inference time.
    """
    if x_patches.size == 0:
        raise ValueError("empty external batch")
    with no_grad():
        y_e = gd_forward(gd, x_patches)
    m = loss_margin(gd)
    sr = gr(ad.crop2d(y_e.detach(), m))
    return ad.l1_loss(sr, ad.crop2d(x_patches, m * gd.scale))


def gan_losses(y_patches: Tensor, x_patches: Tensor, gd: GdNet, dl) -> tuple:
    """Non-saturating GAN split on 32x32 LR patches.

    Fakes are the degradation net's output on HR patches, gradient path
    intact.  Returns (d_loss, g_loss); d_loss sees the fakes detached, and
    the discriminator parameters are grad-disabled while g_loss is built.
    """
    fake = gd_forward(gd, x_patches)
    d_loss = ad.add(ad.bce_with_logits(dl(y_patches), 1.0),
                    ad.bce_with_logits(dl(fake.detach()), 0.0))
    with frozen(dl.params.parameters()):
        g_loss = ad.bce_with_logits(dl(fake), 1.0)
    return d_loss, g_loss


# -- session ----------------------------------------------------------------


@dataclass
class SessionState:
    step: int = 0
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (step, ImageBuf)


class _Net:
    """Config + params closed over a forward function."""

    def __init__(self, forward, cfg, params: ModelParams):
        self._forward = forward
        self.cfg = cfg
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        return self._forward(self.cfg, self.params, x)


class Session:
    """One online-adaptation run for one LR image."""

    def __init__(self, lr_img: ImageBuf, pool: ExternalPool | None,
                 gr_init: ModelParams, cfg: TrainConfig,
                 gt_hr: ImageBuf | None = None):
        s = cfg.scale
        lr_img = lr_img.to_rgb()
        if lr_img.height % s or lr_img.width % s:
            raise ValueError(
                f"LR extents {lr_img.height}x{lr_img.width} not divisible by scale {s}")
        if lr_img.height < cfg.lr_patch or lr_img.width < cfg.lr_patch:
            raise ValueError("LR image smaller than the patch size")
        needs_pool = cfg.uses_eb or (cfg.uses_gan and cfg.variant != "IBSR")
        if needs_pool and pool is None:
            raise ValueError("this variant needs an external HR pool")
        self.cfg = cfg
        self.lr_img = lr_img
        self.pool = pool
        self.gt_hr = gt_hr
        self.state = SessionState()

        root = Rng(cfg.seed)
        self.rng_lr = root.stream("lr_patches")
        self.rng_hr = root.stream("hr_patches")

        gr_params = gr_init.copy()  # sessions never mutate the caller's init
        self.gr = _Net(gr_forward, cfg.gr_config, gr_params)
        self.opt_gr = Adam(gr_params.parameters(), lr=cfg.lr_gr)

        if cfg.blind:
            self.gd = gd_init(s, root.stream("init_gd"))
            self.opt_gd = Adam(self.gd.parameters(), lr=cfg.lr_gd)
            self.gd_init_bytes = self._gd_bytes()
        else:
            self.gd = None
            self.opt_gd = None

        if cfg.blind and cfg.uses_gan:
            dcfg = DlConfig()
            dparams = init_params(dcfg, root.stream("init_dl"))
            self.dl = _Net(dl_forward, dcfg, dparams)
            self.opt_dl = Adam(dparams.parameters(), lr=cfg.lr_dl)
        else:
            self.dl = None
            self.opt_dl = None

        if cfg.blind and cfg.uses_hr_gan:
            hcfg = DlConfig.for_input(s * cfg.lr_patch)
            hparams = init_params(hcfg, root.stream("init_dh"))
            self.dh = _Net(dl_forward, hcfg, hparams)
            self.opt_dh = Adam(hparams.parameters(), lr=cfg.lr_dl)
        else:
            self.dh = None
            self.opt_dh = None

    # -- helpers ------------------------------------------------------------

    def _gd_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(t.data).tobytes() for t in self.gd.layers)

    def _project_gd(self):
        # blur kernels have unit sum, so keep each learned layer in that family;
        # without this the coupled Gd/Gr optimization has a free gain
        # (Gd dims, Gr brightens) that wrecks full-image inference
        for layer in self.gd.layers:
            s = float(layer.data.sum())
            if abs(s) > 1e-3:
                layer.data /= s

    def _sample_lr(self) -> Tensor:
        patches, _ = sample_patches(self.lr_img, self.cfg.n_patches,
                                    self.cfg.lr_patch, self.rng_lr)
        return Tensor(np.stack([p.data for p in patches]))

    def _sample_hr(self) -> Tensor:
        return Tensor(self.pool.sample(self.cfg.n_patches, self.rng_hr))

    def _zero_all(self):
        for opt in (self.opt_gr, self.opt_gd, self.opt_dl, self.opt_dh):
            if opt is not None:
                opt.zero_grad()

    def _scalar(self, t: Tensor, name: str) -> float:
        v = t.item()
        if not np.isfinite(v):
            raise NumericalAbort(self.state.step, name)
        return v

    # -- one iteration ------------------------------------------------------

    def update_step(self) -> dict:
        cfg = self.cfg
        self.state.step += 1
        record = {"step": self.state.step}
        try:
            if not cfg.blind:
                self._nonblind_step(record)
            elif cfg.mode == "separate":
                self._separate_step(record)
            else:
                self._joint_step(record)
        except NonFiniteError as exc:
            raise NumericalAbort(self.state.step, str(exc)) from exc
        self.state.metrics.append(record)
        return record

    def _separate_step(self, record: dict):
        cfg = self.cfg
        y = self._sample_lr()
        need_x = cfg.uses_eb or (cfg.uses_gan and cfg.variant != "IBSR")
        x = self._sample_hr() if need_x else None

        if cfg.uses_ib:
            # phase A: degradation net (and, for IBSR, the reconstructor)
            self._zero_all()
            train_gr_on_ib = cfg.variant == "IBSR"
            if train_gr_on_ib:
                sr_ib = self.gr(y)
            else:
                with no_grad():
                    sr_ib = self.gr(y)
                sr_ib = sr_ib.detach()
            fake_ib = gd_forward(self.gd, sr_ib)
            m = loss_margin(self.gd)
            l_ib = ad.l1_loss(ad.crop2d(fake_ib, m), ad.crop2d(y, m))
            record["l_ib"] = self._scalar(l_ib, "l_ib")
            total = l_ib
            if cfg.uses_gan:
                fake = fake_ib if cfg.variant == "IBSR" else gd_forward(self.gd, x)
                with frozen(self.dl.params.parameters()):
                    g_loss = ad.bce_with_logits(self.dl(fake), 1.0)
                record["l_gan_g"] = self._scalar(g_loss, "l_gan_g")
                total = ad.add(total, ad.scalar_mul(g_loss, cfg.lambda_gan))
            total.backward()
            self.opt_gd.step()
            self._project_gd()
            if train_gr_on_ib:
                self.opt_gr.step()
            self._zero_all()

        if cfg.uses_eb:
            # phase B: reconstructor only, on detached degraded externals
            l_eb = loss_eb(x, self.gr, self.gd)
            record["l_eb"] = self._scalar(l_eb, "l_eb")
            if cfg.uses_hr_gan:
                sr_y = self.gr(self._sample_lr_for_dh())
                with frozen(self.dh.params.parameters()):
                    g_hr = ad.bce_with_logits(self.dh(sr_y), 1.0)
                record["l_gan_g_hr"] = self._scalar(g_hr, "l_gan_g_hr")
                l_eb = ad.add(l_eb, ad.scalar_mul(g_hr, cfg.lambda_gan))
            l_eb.backward()
            self.opt_gr.step()
            self._zero_all()

        if cfg.uses_gan:
            # phase C: discriminator(s) only
            with no_grad():
                if cfg.variant == "IBSR":
                    fake_d = gd_forward(self.gd, self.gr(y))
                else:
                    fake_d = gd_forward(self.gd, x)
            d_loss = ad.add(ad.bce_with_logits(self.dl(y), 1.0),
                            ad.bce_with_logits(self.dl(fake_d.detach()), 0.0))
            record["l_gan_d"] = self._scalar(d_loss, "l_gan_d")
            d_loss.backward()
            self.opt_dl.step()
            self._zero_all()
            if cfg.uses_hr_gan:
                with no_grad():
                    sr_y = self.gr(self._sample_lr_for_dh())
                dh_loss = ad.add(ad.bce_with_logits(self.dh(x), 1.0),
                                 ad.bce_with_logits(self.dh(sr_y.detach()), 0.0))
                record["l_gan_d_hr"] = self._scalar(dh_loss, "l_gan_d_hr")
                dh_loss.backward()
                self.opt_dh.step()
                self._zero_all()

    def _sample_lr_for_dh(self) -> Tensor:
        # the HR-side discriminator judges SR of fresh internal patches
        patches, _ = sample_patches(self.lr_img, self.cfg.n_patches,
                                    self.cfg.lr_patch, self.rng_lr)
        return Tensor(np.stack([p.data for p in patches]))

    def _joint_step(self, record: dict):
        cfg = self.cfg
        y = self._sample_lr()
        need_x = cfg.uses_eb or (cfg.uses_gan and cfg.variant != "IBSR")
        x = self._sample_hr() if need_x else None
        self._zero_all()
        total = None
        fake_ib = None
        m = loss_margin(self.gd)
        if cfg.uses_ib:
            sr_ib = self.gr(y)
            fake_ib = gd_forward(self.gd, sr_ib)
            l_ib = ad.l1_loss(ad.crop2d(fake_ib, m), ad.crop2d(y, m))
            record["l_ib"] = self._scalar(l_ib, "l_ib")
            total = l_ib
        y_e = None
        if cfg.uses_eb:
            y_e = gd_forward(self.gd, x)  # no detachment in joint mode
            sr_e = self.gr(ad.crop2d(y_e, m))
            l_eb = ad.l1_loss(sr_e, ad.crop2d(x, m * cfg.scale))
            record["l_eb"] = self._scalar(l_eb, "l_eb")
            total = l_eb if total is None else ad.add(total, l_eb)
        if cfg.uses_gan:
            fake = fake_ib if cfg.variant == "IBSR" else y_e
            if fake is None:
                fake = gd_forward(self.gd, x)
            with frozen(self.dl.params.parameters()):
                g_loss = ad.bce_with_logits(self.dl(fake), 1.0)
            record["l_gan_g"] = self._scalar(g_loss, "l_gan_g")
            total = ad.add(total, ad.scalar_mul(g_loss, cfg.lambda_gan))
        total.backward()
        self.opt_gd.step()
        self._project_gd()
        self.opt_gr.step()
        self._zero_all()
        if cfg.uses_gan:
            with no_grad():
                if cfg.variant == "IBSR":
                    fake_d = gd_forward(self.gd, self.gr(y))
                else:
                    fake_d = gd_forward(self.gd, x)
            d_loss = ad.add(ad.bce_with_logits(self.dl(y), 1.0),
                            ad.bce_with_logits(self.dl(fake_d.detach()), 0.0))
            record["l_gan_d"] = self._scalar(d_loss, "l_gan_d")
            d_loss.backward()
            self.opt_dl.step()
            self._zero_all()

    def _nonblind_step(self, record: dict):
        # ground-truth degradation replaces the degradation net; only the
        # reconstructor updates
        cfg = self.cfg
        x = self._sample_hr()
        spec = DegradationSpec(cfg.gt_kernel, cfg.scale, 0.0)
        y_e = np.stack([degrade(ImageBuf(p), spec).data for p in x.data])
        sr = self.gr(Tensor(y_e))
        l_eb = ad.l1_loss(sr, x)
        record["l_eb"] = self._scalar(l_eb, "l_eb")
        self._zero_all()
        l_eb.backward()
        self.opt_gr.step()
        self._zero_all()

    # -- full-image inference -----------------------------------------------

    def infer(self) -> ImageBuf:
        with no_grad():
            sr = self.gr(Tensor(self.lr_img.data))
        return ImageBuf(np.clip(sr.data, 0.0, 1.0))

    def kernel_estimate(self) -> Kernel2D:
        if not self.cfg.blind:
            return self.cfg.gt_kernel
        return effective_kernel(self.gd)


@dataclass
class AdaptResult:
    sr_final: ImageBuf
    checkpoints: list  # (step, ImageBuf)
    kernel_estimate: Kernel2D
    metrics: list
    session: Session


def _run_loop(session: Session) -> AdaptResult:
    cfg = session.cfg
    for i in range(1, cfg.steps + 1):
        record = session.update_step()
        if i % cfg.test_interval == 0:
            sr = session.infer()
            session.state.checkpoints.append((i, sr))
            if session.gt_hr is not None:
                record["psnr"] = psnr(session.gt_hr, sr, border_crop=cfg.scale)
                record["ssim"] = ssim(session.gt_hr, sr)
    return AdaptResult(session.infer(), session.state.checkpoints,
                       session.kernel_estimate(), session.state.metrics, session)


def online_adapt(lr_img: ImageBuf, hr_pool: ExternalPool, gr_init: ModelParams,
                 cfg: TrainConfig, gt_hr: ImageBuf | None = None) -> AdaptResult:
    """Run the full blind online loop and return SR output, recovered kernel,
    checkpoints, and the per-step metrics log."""
    session = Session(lr_img, hr_pool, gr_init, cfg, gt_hr=gt_hr)
    return _run_loop(session)


def nonblind_adapt(lr_img: ImageBuf, hr_pool: ExternalPool, gr_init: ModelParams,
                   gt_kernel: Kernel2D, cfg: TrainConfig,
                   gt_hr: ImageBuf | None = None) -> AdaptResult:
    """Adapt the reconstructor against the known ground-truth degradation."""
    if gt_kernel is None:
        raise ValueError("nonblind_adapt requires a ground-truth kernel")
    cfg = TrainConfig(**{**cfg.__dict__, "blind": False, "gt_kernel": gt_kernel,
                         "gr_config": cfg.gr_config})
    session = Session(lr_img, hr_pool, gr_init, cfg, gt_hr=gt_hr)
    return _run_loop(session)


def pretrain_gr(hr_pool: ExternalPool, scale: int, steps: int,
                cfg: TrainConfig | None = None) -> ModelParams:
    """Offline bicubic pretraining of the reconstructor.

    HR patches are downsampled with plain bicubic (no kernel, no noise) and
    the reconstructor minimizes L1 against the originals.
    """
    if cfg is None:
        cfg = TrainConfig(scale=scale)
    root = Rng(cfg.seed)
    params = init_params(cfg.gr_config, root.stream("init_gr"))
    opt = Adam(params.parameters(), lr=cfg.lr_gr)
    rng_hr = root.stream("pretrain_patches")
    gr = _Net(gr_forward, cfg.gr_config, params)
    for i in range(1, steps + 1):
        x = Tensor(hr_pool.sample(cfg.n_patches, rng_hr))
        with no_grad():
            y = ad.bicubic_resample(x, scale, "down")
        sr = gr(y.detach())
        loss = ad.l1_loss(sr, x)
        v = loss.item()
        if not np.isfinite(v):
            raise NumericalAbort(i, "pretrain_l1")
        opt.zero_grad()
        loss.backward()
        opt.step()
        opt.zero_grad()
    return params
