"""End-to-end acceptance suite.

Eleven numbered checks, each reporting a single pass/fail line (printed to
the terminal summary by ``conftest.py``):

 1. gradient correctness of every differentiable op (finite differences)
 2. brute-force oracle equivalence of conv2d and bicubic_resample
 3. degradation invariants (identity, constant preservation, kernel draws)
 4. effective-kernel identity (impulse extraction vs direct convolution)
 5. metric unit checks (PSNR / SSIM closed forms)
 6. blur-kernel recovery from a single LR image
 7. PSNR gain from online adaptation over a fixed pretrained restorer
 8. separate-phase optimization beats joint optimization
 9. non-blind adaptation (true kernel) beats blind adaptation
10. bit-for-bit determinism of the adapt command
11. variant contracts and phase isolation

Checks 6-9 adapt real sessions and together take ~40 minutes on one CPU
core; the rest finish in a few minutes.
"""
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, check_grad
from onsr import autodiff as ad
from onsr import trainer as tr
from onsr.autodiff import Tensor
from onsr.degradation import (DegradationSpec, Kernel2D, degrade,
                              effective_kernel, gd_forward, gd_init,
                              kernel_correlation, synth_kernel)
from onsr.imaging import ImageBuf, Rng, psnr, save_png, ssim
from onsr.models import GrConfig, init_params


def report(num, desc, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    suffix = f"  [{detail}]" if detail else ""
    line = f"[{tag}] check {num:2d}: {desc}{suffix}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


SCALE = 2
TINY = GrConfig(num_blocks=1, base_channels=16, growth_channels=8, scale=SCALE)


def make_img(seed, h, w):
    """Sharp synthetic scene: smooth base, hard-edged boxes, oriented texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.zeros((3, h, w))
    for c in range(3):
        img[c] = 0.5 + 0.2 * np.cos(2 * np.pi * (rng.uniform(0.5, 2) * yy +
                                                 rng.uniform(0.5, 2) * xx))
    for _ in range(20):
        r0, c0 = rng.integers(0, h - 6), rng.integers(0, w - 6)
        rh, cw = rng.integers(4, max(5, h // 4)), rng.integers(4, max(5, w // 4))
        img[:, r0:r0 + rh, c0:c0 + cw] = rng.uniform(0.05, 0.95, 3)[:, None, None]
    for _ in range(8):
        r0, c0 = rng.integers(0, h - 16), rng.integers(0, w - 16)
        sz = int(rng.integers(12, min(24, h - r0, w - c0)))
        f = rng.uniform(3, 6)
        th = rng.uniform(0, np.pi)
        sy, sx = np.meshgrid(np.arange(sz), np.arange(sz), indexing="ij")
        img[:, r0:r0 + sz, c0:c0 + sz] += \
            0.25 * np.sin(2 * np.pi * f * (np.cos(th) * sy + np.sin(th) * sx) / sz)
    return ImageBuf(np.clip(img, 0, 1).astype(np.float32))


@pytest.fixture(scope="module")
def pool():
    return tr.ExternalPool([make_img(900 + i, 128, 128) for i in range(4)],
                           scale=SCALE)


@pytest.fixture(scope="module")
def pretrained(pool):
    """Bicubic-pretrained lite restorer, shared by checks 6-9."""
    cfg = tr.TrainConfig(n_patches=8, scale=SCALE, gr_config=TINY,
                         lr_gr=2e-4, seed=0)
    t0 = time.time()
    params = tr.pretrain_gr(pool, SCALE, 400, cfg)
    return params, time.time() - t0


@pytest.fixture(scope="module")
def gain_suite():
    """Ten HR/LR pairs with strongly non-bicubic anisotropic blur."""
    cases = []
    for i in range(10):
        hr = make_img(i, 128, 128)
        k, _ = synth_kernel(Rng(70 + i).stream("kernel"), 15,
                            lambda_range=(2.5, 5.0))
        cases.append((hr, k, degrade(hr, DegradationSpec(k, SCALE))))
    return cases


def adapt_cfg(seed, mode="separate"):
    return tr.TrainConfig(steps=200, test_interval=20, n_patches=6,
                          lambda_gan=0.0, lr_gr=5e-4, mode=mode,
                          scale=SCALE, gr_config=TINY, seed=seed)


@pytest.fixture(scope="module")
def blind_runs(pool, pretrained, gain_suite):
    """Separate-mode blind adaptation over the suite; shared by checks 7-9."""
    pre, pre_secs = pretrained
    out = []
    t0 = time.time()
    for i, (hr, _k, lr) in enumerate(gain_suite):
        cfg = adapt_cfg(seed=i)
        sess = tr.Session(lr, pool, pre, cfg, gt_hr=hr)
        p0 = psnr(hr, sess.infer(), border_crop=2)
        res = tr._run_loop(sess)
        out.append((p0, psnr(hr, res.sr_final, border_crop=2), res))
    return out, pre_secs + (time.time() - t0)


# -- 1: gradients -----------------------------------------------------------


def test_01_every_op_passes_gradient_checks():
    t0 = time.time()
    seeds = range(20)

    def stack_loss(ts):
        x, w1, w2, wl, b = ts
        h = ad.conv2d(x, w1, stride=1, padding="reflect")
        h = ad.leaky_relu(h, 0.2)
        h = ad.conv2d(h, w2, stride=2, padding="zero")
        h = ad.bicubic_resample(h, 2, "up")
        h = ad.nearest_upsample(h, 2)
        h = ad.bicubic_resample(h, 4, "down")
        h = ad.crop2d(h, 1)
        h = ad.add(h, ad.scalar_mul(h, 0.5))
        h = ad.mul(h, h)
        h = ad.sub(h, ad.scalar_mul(h, 0.25))
        cat = ad.concat([h, h], axis=1)
        logit = ad.linear(cat.reshape(1, cat.data.size), wl, b)
        return ad.add(ad.bce_with_logits(logit, 1.0),
                      ad.add(ad.l1_loss(h, ad.scalar_mul(h, 0.0).detach()),
                             ad.mean(h)))

    ok = True
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.random((1, 2, 8, 8))
        w1 = rng.standard_normal((3, 2, 3, 3)) * 0.3
        w2 = rng.standard_normal((2, 3, 3, 3)) * 0.3
        wl = rng.standard_normal((1, 16)) * 0.3
        b = rng.standard_normal(1) * 0.1
        try:
            check_grad(stack_loss, [x, w1, w2, wl, b], eps=1e-6, tol=1e-4)
        except AssertionError:
            ok = False
            break
    elapsed = time.time() - t0
    report(1, "finite-difference gradients for all ops, 20 seeds",
           ok and elapsed < 120, f"{elapsed:.1f}s")


# -- 2: oracles --------------------------------------------------------------


def conv_ref(x, w, stride, pad_mode):
    """Nested-loop same-padded cross-correlation reference."""
    n, cin, h, wd = x.shape
    co, _, kh, kw = w.shape
    pad = kh // 2
    mode = "reflect" if pad_mode == "reflect" else "constant"
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=mode)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[b, o, i, j] = (patch * w[o]).sum()
    return out


def test_02_conv_and_bicubic_match_brute_force():
    rng = np.random.default_rng(0)
    worst_conv = 0.0
    for _ in range(50):
        stride = int(rng.integers(1, 3))
        mode = str(rng.choice(["zero", "reflect"]))
        kh = int(rng.choice([1, 3, 5]))
        x = rng.random((1, 2, 8, 8))
        w = rng.standard_normal((2, 2, kh, kh))
        got = ad.conv2d(Tensor(x), Tensor(w), stride=stride,
                        padding=mode).data
        want = conv_ref(x, w, stride, mode)
        worst_conv = max(worst_conv, float(np.abs(got - want).max()))

    worst_bic = 0.0
    for _ in range(50):
        s = int(rng.choice([2, 4]))
        direction = str(rng.choice(["up", "down"]))
        h = int(rng.integers(2, 5)) * s
        wd = int(rng.integers(2, 5)) * s
        x = rng.random((1, 1, h, wd))
        got = ad.bicubic_resample(Tensor(x), s, direction).data
        mh = ad._resample_matrix(h, s, direction)
        mw = ad._resample_matrix(wd, s, direction)
        want = mh @ x[0, 0] @ mw.T
        worst_bic = max(worst_bic, float(np.abs(got[0, 0] - want).max()))

    ok = worst_conv <= 1e-6 and worst_bic <= 1e-6
    report(2, "conv2d / bicubic match brute-force references on 50 cases each",
           ok, f"conv err {worst_conv:.2e}, resample err {worst_bic:.2e}")


# -- 3: degradation invariants ----------------------------------------------


def test_03_degradation_invariants():
    img = ImageBuf(np.random.default_rng(1).random((3, 16, 16)).astype(np.float32))
    ident = degrade(img, DegradationSpec(Kernel2D.delta(5), 1))
    exact = np.array_equal(ident.data, img.data)

    const = ImageBuf(np.full((3, 16, 16), 0.4, np.float32))
    out = degrade(const, DegradationSpec(Kernel2D.delta(5), 2))
    const_err = float(np.abs(out.data - 0.4).max())

    rng = Rng(2).stream("kernel")
    bad = 0
    for _ in range(10_000):
        k, _ = synth_kernel(rng, 11)
        if k.taps.min() < 0 or abs(k.taps.sum() - 1.0) > 1e-6:
            bad += 1
    report(3, "degradation identity / constant preservation / kernel draws",
           exact and const_err <= 1e-6 and bad == 0,
           f"const err {const_err:.1e}, bad draws {bad}/10000")


# -- 4: effective kernel -----------------------------------------------------


def conv_full(a, b):
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i:i + b.shape[0], j:j + b.shape[1]] += a[i, j] * b
    return out


def test_04_effective_kernel_identity():
    gd = gd_init(SCALE, Rng(3).stream("init_gd"))
    # perturb away from init so the identity is tested on generic weights
    for layer in gd.layers:
        layer.data += np.random.default_rng(4).normal(
            0, 0.01, layer.data.shape)
        layer.data /= layer.data.sum()
    direct = np.array([[1.0]])
    for layer in gd.layers:
        direct = conv_full(direct, layer.data[0, 0])
    got = effective_kernel(gd, support=direct.shape[0])
    err_generic = float(np.abs(got.taps - direct / direct.sum()).max())

    gd0 = gd_init(SCALE, Rng(3).stream("init_gd"))
    want = np.array([[1.0]])
    for size in (3, 7, 9):
        ax = np.exp(-0.5 * (np.arange(size) - size // 2) ** 2)
        g = np.outer(ax, ax)
        want = conv_full(want, g / g.sum())
    got0 = effective_kernel(gd0, support=want.shape[0])
    err_init = float(np.abs(got0.taps - want / want.sum()).max())

    report(4, "effective kernel equals direct layer convolution; init is "
              "triple unit-sigma Gaussian",
           err_generic <= 1e-5 and err_init <= 1e-5,
           f"generic {err_generic:.1e}, init {err_init:.1e}")


# -- 5: metric units ---------------------------------------------------------


def test_05_metric_unit_cases():
    a = ImageBuf(np.zeros((3, 24, 24), np.float32))
    b = ImageBuf(np.full((3, 24, 24), 0.1, np.float32))
    p_err = abs(psnr(a, b) - 20.0)

    x = ImageBuf(np.random.default_rng(5).random((3, 24, 24)).astype(np.float32))
    s_self = abs(ssim(x, x) - 1.0)

    ca = ImageBuf(np.full((3, 24, 24), 0.2, np.float32))
    cb = ImageBuf(np.full((3, 24, 24), 0.4, np.float32))
    c1 = 0.01 ** 2
    want = (2 * 0.2 * 0.4 + c1) / (0.2 ** 2 + 0.4 ** 2 + c1)
    s_err = abs(ssim(ca, cb) - want)

    report(5, "PSNR 20 dB offset case; SSIM self-identity and closed form",
           p_err <= 1e-6 and s_self <= 1e-9 and s_err <= 1e-6,
           f"psnr err {p_err:.1e}, ssim {s_self:.1e}/{s_err:.1e}")


# -- 6: kernel recovery ------------------------------------------------------


def test_06_kernel_recovery(pool, pretrained):
    pre, pre_secs = pretrained
    t0 = time.time()
    corrs = []
    for i in range(8):
        hr = make_img(i, 192, 192)
        k, _ = synth_kernel(Rng(50 + i).stream("kernel"), 15)
        lr = degrade(hr, DegradationSpec(k, SCALE))
        cfg = tr.TrainConfig(steps=300, test_interval=300, n_patches=4,
                             lambda_gan=0.0, lr_gd=2e-4, scale=SCALE,
                             gr_config=TINY, seed=i)
        res = tr.online_adapt(lr, pool, pre, cfg)
        corrs.append(kernel_correlation(res.kernel_estimate, k))
    elapsed = pre_secs + (time.time() - t0)
    mean, worst = float(np.mean(corrs)), float(np.min(corrs))
    report(6, "blur recovery on 8 images at 96x96: mean NCC >= 0.8, "
              "min >= 0.6, <= 20 min",
           mean >= 0.8 and worst >= 0.6 and elapsed <= 1200,
           f"mean {mean:.3f}, min {worst:.3f}, {elapsed/60:.1f} min")


# -- 7: adaptation gain ------------------------------------------------------


def test_07_adaptation_psnr_gain(blind_runs):
    runs, secs = blind_runs
    gains = [p1 - p0 for p0, p1, _ in runs]
    improved = sum(g > 0 for g in gains)
    mean = float(np.mean(gains))
    report(7, "online adaptation beats the frozen pretrained restorer: "
              ">= 7/10 improved, mean >= +0.2 dB, <= 45 min",
           improved >= 7 and mean >= 0.2 and secs <= 2700,
           f"{improved}/10 improved, mean {mean:+.3f} dB, {secs/60:.1f} min")


# -- 8: separate vs joint ----------------------------------------------------


def test_08_separate_beats_joint(pool, pretrained, gain_suite, blind_runs):
    pre, _ = pretrained
    runs, _ = blind_runs
    sep_final = [p1 for _p0, p1, _ in runs]
    sep_curves = [{m["step"]: m["psnr"] for m in res.metrics if "psnr" in m}
                  for _p0, _p1, res in runs]

    joint_final = []
    for i, (hr, _k, lr) in enumerate(gain_suite):
        cfg = adapt_cfg(seed=i, mode="joint")
        res = tr.online_adapt(lr, pool, pre, cfg, gt_hr=hr)
        joint_final.append(psnr(hr, res.sr_final, border_crop=2))

    mean_sep = float(np.mean(sep_final))
    mean_joint = float(np.mean(joint_final))
    steps = sorted(sep_curves[0])
    first_hit = next((s for s in steps
                      if np.mean([c[s] for c in sep_curves]) >= mean_joint),
                     None)
    faster = first_hit is not None and first_hit < steps[-1]
    report(8, "separate-phase updates: higher final PSNR than joint and "
              "reach joint's final level earlier",
           mean_sep >= mean_joint and faster,
           f"separate {mean_sep:.2f} dB vs joint {mean_joint:.2f} dB, "
           f"matched at step {first_hit}")


# -- 9: non-blind vs blind ---------------------------------------------------


def test_09_nonblind_beats_blind(pool, pretrained, gain_suite, blind_runs):
    pre, _ = pretrained
    runs, _ = blind_runs
    blind_final = [p1 for _p0, p1, _ in runs]
    nb_final = []
    for i, (hr, k, lr) in enumerate(gain_suite):
        res = tr.nonblind_adapt(lr, pool, pre, k, adapt_cfg(seed=i), gt_hr=hr)
        nb_final.append(psnr(hr, res.sr_final, border_crop=2))
    mb, mn = float(np.mean(blind_final)), float(np.mean(nb_final))
    report(9, "ground-truth-kernel adaptation >= blind adaptation (mean PSNR)",
           mn >= mb, f"non-blind {mn:.2f} dB vs blind {mb:.2f} dB")


# -- 10: determinism ---------------------------------------------------------


def run_cli(args, cwd):
    env = dict(os.environ, PYTHONPATH=os.path.join(
        os.path.dirname(__file__), "..", "src"))
    return subprocess.run([sys.executable, "-m", "onsr.cli", *args],
                          cwd=cwd, env=env, capture_output=True, text=True)


def test_10_adapt_command_is_deterministic(tmp_path):
    hr_dir = tmp_path / "hr"
    hr_dir.mkdir()
    for i in range(3):
        save_png(make_img(200 + i, 64, 64), hr_dir / f"im{i}.png")
    lr_path = tmp_path / "lr.png"
    k, _ = synth_kernel(Rng(9).stream("kernel"), 11)
    save_png(degrade(make_img(50, 64, 64), DegradationSpec(k, 2)), lr_path)

    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        r = run_cli(["adapt", "--lr", str(lr_path), "--hr-dir", str(hr_dir),
                     "--steps", "6", "--test-interval", "3", "--seed", "3",
                     "--out-dir", str(out)], tmp_path)
        assert r.returncode == 0, r.stderr
        blobs.append(((out / "metrics.jsonl").read_bytes(),
                      (out / "sr_final.png").read_bytes()))
    same = blobs[0] == blobs[1]
    report(10, "two identical adapt invocations produce byte-identical "
               "metrics.jsonl and sr_final.png", same)


# -- 11: variant contracts ---------------------------------------------------


def test_11_variant_contracts(pool):
    hr = make_img(50, 96, 96)
    k, _ = synth_kernel(Rng(9).stream("kernel"), 11)
    lr = degrade(hr, DegradationSpec(k, 2))
    init = init_params(TINY, Rng(77).stream("init_gr"))

    def cfg(**kw):
        base = dict(steps=10, test_interval=5, n_patches=3, scale=2,
                    gr_config=TINY, seed=4)
        base.update(kw)
        return tr.TrainConfig(**base)

    # EBSR never touches the degradation parameters
    sess = tr.Session(lr, pool, init, cfg(variant="EBSR"))
    gd_at_init = sess._gd_bytes()
    tr._run_loop(sess)
    ebsr_ok = sess._gd_bytes() == gd_at_init

    # lambda = 0 collapses the full variant onto IB-EBSR exactly
    r_full = tr.online_adapt(lr, pool, init, cfg(variant="ONSR", lambda_gan=0.0))
    r_ibeb = tr.online_adapt(lr, pool, init, cfg(variant="IB-EBSR"))
    lam_ok = (r_full.sr_final.data.tobytes() == r_ibeb.sr_final.data.tobytes()
              and r_full.session.gr.params.state_bytes()
              == r_ibeb.session.gr.params.state_bytes())

    # phase isolation across a 50-step adversarial session
    sess = tr.Session(lr, pool, init, cfg(steps=50, variant="ONSR",
                                          lambda_gan=0.1))
    sets = {"gr": lambda: sess.gr.params.state_bytes(),
            "gd": lambda: sess._gd_bytes(),
            "dl": lambda: sess.dl.params.state_bytes()}
    opts = {"gr": sess.opt_gr, "gd": sess.opt_gd, "dl": sess.opt_dl}
    leaks = []
    for name, opt in opts.items():
        orig = opt.step

        def guarded(name=name, orig=orig):
            before = {k: f() for k, f in sets.items() if k != name}
            orig()
            if before != {k: f() for k, f in sets.items() if k != name}:
                leaks.append(name)

        opt.step = guarded
    for _ in range(50):
        sess.update_step()
    iso_ok = not leaks

    report(11, "variant contracts: EBSR freezes degradation net; "
               "lambda=0 equals IB-EBSR; 50-step phase isolation",
           ebsr_ok and lam_ok and iso_ok,
           f"ebsr={ebsr_ok} lambda0={lam_ok} isolation={iso_ok}")
