#!/usr/bin/env python3
"""Smoke test for the o2sr Python extension.

Build the extension first:

    cargo build -p o2sr-py --release

then run this script from the repository root:

    python3 python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile

import numpy as np


def locate_extension():
    override = os.environ.get("O2SR_PY_LIB")
    candidates = [override] if override else []
    here = os.path.dirname(os.path.abspath(__file__))
    root = os.path.dirname(here)
    for profile in ("release", "debug"):
        candidates.append(os.path.join(root, "target", profile, "libo2sr.so"))
        candidates.append(os.path.join(root, "target", profile, "o2sr.dll"))
        candidates.append(os.path.join(root, "target", profile, "libo2sr.dylib"))
    for c in candidates:
        if c and os.path.exists(c):
            return c
    sys.exit("extension not found; run `cargo build -p o2sr-py --release` first")


def import_o2sr(tmp):
    lib = locate_extension()
    ext = ".so" if not lib.endswith(".dll") else ".pyd"
    shutil.copy(lib, os.path.join(tmp, "o2sr" + ext))
    sys.path.insert(0, tmp)
    import o2sr

    return o2sr


def main():
    tmp = tempfile.mkdtemp(prefix="o2sr_smoke_")
    o2sr = import_o2sr(tmp)
    checks = 0

    def ok(cond, what):
        nonlocal checks
        assert cond, what
        checks += 1
        print(f"  ok: {what}")

    # Synthetic image generation.
    hr = o2sr.synthetic_radiograph(64, 64, seed=3)
    ok(hr.shape == (64, 64), "synthetic radiograph shape")
    ok(0.0 <= hr.min() and hr.max() <= 1.0, "synthetic values in unit range")

    # Kernels.
    g = o2sr.gaussian_kernel(1.2, 9)
    ok(abs(g.sum() - 1.0) < 1e-9, "gaussian kernel sums to 1")
    mk = o2sr.motion_kernel(3.0, 0.0, 5)
    ok(abs(mk.sum() - 1.0) < 1e-9, "motion kernel sums to 1")
    ok(np.all(mk[[0, 1, 3, 4], :] == 0.0), "horizontal motion stays on center row")
    mt = o2sr.motion_kernel(3.0, math.pi / 2, 5)
    ok(np.allclose(mt, mk.T), "vertical motion kernel is the transpose")

    # Degradation: shape contract and determinism.
    lr = o2sr.degrade(hr, scale=4, seed=11)
    ok(lr.shape == (16, 16), "degrade output dims")
    ok(np.array_equal(lr, o2sr.degrade(hr, scale=4, seed=11)), "degrade deterministic in seed")
    ok(not np.array_equal(lr, o2sr.degrade(hr, scale=4, seed=12)), "seed changes output")

    # Resampling and metrics.
    up = o2sr.bicubic_resample(lr, 4.0)
    ok(up.shape == (64, 64), "bicubic upsample dims")
    ok(math.isinf(o2sr.psnr(hr, hr)), "psnr of identical images is inf")
    ok(abs(o2sr.ssim(hr, hr) - 1.0) < 1e-9, "ssim of identical images is 1")
    p_up = o2sr.psnr(up, hr)
    ok(0.0 < p_up < 100.0, f"bicubic psnr finite ({p_up:.2f} dB)")

    # Loss arithmetic.
    a = np.full((8, 8), 0.5)
    b = np.full((8, 8), 0.6)
    ok(abs(o2sr.loss(b, a, alpha=1.0, beta=0.1) - 0.101) < 1e-12, "loss closed form")

    # Orientation operator laws.
    z = np.random.RandomState(0).rand(2, 6, 5)
    v, h = o2sr.orientation_operator(z)
    vt, ht = o2sr.orientation_operator(np.transpose(z, (0, 2, 1)))
    ok(np.allclose(vt, h) and np.allclose(ht, v), "orientation transpose symmetry")
    v2, h2 = o2sr.orientation_operator(2.0 * z)
    ok(np.allclose(v2, 4.0 * v), "orientation square scale law")
    gated = o2sr.modulate(z, list(v), list(h))
    ok(np.allclose(gated, z * (v + h)[:, None, None]), "modulate is channel-wise gating")

    # Model: forward shape, save/load round trip.
    cfg = "\n".join(
        [
            "model.scale = 4",
            "model.channels = 8",
            "model.decoder_blocks = 1",
            "model.heads = 2",
            "model.window_size = 4",
            "model.seed = 5",
        ]
    )
    model = o2sr.Model(cfg)
    ok(model.scale == 4, "model scale echo")
    ok(model.n_params > 0, f"model has parameters ({model.n_params})")
    sr = model.forward(lr)
    ok(sr.shape == (64, 64), "model forward dims")
    ck = os.path.join(tmp, "model.o2ck")
    model.save(ck, step=0)
    again = o2sr.Model.load(ck)
    ok(np.array_equal(again.forward(lr), sr), "checkpoint round trip reproduces forward")

    # Tiny end-to-end: dataset on disk, three training steps, evaluation.
    ds = os.path.join(tmp, "ds")
    os.makedirs(os.path.join(ds, "hr"))
    os.makedirs(os.path.join(ds, "lr_x4"))
    for i in range(2):
        img = o2sr.synthetic_radiograph(64, 64, seed=100 + i)
        o2sr.save_image(img, os.path.join(ds, "hr", f"img{i}.png"))
        o2sr.save_image(
            o2sr.degrade(img, scale=4, seed=i), os.path.join(ds, "lr_x4", f"img{i}.png")
        )
    run = os.path.join(tmp, "run")
    ckpt, steps, final_loss = o2sr.fit(
        ds,
        run,
        config_text="\n".join(
            [
                "model.channels = 8",
                "model.decoder_blocks = 1",
                "model.heads = 2",
                "model.window_size = 4",
                "train.max_steps = 3",
                "train.batch_size = 2",
                "train.hr_patch = 32",
                "train.val_cadence = 0",
            ]
        ),
    )
    ok(steps == 3 and final_loss is not None, f"fit ran (loss {final_loss:.4f})")
    trained = o2sr.Model.load(ckpt)
    sr_dir = os.path.join(tmp, "sr")
    os.makedirs(sr_dir)
    for i in range(2):
        lr_i = o2sr.load_image(os.path.join(ds, "lr_x4", f"img{i}.png"))
        o2sr.save_image(trained.forward(lr_i), os.path.join(sr_dir, f"img{i}.png"))
    mean_psnr, mean_ssim, records = o2sr.evaluate_dirs(sr_dir, os.path.join(ds, "hr"), scale=4)
    ok(len(records) == 2, "evaluation covers both images")
    ok(math.isfinite(mean_psnr) and 0.0 < mean_ssim <= 1.0, f"aggregates sane ({mean_psnr:.2f} dB, {mean_ssim:.4f})")

    print(f"\nsmoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
