"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The lines are also collected in ``conftest.ACCEPTANCE_LINES`` and repeated in
the pytest terminal summary, so they survive output capturing.
"""

import logging
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from lucyd import classic, gradcheck, metrics, model, report, simulate, training, volgrid
from lucyd.cli import main
from lucyd.volgrid import Kernel3d, Tensor
from test_classic import direct_circular_convolution
from test_volgrid import direct_conv3d


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck.ops_suite(seed=0) + gradcheck.full_suite(seed=0)
    elapsed = time.perf_counter() - t0
    failed = [f"{r.name}={r.rel_error:.2e}" for r in results if not r.ok]
    worst_ops = max(r.rel_error for r in results if not r.name.startswith("lucyd."))
    worst_full = max(r.rel_error for r in results if r.name.startswith("lucyd."))
    ok = not failed and elapsed <= 180
    verdict(
        1,
        ok,
        f"{len(results)} checks, worst op {worst_ops:.2e}, worst network {worst_full:.2e}, "
        f"{elapsed:.1f}s" + (f", failing {failed}" if failed else ""),
    )


def test_criterion_2_convolution_oracles():
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(3):
        x = rng.standard_normal((8, 8, 8))
        psf = rng.standard_normal((5, 5, 5))
        errs.append(np.abs(classic.fft_convolve(x, psf) - direct_circular_convolution(x, psf)).max())
    for stride in (1, 2):
        x = rng.standard_normal((2, 8, 8, 8))
        w = rng.standard_normal((3, 2, 5, 5, 5))
        b = rng.standard_normal(3)
        got = volgrid.conv3d(Tensor(x), Kernel3d.from_arrays(w, b), stride=stride).data
        errs.append(np.abs(got - direct_conv3d(x, w, b, stride)).max())
    worst = float(max(errs))
    verdict(2, worst <= 1e-5, f"max abs error {worst:.2e} over {len(errs)} cases (limit 1e-5)")


def test_criterion_3_classic_rl():
    rng = np.random.default_rng(3)
    y = rng.uniform(0, 255, (16, 16, 16))
    fixed = np.array_equal(classic.richardson_lucy(y, classic.gaussian_psf(0), iters=10), y)

    x = rng.uniform(0, 1, (16, 16, 16))
    psf = classic.gaussian_psf(1.2)
    blurred = classic.fft_convolve(x, psf)
    flux = blurred.sum()
    drift = []
    classic.richardson_lucy(blurred, psf, iters=50, callback=lambda k, z: drift.append(abs(z.sum() - flux) / flux))

    gt = simulate.generate_phantom(simulate.PhantomSpec("spheres", (64, 64, 64), seed=3))
    deg = simulate.degrade(gt, simulate.DegradationSpec(1.0, 0.0))
    out = classic.richardson_lucy(deg, classic.gaussian_psf(1.0), iters=30)
    gain = metrics.psnr(out / 255, gt / 255) - metrics.psnr(deg / 255, gt / 255)

    ok = fixed and max(drift) <= 1e-4 and gain >= 2.0
    verdict(3, ok, f"delta fixed point exact={fixed}, max flux drift {max(drift):.2e}, PSNR gain {gain:.2f} dB")


def test_criterion_4_loss_identities():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (1, 16, 16, 16))
    loss_self = abs(float(model.loss(Tensor(x), Tensor(x)).data))
    ssim_self = abs(metrics.ssim3d(x, x) - 1)
    offset = abs(metrics.psnr(x + 0.1, x) - 20.0)
    ok = loss_self <= 1e-7 and ssim_self <= 1e-6 and offset <= 1e-4
    verdict(4, ok, f"|loss(x,x)| {loss_self:.1e}, |SSIM(x,x)-1| {ssim_self:.1e}, |PSNR-20| {offset:.1e}")


def test_criterion_5_architecture_contracts(caplog):
    rng = np.random.default_rng(5)
    worst = 0.0
    for seed in range(3):
        params = model.init_params(seed)
        for name, arr in params.tensors.items():
            if name.endswith(".b"):
                arr[:] = rng.uniform(-0.1, 0.1, arr.shape)
        y = rng.uniform(0, 1, (1, 16, 12, 10)).astype(np.float32)
        out = model.forward(params, y)
        worst = max(
            worst,
            np.abs((out.estimate.data - y) - out.mask.data).max(),
            np.abs(out.estimate.data * out.update.data - out.restored.data).max(),
        )
    shapes_ok = True
    params = model.init_params(0)
    for shape in [(8, 8, 8), (10, 8, 12), (16, 16, 16), (8, 20, 14)]:
        out = model.forward(params, np.zeros((1, *shape), np.float32))
        shapes_ok &= all(t.shape == (1, *shape) for t in out)
    count = params.count()

    pairs = training.load_pairs(simulate.build_dataset("regime-A", 1, seed=0, shape=(16, 16, 16)))
    cfg = training.TrainConfig(epochs=1, batch_size=1, patch=(12, 12, 12), patches_per_epoch=1, val_patches=1)
    with caplog.at_level(logging.INFO, logger="lucyd"):
        training.train(cfg, pairs)
    logged = any(str(count) in r.getMessage() and "24964" in r.getMessage() for r in caplog.records)

    ok = worst <= 1e-6 and shapes_ok and 15_000 <= count <= 60_000 and logged
    verdict(
        5,
        ok,
        f"identity error {worst:.1e}, shapes preserved={shapes_ok}, "
        f"{count} parameters (reference 24964, logged={logged})",
    )


def _mean_ssim_table(scores):
    cells = report.cell_means(scores)
    return {cell: {m: v[0] for m, v in row.items()} for cell, row in cells.items()}


def test_criterion_6_desk_scale_generalisation():
    t0 = time.perf_counter()
    train_set = simulate.build_dataset("train-mixed", 3, seed=11, shape=(64, 64, 64))
    test_set = simulate.build_dataset("test-grid", 3, seed=12, shape=(64, 64, 64), noise_levels=(20, 50))
    cfg = training.TrainConfig(epochs=6, patches_per_epoch=40, patch=(32, 32, 32), batch_size=4, val_patches=4)
    ck = training.train(cfg, training.load_pairs(train_set))
    table = _mean_ssim_table(report.evaluate(test_set, ck.params, tile=(64, 64, 64)))
    elapsed = time.perf_counter() - t0

    beats_input = all(row["lucyd"] > row["input"] for row in table.values())
    lucyd_mean = float(np.mean([row["lucyd"] for row in table.values()]))
    rl_mean = float(np.mean([row["rl"] for row in table.values()]))
    cells = ", ".join(f"{c}: {r['input']:.3f}->{r['lucyd']:.3f}" for c, r in sorted(table.items()))
    ok = beats_input and lucyd_mean > rl_mean and elapsed <= 3600
    verdict(
        6,
        ok,
        f"input->lucyd SSIM per cell [{cells}]; mean lucyd {lucyd_mean:.3f} vs RL {rl_mean:.3f}; {elapsed:.0f}s",
    )


def test_criterion_7_cross_regime():
    train_set = simulate.build_dataset("regime-A", 3, seed=21, shape=(64, 64, 64))
    test_set = simulate.build_dataset("regime-B", 3, seed=22, shape=(64, 64, 64))
    cfg = training.TrainConfig(epochs=4, patches_per_epoch=40, patch=(32, 32, 32), batch_size=4, val_patches=4)
    ck = training.train(cfg, training.load_pairs(train_set))
    per_volume = {}
    for s in report.evaluate(test_set, ck.params, tile=(64, 64, 64)):
        per_volume.setdefault(s.volume, {})[s.method] = s.ssim
    ok = bool(per_volume) and all(v["lucyd"] > v["input"] for v in per_volume.values())
    detail = ", ".join(f"vol {k}: {v['input']:.3f}->{v['lucyd']:.3f}" for k, v in sorted(per_volume.items()))
    verdict(7, ok, f"input->lucyd SSIM [{detail}]")


def _pipeline(root):
    steps = [
        ["gen", "--kind", "mixed", "--n", 2, "--shape", "16,16,16", "--seed", 1, "--out", root / "gt"],
        ["degrade", "--in", root / "gt", "--regime", "regime-A", "--seed", 2, "--out", root / "train"],
        ["gen", "--kind", "spheres", "--shape", "16,16,16", "--seed", 3, "--out", root / "gtt"],
        ["degrade", "--in", root / "gtt", "--regime", "test-grid", "--seed", 4, "--out", root / "test"],
        ["train", "--data", root / "train", "--epochs", 2, "--batch", 2, "--patch", "12,12,12",
         "--patches-per-epoch", 4, "--val-patches", 2, "--seed", 5, "--out", root / "m.lckp"],
        ["eval", "--ckpt", root / "m.lckp", "--data", root / "test", "--tile", "16,16,16",
         "--report", root / "r.csv"],
    ]  # fmt: skip
    return [main([str(a) for a in step]) for step in steps]


def test_criterion_8_reproducibility(tmp_path, capsys):
    codes = [_pipeline(tmp_path / run) for run in ("a", "b")]
    capsys.readouterr()
    names = ["m.lckp", "r.csv", "r_long.csv", "r_volumes.csv"]
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
    ok = all(c == 0 for run in codes for c in run) and all(same.values())
    verdict(8, ok, f"exit codes {codes}; byte-identical {same}")
