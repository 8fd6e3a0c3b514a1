"""Command-line interface: ``lucyd <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import classic, gradcheck, inference, io, report, simulate, training, volgrid

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GEN_MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _triple(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p]
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected d,h,w integers, got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return tuple(vals)


def _manifest_path(path: str) -> Path:
    p = Path(path)
    return p / GEN_MANIFEST if p.is_dir() else p


def _load_manifest(path: str) -> simulate.Manifest:
    p = _manifest_path(path)
    if not p.exists():
        raise FileNotFoundError(f"no dataset manifest at {p}")
    return simulate.Manifest.load(p)


# commands


def cmd_gen(a) -> int:
    kinds = simulate.KINDS if a.kind == "mixed" else (a.kind,)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes = []
    for i in range(a.n):
        seed = a.seed if a.n == 1 else simulate.derive_seed(a.seed, i)
        spec = simulate.PhantomSpec(kinds[i % len(kinds)], a.shape, a.count, seed=seed, gaussian_dots=a.gaussian_dots)
        name = f"gt_{i:03d}_{spec.kind}.lvol"
        io.save_volume(out / name, simulate.generate_phantom(spec), meta={"phantom": spec.to_dict()})
        volumes.append({"path": name, "phantom": spec.to_dict()})
    doc = {"version": 1, "kind": "phantoms", "seed": a.seed, "volumes": volumes}
    (out / GEN_MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(volumes)} phantom(s) to {out}")
    return EXIT_OK


def _degradation_grid(a) -> tuple[str, list[tuple[float, float | None, float]]]:
    if a.regime:
        if a.sigma_b is not None or a.sigma_n is not None:
            raise UsageError("give either --regime or --sigma-b/--sigma-n, not both")
        return a.regime, simulate.regime_grid(a.regime)
    if a.sigma_b is None or a.sigma_n is None:
        raise UsageError("--sigma-b and --sigma-n are required without --regime")
    return "custom", [(a.sigma_b, a.sigma_axial, a.sigma_n)]


def cmd_degrade(a) -> int:
    src = Path(a.inp)
    if src.is_file() and src.suffix != ".json":
        if a.regime:
            raise UsageError("--regime needs a phantom directory as --in")
        _, [(sb, sa, sn)] = _degradation_grid(a)
        spec = simulate.DegradationSpec(sb, sn, a.seed, sa)
        vol = io.load_volume(src)
        if vol.shape[0] != 1:
            raise ValueError(f"expected a single-channel volume, got shape {vol.shape}")
        io.save_volume(a.out, simulate.degrade(vol[0], spec), meta={"degradation": spec.to_dict()})
        print(f"wrote {a.out}")
        return EXIT_OK

    gen_path = _manifest_path(a.inp)
    if not gen_path.exists():
        raise FileNotFoundError(f"no such volume or phantom directory: {a.inp}")
    doc = json.loads(gen_path.read_text())
    if doc.get("kind") != "phantoms":
        raise ValueError(f"{gen_path} is not a phantom manifest written by 'gen'")
    regime, grid = _degradation_grid(a)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    split = a.split or ("test" if regime in ("test-grid", "regime-B") else "train")
    entries = []
    for i, item in enumerate(doc["volumes"]):
        phantom = simulate.PhantomSpec.from_dict(item["phantom"])
        gt_file = gen_path.parent / item["path"]
        gt = io.load_volume(gt_file)[0]
        for j, (sb, sa, sn) in enumerate(grid):
            if a.noise_levels and sn not in a.noise_levels:
                continue
            spec = simulate.DegradationSpec(sb, sn, simulate.derive_seed(a.seed, i, j), sa)
            name = f"deg_{len(entries):04d}.lvol"
            io.save_volume(out / name, simulate.degrade(gt, spec), meta={"degradation": spec.to_dict()})
            truth = os.path.relpath(gt_file.resolve(), out.resolve())
            entries.append(simulate.Entry(phantom, spec, split, truth, name))
    manifest = simulate.Manifest(regime, a.seed, entries)
    manifest.save(out / GEN_MANIFEST)
    print(f"wrote {len(entries)} degraded volume(s) to {out}")
    return EXIT_OK


def cmd_dataset(a) -> int:
    man = simulate.build_dataset(a.regime, a.n, a.seed, a.shape, noise_levels=a.noise_levels)
    simulate.materialize(man, a.out)
    print(f"wrote {len(man)} pair(s) to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    man = _load_manifest(a.data)
    pairs_man = man.split("train") if man.split("train").entries else man
    train_pairs = training.load_pairs(pairs_man)
    val_pairs = training.load_pairs(_load_manifest(a.val_data)) if a.val_data else None
    cfg = training.TrainConfig(
        lr=a.lr,
        epochs=a.epochs,
        batch_size=a.batch,
        patch=a.patch,
        patches_per_epoch=a.patches_per_epoch,
        val_patches=a.val_patches,
        seed=a.seed,
    )
    resume = training.Checkpoint.load(a.resume) if a.resume else None
    log_path = Path(a.log) if a.log else Path(a.out).with_suffix(".jsonl")
    if resume is None and log_path.exists():
        log_path.unlink()
    every = a.checkpoint_every

    def on_epoch(ck):
        if every and ck.epoch % every == 0:
            ck.save(a.out)

    ck = training.train(cfg, train_pairs, val_pairs, resume=resume, log_path=log_path, on_epoch=on_epoch)
    ck.save(a.out)
    print(f"parameters: {ck.params.count()} (reference model: 24964)")
    print(f"wrote {a.out} at epoch {ck.epoch}; log {log_path}")
    return EXIT_OK


def cmd_deconv(a) -> int:
    vol, header = io.read_volume(a.inp)
    if vol.shape[0] != 1:
        raise ValueError(f"expected a single-channel volume, got shape {vol.shape}")
    y = vol[0]
    params = None
    if a.method == "lucyd":
        if not a.ckpt:
            raise UsageError("--method lucyd requires --ckpt")
        params = training.Checkpoint.load(a.ckpt).params
    sigma = a.psf_sigma
    if a.method in ("wiener", "rl"):
        if sigma is None:
            stored = header.get("meta", {}).get("degradation")
            if stored is None:
                raise UsageError(f"--psf-sigma is required for {a.method} (no degradation recorded in the input)")
            sigma = simulate.DegradationSpec.from_dict(stored).blur_sigma
        elif a.psf_sigma_axial is not None:
            sigma = (a.psf_sigma_axial, sigma, sigma)
    out = report.restore(a.method, y, sigma, params, a.nsr, a.iters, a.tile, a.overlap)
    io.save_volume(a.out, out, meta={"method": a.method})
    print(f"wrote {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    man = _load_manifest(a.data)
    if man.split("test").entries:
        man = man.split("test")
    params = training.Checkpoint.load(a.ckpt).params if a.ckpt else None
    scores = report.evaluate(man, params, a.nsr, a.iters, a.tile, a.overlap, a.save_outputs)
    rep = Path(a.report)
    rep.write_text(report.wide_csv(scores))
    rep.with_name(rep.stem + "_long.csv").write_text(report.long_csv(scores))
    rep.with_name(rep.stem + "_volumes.csv").write_text(report.volume_csv(scores))
    sys.stdout.write(report.wide_csv(scores))
    return EXIT_OK


def cmd_project(a) -> int:
    vol = io.load_volume(a.inp)
    img = report.to_uint16(report.max_projection(vol, a.axis))
    Path(a.out).write_bytes(report.pgm_bytes(img))
    print(f"wrote {a.out} ({img.shape[1]}x{img.shape[0]})")
    return EXIT_OK


def _print_results(results) -> bool:
    ok = True
    for r in results:
        ok &= r.ok
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<28} rel_error={r.rel_error:.3e} tol={r.tol:.0e}")
    return ok


def cmd_gradcheck(a) -> int:
    if a.self_test:
        # a negated conv backward must be caught by the suite
        with volgrid.inject_sign_flip("conv3d"):
            results = gradcheck.ops_suite(a.seed)
        caught = not all(r.ok for r in results if r.name.startswith("conv3d"))
        print(f"sign-flip canary {'detected' if caught else 'NOT detected'}")
        return EXIT_OK if caught else EXIT_NUMERIC
    suite = gradcheck.ops_suite if a.mode == "ops" else gradcheck.full_suite
    ok = _print_results(suite(seed=a.seed))
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lucyd", description="3D deconvolution with LUCYD and classic baselines")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    # accept -v after the command as well; SUPPRESS keeps the top-level value when absent
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = command("gen", help="generate ground-truth phantoms")
    g.add_argument("--kind", required=True, choices=list(simulate.KINDS) + ["mixed"])
    g.add_argument("--shape", type=_triple, default=(128, 128, 128))
    g.add_argument("--count", type=int, default=None, help="objects per volume (default scales with volume)")
    g.add_argument("--n", type=int, default=1, help="number of volumes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gaussian-dots", action="store_true")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    def degradation_flags(q):
        q.add_argument("--sigma-b", type=float, default=None, help="blur std (lateral) in voxels")
        q.add_argument("--sigma-axial", type=float, default=None, help="axial blur std; default isotropic")
        q.add_argument("--sigma-n", type=float, default=None, help="noise std on the 0-255 scale")

    d = command("degrade", help="blur and add noise to a volume or a phantom directory")
    d.add_argument("--in", dest="inp", required=True, help="LVOL file or 'gen' output directory")
    d.add_argument("--out", required=True, help="LVOL file, or dataset directory for directory input")
    degradation_flags(d)
    d.add_argument("--regime", choices=simulate.REGIMES, default=None)
    d.add_argument("--noise-levels", type=float, nargs="+", default=None)
    d.add_argument("--split", choices=["train", "test"], default=None)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_degrade)

    ds = command("dataset", help="generate and degrade a whole regime in one step")
    ds.add_argument("--regime", required=True, choices=simulate.REGIMES)
    ds.add_argument("--n", type=int, default=3, help="base phantoms")
    ds.add_argument("--shape", type=_triple, default=(128, 128, 128))
    ds.add_argument("--noise-levels", type=float, nargs="+", default=None)
    ds.add_argument("--seed", type=int, default=0)
    ds.add_argument("--out", required=True)
    ds.set_defaults(func=cmd_dataset)

    t = command("train", help="train LUCYD")
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--val-data", default=None)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--patch", type=_triple, default=(32, 64, 64))
    t.add_argument("--patches-per-epoch", type=int, default=200)
    t.add_argument("--val-patches", type=int, default=4)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--log", default=None, help="JSON-lines log (default: <out>.jsonl)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def restore_flags(q):
        q.add_argument("--nsr", type=float, default=classic.DEFAULT_NSR)
        q.add_argument("--iters", type=int, default=classic.DEFAULT_RL_ITERS)
        q.add_argument("--tile", type=_triple, default=(32, 64, 64))
        q.add_argument("--overlap", type=int, default=inference.MIN_OVERLAP)

    c = command("deconv", help="restore one volume")
    c.add_argument("--method", required=True, choices=["wiener", "rl", "lucyd"])
    c.add_argument("--psf-sigma", type=float, default=None)
    c.add_argument("--psf-sigma-axial", type=float, default=None)
    c.add_argument("--ckpt", default=None)
    restore_flags(c)
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_deconv)

    e = command("eval", help="compare input, Wiener, RL and LUCYD on a dataset")
    e.add_argument("--ckpt", default=None, help="omit to evaluate the baselines only")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="wide CSV; <stem>_long.csv and <stem>_volumes.csv are written too")
    e.add_argument("--save-outputs", default=None, help="directory for restored volumes")
    restore_flags(e)
    e.set_defaults(func=cmd_eval)

    pj = command("project", help="maximum-intensity projection to 16-bit PGM")
    pj.add_argument("--in", dest="inp", required=True)
    pj.add_argument("--axis", required=True, choices=sorted(report.PROJECTION_AXES))
    pj.add_argument("--out", required=True)
    pj.set_defaults(func=cmd_project)

    gc = command("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--mode", choices=["ops", "full"], default="ops")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--self-test", action="store_true", help="verify that a sign-flipped backward is caught")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lucyd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (training.NonFiniteError, FloatingPointError) as exc:
        print(f"lucyd {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, io.FormatError, simulate.PlacementError, json.JSONDecodeError) as exc:
        print(f"lucyd {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
