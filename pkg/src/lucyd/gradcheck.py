"""Central finite-difference checks of the tape gradients, run in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import metrics, model, volgrid
from .volgrid import Kernel3d, Tape, Tensor

OPS_TOL = 1e-5
SSIM_TOL = 1e-4
FULL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.rel_error <= self.tol)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` over the checked entries (Euclidean norms)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def input_errors(
    fn: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-3,
    entries: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> list[float]:
    """Relative error between tape gradients and central differences, per input.

    ``fn`` maps leaf tensors to a scalar tensor. Every entry of every input is
    perturbed unless ``entries`` limits the check to that many random entries
    per input. With ``skip_kinks`` an entry whose +/-eps evaluations change the
    branch of any piecewise op (leaky slope, division clamp) is retried with
    smaller steps and, failing that, replaced by another random entry, since
    differences across a kink are not derivatives.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape, volgrid.trace_branches() as base_branches:
        out = fn(leaves)
    grads = volgrid.backward(tape, out)

    def value() -> tuple[float, list]:
        with volgrid.trace_branches() as br:
            v = float(fn([Tensor(a) for a in arrays]).data)
        return v, br

    rng = rng or np.random.default_rng(0)
    errs = []
    for arr, leaf in zip(arrays, leaves):
        g = grads.get(leaf, np.zeros_like(arr)).reshape(-1)
        flat = arr.reshape(-1)
        if entries is None or entries >= flat.size:
            candidates = np.arange(flat.size)
            want = flat.size
        else:
            candidates = rng.permutation(flat.size)
            want = entries
        idx, numeric = [], []
        for i in candidates:
            if len(idx) == want:
                break
            orig = flat[i]
            # shrink the step when it crosses a kink; float64 keeps round-off small down to ~1e-8
            for h in (eps, eps / 10, eps / 100, eps / 1000) if skip_kinks else (eps,):
                flat[i] = orig + h
                up, br_up = value()
                flat[i] = orig - h
                down, br_down = value()
                flat[i] = orig
                if not skip_kinks or (_same_branches(br_up, base_branches) and _same_branches(br_down, base_branches)):
                    idx.append(i)
                    numeric.append((up - down) / (2 * h))
                    break
        if not idx:
            raise RuntimeError("every candidate entry sits on a kink")
        errs.append(rel_error(g[np.array(idx)], np.array(numeric)))
    return errs


def check(fn, arrays, eps: float = 1e-3, entries: int | None = None, rng=None) -> float:
    """Worst per-input relative error, see :func:`input_errors`."""
    return max(input_errors(fn, arrays, eps, entries, rng))


def _projected(op):
    """Wrap a tensor-valued op as a scalar by a fixed random projection."""

    def fn(ts):
        out = op(ts)
        r = np.random.default_rng(123).standard_normal(out.shape)
        return volgrid.total(volgrid.mul(out, Tensor(r)))

    return fn


def ops_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    u = lambda *s: rng.uniform(-1, 1, size=s)
    away = lambda *s: rng.choice([-1, 1], size=s) * rng.uniform(0.2, 1, size=s)
    pos = lambda *s: rng.uniform(1, 2, size=s)

    def conv(stride):
        return lambda ts: volgrid.conv3d(ts[0], Kernel3d(ts[1], ts[2]), stride=stride)

    cases = [
        ("conv3d", conv(1), [u(2, 4, 4, 4), u(3, 2, 3, 3, 3), u(3)], OPS_TOL),
        ("conv3d_stride2", conv(2), [u(2, 4, 4, 4), u(3, 2, 3, 3, 3), u(3)], OPS_TOL),
        ("conv3d_1x1", conv(1), [u(3, 4, 4, 4), u(2, 3, 1, 1, 1), u(2)], OPS_TOL),
        ("upsample_nearest2x", lambda ts: volgrid.upsample_nearest2x(ts[0]), [u(2, 2, 2, 2)], OPS_TOL),
        ("concat_channels", lambda ts: volgrid.concat_channels(ts[0], ts[1]), [u(1, 3, 3, 3), u(2, 3, 3, 3)], OPS_TOL),
        ("add", lambda ts: volgrid.add(ts[0], ts[1]), [u(2, 3, 3, 3), u(2, 3, 3, 3)], OPS_TOL),
        ("mul", lambda ts: volgrid.mul(ts[0], ts[1]), [u(2, 3, 3, 3), u(2, 3, 3, 3)], OPS_TOL),
        ("div_guarded", lambda ts: volgrid.div_guarded(ts[0], ts[1]), [u(2, 3, 3, 3), pos(2, 3, 3, 3)], OPS_TOL),
        ("leaky_relu", lambda ts: volgrid.leaky_relu(ts[0]), [away(3, 4, 4, 4)], OPS_TOL),
        ("channel_mean", lambda ts: volgrid.channel_mean(ts[0]), [u(3, 4, 4, 4)], OPS_TOL),
        ("mse", lambda ts: volgrid.mse(ts[0], ts[1]), [u(1, 4, 4, 4), u(1, 4, 4, 4)], OPS_TOL),
        ("log", lambda ts: volgrid.log(ts[0]), [pos(1, 3, 3, 3)], OPS_TOL),
        ("ssim3d", lambda ts: metrics.ssim3d_op(ts[0], ts[1]), [rng.uniform(0, 1, (1, 12, 12, 12)), rng.uniform(0, 1, (1, 12, 12, 12))], SSIM_TOL),
    ]
    results = []
    for name, op, arrays, tol in cases:
        fn = op if name in ("mse", "ssim3d") else _projected(op)
        results.append(CheckResult(name, check(fn, arrays), tol))
    return results


def full_suite(seed: int = 0, shape=(12, 16, 16), entries: int = 2, eps: float = 1e-3) -> list[CheckResult]:
    """Loss through the whole network, per parameter tensor, on a small random patch.

    Entries whose perturbation flips an activation branch are resampled; a
    small step keeps that rare, and float64 round-off stays far below the
    tolerance at this size.
    """
    rng = np.random.default_rng(seed)
    params = model.init_params(seed)
    # non-zero biases so every bias gradient is exercised
    for k, v in params.tensors.items():
        if k.endswith(".b"):
            params.tensors[k] = rng.uniform(-0.1, 0.1, v.shape).astype(np.float32)
    # keep the RLDiv denominator away from the clamp, where 1/m is too curved for differences
    y = rng.uniform(0.2, 1, (1, *shape))
    x = rng.uniform(0, 1, (1, *shape))
    names = list(params.tensors)

    def fn(ts):
        ks = {}
        tensors = dict(zip(names, ts[1:]))
        for name, *_ in model.layer_specs():
            ks[name] = Kernel3d(tensors[name + ".w"], tensors[name + ".b"])
        out = model.forward(ks, ts[0])
        return model.loss(out.restored, Tensor(x))

    arrays = [y] + [params.tensors[n].astype(np.float64) for n in names]
    errs = input_errors(fn, arrays, eps, entries, np.random.default_rng(seed + 1), skip_kinks=True)
    return [CheckResult(f"lucyd.{label}", err, FULL_TOL) for label, err in zip(["input"] + names, errs)]
