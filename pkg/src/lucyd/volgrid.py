"""Dense CDHW volumes with a small reverse-mode autograd tape.

Only the operations the LUCYD network and its loss need are provided. Every
op is dtype-preserving, so the same graph can be evaluated in float32 for
training and in float64 ("shadow mode") for finite-difference checks.

Usage::

    with Tape() as tape:
        out = conv3d(x, kernel)
        loss = total(out)
    grads = backward(tape, loss)
    grads[kernel.weight]
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32
DIV_EPS = 1e-6
LEAKY_SLOPE = 0.1


class Tensor:
    """A node in the autograd graph. ``data`` is never mutated by ops."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def volume(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Wrap a (c, d, h, w) array; a bare (d, h, w) array gets a channel axis."""
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"volume must be rank 4 (c, d, h, w), got shape {arr.shape}")
    return Tensor(arr, requires_grad=requires_grad, name=name)


@dataclass
class Kernel3d:
    """Conv weights of shape (c_out, c_in, kd, kh, kw) and a (c_out,) bias."""

    weight: Tensor
    bias: Tensor | None = None

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> tuple[int, int, int]:
        return self.weight.shape[2:]

    @classmethod
    def from_arrays(cls, weight, bias=None, requires_grad: bool = True) -> "Kernel3d":
        w = Tensor(np.asarray(weight), requires_grad=requires_grad)
        if w.data.ndim != 5:
            raise ValueError(f"kernel weight must be rank 5, got shape {w.shape}")
        b = None if bias is None else Tensor(np.asarray(bias), requires_grad=requires_grad)
        if b is not None and b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match c_out={w.shape[0]}")
        return cls(w, b)


# --------------------------------------------------------------------------
# tape


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered list of op records, filled while the tape is the active one."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: list[Tape] = []
# op names whose backward is deliberately negated; used by the gradcheck canary
_SIGN_FLIPS: set[str] = set()


# when a list, piecewise ops append their branch masks (leaky sign, division clamp)
_BRANCH_TRACE: list | None = None


@contextlib.contextmanager
def trace_branches() -> Iterator[list]:
    """Collect the branch masks of piecewise ops evaluated inside the block."""
    global _BRANCH_TRACE
    prev, _BRANCH_TRACE = _BRANCH_TRACE, []
    try:
        yield _BRANCH_TRACE
    finally:
        _BRANCH_TRACE = prev


@contextlib.contextmanager
def inject_sign_flip(op: str) -> Iterator[None]:
    """Negate the backward pass of ``op`` inside the block (mutation canary)."""
    _SIGN_FLIPS.add(op)
    try:
        yield
    finally:
        _SIGN_FLIPS.discard(op)


def emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].records.append(Record(op, tuple(inputs), result, grad_fn))
    return result


def backward(tape: Tape, loss: Tensor, seed: float = 1.0) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through ``tape`` in reverse record order.

    Returns a mapping from every tensor reached (leaves and intermediates) to
    its gradient, shaped like the tensor.
    """
    if not tape.records:
        raise ValueError("tape is empty; run the forward pass inside `with Tape()`")
    last = tape.records[-1].output
    if last.data.size != 1:
        raise ValueError(f"tape does not end in a scalar (last output has shape {last.shape})")
    if loss is not last:
        raise ValueError("loss must be the final output recorded on the tape")

    grads: dict[Tensor, np.ndarray] = {loss: np.full(loss.shape, seed, dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        in_grads = rec.grad_fn(g)
        flip = rec.op in _SIGN_FLIPS
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if flip:
                gi = -gi
            if t in grads:
                grads[t] = grads[t] + gi
            else:
                grads[t] = gi
    return grads


# --------------------------------------------------------------------------
# convolution


def _check_vol(x: Tensor, what: str = "input") -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{what} must be a rank-4 (c, d, h, w) volume, got shape {x.shape}")


def _conv_geometry(spatial, ksize, stride, pad):
    if pad == "same-zero":
        if any(k % 2 == 0 for k in ksize):
            raise ValueError(f"same padding needs odd kernel sizes, got {tuple(ksize)}")
        pads = [k // 2 for k in ksize]
    elif pad == "valid":
        pads = [0, 0, 0]
    else:
        raise ValueError(f"unknown padding {pad!r}")
    out = [(n + 2 * p - k) // stride + 1 for n, p, k in zip(spatial, pads, ksize)]
    if any(o <= 0 for o in out):
        raise ValueError(f"kernel {tuple(ksize)} does not fit input {tuple(spatial)}")
    return pads, out


def _im2col(xp: np.ndarray, ksize, stride, out) -> np.ndarray:
    """(c*kd*kh*kw, od*oh*ow) patch matrix, row order matching ``weight.reshape(c_out, -1)``."""
    c = xp.shape[0]
    kd, kh, kw = ksize
    n = out[0] * out[1] * out[2]
    cols = np.empty((c, kd * kh * kw, n), dtype=xp.dtype)
    i = 0
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                sl = xp[:, a : a + stride * out[0] : stride, b : b + stride * out[1] : stride, e : e + stride * out[2] : stride]
                cols[:, i] = sl.reshape(c, n)
                i += 1
    return cols.reshape(c * kd * kh * kw, n)


def conv3d(x: Tensor, k: Kernel3d, stride: int = 1, pad: str = "same-zero") -> Tensor:
    """3D cross-correlation with optional bias.

    ``out[o, p] = bias[o] + sum_i sum_delta w[o, i, delta] * x[i, p*stride + delta - center]``
    with zeros outside the volume for ``pad="same-zero"``.
    """
    _check_vol(x)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    w = k.weight
    if w.data.ndim != 5:
        raise ValueError(f"kernel weight must be rank 5, got shape {w.shape}")
    c_out, c_in = w.shape[:2]
    if x.shape[0] != c_in:
        raise ValueError(f"conv3d: input has {x.shape[0]} channels, kernel expects {c_in}")
    ksize = tuple(w.shape[2:])
    spatial = x.shape[1:]
    pads, out = _conv_geometry(spatial, ksize, stride, pad)

    xp = np.pad(x.data, [(0, 0)] + [(p, p) for p in pads]) if any(pads) else x.data
    wmat = w.data.reshape(c_out, -1)
    cols = _im2col(xp, ksize, stride, out)
    y = wmat @ cols
    if k.bias is not None:
        y += k.bias.data[:, None]
    y = y.reshape(c_out, *out)

    def grad_fn(g):
        gm = g.reshape(c_out, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if k.bias is not None and k.bias.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c_in, *ksize, *out)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            kd, kh, kw = ksize
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gxp[
                            :,
                            a : a + stride * out[0] : stride,
                            b : b + stride * out[1] : stride,
                            c : c + stride * out[2] : stride,
                        ] += gcols[:, a, b, c]
            gx = gxp[:, pads[0] : pads[0] + spatial[0], pads[1] : pads[1] + spatial[1], pads[2] : pads[2] + spatial[2]]
        return gx, gw, gb

    inputs = (x, w) if k.bias is None else (x, w, k.bias)
    return emit("conv3d", inputs, y, grad_fn)


# --------------------------------------------------------------------------
# shape ops


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_vol(x)
    y = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        c, d, h, w = x.shape
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return emit("upsample_nearest2x", (x,), y, grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_vol(a, "first input")
    _check_vol(b, "second input")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial dims differ, {a.shape[1:]} vs {b.shape[1:]}")
    y = np.concatenate([a.data, b.data], axis=0)
    ca = a.shape[0]
    return emit("concat_channels", (a, b), y, lambda g: (g[:ca], g[ca:]))


def channel_mean(x: Tensor) -> Tensor:
    _check_vol(x)
    c = x.shape[0]
    y = x.data.mean(axis=0, keepdims=True)
    return emit("channel_mean", (x,), y, lambda g: (np.broadcast_to(g / c, x.shape).copy(),))


# --------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def div_guarded(a: Tensor, b: Tensor, eps: float = DIV_EPS) -> Tensor:
    """``a / max(b, eps)``; no gradient flows to ``b`` where it was clamped."""
    _same_shape(a, b, "div_guarded")
    if eps <= 0:
        raise ValueError("eps must be positive")
    den = np.maximum(b.data, b.data.dtype.type(eps))
    if _BRANCH_TRACE is not None:
        _BRANCH_TRACE.append(b.data >= eps)
    y = a.data / den

    def grad_fn(g):
        ga = g / den
        gb = np.where(b.data >= eps, -ga * y, 0).astype(g.dtype)
        return ga, gb

    return emit("div_guarded", (a, b), y, grad_fn)


def ewise(op: str, a: Tensor, b: Tensor, eps: float = DIV_EPS) -> Tensor:
    """Dispatch to ``add``, ``mul`` or ``div_guarded`` by name."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "div_guarded":
        return div_guarded(a, b, eps)
    raise ValueError(f"unknown elementwise op {op!r}")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data >= 0
    if _BRANCH_TRACE is not None:
        _BRANCH_TRACE.append(pos)
    y = np.where(pos, x.data, x.data * x.data.dtype.type(slope))
    return emit("leaky_relu", (x,), y, lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


# --------------------------------------------------------------------------
# reductions and scalar helpers (used by the loss)


def total(x: Tensor) -> Tensor:
    return emit("total", (x,), x.data.sum(dtype=x.dtype), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    y = np.asarray(np.mean(diff.astype(np.float64) ** 2), dtype=a.dtype)

    def grad_fn(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return emit("mse", (a, b), y, grad_fn)


def log(x: Tensor) -> Tensor:
    return emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` for python-scalar scale and shift."""
    s = x.dtype.type(scale)
    return emit("affine", (x,), x.data * s + x.dtype.type(shift), lambda g: (g * s,))
