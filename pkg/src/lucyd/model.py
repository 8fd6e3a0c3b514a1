"""The LUCYD network: correction module, shared bottleneck and RL-style update module.

Data flow for an observation ``y`` (single channel, even spatial dims):

* the correction module encodes ``y`` (EB1), fuses it with the bottleneck
  features and decodes an additive mask ``M``; ``z = y + M``;
* the forward projector ``f`` (conv + residual block) produces features whose
  channel mean divides ``y`` (RLDiv);
* the backward projector ``b`` merges the projected division result with the
  bottleneck features and ends in a channel mean, the update term ``u``;
* the output is ``x = z * u`` (RLMul).

Naming: the bottleneck decoder is ``db2`` and the correction-module decoder is
``db1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import metrics
from .volgrid import (
    DIV_EPS,
    Kernel3d,
    Tensor,
    add,
    affine,
    channel_mean,
    concat_channels,
    conv3d,
    div_guarded,
    leaky_relu,
    log,
    mse,
    mul,
    sub,
    upsample_nearest2x,
    volume,
)

REFERENCE_PARAM_COUNT = 24_964
PROJECTOR_OFFSET = 0.5

# (name, c_in, c_out, kernel side); residual blocks expand to <name>.c1 / <name>.c2
_TOPOLOGY = [
    ("eb1.conv", 1, 4, 3),
    ("eb1.res", 4, 4, 3),
    ("down", 4, 4, 3),
    ("fp.conv", 1, 4, 3),
    ("fp.res", 4, 4, 3),
    ("fp_enc", 4, 4, 3),
    ("eb2.conv", 8, 8, 3),
    ("eb2.res", 8, 8, 3),
    ("ff1.up", 8, 4, 3),
    ("ff1.fuse", 8, 4, 1),
    ("ff1.conv", 4, 4, 3),
    ("ff2.down", 4, 4, 3),
    ("ff2.fuse", 12, 8, 1),
    ("ff2.conv", 8, 8, 3),
    ("db2.conv", 8, 8, 3),
    ("db2.res", 8, 8, 3),
    ("expand", 8, 4, 3),
    ("db1.conv", 8, 4, 3),
    ("db1.res", 4, 4, 3),
    ("mask", 4, 1, 3),
    ("rldiv.proj", 1, 4, 3),
    ("bp.merge", 8, 4, 3),
    ("bp.res", 4, 4, 3),
    ("bp.refine", 4, 4, 3),
]


def layer_specs() -> list[tuple[str, int, int, int]]:
    """Flat list of conv layers (name, c_in, c_out, side) in initialisation order."""
    out = []
    for name, cin, cout, k in _TOPOLOGY:
        if name.endswith(".res"):
            out += [(name + ".c1", cin, cout, k), (name + ".c2", cout, cout, k)]
        else:
            out.append((name, cin, cout, k))
    return out


@dataclass
class ModelParams:
    """Named float32 weight/bias arrays (``<layer>.w`` and ``<layer>.b``)."""

    tensors: dict[str, np.ndarray]

    def kernels(self, requires_grad: bool = False, dtype=np.float32) -> dict[str, Kernel3d]:
        ks = {}
        for name, *_ in layer_specs():
            w = Tensor(self.tensors[name + ".w"].astype(dtype), requires_grad=requires_grad, name=name + ".w")
            b = Tensor(self.tensors[name + ".b"].astype(dtype), requires_grad=requires_grad, name=name + ".b")
            ks[name] = Kernel3d(w, b)
        return ks

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def count(self) -> int:
        return metrics.param_count(self.tensors)


def init_params(seed: int = 0, identity_projector: bool = True) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``.

    With ``identity_projector`` the forward projector starts close to the
    identity plus a constant offset (centre tap 1, random part scaled by 0.1,
    second residual conv zeroed with bias ``PROJECTOR_OFFSET``). The division
    ``y / mean(f(y))`` then starts as roughly ``y / (y + offset)``, well away from
    the clamp, which keeps early Adam steps at lr 1e-3 from blowing up on dim
    voxels.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, cin, cout, k in layer_specs():
        bound = np.sqrt(1.0 / (cin * k**3))
        tensors[name + ".w"] = rng.uniform(-bound, bound, size=(cout, cin, k, k, k)).astype(np.float32)
        tensors[name + ".b"] = np.zeros(cout, dtype=np.float32)
    if identity_projector:
        w = tensors["fp.conv.w"]
        w *= np.float32(0.1)
        w[:, 0, 1, 1, 1] += np.float32(1.0)
        tensors["fp.res.c2.w"][:] = 0
        tensors["fp.res.c2.b"][:] = np.float32(PROJECTOR_OFFSET)
    return ModelParams(tensors)


class Outputs(NamedTuple):
    restored: Tensor  # x'
    estimate: Tensor  # z~ = y + M
    update: Tensor  # u
    mask: Tensor  # M


def _conv(ks, name, x, stride=1, act=True):
    out = conv3d(x, ks[name], stride=stride)
    return leaky_relu(out) if act else out


def _res(ks, name, x):
    h = _conv(ks, name + ".c1", x)
    return add(x, _conv(ks, name + ".c2", h))


def _up(ks, name, x):
    return _conv(ks, name, upsample_nearest2x(x))


def _check_input(y: Tensor) -> None:
    if y.data.ndim != 4 or y.shape[0] != 1:
        raise ValueError(f"LUCYD expects a single-channel (1, d, h, w) volume, got shape {y.shape}")
    spatial = y.shape[1:]
    if any(s % 2 for s in spatial):
        raise ValueError(f"spatial dims must be even, got {spatial}")
    if min(spatial) < 8:
        raise ValueError(f"spatial dims must be at least 8, got {spatial}")


def ffblock(ks: dict[str, Kernel3d], shallow: Tensor, deep: Tensor, which: int) -> Tensor:
    """Multi-scale feature fusion of full-resolution and half-resolution features."""
    expected = tuple(-(-s // 2) for s in shallow.shape[1:])
    if deep.shape[1:] != expected:
        raise ValueError(f"deep features {deep.shape[1:]} do not match half of {shallow.shape[1:]}")
    if which == 1:
        fused = concat_channels(shallow, _up(ks, "ff1.up", deep))
        return _conv(ks, "ff1.conv", _conv(ks, "ff1.fuse", fused))
    if which == 2:
        fused = concat_channels(_conv(ks, "ff2.down", shallow, stride=2), deep)
        return _conv(ks, "ff2.conv", _conv(ks, "ff2.fuse", fused))
    raise ValueError(f"which must be 1 or 2, got {which}")


def forward(params: ModelParams | dict[str, Kernel3d], y, eps: float = DIV_EPS) -> Outputs:
    ks = params.kernels() if isinstance(params, ModelParams) else params
    if not isinstance(y, Tensor):
        y = volume(np.asarray(y, dtype=ks["mask"].weight.dtype))
    _check_input(y)

    # encoders: correction branch and forward projector
    e1 = _res(ks, "eb1.res", _conv(ks, "eb1.conv", y))
    fp = _res(ks, "fp.res", _conv(ks, "fp.conv", y))
    e2_in = concat_channels(_conv(ks, "down", e1, stride=2), _conv(ks, "fp_enc", fp, stride=2))
    e2 = _res(ks, "eb2.res", _conv(ks, "eb2.conv", e2_in))

    ff1 = ffblock(ks, e1, e2, 1)
    ff2 = ffblock(ks, e1, e2, 2)

    # bottleneck decoder, shared by both modules after expansion
    d2 = _res(ks, "db2.res", _conv(ks, "db2.conv", ff2))
    shared = _up(ks, "expand", d2)

    # correction module
    d1 = _res(ks, "db1.res", _conv(ks, "db1.conv", concat_channels(shared, ff1)))
    mask = _conv(ks, "mask", d1, act=False)
    estimate = add(y, mask)

    # update module: RLDiv, backward projector, channel mean
    dv = div_guarded(y, channel_mean(fp), eps)
    rl = _conv(ks, "rldiv.proj", dv)
    h = add(_conv(ks, "bp.merge", concat_channels(rl, shared)), rl)
    h = _conv(ks, "bp.refine", _res(ks, "bp.res", h), act=False)
    update = channel_mean(h)

    return Outputs(mul(estimate, update), estimate, update, mask)


def loss(pred: Tensor, truth: Tensor) -> Tensor:
    """``MSE - ln((1 + SSIM) / 2)`` on normalised volumes."""
    if pred.shape != truth.shape:
        raise ValueError(f"loss: shape mismatch {pred.shape} vs {truth.shape}")
    s = metrics.ssim3d_op(pred, truth)
    return sub(mse(pred, truth), log(affine(s, 0.5, 0.5)))


def loss_value(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    s = metrics.ssim3d(pred, truth)
    return float(np.mean((pred - truth) ** 2) - np.log((1 + s) / 2))
