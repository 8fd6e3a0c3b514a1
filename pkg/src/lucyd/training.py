"""Training loop, Adam optimiser and checkpoints for LUCYD."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io, metrics, model, simulate
from .volgrid import Tape, backward, volume

log = logging.getLogger(__name__)

INTENSITY_SCALE = 255.0


class NonFiniteError(FloatingPointError):
    """Raised when a loss or tensor stops being finite during training."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 4
    patch: tuple[int, int, int] = (32, 64, 64)
    patches_per_epoch: int = 200
    val_patches: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.patches_per_epoch < 1:
            raise ValueError(f"invalid training config: {self}")
        if len(self.patch) != 3 or any(p <= 0 or p % 2 for p in self.patch):
            raise ValueError(f"patch dims must be positive and even, got {self.patch}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k].astype(np.float32)
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.lr / bc1) * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.eps)
            params[k] = (p - update).astype(np.float32)


@dataclass
class Checkpoint:
    params: model.ModelParams
    config: TrainConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None

    @property
    def rng_tag(self) -> str:
        return f"seed={self.config.seed};epoch={self.epoch}"

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        tensors = dict(self.params.tensors)
        manifest = {
            "version": 1,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "rng": self.rng_tag,
            "history": self.history,
        }
        if self.optimizer is not None:
            manifest["adam_step"] = self.optimizer.t
            for k in self.optimizer.m:
                tensors["adam.m." + k] = self.optimizer.m[k]
                tensors["adam.v." + k] = self.optimizer.v[k]
        return io.checkpoint_bytes(tensors, manifest)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        tensors, header = io.read_checkpoint_file(path)
        cfg = TrainConfig.from_dict(header["config"])
        params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        opt = None
        if "adam_step" in header:
            opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            opt.t = header["adam_step"]
            opt.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")}
            opt.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")}
        return cls(model.ModelParams(params), cfg, header["epoch"], header.get("history", []), opt)


def normalize(vol: np.ndarray) -> np.ndarray:
    return (np.asarray(vol, dtype=np.float32) / np.float32(INTENSITY_SCALE)).astype(np.float32)


def loss_and_grads(params: model.ModelParams, y: np.ndarray, x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss on one normalised (degraded, truth) patch pair and its parameter gradients."""
    ks = params.kernels(requires_grad=True)
    with Tape() as tape:
        out = model.forward(ks, volume(y))
        # scan in data-flow order so the earliest offender is named
        for name in ("mask", "estimate", "update", "restored"):
            if not np.all(np.isfinite(getattr(out, name).data)):
                raise NonFiniteError(f"non-finite values in {name}")
        L = model.loss(out.restored, volume(x))
    value = float(L.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value}")
    g = backward(tape, L)
    grads = {}
    for name, k in ks.items():
        grads[name + ".w"] = g.get(k.weight, np.zeros_like(k.weight.data))
        grads[name + ".b"] = g.get(k.bias, np.zeros_like(k.bias.data))
    return value, grads


def train_step(params: model.ModelParams, opt: Adam, batch: Sequence[simulate.Patch]) -> float:
    total = 0.0
    acc: dict[str, np.ndarray] = {}
    for p in batch:
        value, grads = loss_and_grads(params, normalize(p.degraded)[None], normalize(p.truth)[None])
        total += value
        for k, g in grads.items():
            acc[k] = acc[k] + g if k in acc else g.astype(np.float64)
    n = len(batch)
    for k, g in acc.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    opt.step(params.tensors, {k: g / n for k, g in acc.items()})
    return total / n


def predict(params: model.ModelParams, y: np.ndarray) -> np.ndarray:
    """Forward a normalised single-channel volume and return x' as a (d, h, w) array."""
    return model.forward(params, np.asarray(y, dtype=np.float32)[None]).restored.data[0]


def evaluate_patches(params: model.ModelParams, patches: Sequence[simulate.Patch]) -> tuple[float, float]:
    ss, ps = [], []
    for p in patches:
        pred = predict(params, normalize(p.degraded))
        x = normalize(p.truth)
        ss.append(metrics.ssim3d(pred, x))
        ps.append(metrics.psnr(pred, x))
    return float(np.mean(ss)), float(np.mean(ps))


def load_pairs(manifest: simulate.Manifest) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(deg, gt) for _, deg, gt in simulate.iter_pairs(manifest)]


def train(
    cfg: TrainConfig,
    train_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    val_pairs: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    resume: Checkpoint | None = None,
    log_path: str | Path | None = None,
    on_epoch: Callable[[Checkpoint], None] | None = None,
) -> Checkpoint:
    """Train (or continue training) LUCYD on (degraded, truth) volume pairs in 0-255 scale.

    Every epoch draws a fresh set of aligned patches seeded by (seed, epoch),
    so a resumed run samples the same patches as an uninterrupted one.
    """
    if not train_pairs:
        raise ValueError("training set is empty")
    if resume is not None:
        ck = Checkpoint(resume.params.copy(), cfg, resume.epoch, list(resume.history), resume.optimizer)
        if ck.optimizer is None:
            ck.optimizer = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    else:
        ck = Checkpoint(model.init_params(cfg.seed), cfg, 0, [], Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps))
    val = simulate.sample_patches(val_pairs or train_pairs, cfg.patch, cfg.val_patches, simulate.derive_seed(cfg.seed, 1 << 20))
    log.info("LUCYD parameters: %d (reference model: %d)", ck.params.count(), model.REFERENCE_PARAM_COUNT)

    start_epoch = ck.epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        t0 = time.perf_counter()
        patches = simulate.sample_patches(train_pairs, cfg.patch, cfg.patches_per_epoch, simulate.derive_seed(cfg.seed, epoch))
        losses = []
        for i in range(0, len(patches), cfg.batch_size):
            losses.append(train_step(ck.params, ck.optimizer, patches[i : i + cfg.batch_size]))
        val_ssim, val_psnr = evaluate_patches(ck.params, val)
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "val_ssim": val_ssim, "val_psnr": val_psnr}
        ck.epoch = epoch
        # wall time stays out of the checkpoint so reruns are byte-identical
        ck.history.append(rec)
        log.info("epoch %d loss %.5f val_ssim %.4f val_psnr %.2f", epoch, rec["loss"], val_ssim, val_psnr)
        if log_path is not None:
            with open(log_path, "a") as fh:
                line = dict(rec, wall_seconds=round(time.perf_counter() - t0, 3))
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(ck)
    return ck
