"""Synthetic phantoms, blur+noise degradation, patch sampling and dataset manifests.

Ground truth lives on a 0-255 intensity scale with a zero background; noise
levels are expressed on the same scale. Every random stream is derived from an
explicit seed so that any volume can be regenerated from its stored spec.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import classic

KINDS = ("dots", "spheres", "shells")

# object counts per 128^3 volume; scaled by volume for other shapes
DEFAULT_COUNTS = {"dots": 200, "spheres": 120, "shells": 10}
DEFAULT_RADII = {"dots": (0.0, 0.0), "spheres": (2.0, 6.0), "shells": (6.0, 20.0)}
INTENSITY_RANGE = (128.0, 255.0)
PLACEMENT_TRIES = 200  # attempts per requested object

TRAIN_SIGMA_B = (1.0, 1.2, 1.5)
TRAIN_SIGMA_N = (0.0, 15.0, 30.0)
TEST_SIGMA_B = (0.5, 2.0)
TEST_SIGMA_N = (20.0, 50.0, 70.0, 100.0)
REGIMES = ("train-mixed", "test-grid", "regime-A", "regime-B")


class PlacementError(RuntimeError):
    def __init__(self, kind: str, requested: int, placed: int):
        super().__init__(
            f"could only place {placed} of {requested} {kind} within the retry budget; "
            "lower the count or enlarge the volume"
        )
        self.placed = placed


def derive_seed(*keys: int) -> int:
    """Independent 64-bit seed for a (seed, index, ...) key."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    shape: tuple[int, int, int] = (128, 128, 128)
    count: int | None = None
    radius_range: tuple[float, float] | None = None
    seed: int = 0
    gaussian_dots: bool = False

    def resolved_count(self) -> int:
        if self.count is not None:
            return self.count
        scale = float(np.prod(self.shape)) / 128**3
        return max(1, int(round(DEFAULT_COUNTS[self.kind] * scale)))

    def resolved_radii(self) -> tuple[float, float]:
        return tuple(self.radius_range) if self.radius_range is not None else DEFAULT_RADII[self.kind]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        if self.radius_range is not None:
            d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["shape"] = tuple(d["shape"])
        if d.get("radius_range") is not None:
            d["radius_range"] = tuple(d["radius_range"])
        return cls(**d)


@dataclass(frozen=True)
class DegradationSpec:
    """Gaussian blur (``sigma_b`` voxels, optional separate axial sigma) plus additive noise."""

    sigma_b: float
    sigma_n: float
    seed: int = 0
    sigma_axial: float | None = None

    def __post_init__(self):
        if self.sigma_b < 0 or self.sigma_n < 0 or (self.sigma_axial is not None and self.sigma_axial < 0):
            raise ValueError(f"blur and noise levels must be non-negative: {self}")

    @property
    def blur_sigma(self) -> tuple[float, float, float]:
        axial = self.sigma_b if self.sigma_axial is None else self.sigma_axial
        return (axial, self.sigma_b, self.sigma_b)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(**d)


# --------------------------------------------------------------------------
# phantoms


def _ball_offsets(r: float) -> np.ndarray:
    n = int(math.floor(r))
    g = np.arange(-n, n + 1)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    mask = zz**2 + yy**2 + xx**2 <= r * r
    return np.stack([zz[mask], yy[mask], xx[mask]], axis=1)


def _shell_offsets(axes: np.ndarray) -> np.ndarray:
    """Voxels inside the ellipsoid with semi-axes ``axes`` but not inside ``axes - 1``."""
    ext = np.ceil(axes).astype(int)
    zz, yy, xx = np.meshgrid(*[np.arange(-e, e + 1) for e in ext], indexing="ij")
    outer = (zz / axes[0]) ** 2 + (yy / axes[1]) ** 2 + (xx / axes[2]) ** 2 <= 1.0
    inner_axes = axes - 1.0
    inner = (zz / inner_axes[0]) ** 2 + (yy / inner_axes[1]) ** 2 + (xx / inner_axes[2]) ** 2 <= 1.0
    mask = outer & ~inner
    return np.stack([zz[mask], yy[mask], xx[mask]], axis=1)


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Ground-truth volume (d, h, w) float32 in [0, 255] with zero background.

    Objects are placed fully inside the volume without sharing voxels with
    previously placed objects.
    """
    if spec.kind not in KINDS:
        raise ValueError(f"unknown phantom kind {spec.kind!r}; expected one of {KINDS}")
    shape = tuple(int(s) for s in spec.shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError(f"phantom shape must be three dims >= 16, got {shape}")
    count = spec.resolved_count()
    if count < 1:
        raise ValueError("count must be positive")
    lo, hi = spec.resolved_radii()

    rng = np.random.default_rng(spec.seed)
    vol = np.zeros(shape, dtype=np.float32)
    dims = np.array(shape)
    placed = 0
    for _ in range(count * PLACEMENT_TRIES):
        if placed == count:
            break
        if spec.kind == "dots":
            offsets = np.zeros((1, 3), dtype=int)
            margin = np.ones(3, dtype=int) if spec.gaussian_dots else np.zeros(3, dtype=int)
        elif spec.kind == "spheres":
            offsets = _ball_offsets(rng.uniform(lo, hi))
            margin = np.abs(offsets).max(axis=0)
        else:
            offsets = _shell_offsets(rng.uniform(lo, hi, size=3))
            margin = np.abs(offsets).max(axis=0)
        if np.any(2 * margin + 1 > dims):
            continue
        center = np.array([rng.integers(m, n - m) for m, n in zip(margin, dims)])
        value = np.float32(rng.uniform(*INTENSITY_RANGE))
        if spec.kind == "dots" and spec.gaussian_dots:
            offsets = _ball_offsets(math.sqrt(3.0))
        idx = tuple((offsets + center).T)
        if np.any(vol[idx] != 0):
            continue
        if spec.kind == "dots" and spec.gaussian_dots:
            # 3-voxel-wide Gaussian profile with the drawn value at its peak
            r2 = (offsets**2).sum(axis=1)
            vol[idx] = value * np.exp(-r2 / (2 * 0.7**2)).astype(np.float32)
        else:
            vol[idx] = value
        placed += 1
    if placed < count:
        raise PlacementError(spec.kind, count, placed)
    return vol


# --------------------------------------------------------------------------
# degradation


def degrade(x: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Blur with a Gaussian PSF, add seeded Gaussian noise, clamp below at zero."""
    x = np.asarray(x)
    y = x.astype(np.float64)
    sig = spec.blur_sigma
    if any(s > 0 for s in sig):
        y = classic.fft_convolve(y, classic.gaussian_psf(sig))
    if spec.sigma_n > 0:
        rng = np.random.default_rng(spec.seed)
        y = y + spec.sigma_n * rng.standard_normal(y.shape)
    np.maximum(y, 0.0, out=y)
    return y.astype(np.float32)


# --------------------------------------------------------------------------
# patches


class Patch(NamedTuple):
    degraded: np.ndarray
    truth: np.ndarray
    source: int
    offset: tuple[int, int, int]


def crop(vol: np.ndarray, offset: Sequence[int], size: Sequence[int]) -> np.ndarray:
    sl = tuple(slice(o, o + s) for o, s in zip(offset, size))
    return vol[(Ellipsis,) + sl]


def sample_patches(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    patch: Sequence[int] = (32, 64, 64),
    n: int = 1,
    seed: int = 0,
) -> list[Patch]:
    """``n`` aligned random crops drawn from (degraded, truth) volume pairs."""
    if not pairs:
        raise ValueError("no volume pairs to sample from")
    patch = tuple(int(p) for p in patch)
    for deg, gt in pairs:
        if deg.shape != gt.shape:
            raise ValueError(f"pair shapes differ: {deg.shape} vs {gt.shape}")
        if any(p > s for p, s in zip(patch, deg.shape[-3:])):
            raise ValueError(f"patch {patch} larger than volume {deg.shape[-3:]}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        src = int(rng.integers(len(pairs)))
        deg, gt = pairs[src]
        offset = tuple(int(rng.integers(s - p + 1)) for p, s in zip(patch, deg.shape[-3:]))
        out.append(Patch(crop(deg, offset, patch), crop(gt, offset, patch), src, offset))
    return out


# --------------------------------------------------------------------------
# datasets


@dataclass
class Entry:
    phantom: PhantomSpec
    degradation: DegradationSpec
    split: str
    truth_path: str | None = None
    degraded_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "degradation": self.degradation.to_dict(),
            "split": self.split,
            "truth_path": self.truth_path,
            "degraded_path": self.degraded_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Entry":
        return cls(
            PhantomSpec.from_dict(d["phantom"]),
            DegradationSpec.from_dict(d["degradation"]),
            d["split"],
            d.get("truth_path"),
            d.get("degraded_path"),
        )


@dataclass
class Manifest:
    regime: str
    seed: int
    entries: list[Entry] = field(default_factory=list)
    root: str | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> "Manifest":
        return Manifest(self.regime, self.seed, [e for e in self.entries if e.split == name], self.root)

    def cells(self) -> list[tuple[float, float | None, float]]:
        seen = []
        for e in self.entries:
            key = (e.degradation.sigma_b, e.degradation.sigma_axial, e.degradation.sigma_n)
            if key not in seen:
                seen.append(key)
        return seen

    def to_json(self) -> str:
        doc = {"version": 1, "regime": self.regime, "seed": self.seed, "entries": [e.to_dict() for e in self.entries]}
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        return cls(doc["regime"], doc["seed"], [Entry.from_dict(e) for e in doc["entries"]], str(path.parent))


def regime_grid(regime: str) -> list[tuple[float, float | None, float]]:
    """(sigma_b lateral, sigma_axial or None, sigma_n) cells of a degradation regime."""
    if regime == "train-mixed":
        return [(b, None, n) for b in TRAIN_SIGMA_B for n in TRAIN_SIGMA_N]
    if regime == "test-grid":
        return [(b, None, n) for b in TEST_SIGMA_B for n in TEST_SIGMA_N]
    if regime == "regime-A":
        return [(1.2, None, 15.0)]
    if regime == "regime-B":
        return [(0.8, 2.0, 25.0)]
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def build_dataset(
    regime: str,
    n_volumes: int,
    seed: int,
    shape: Sequence[int] = (128, 128, 128),
    kinds: Sequence[str] = KINDS,
    split: str | None = None,
    noise_levels: Sequence[float] | None = None,
) -> Manifest:
    """Manifest pairing ``n_volumes`` base phantoms with every cell of ``regime``.

    Phantom kinds cycle through ``kinds``. ``noise_levels`` optionally restricts
    the noise axis of the grid (e.g. the two lowest test-grid levels).
    """
    grid = regime_grid(regime)
    if noise_levels is not None:
        grid = [c for c in grid if c[2] in set(noise_levels)]
    if split is None:
        split = "test" if regime in ("test-grid", "regime-B") else "train"
    shape = tuple(int(s) for s in shape)
    entries = []
    for i in range(n_volumes):
        ph = PhantomSpec(kind=kinds[i % len(kinds)], shape=shape, seed=derive_seed(seed, i))
        for j, (sb, sa, sn) in enumerate(grid):
            deg = DegradationSpec(sigma_b=sb, sigma_n=sn, seed=derive_seed(seed, i, j), sigma_axial=sa)
            entries.append(Entry(ph, deg, split))
    return Manifest(regime, seed, entries)


def iter_pairs(manifest: Manifest) -> Iterator[tuple[Entry, np.ndarray, np.ndarray]]:
    """Yield (entry, degraded, truth) volumes, from files when present, else regenerated."""
    from .io import load_volume

    cache: dict[PhantomSpec, np.ndarray] = {}
    root = Path(manifest.root) if manifest.root else Path(".")
    for e in manifest.entries:
        if e.truth_path:
            gt = load_volume(root / e.truth_path)[0]
        else:
            if e.phantom not in cache:
                cache = {e.phantom: generate_phantom(e.phantom)}
            gt = cache[e.phantom]
        deg = load_volume(root / e.degraded_path)[0] if e.degraded_path else degrade(gt, e.degradation)
        yield e, deg, gt


def materialize(manifest: Manifest, out_dir: str | Path) -> Manifest:
    """Write every ground-truth and degraded volume as LVOL files plus ``manifest.json``."""
    from .io import save_volume

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[PhantomSpec, str] = {}
    gt = None
    entries = []
    for k, e in enumerate(manifest.entries):
        if e.phantom not in written:
            name = f"gt_{len(written):03d}_{e.phantom.kind}.lvol"
            gt = generate_phantom(e.phantom)
            save_volume(out / name, gt)
            written[e.phantom] = name
        elif gt is None or e.phantom != manifest.entries[k - 1].phantom:
            gt = generate_phantom(e.phantom)
        deg_name = f"deg_{k:04d}.lvol"
        save_volume(out / deg_name, degrade(gt, e.degradation), meta={"degradation": e.degradation.to_dict()})
        entries.append(Entry(e.phantom, e.degradation, e.split, written[e.phantom], deg_name))
    result = Manifest(manifest.regime, manifest.seed, entries, str(out))
    result.save(out / "manifest.json")
    return result
