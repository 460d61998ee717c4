"""Synthetic susceptibility phantoms, analytic field oracles and the
on-disk dataset factory used in place of in-vivo data."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .physics import (
    ScanParams,
    dipole_convolve,
    hpfp,
    make_dipole_kernel,
    make_hann_transfer,
    synth_complex,
)
from .qvol import write_qvol
from .volume import RealVolume, VoxelGrid

log = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "cylinder-z", "cuboid")
MAX_ABS_CHI = 10.0
DEFAULT_GRID = VoxelGrid(64, 64, 16, 0.75, 0.75, 3.0)
VOLUME_KINDS = ("chi", "magnitude", "phase", "hpfp")


@dataclass(frozen=True)
class Shape:
    """``size`` is the radius (sphere), (radius, half-height) for cylinder-z,
    or (hx, hy, hz) half-extents for cuboid; all in mm."""

    kind: str
    center: tuple[float, float, float]  # (x, y, z) mm
    size: tuple[float, ...]
    chi: float

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        size = (self.size,) if np.isscalar(self.size) else tuple(self.size)
        want = {"sphere": 1, "cylinder-z": 2, "cuboid": 3}[self.kind]
        if len(size) != want:
            raise ValueError(f"{self.kind} needs {want} size values, got {len(size)}")
        if any(s <= 0 for s in size):
            raise ValueError("shape sizes must be positive")
        if abs(self.chi) > MAX_ABS_CHI:
            raise ValueError(f"|chi| must be <= {MAX_ABS_CHI} ppm")
        object.__setattr__(self, "size", tuple(float(s) for s in size))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def mask(self, grid: VoxelGrid) -> np.ndarray:
        z, y, x = voxel_coords(grid)
        cx, cy, cz = self.center
        dx, dy, dz = x - cx, y - cy, z - cz
        if self.kind == "sphere":
            return dx**2 + dy**2 + dz**2 <= self.size[0] ** 2
        if self.kind == "cylinder-z":
            r, hh = self.size
            return (dx**2 + dy**2 <= r**2) & (np.abs(dz) <= hh)
        hx, hy, hz = self.size
        return (np.abs(dx) <= hx) & (np.abs(dy) <= hy) & (np.abs(dz) <= hz)


@dataclass
class PhantomSpec:
    grid: VoxelGrid
    shapes: list[Shape] = field(default_factory=list)
    background_chi: float = 0.0
    magnitude_model: str = "uniform"  # or "shape-contrast"
    rng_seed: int = 0


def voxel_coords(grid: VoxelGrid):
    """Voxel-centre coordinates in mm, broadcastable to ``grid.shape``.
    Voxel ``i`` sits at ``i * d``."""
    z = (np.arange(grid.nz) * grid.dz)[:, None, None]
    y = (np.arange(grid.ny) * grid.dy)[None, :, None]
    x = (np.arange(grid.nx) * grid.dx)[None, None, :]
    return z, y, x


def rasterize_phantom(spec: PhantomSpec) -> RealVolume:
    """Centre-point rasterisation; later shapes paint over earlier ones."""
    g = spec.grid
    extent = ((g.nx - 1) * g.dx, (g.ny - 1) * g.dy, (g.nz - 1) * g.dz)
    chi = np.full(g.shape, float(spec.background_chi))
    for shape in spec.shapes:
        if any(c < 0 or c > e for c, e in zip(shape.center, extent)):
            raise ValueError(f"shape centre {shape.center} lies outside the grid")
        chi[shape.mask(g)] = shape.chi
    return RealVolume(g, chi)


def shape_labels(spec: PhantomSpec) -> np.ndarray:
    """Integer ROI map: voxel gets 1-based index of the last covering shape."""
    labels = np.zeros(spec.grid.shape, dtype=np.int32)
    for i, shape in enumerate(spec.shapes, start=1):
        labels[shape.mask(spec.grid)] = i
    return labels


def analytic_sphere_field(center, radius_mm: float, delta_chi_ppm: float, grid: VoxelGrid) -> RealVolume:
    """Exterior field of a uniformly magnetised sphere, B0 along z, Lorentz
    corrected (zero inside)."""
    if radius_mm <= 2 * max(grid.voxel_size):
        raise ValueError("radius must span more than two voxels")
    z, y, x = voxel_coords(grid)
    cx, cy, cz = center
    dx, dy, dz = x - cx, y - cy, z - cz
    r2 = dx**2 + dy**2 + dz**2
    outside = r2 > radius_mm**2
    r2_safe = np.where(outside, r2, 1.0)
    cos2 = dz**2 / r2_safe
    field_ = (delta_chi_ppm / 3.0) * (radius_mm**2 / r2_safe) ** 1.5 * (3.0 * cos2 - 1.0)
    return RealVolume(grid, np.where(outside, field_, 0.0))


def synth_magnitude(spec: PhantomSpec, chi: RealVolume | None = None) -> RealVolume:
    if spec.magnitude_model == "uniform":
        return RealVolume(spec.grid, np.ones(spec.grid.shape))
    if spec.magnitude_model != "shape-contrast":
        raise ValueError(f"unknown magnitude model {spec.magnitude_model!r}")
    chi = rasterize_phantom(spec) if chi is None else chi
    contrast = chi.data - spec.background_chi
    peak = np.max(np.abs(contrast))
    if peak > 0:
        contrast = contrast / peak
    return RealVolume(spec.grid, np.clip(1.0 + 0.2 * contrast, 0.1, 2.0))


def random_phantom_spec(grid: VoxelGrid, seed: int, magnitude_model: str = "shape-contrast") -> PhantomSpec:
    """5-15 random shapes, chi in [-0.2, 0.8] ppm, radii 3-12 mm."""
    rng = np.random.default_rng(seed)
    extent = np.array([(grid.nx - 1) * grid.dx, (grid.ny - 1) * grid.dy, (grid.nz - 1) * grid.dz])
    shapes = []
    for _ in range(int(rng.integers(5, 16))):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        radius = rng.uniform(3.0, 12.0)
        center = tuple(rng.uniform(0.15, 0.85, 3) * extent)
        if kind == "sphere":
            size = (radius,)
        elif kind == "cylinder-z":
            size = (radius, rng.uniform(3.0, 12.0))
        else:
            size = tuple(rng.uniform(3.0, 12.0, 3))
        shapes.append(Shape(kind, center, size, float(rng.uniform(-0.2, 0.8))))
    return PhantomSpec(grid, shapes, 0.0, magnitude_model, seed)


@dataclass
class PhantomCase:
    chi: RealVolume
    magnitude: RealVolume
    phase: RealVolume
    hpfp: RealVolume
    labels: np.ndarray


def simulate_case(
    spec: PhantomSpec, fc: float, scan: ScanParams = ScanParams(), float32_inputs: bool = False
) -> PhantomCase:
    """Simulate one case. With ``float32_inputs`` the label and magnitude are
    rounded to float32 first so that the stored files stay consistent with
    the stored HPFP up to its own rounding."""
    chi = rasterize_phantom(spec)
    mag = synth_magnitude(spec, chi)
    if float32_inputs:
        chi = RealVolume(chi.grid, chi.data.astype(np.float32))
        mag = RealVolume(mag.grid, mag.data.astype(np.float32))
    field_ = dipole_convolve(chi, make_dipole_kernel(spec.grid))
    phase = RealVolume(spec.grid, scan.phase_per_ppm * field_.data)
    f = hpfp(synth_complex(mag, phase), make_hann_transfer(spec.grid, fc))
    return PhantomCase(chi, mag, phase, f, shape_labels(spec))


def case_seeds(rng_seed: int, counts: dict[str, int]) -> dict[str, list[int]]:
    """Disjoint per-case seeds for every split, derived from one master seed."""
    total = sum(counts.values())
    children = np.random.SeedSequence(rng_seed).generate_state(total, dtype=np.uint32)
    seeds, i = {}, 0
    for split, n in counts.items():
        seeds[split] = [int(s) for s in children[i:i + n]]
        i += n
    if len(set(children.tolist())) != total:
        raise RuntimeError("seed collision; choose another master seed")
    return seeds


def make_dataset(
    out_dir: str | os.PathLike,
    n_train: int = 6,
    n_val: int = 2,
    n_test: int = 4,
    grid: VoxelGrid = DEFAULT_GRID,
    rng_seed: int = 0,
    fc: float = 0.5,
    scan: ScanParams = ScanParams(),
) -> dict:
    """Generate phantom cases, write QVOL volumes and ``manifest.json``.

    Returns the manifest dict. Paths inside the manifest are relative to
    ``out_dir``.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one case")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = case_seeds(rng_seed, {"train": n_train, "val": n_val, "test": n_test})
    cases = []
    for split, split_seeds in seeds.items():
        for i, seed in enumerate(split_seeds):
            case_id = f"{split}{i:03d}"
            spec = random_phantom_spec(grid, seed)
            case = simulate_case(spec, fc, scan, float32_inputs=True)
            files = {}
            for kind in VOLUME_KINDS:
                rel = f"{case_id}_{kind}.qvol"
                write_qvol(out / rel, getattr(case, kind))
                files[kind] = rel
            rel = f"{case_id}_labels.npy"
            np.save(out / rel, case.labels)
            files["labels"] = rel
            cases.append({"id": case_id, "split": split, "seed": seed, "files": files})
            log.info("wrote case %s (seed %d, %d shapes)", case_id, seed, len(spec.shapes))
    manifest = {
        "format": "hpfqsm-dataset/1",
        "fc": fc,
        "grid": {"matrix": [grid.nx, grid.ny, grid.nz], "voxel_size": list(grid.voxel_size)},
        "scan": {"b0": scan.b0, "te": scan.te, "gamma_bar": scan.gamma_bar},
        "rng_seed": rng_seed,
        "cases": cases,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    if path.is_dir() or path.suffix != ".json":
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["root"] = str(path.parent)
    return manifest


def manifest_cases(manifest: dict, split: str) -> list[dict]:
    return [c for c in manifest["cases"] if c["split"] == split]
