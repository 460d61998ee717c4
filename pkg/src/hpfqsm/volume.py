"""Voxel grids, real/complex volumes and the Fourier plumbing shared by the
forward operators.

Arrays are stored with shape ``(nz, ny, nx)`` in C order, i.e. z slowest and
x fastest. Every operator in the package is written against this layout and
against a single DFT convention: forward unnormalized, inverse scaled by
``1/N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRID_TOL_MM = 1e-9


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    nx: int
    ny: int
    nz: int
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if int(n) != n or n < 4:
                raise ValueError(f"{name} must be an integer >= 4, got {n!r}")
            object.__setattr__(self, name, int(n))
        for name in ("dx", "dy", "dz"):
            d = float(getattr(self, name))
            if not np.isfinite(d) or d <= 0:
                raise ValueError(f"{name} must be a positive voxel size, got {d!r}")
            object.__setattr__(self, name, d)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        return (self.nz, self.ny, self.nx)

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            (self.nx, self.ny, self.nz) == (other.nx, other.ny, other.nz)
            and abs(self.dx - other.dx) <= GRID_TOL_MM
            and abs(self.dy - other.dy) <= GRID_TOL_MM
            and abs(self.dz - other.dz) <= GRID_TOL_MM
        )

    __hash__ = None

    def with_matrix(self, nx: int, ny: int) -> "VoxelGrid":
        """In-plane resampled grid keeping the field of view fixed."""
        return VoxelGrid(nx, ny, self.nz, self.dx * self.nx / nx, self.dy * self.ny / ny, self.dz)


def _as_volume_array(grid: VoxelGrid, data, dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.size != grid.size:
        raise ValueError(f"data has {arr.size} values, grid needs {grid.size}")
    arr = arr.reshape(grid.shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume data must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RealVolume:
    """Real scalar field on a grid. ``data`` is a read-only float64 array."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_volume_array(self.grid, self.data, np.float64))

    @classmethod
    def zeros(cls, grid: VoxelGrid) -> "RealVolume":
        return cls(grid, np.zeros(grid.shape))

    def to_complex(self) -> "ComplexVolume":
        return ComplexVolume(self.grid, self.data)


@dataclass(frozen=True, eq=False)
class ComplexVolume:
    """Complex scalar field on a grid. ``data`` is a read-only complex128 array."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_volume_array(self.grid, self.data, np.complex128))

    @property
    def real(self) -> RealVolume:
        return RealVolume(self.grid, self.data.real)

    @property
    def magnitude(self) -> RealVolume:
        return RealVolume(self.grid, np.abs(self.data))


def _check_same_grid(*vols):
    g0 = vols[0].grid
    for v in vols[1:]:
        if v.grid != g0:
            raise ValueError(f"grid mismatch: {g0} vs {v.grid}")
    return g0


def fft3(v: ComplexVolume) -> ComplexVolume:
    """Unnormalized 3D DFT; DC lands at index (0, 0, 0)."""
    return ComplexVolume(v.grid, np.fft.fftn(v.data))


def ifft3(v: ComplexVolume) -> ComplexVolume:
    return ComplexVolume(v.grid, np.fft.ifftn(v.data))


def fft2_slicewise(v: ComplexVolume) -> ComplexVolume:
    """2D DFT of every axial (x-y) slice."""
    return ComplexVolume(v.grid, np.fft.fft2(v.data, axes=(1, 2)))


def ifft2_slicewise(v: ComplexVolume) -> ComplexVolume:
    return ComplexVolume(v.grid, np.fft.ifft2(v.data, axes=(1, 2)))


def _center_fit(spec: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    """Zero-pad or truncate a centred (fftshifted) spectrum along one axis."""
    n_old = spec.shape[axis]
    if n_new == n_old:
        return spec
    if n_new < n_old:
        start = n_old // 2 - n_new // 2
        return np.take(spec, np.arange(start, start + n_new), axis=axis)
    out_shape = list(spec.shape)
    out_shape[axis] = n_new
    out = np.zeros(out_shape, dtype=spec.dtype)
    start = n_new // 2 - n_old // 2
    index = [slice(None)] * spec.ndim
    index[axis] = slice(start, start + n_old)
    out[tuple(index)] = spec
    return out


def resample_kspace(v: ComplexVolume, new_nx: int, new_ny: int) -> ComplexVolume:
    """In-plane resampling by k-space zero-padding or truncation.

    The field of view is kept, so voxel sizes become ``dx*nx/new_nx`` and
    ``dy*ny/new_ny``. Intensities are scaled by ``new_nx*new_ny/(nx*ny)`` so
    that a constant image keeps its value.
    """
    if new_nx < 4 or new_ny < 4:
        raise ValueError("resampled matrix must be at least 4x4")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("input volume contains non-finite values")
    g = v.grid
    new_grid = g.with_matrix(new_nx, new_ny)
    if (new_nx, new_ny) == (g.nx, g.ny):
        return ComplexVolume(new_grid, v.data)
    spec = np.fft.fftshift(np.fft.fft2(v.data, axes=(1, 2)), axes=(1, 2))
    spec = _center_fit(spec, 1, new_ny)
    spec = _center_fit(spec, 2, new_nx)
    out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(1, 2)), axes=(1, 2))
    out *= (new_nx * new_ny) / (g.nx * g.ny)
    return ComplexVolume(new_grid, out)
