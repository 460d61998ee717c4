"""Forward physics: dipole convolution, in-plane Hann low-pass, high-pass
filtered phase (HPFP) synthesis and the HPFP fidelity loss with its gradient.

The fidelity loss for a susceptibility map ``x`` (ppm) is::

    loss(x) = sum( wrap( angle(c * conj(H c)) - f_hpfp )**2 ),
    c = m * exp(1j * phase_per_ppm * (D x))

with ``D`` the k-space dipole multiplier and ``H`` the per-slice Hann
low-pass. ``angle(c * conj(H c))`` equals ``angle(c / H c)`` wherever the
low-pass is nonzero and is 0 where it vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import ComplexVolume, RealVolume, VoxelGrid, _check_same_grid

GAMMA_BAR_1H = 42.577e6  # Hz/T
HANN_BETA_AT_320 = 40.0  # passband radius (samples) * fc for a 320 matrix


@dataclass(frozen=True)
class ScanParams:
    b0: float = 3.0  # T
    te: float = 22.7e-3  # s
    gamma_bar: float = GAMMA_BAR_1H

    def __post_init__(self):
        if not (self.b0 > 0 and self.te > 0 and self.gamma_bar > 0):
            raise ValueError("b0, te and gamma_bar must be positive")

    @property
    def phase_per_ppm(self) -> float:
        """Radians of phase accrued per ppm of field shift at ``te``."""
        return 2.0 * np.pi * self.gamma_bar * self.b0 * self.te * 1e-6


def wrap_phase(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


# ---------------------------------------------------------------------------
# dipole kernel


@dataclass(frozen=True, eq=False)
class DipoleKernel:
    grid: VoxelGrid
    multiplier: np.ndarray = field(repr=False)


def dipole_multiplier(grid: VoxelGrid) -> np.ndarray:
    kz = np.fft.fftfreq(grid.nz, d=grid.dz)[:, None, None]
    ky = np.fft.fftfreq(grid.ny, d=grid.dy)[None, :, None]
    kx = np.fft.fftfreq(grid.nx, d=grid.dx)[None, None, :]
    k2 = kx**2 + ky**2 + kz**2
    k2[0, 0, 0] = 1.0
    d = 1.0 / 3.0 - kz**2 / k2
    d[0, 0, 0] = 0.0
    return d


def make_dipole_kernel(grid: VoxelGrid) -> DipoleKernel:
    """k-space dipole kernel ``1/3 - kz^2/|k|^2`` in physical frequency units,
    B0 along z, DC set to 0."""
    mult = dipole_multiplier(grid)
    mult.flags.writeable = False
    return DipoleKernel(grid, mult)


def _dipole_apply(x: np.ndarray, mult: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(mult * np.fft.fftn(x)).real


def dipole_convolve(x: RealVolume, d: DipoleKernel) -> RealVolume:
    """Field shift (ppm) induced by susceptibility ``x`` (ppm)."""
    _check_same_grid(x, d)
    return RealVolume(x.grid, _dipole_apply(x.data, d.multiplier))


# ---------------------------------------------------------------------------
# Hann low-pass


@dataclass(frozen=True, eq=False)
class HannFilter:
    fc: float
    grid: VoxelGrid
    transfer: np.ndarray = field(repr=False)  # (ny, nx), shared by all slices
    cutoff_radius: float = 0.0  # samples


def hann_cutoff_radius(grid: VoxelGrid, fc: float, beta_at_320: float = HANN_BETA_AT_320) -> float:
    """Passband radius in frequency samples; shrinks as ``fc`` grows."""
    n_max = max(grid.nx, grid.ny)
    return beta_at_320 * (n_max / 320.0) / fc


def make_hann_transfer(grid: VoxelGrid, fc: float, beta_at_320: float = HANN_BETA_AT_320) -> HannFilter:
    """Radial raised-cosine in-plane low-pass.

    ``T(rho) = cos^2(pi*rho / (2*rho_c))`` for ``rho <= rho_c`` and 0 beyond,
    with ``rho`` the in-plane frequency index radius and
    ``rho_c = beta * (N_max/320) / fc``.
    """
    if not (0.0 < fc <= 1.0):
        raise ValueError(f"fc must lie in (0, 1], got {fc}")
    rho_c = hann_cutoff_radius(grid, fc, beta_at_320)
    ky = np.fft.fftfreq(grid.ny) * grid.ny
    kx = np.fft.fftfreq(grid.nx) * grid.nx
    rho = np.hypot(ky[:, None], kx[None, :])
    transfer = np.where(rho <= rho_c, np.cos(np.pi * rho / (2.0 * rho_c)) ** 2, 0.0)
    transfer[0, 0] = 1.0
    transfer.flags.writeable = False
    return HannFilter(float(fc), grid, transfer, rho_c)


def _lowpass_apply(c: np.ndarray, transfer: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(transfer[None] * np.fft.fft2(c, axes=(1, 2)), axes=(1, 2))


def lowpass_inplane(v: ComplexVolume, h: HannFilter) -> ComplexVolume:
    _check_same_grid(v, h)
    return ComplexVolume(v.grid, _lowpass_apply(v.data, h.transfer))


# ---------------------------------------------------------------------------
# HPFP


def synth_complex(m: RealVolume, phase: RealVolume) -> ComplexVolume:
    _check_same_grid(m, phase)
    if np.any(m.data < 0):
        raise ValueError("magnitude must be non-negative")
    return ComplexVolume(m.grid, m.data * np.exp(1j * phase.data))


def _angle_half_open(p: np.ndarray) -> np.ndarray:
    h = np.angle(p)
    return np.where(h <= -np.pi, h + 2.0 * np.pi, h)


def _hpfp_array(c: np.ndarray, transfer: np.ndarray) -> np.ndarray:
    return _angle_half_open(c * np.conj(_lowpass_apply(c, transfer)))


def hpfp(c: ComplexVolume, h: HannFilter) -> RealVolume:
    """High-pass filtered phase in (-pi, pi]."""
    _check_same_grid(c, h)
    return RealVolume(c.grid, _hpfp_array(c.data, h.transfer))


def forward_hpfp(
    x: RealVolume, m: RealVolume, d: DipoleKernel, h: HannFilter, s: ScanParams
) -> RealVolume:
    _check_same_grid(x, m, d, h)
    phase = s.phase_per_ppm * _dipole_apply(x.data, d.multiplier)
    c = m.data * np.exp(1j * phase)
    return RealVolume(x.grid, _hpfp_array(c, h.transfer))


# ---------------------------------------------------------------------------
# fidelity loss


class HpfpFidelity:
    """Fidelity loss bound to one measurement (``m``, ``f_hpfp``) and one
    forward model (``d``, ``h``, ``s``). Works on raw ``(nz, ny, nx)`` arrays
    so it can sit inside an optimisation loop."""

    def __init__(self, m: RealVolume, f_hpfp: RealVolume, d: DipoleKernel, h: HannFilter, s: ScanParams):
        self.grid = _check_same_grid(m, f_hpfp, d, h)
        if np.any(m.data < 0):
            raise ValueError("magnitude must be non-negative")
        self.m = m.data
        self.f = f_hpfp.data
        self.dipole = d.multiplier
        self.transfer = h.transfer
        self.scale = s.phase_per_ppm

    def _forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64).reshape(self.grid.shape)
        c = self.m * np.exp(1j * self.scale * _dipole_apply(x, self.dipole))
        low = _lowpass_apply(c, self.transfer)
        p = c * np.conj(low)
        resid = wrap_phase(_angle_half_open(p) - self.f)
        return c, low, p, resid

    def loss(self, x: np.ndarray) -> float:
        resid = self._forward(x)[3]
        return float(np.sum(resid**2))

    def loss_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        c, low, p, resid = self._forward(x)
        # wrap has unit slope a.e.; the angle is flat where c*conj(Hc) = 0
        active = p != 0
        g_angle = np.where(active, 2.0 * resid, 0.0)
        ratio = np.zeros_like(low)
        np.divide(g_angle, low, out=ratio, where=active)
        # d angle = d phi - Re(H(c d phi) / Hc); H has a real transfer, so H* = H
        g_phase = g_angle - np.real(np.conj(c) * _lowpass_apply(np.conj(ratio), self.transfer))
        g_x = self.scale * _dipole_apply(g_phase, self.dipole)
        return float(np.sum(resid**2)), g_x


def loss_ft(x: RealVolume, m: RealVolume, f_hpfp: RealVolume, d: DipoleKernel, h: HannFilter, s: ScanParams) -> float:
    _check_same_grid(x, m)
    return HpfpFidelity(m, f_hpfp, d, h, s).loss(x.data)


def grad_loss_ft(
    x: RealVolume, m: RealVolume, f_hpfp: RealVolume, d: DipoleKernel, h: HannFilter, s: ScanParams
) -> RealVolume:
    """Exact gradient of :func:`loss_ft` with respect to ``x`` (per ppm)."""
    _check_same_grid(x, m)
    return RealVolume(x.grid, HpfpFidelity(m, f_hpfp, d, h, s).loss_and_grad(x.data)[1])
