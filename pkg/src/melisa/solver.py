"""Pseudo-spectral vorticity solver for 2D Kolmogorov flow on [0, 2pi]^2.

Arrays are indexed ``[iy, ix]``: axis 0 is y, axis 1 is x. The state is the
full complex spectrum ``w_hat = fft2(w)``. Nonlinear products are formed in
physical space and dealiased with the 2/3 rule; viscosity is integrated
exactly with an integrating factor inside a classical RK4 (Lawson) step.

Forcing is the body force ``(A sin(n y), 0)`` whose curl enters the
vorticity equation as ``-A n cos(n y)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class CflError(RuntimeError):
    """Advective CFL bound violated."""


@dataclass(frozen=True)
class SolverConfig:
    n: int = 64
    viscosity: float = 1.0 / 50.0
    forcing_wavenumber: int = 4
    forcing_amplitude: float = 1.0
    dt: float = 0.01
    save_every: int = 50
    cfl_max: float = 1.0

    def __post_init__(self):
        if self.n < 4 or self.n & (self.n - 1):
            raise ValueError(f"grid size must be a power of two >= 4, got {self.n}")
        if self.viscosity < 0:
            raise ValueError("viscosity must be non-negative")
        if self.forcing_wavenumber < 1:
            raise ValueError("forcing wavenumber must be >= 1")
        if self.dt <= 0 or self.save_every < 1:
            raise ValueError("dt must be positive and save_every >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


def wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavenumber grids (ky, kx) in unshifted FFT order."""
    k = np.fft.fftfreq(n, 1.0 / n)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    return ky, kx


def dealias_mask(n: int) -> np.ndarray:
    """2/3-rule mask: keep |kx|, |ky| < n/3."""
    ky, kx = wavenumbers(n)
    cut = n / 3.0
    return (np.abs(kx) < cut) & (np.abs(ky) < cut)


def band_mask(n: int) -> np.ndarray:
    """Dealiased band without the mean mode: the support of solver output."""
    keep = dealias_mask(n).copy()
    keep[0, 0] = False
    return keep


def grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Physical coordinates (Y, X) on [0, 2pi)^2."""
    x = 2.0 * np.pi * np.arange(n) / n
    return np.meshgrid(x, x, indexing="ij")


@dataclass
class KolmogorovSolver:
    config: SolverConfig
    ky: np.ndarray = field(init=False, repr=False)
    kx: np.ndarray = field(init=False, repr=False)
    k2: np.ndarray = field(init=False, repr=False)
    inv_k2: np.ndarray = field(init=False, repr=False)
    dealias: np.ndarray = field(init=False, repr=False)
    forcing_hat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.config.n
        self.ky, self.kx = wavenumbers(n)
        self.k2 = self.kx ** 2 + self.ky ** 2
        self.inv_k2 = np.zeros_like(self.k2)
        self.inv_k2[self.k2 > 0] = 1.0 / self.k2[self.k2 > 0]
        self.dealias = dealias_mask(n)
        y, _ = grid(n)
        c = self.config
        f_w = -c.forcing_amplitude * c.forcing_wavenumber * np.cos(c.forcing_wavenumber * y)
        self.forcing_hat = np.fft.fft2(f_w) * self.dealias
        self._set_dt(c.dt)

    def _set_dt(self, dt: float) -> None:
        lin = -self.config.viscosity * self.k2
        self._dt = dt
        self._e_half = np.exp(lin * dt / 2.0)
        self._e_full = np.exp(lin * dt)

    # -- kinematics ---------------------------------------------------------

    def velocity(self, w_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Velocity (u, v) from vorticity via the streamfunction.

        psi_hat = w_hat / |k|^2 (zero mean mode), u = d(psi)/dy, v = -d(psi)/dx.
        """
        psi_hat = w_hat * self.inv_k2
        u = np.fft.ifft2(1j * self.ky * psi_hat).real
        v = np.fft.ifft2(-1j * self.kx * psi_hat).real
        return u, v

    def divergence(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.fft.ifft2(1j * self.kx * np.fft.fft2(u) + 1j * self.ky * np.fft.fft2(v)).real

    def advection(self, w_hat: np.ndarray) -> np.ndarray:
        """Dealiased spectrum of -(u . grad w)."""
        u, v = self.velocity(w_hat)
        wx = np.fft.ifft2(1j * self.kx * w_hat).real
        wy = np.fft.ifft2(1j * self.ky * w_hat).real
        return np.fft.fft2(-(u * wx + v * wy)) * self.dealias

    def cfl_number(self, w_hat: np.ndarray) -> float:
        u, v = self.velocity(w_hat)
        dx = 2.0 * np.pi / self.config.n
        return float(self._dt * (np.abs(u) + np.abs(v)).max() / dx)

    # -- time stepping ------------------------------------------------------

    def _forcing_and_advection(self, w_hat: np.ndarray) -> np.ndarray:
        return self.advection(w_hat) + self.forcing_hat

    def rhs(self, w_hat: np.ndarray) -> np.ndarray:
        """Full tendency d(w_hat)/dt = advection + viscous + forcing."""
        return self._forcing_and_advection(w_hat) - self.config.viscosity * self.k2 * w_hat

    def step(self, w_hat: np.ndarray, dt: float | None = None) -> np.ndarray:
        """One integrating-factor RK4 step."""
        if dt is not None and dt != self._dt:
            self._set_dt(dt)
        cfl = self.cfl_number(w_hat)
        if cfl > self.config.cfl_max:
            raise CflError(f"CFL number {cfl:.3f} exceeds {self.config.cfl_max}")
        h = self._dt
        e2, e = self._e_half, self._e_full
        nl = self._forcing_and_advection
        k1 = nl(w_hat)
        k2 = nl(e2 * (w_hat + 0.5 * h * k1))
        k3 = nl(e2 * w_hat + 0.5 * h * k2)
        k4 = nl(e * w_hat + h * e2 * k3)
        return e * w_hat + (h / 6.0) * (e * k1 + 2.0 * e2 * (k2 + k3) + k4)

    def integrate(self, w_hat: np.ndarray, steps: int) -> np.ndarray:
        for _ in range(steps):
            w_hat = self.step(w_hat)
        return w_hat


# -- diagnostics ---------------------------------------------------------------


def kinetic_energy(solver: KolmogorovSolver, w_hat: np.ndarray) -> float:
    u, v = solver.velocity(w_hat)
    return 0.5 * float(np.mean(u * u + v * v))


def enstrophy(w_hat: np.ndarray) -> float:
    w = np.fft.ifft2(w_hat).real
    return 0.5 * float(np.mean(w * w))


def hermitian_asymmetry(w_hat: np.ndarray) -> float:
    """max |w_hat(k) - conj(w_hat(-k))|, zero for a real field."""
    flipped = np.conj(np.roll(np.flip(w_hat, axis=(0, 1)), 1, axis=(0, 1)))
    return float(np.abs(w_hat - flipped).max())


def shell_spectrum(w_hat: np.ndarray) -> np.ndarray:
    """Enstrophy per integer |k| shell (index = shell)."""
    n = w_hat.shape[0]
    ky, kx = wavenumbers(n)
    shell = np.rint(np.sqrt(kx ** 2 + ky ** 2)).astype(int)
    power = np.abs(w_hat / (n * n)) ** 2
    return np.bincount(shell.ravel(), weights=power.ravel())


def resolution_decades(w_hat: np.ndarray) -> float:
    """Decades between the peak shell and the last shell inside the 2/3 cutoff."""
    n = w_hat.shape[0]
    spec = shell_spectrum(w_hat)
    cut = int(np.ceil(n / 3.0)) - 1
    tail = spec[cut]
    if tail <= 0:
        return np.inf
    return float(np.log10(spec[1:cut + 1].max() / tail))


# -- initial conditions and datasets --------------------------------------------


def random_vorticity(n: int, rng: np.random.Generator, peak: float = 4.0) -> np.ndarray:
    """Band-limited isotropic Gaussian vorticity with unit RMS, as a spectrum."""
    noise_hat = np.fft.fft2(rng.standard_normal((n, n)))
    ky, kx = wavenumbers(n)
    kmag = np.sqrt(kx ** 2 + ky ** 2)
    envelope = np.exp(-0.5 * (kmag - peak) ** 2)
    w_hat = noise_hat * envelope * band_mask(n)
    w = np.fft.ifft2(w_hat).real
    return w_hat / np.sqrt(np.mean(w * w))


def simulate(config: SolverConfig, n_frames: int, burn_in: int,
             rng: np.random.Generator) -> np.ndarray:
    """One trajectory of saved vorticity frames, shape (n_frames, n, n)."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    solver = KolmogorovSolver(config)
    w_hat = random_vorticity(config.n, rng)
    w_hat = solver.integrate(w_hat, burn_in)
    frames = np.empty((n_frames, config.n, config.n))
    for i in range(n_frames):
        if i:
            w_hat = solver.integrate(w_hat, config.save_every)
        frames[i] = np.fft.ifft2(w_hat).real
    return frames


def split_counts(n_traj: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Trajectory counts per (train, val, test); remainder goes to train."""
    n_val = int(round(fractions[1] * n_traj))
    n_test = int(round(fractions[2] * n_traj))
    n_train = n_traj - n_val - n_test
    if n_train < 1:
        raise ValueError(f"split {fractions} leaves no training trajectory out of {n_traj}")
    return n_train, n_val, n_test


def generate_dataset(config: SolverConfig, n_traj: int, n_frames: int, burn_in: int,
                     seed: int, fractions=(0.625, 0.125, 0.25)):
    """Simulate ``n_traj`` trajectories; returns (data[B,T,1,N,N], split labels).

    Trajectory ``i`` uses its own generator spawned from ``seed`` so adding
    trajectories never changes the earlier ones.
    """
    children = np.random.SeedSequence(seed).spawn(n_traj)
    data = np.empty((n_traj, n_frames, 1, config.n, config.n))
    for i, child in enumerate(children):
        log.info("simulating trajectory %d/%d", i + 1, n_traj)
        data[i, :, 0] = simulate(config, n_frames, burn_in, np.random.default_rng(child))
    n_train, n_val, n_test = split_counts(n_traj, fractions)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return data, labels
