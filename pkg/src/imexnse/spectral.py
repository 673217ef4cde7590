"""Fourier pseudo-spectral backend on the 2*pi-periodic square.

Velocity states are complex arrays of shape ``(2, N, N)`` holding the
coefficients of ``(u1, u2)``; pressure states are ``(N, N)`` arrays.  Axis 0
of each component is the x wavenumber, axis 1 the y wavenumber, both in
``numpy.fft.fftfreq`` order.  Coefficients are normalized so that
``cos(x)`` has coefficient 1/2 at ``k = (1, 0)`` and ``k = (-1, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi
AREA = TWO_PI**2


@dataclass(frozen=True)
class Grid:
    """Collocation grid and wavevector tables for an ``N x N`` periodic box."""

    n_modes: int = 32
    kx: np.ndarray = field(init=False, repr=False, compare=False)
    ky: np.ndarray = field(init=False, repr=False, compare=False)
    k2: np.ndarray = field(init=False, repr=False, compare=False)
    dealias_mask: np.ndarray = field(init=False, repr=False, compare=False)
    retained_mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.n_modes
        if int(n) != n or n % 2 or n < 8:
            raise ValueError(f"n_modes must be an even integer >= 8, got {n!r}")
        k1d = np.fft.fftfreq(n, d=1.0 / n)
        kx, ky = np.meshgrid(k1d, k1d, indexing="ij")
        k2 = kx**2 + ky**2
        dealias = (np.abs(kx) < n / 3) & (np.abs(ky) < n / 3)
        # the Nyquist row/column has no real-valued derivative; keep it empty
        retained = (np.abs(kx) < n / 2) & (np.abs(ky) < n / 2)
        for name, arr in (
            ("kx", kx),
            ("ky", ky),
            ("k2", k2),
            ("dealias_mask", dealias),
            ("retained_mask", retained),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def domain_length(self) -> float:
        return TWO_PI

    @property
    def h_equiv(self) -> float:
        """Collocation spacing, used as the mesh-size analogue."""
        return TWO_PI / self.n_modes

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_modes, self.n_modes)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        x1d = np.arange(self.n_modes) * self.h_equiv
        return np.meshgrid(x1d, x1d, indexing="ij")

    def inv_k2(self) -> np.ndarray:
        out = np.zeros(self.shape)
        nz = self.k2 > 0
        out[nz] = 1.0 / self.k2[nz]
        return out


class SpectralBackend:
    """Spatial operators for the periodic Navier-Stokes time steppers.

    Every method is a pure function of its array arguments, so one backend
    instance can be shared by concurrent integrations.
    """

    def __init__(self, grid: Grid | int = 32):
        if not isinstance(grid, Grid):
            grid = Grid(int(grid))
        self.grid = grid
        self.x, self.y = grid.coordinates()
        self._inv_k2 = grid.inv_k2()

    # -- shape checks -------------------------------------------------------

    def _check_velocity(self, v):
        v = np.asarray(v)
        if v.shape != (2,) + self.grid.shape:
            raise ValueError(
                f"velocity state must have shape {(2,) + self.grid.shape}, got {v.shape}"
            )
        return v

    def _check_scalar(self, q):
        q = np.asarray(q)
        if q.shape != self.grid.shape:
            raise ValueError(f"scalar field must have shape {self.grid.shape}, got {q.shape}")
        return q

    # -- transforms ---------------------------------------------------------

    def zeros_velocity(self) -> np.ndarray:
        return np.zeros((2,) + self.grid.shape, dtype=complex)

    def zeros_pressure(self) -> np.ndarray:
        return np.zeros(self.grid.shape, dtype=complex)

    def to_spectral(self, field: np.ndarray) -> np.ndarray:
        """Physical samples (leading axes arbitrary, last two N x N) to coefficients."""
        field = np.asarray(field, dtype=float)
        if field.shape[-2:] != self.grid.shape:
            raise ValueError(f"field trailing shape must be {self.grid.shape}, got {field.shape}")
        n2 = self.grid.n_modes**2
        return np.fft.fft2(field, axes=(-2, -1)) / n2 * self.grid.retained_mask

    def to_physical(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        if coeffs.shape[-2:] != self.grid.shape:
            raise ValueError(f"coefficient trailing shape must be {self.grid.shape}, got {coeffs.shape}")
        n2 = self.grid.n_modes**2
        return np.fft.ifft2(coeffs * n2, axes=(-2, -1)).real

    def sample_velocity(self, func, *args) -> np.ndarray:
        """Coefficients of ``func(x, y, *args) -> (u1, u2)`` sampled on the grid."""
        u1, u2 = func(self.x, self.y, *args)
        phys = np.stack([np.broadcast_to(u1, self.grid.shape), np.broadcast_to(u2, self.grid.shape)])
        return self.to_spectral(phys)

    def sample_scalar(self, func, *args) -> np.ndarray:
        q = np.broadcast_to(func(self.x, self.y, *args), self.grid.shape)
        return self.to_spectral(q)

    def forcing(self, func, t: float) -> np.ndarray:
        return self.sample_velocity(func, t)

    # -- differential operators ---------------------------------------------

    def divergence(self, v: np.ndarray) -> np.ndarray:
        v = self._check_velocity(v)
        return 1j * (self.grid.kx * v[0] + self.grid.ky * v[1])

    def gradient(self, q: np.ndarray) -> np.ndarray:
        q = self._check_scalar(q)
        return np.stack([1j * self.grid.kx * q, 1j * self.grid.ky * q])

    def leray_project(self, v: np.ndarray) -> np.ndarray:
        """Per-mode orthogonal projection ``I - k k^T / |k|^2``; zeroes k = 0."""
        v = self._check_velocity(v)
        kx, ky = self.grid.kx, self.grid.ky
        kdotv = (kx * v[0] + ky * v[1]) * self._inv_k2
        out = np.stack([v[0] - kx * kdotv, v[1] - ky * kdotv])
        out[:, 0, 0] = 0.0
        return out

    def stokes_operator(self, v: np.ndarray, nu: float) -> np.ndarray:
        """``nu * A v`` with ``A = -Laplacian``."""
        return nu * self.grid.k2 * self._check_velocity(v)

    def _convect(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Dealiased ``1/2 (a . grad) b + 1/2 div(a (x) b)``, unprojected."""
        g = self.grid
        mask = g.dealias_mask
        a = a * mask
        b = b * mask
        a_phys = self.to_physical(a)
        b_phys = self.to_physical(b)
        out = np.empty_like(b)
        for i in range(2):
            dbx = self.to_physical(1j * g.kx * b[i])
            dby = self.to_physical(1j * g.ky * b[i])
            adv = self.to_spectral(a_phys[0] * dbx + a_phys[1] * dby)
            flux_x = self.to_spectral(a_phys[0] * b_phys[i])
            flux_y = self.to_spectral(a_phys[1] * b_phys[i])
            div = 1j * (g.kx * flux_x + g.ky * flux_y)
            out[i] = 0.5 * (adv + div)
        return out * mask

    def nonlinear(self, v: np.ndarray) -> np.ndarray:
        """Skew-symmetric convection term evaluated at ``v``."""
        v = self._check_velocity(v)
        return self._convect(v, v)

    def nonlinear_form(self, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
        """Discrete trilinear form ``b*(u, v, w)``."""
        u, v, w = (self._check_velocity(z) for z in (u, v, w))
        return self.inner(self._convect(u, v), w * self.grid.dealias_mask)

    def stokes_solve(self, rhs: np.ndarray, dt: float, nu: float):
        """Solve ``u/dt + nu A u + grad p = rhs, div u = 0`` mode by mode."""
        rhs = self._check_velocity(rhs)
        if not dt > 0 or not nu > 0:
            raise ValueError(f"dt and nu must be positive, got dt={dt}, nu={nu}")
        g = self.grid
        u = self.leray_project(rhs) / (1.0 / dt + nu * g.k2)
        p = -1j * (g.kx * rhs[0] + g.ky * rhs[1]) * self._inv_k2
        p[0, 0] = 0.0
        return u, p

    # -- inner products and norms -------------------------------------------

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """L2 inner product over the box (Parseval)."""
        return AREA * float(np.sum((np.conj(a) * b).real))

    def l2(self, v: np.ndarray) -> float:
        return float(np.sqrt(AREA * np.sum(np.abs(v) ** 2)))

    def grad_l2(self, v: np.ndarray) -> float:
        return float(np.sqrt(AREA * np.sum(self.grid.k2 * np.abs(v) ** 2)))

    def h_minus1(self, v: np.ndarray) -> float:
        v = np.asarray(v)
        mean = v[..., 0, 0]
        scale = max(float(np.max(np.abs(v))), 1.0)
        if np.any(np.abs(mean) > 1e-14 * scale):
            raise ValueError("H^-1 norm requires a zero-mean field")
        return float(np.sqrt(AREA * np.sum(self._inv_k2 * np.abs(v) ** 2)))

    def linf(self, v: np.ndarray) -> float:
        return float(np.max(np.abs(self.to_physical(v))))

    def norms(self, v: np.ndarray) -> dict[str, float]:
        return {
            "l2": self.l2(v),
            "grad_l2": self.grad_l2(v),
            "h_minus1": self.h_minus1(v),
            "linf": self.linf(v),
        }

    def physical_l2(self, field: np.ndarray) -> float:
        """L2 norm by rectangle-rule quadrature of physical samples."""
        cell = self.grid.h_equiv**2
        return float(np.sqrt(cell * np.sum(np.asarray(field) ** 2)))

    def max_divergence(self, v: np.ndarray) -> float:
        """Largest per-mode ``|k . v(k)|`` relative to the coefficient 2-norm."""
        v = self._check_velocity(v)
        size = float(np.sqrt(np.sum(np.abs(v) ** 2)))
        if size == 0.0:
            return 0.0
        g = self.grid
        return float(np.max(np.abs(g.kx * v[0] + g.ky * v[1]))) / size


def dump_field_csv(path, samples: np.ndarray, t: float, component: str) -> None:
    """Write ``N x N`` physical samples row-major with a ``N, t, component`` header."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if samples.shape != (n, n):
        raise ValueError(f"expected square samples, got {samples.shape}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"{n},{t:.17g},{component}\n")
        for row in samples:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
    tmp.replace(path)


def load_field_csv(path) -> tuple[np.ndarray, float, str]:
    with open(path) as fh:
        n, t, component = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = int(n)
    if data.shape != (n, n):
        raise ValueError(f"header says N={n} but body has shape {data.shape}")
    return data, float(t), component
