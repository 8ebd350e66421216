"""Spectral algebra for real periodic fields on T^3 = [0, 2*pi]^3.

Conventions
-----------
* Grid points ``x_j = 2*pi*j/n``, ``j = 0..n-1`` on each axis, ``n`` a power of two.
* Fourier coefficients are Fourier-series coefficients,
  ``f_hat(k) = (2*pi)^-3 * int f(x) exp(-i k.x) dx``, so that
  ``f(x) = sum_k f_hat(k) exp(i k.x)`` and a constant ``c`` has ``f_hat(0) = c``.
  Storage uses the real-to-complex half spectrum of ``numpy.fft.rfftn``.
* First derivatives use the wavenumber with the Nyquist entry set to zero, which
  keeps derivatives of real fields real.  Second-order operators (Laplacian, heat
  semigroup, Sobolev weights) use the true ``|k|^2``.
* Sobolev weight ``(1 + |k|^2)^(s/2)``, so ``H^0 = L^2`` exactly.

Array layout: a scalar field is ``(n, n, n)``, a vector ``(3, n, n, n)``, a tensor
``(3, 3, n, n, n)``.  Every operator acts on the trailing three axes, so stacks of
fields (for example time families) broadcast through the leading axes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
VOLUME = TWO_PI**3

RANKS = {"scalar": 0, "vector": 1, "tensor": 2}
_RANK_SHAPE = {"scalar": (), "vector": (3,), "tensor": (3, 3)}


class GridMismatchError(ValueError):
    """Raised when array shapes do not match the grid."""


# ---------------------------------------------------------------------------
# Grid


@dataclass(frozen=True)
class Grid3:
    """Uniform collocation grid with ``n`` points per axis on ``[0, 2*pi)^3``."""

    n: int

    def __post_init__(self) -> None:
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 8 or (n & (n - 1)) != 0:
            raise ValueError(f"grid size must be a power of two >= 8, got {n!r}")

    # --- coordinates -----------------------------------------------------
    @cached_property
    def x1d(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n) / self.n

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable coordinate arrays ``(x1, x2, x3)``."""
        x = self.x1d
        return x[:, None, None], x[None, :, None], x[None, None, :]

    @cached_property
    def points(self) -> np.ndarray:
        """Full coordinate array of shape ``(3, n, n, n)``."""
        x1, x2, x3 = self.mesh
        shape = (self.n,) * 3
        return np.stack([np.broadcast_to(c, shape) for c in (x1, x2, x3)])

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n // 2 + 1)

    @property
    def cell_volume(self) -> float:
        return (TWO_PI / self.n) ** 3

    # --- wavenumbers -----------------------------------------------------
    @cached_property
    def k(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer wavenumbers, broadcastable to the half spectrum."""
        n = self.n
        kf = np.fft.fftfreq(n, 1.0 / n)
        kr = np.fft.rfftfreq(n, 1.0 / n)
        return kf[:, None, None], kf[None, :, None], kr[None, None, :]

    @cached_property
    def kd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Derivative wavenumbers (Nyquist entries zeroed)."""
        out = []
        for kk in self.k:
            kk = kk.copy()
            kk[np.abs(kk) == self.n // 2] = 0.0
            out.append(kk)
        return tuple(out)

    @cached_property
    def kd_vec(self) -> np.ndarray:
        shape = self.spectral_shape
        return np.stack([np.broadcast_to(c, shape) for c in self.kd])

    @cached_property
    def k2(self) -> np.ndarray:
        k1, k2, k3 = self.k
        return k1**2 + k2**2 + k3**2

    @cached_property
    def kd2(self) -> np.ndarray:
        k1, k2, k3 = self.kd
        return k1**2 + k2**2 + k3**2

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @cached_property
    def half_weights(self) -> np.ndarray:
        """Multiplicity of each stored half-spectrum entry in the full lattice."""
        n = self.n
        w = np.full(n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return np.broadcast_to(w[None, None, :], self.spectral_shape)

    # --- transforms ------------------------------------------------------
    def check(self, values: np.ndarray) -> None:
        if values.shape[-3:] != (self.n,) * 3:
            raise GridMismatchError(
                f"array with trailing shape {values.shape[-3:]} does not match n={self.n}"
            )

    def fft(self, values: np.ndarray) -> np.ndarray:
        self.check(values)
        return np.fft.rfftn(values, axes=(-3, -2, -1)) / self.n**3

    def ifft(self, coeffs: np.ndarray) -> np.ndarray:
        if coeffs.shape[-3:] != self.spectral_shape:
            raise GridMismatchError("coefficient array does not match the grid")
        return np.fft.irfftn(coeffs * self.n**3, s=(self.n,) * 3, axes=(-3, -2, -1))

    # --- grid quadrature -------------------------------------------------
    def integrate(self, values: np.ndarray) -> np.ndarray:
        return values.sum(axis=(-3, -2, -1)) * self.cell_volume

    def mean(self, values: np.ndarray) -> np.ndarray:
        return values.mean(axis=(-3, -2, -1))


# ---------------------------------------------------------------------------
# Operators on coefficient arrays (hat) and on value arrays


def _i(grid: Grid3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(1j * kk for kk in grid.kd)


def grad_hat(grid: Grid3, f_hat: np.ndarray) -> np.ndarray:
    """Gradient; appends a new component axis before the spatial axes."""
    ik = _i(grid)
    return np.stack([c * f_hat for c in ik], axis=-4)


def div_hat(grid: Grid3, u_hat: np.ndarray) -> np.ndarray:
    """Divergence contracting the *first* index of the last component axis pair.

    For a vector ``(..., 3, *spec)`` returns ``(..., *spec)``.  For a tensor
    ``(3, 3, *spec)`` returns the vector ``(div R)^l = d_k R^{kl}``.
    """
    ik = _i(grid)
    if u_hat.ndim >= 5 and u_hat.shape[-5:-3] == (3, 3):
        return sum(ik[k] * u_hat[..., k, :, :, :, :] for k in range(3))
    return sum(ik[k] * u_hat[..., k, :, :, :] for k in range(3))


def curl_hat(grid: Grid3, u_hat: np.ndarray) -> np.ndarray:
    i1, i2, i3 = _i(grid)
    u1, u2, u3 = u_hat[..., 0, :, :, :], u_hat[..., 1, :, :, :], u_hat[..., 2, :, :, :]
    return np.stack([i2 * u3 - i3 * u2, i3 * u1 - i1 * u3, i1 * u2 - i2 * u1], axis=-4)


def lap_hat(grid: Grid3, f_hat: np.ndarray) -> np.ndarray:
    return -grid.k2 * f_hat


def inv_lap_hat(grid: Grid3, f_hat: np.ndarray) -> np.ndarray:
    """Inverse Laplacian with the true symbol; the k=0 entry is set to zero."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(grid.k2 > 0, -1.0 / grid.k2, 0.0)
    return inv * f_hat


def leray_hat(grid: Grid3, u_hat: np.ndarray) -> np.ndarray:
    """Helmholtz-Leray projection onto divergence-free fields.

    Modes whose derivative wavenumber vanishes although ``k != 0`` (pure Nyquist
    modes) cannot be reached by the discrete divergence or gradient; they carry no
    resolvable information and are removed, which keeps the projection idempotent
    and orthogonal.
    """
    kd = grid.kd_vec
    kd2 = grid.kd2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(kd2 > 0, 1.0 / kd2, 0.0)
    proj = np.einsum("i...,i...->...", kd, u_hat) * inv
    comp = np.stack([kd[c] * proj for c in range(3)], axis=-4)
    out = u_hat - comp
    dead = (kd2 == 0) & (grid.k2 > 0)
    out = np.where(dead, 0.0, out)
    return out


def inverse_divergence_hat(grid: Grid3, v_hat: np.ndarray) -> np.ndarray:
    """Symmetric trace-free right inverse of the divergence.

    ``(R v)^{kl} = d_k D^{-1} v^l + d_l D^{-1} v^k - 1/2 (delta_kl + d_k d_l D^{-1}) div D^{-1} v``
    where ``D`` is the Laplacian built from the derivative wavenumbers, so that
    ``div(R v) = v`` holds exactly on every mode reachable by the discrete divergence.
    """
    kd = grid.kd
    kd2 = grid.kd2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(kd2 > 0, -1.0 / kd2, 0.0)
    ik = [1j * c for c in kd]
    u = inv * v_hat  # D^{-1} v  (..., 3, spec)
    d = sum(ik[c] * u[..., c, :, :, :] for c in range(3))  # div D^{-1} v
    lead = v_hat.shape[:-4]
    out = np.zeros(lead + (3, 3) + grid.spectral_shape, dtype=complex)
    for a in range(3):
        for b in range(a, 3):
            term = ik[a] * u[..., b, :, :, :] + ik[b] * u[..., a, :, :, :]
            term = term - 0.5 * ((1.0 if a == b else 0.0) + ik[a] * ik[b] * inv) * d
            out[..., a, b, :, :, :] = term
            out[..., b, a, :, :, :] = term
    return out


def filter_leq_hat(grid: Grid3, f_hat: np.ndarray, cutoff: float) -> np.ndarray:
    """Keep Fourier modes with ``|k| <= cutoff``."""
    if cutoff < 0:
        raise ValueError("cutoff must be nonnegative")
    return np.where(grid.kabs <= cutoff + 1e-12, f_hat, 0.0)


def filter_neq0_hat(grid: Grid3, f_hat: np.ndarray) -> np.ndarray:
    out = f_hat.copy()
    out[..., 0, 0, 0] = 0.0
    return out


def heat_hat(grid: Grid3, f_hat: np.ndarray, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("heat semigroup needs t >= 0")
    return np.exp(-grid.k2 * t) * f_hat


# --- value-space wrappers --------------------------------------------------


def grad(grid: Grid3, f: np.ndarray) -> np.ndarray:
    return grid.ifft(grad_hat(grid, grid.fft(f)))


def div(grid: Grid3, u: np.ndarray) -> np.ndarray:
    return grid.ifft(div_hat(grid, grid.fft(u)))


def curl(grid: Grid3, u: np.ndarray) -> np.ndarray:
    return grid.ifft(curl_hat(grid, grid.fft(u)))


def lap(grid: Grid3, f: np.ndarray) -> np.ndarray:
    return grid.ifft(lap_hat(grid, grid.fft(f)))


def leray(grid: Grid3, u: np.ndarray) -> np.ndarray:
    return grid.ifft(leray_hat(grid, grid.fft(u)))


def inverse_divergence(grid: Grid3, v: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Apply the inverse divergence to a mean-zero vector field ``v``."""
    v_hat = grid.fft(v)
    mean = np.abs(v_hat[..., 0, 0, 0]).max() if v_hat.size else 0.0
    scale = max(np.abs(v).max(), 1e-300)
    if mean > tol * scale:
        raise ValueError("inverse divergence requires mean-zero input")
    return grid.ifft(inverse_divergence_hat(grid, v_hat))


def traceless(t: np.ndarray) -> np.ndarray:
    """Trace-free part of a tensor array ``(3, 3, ...)``."""
    tr = t[0, 0] + t[1, 1] + t[2, 2]
    out = t.copy()
    for a in range(3):
        out[a, a] = out[a, a] - tr / 3.0
    return out


def outer(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pointwise ``u (x) w`` on the collocation grid."""
    return u[:, None] * w[None, :]


def outer_tf(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pointwise trace-free tensor product (the ``(x)-ring`` product)."""
    return traceless(outer(u, w))


# ---------------------------------------------------------------------------
# Mollification in space


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)


def bump3(r: np.ndarray) -> np.ndarray:
    """Unnormalized radial bump ``exp(-1/(1-r^2))`` on the unit ball."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    m = r < 1.0
    out[m] = np.exp(-1.0 / (1.0 - r[m] ** 2))
    return out


def _bump3_symbol(rho: np.ndarray) -> np.ndarray:
    s = 0.5 * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS
    prof = bump3(s) * s**2
    mass = 4 * np.pi * np.sum(w * prof)
    rho = np.asarray(rho, dtype=float)
    val = 4 * np.pi * np.sinc(np.outer(rho.ravel(), s) / np.pi) @ (w * prof)
    return (val / mass).reshape(rho.shape)


def space_mollifier_symbol(grid: Grid3, ell: float) -> np.ndarray:
    """Fourier symbol of ``phi_ell = ell^-3 phi(x/ell)`` for the normalized radial bump."""
    if ell <= 0:
        return np.ones(grid.spectral_shape)
    kabs = grid.kabs
    uniq, inv = np.unique(np.round(kabs, 12), return_inverse=True)
    return _bump3_symbol(uniq * ell)[inv].reshape(kabs.shape)


def space_mollifier_radial(kabs: np.ndarray, ell: float) -> np.ndarray:
    """Symbol of the space mollifier evaluated at arbitrary wavenumber magnitudes."""
    kabs = np.asarray(kabs, dtype=float)
    if ell <= 0:
        return np.ones_like(kabs)
    return _bump3_symbol(kabs * ell)


# ---------------------------------------------------------------------------
# Mollification in time


@dataclass(frozen=True)
class TimeKernel:
    """One-sided time mollifier ``varphi(s) = c s^p (1-s)^p`` on ``(0, 1)``.

    ``varphi_ell(s) = varphi(s/ell)/ell`` is supported in ``(0, ell)``, so
    ``f_ell(t) = int varphi_ell(s) f(t - s) ds`` only reads the past of ``t``.  The
    density is a Beta density, a polynomial of degree ``2p`` (``C^{p-1}`` across the
    endpoints), so weighted integrals over subintervals are exact to rounding under
    Gauss-Legendre quadrature of modest order.
    """

    power: int = 8

    @cached_property
    def _c(self) -> float:
        from scipy.special import beta

        return 1.0 / beta(self.power + 1, self.power + 1)

    def density(self, s: np.ndarray, ell: float, order: int = 0) -> np.ndarray:
        """``d^order/ds^order varphi_ell(s)`` for ``order`` in ``{0, 1}``."""
        u = np.clip(np.asarray(s, dtype=float) / ell, 0.0, 1.0)
        p = self.power
        if order == 0:
            val = u**p * (1 - u) ** p
        elif order == 1:
            val = p * u ** (p - 1) * (1 - u) ** (p - 1) * (1 - 2 * u)
        else:
            raise ValueError("kernel derivatives available up to order 1")
        return self._c * val / ell ** (1 + order)

    def cdf(self, s: np.ndarray, ell: float) -> np.ndarray:
        from scipy.special import betainc

        u = np.clip(np.asarray(s, dtype=float) / ell, 0.0, 1.0)
        return betainc(self.power + 1, self.power + 1, u)


_TQ_NODES, _TQ_WEIGHTS = np.polynomial.legendre.leggauss(24)


def kernel_interval_weights(
    kernel: TimeKernel,
    ell: float,
    t: float,
    edges: np.ndarray,
    rate: float = 0.0,
    order: int = 0,
) -> tuple[np.ndarray, float]:
    """Weights of a piecewise-constant path under the one-sided kernel.

    For a path equal to ``c_j exp(rate * r)`` on ``[edges[j], edges[j+1])`` (times
    ``r``) and extended by its value at ``r = 0`` for ``r < 0``, returns ``(w, w_ext)``
    with ``int d^order varphi_ell(s) f(t - s) ds = sum_j w_j c_j + w_ext c_0``.  The
    exponential factor is integrated numerically on every subinterval (exact to
    rounding for the polynomial kernel); pass ``rate = 0`` for a plain path.
    """
    edges = np.asarray(edges, dtype=float)
    nint = len(edges) - 1
    w = np.zeros(nint)
    lo, hi = max(t - ell, 0.0), t  # window in physical time r = t - s
    if hi > lo:
        j0 = max(int(np.searchsorted(edges, lo, side="right")) - 1, 0)
        j1 = min(int(np.searchsorted(edges, hi, side="left")), nint)
        for j in range(j0, j1):
            a, b = max(edges[j], lo), min(edges[j + 1], hi)
            if b <= a:
                continue
            r = 0.5 * (b - a) * _TQ_NODES + 0.5 * (a + b)
            val = kernel.density(t - r, ell, order) * np.exp(rate * r)
            w[j] = 0.5 * (b - a) * float(np.sum(_TQ_WEIGHTS * val))
    # extension: f(r) = f(0) = c_0 for r < 0, i.e. s in (t, ell)
    if t < ell:
        if order == 0:
            w_ext = 1.0 - float(kernel.cdf(t, ell))
        else:
            w_ext = -float(kernel.density(t, ell, 0))
    else:
        w_ext = 0.0
    return w, w_ext


def kernel_exp_moment(kernel: TimeKernel, ell: float, t: float, rate: float, order: int = 0) -> float:
    """``int d^order varphi_ell(s) e(t - s) ds`` for ``e(r) = exp(rate * max(r, 0))``."""
    w, w_ext = kernel_interval_weights(kernel, ell, t, np.array([0.0, max(t, 0.0) + 1.0]), rate, order)
    return float(w.sum() + w_ext)


# ---------------------------------------------------------------------------
# Spectral field type


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Immutable real field on T^3 stored as half-spectrum Fourier coefficients."""

    grid: Grid3
    rank: str
    coeffs: np.ndarray = field(repr=False)
    trace_free: bool = False
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.rank not in RANKS:
            raise ValueError(f"unknown rank {self.rank!r}")
        expect = _RANK_SHAPE[self.rank] + self.grid.spectral_shape
        if self.coeffs.shape != expect:
            raise GridMismatchError(f"coefficients have shape {self.coeffs.shape}, expected {expect}")
        c = np.array(self.coeffs, dtype=complex, copy=True)
        if not self.validate:
            c.setflags(write=False)
            object.__setattr__(self, "coeffs", c)
            return
        # Hermitian symmetry of a real field: re-transforming the real field must
        # return the stored coefficients.
        back = self.grid.fft(self.grid.ifft(c))
        scale = max(np.abs(c).max(), 1e-300)
        if np.abs(back - c).max() > 1e-10 * scale:
            raise ValueError("coefficients are not Hermitian symmetric (field would not be real)")
        if self.rank == "tensor":
            if np.abs(c - np.swapaxes(c, 0, 1)).max() > 1e-12 * scale:
                raise ValueError("tensor field must be symmetric")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        if self.trace_free and self.rank == "tensor":
            vals = self.values()
            tr = np.abs(vals[0, 0] + vals[1, 1] + vals[2, 2]).max()
            if tr > 1e-12 * max(np.abs(vals).max(), 1e-300):
                raise ValueError("trace_free flag set but the field has a trace")

    # --- construction ----------------------------------------------------
    @classmethod
    def from_values(cls, grid: Grid3, values: np.ndarray, rank: str | None = None, trace_free: bool = False):
        values = np.asarray(values, dtype=float)
        if rank is None:
            rank = {3: "scalar", 4: "vector", 5: "tensor"}.get(values.ndim)
            if rank is None:
                raise GridMismatchError("cannot infer rank from values")
        grid.check(values)
        if values.shape[:-3] != _RANK_SHAPE[rank]:
            raise GridMismatchError(f"values of shape {values.shape} do not match rank {rank}")
        return cls(grid, rank, grid.fft(values), trace_free=trace_free)

    @classmethod
    def from_function(cls, grid: Grid3, fn: Callable[..., np.ndarray], rank: str | None = None):
        x1, x2, x3 = grid.mesh
        vals = np.asarray(fn(x1, x2, x3), dtype=float)
        shape = _RANK_SHAPE[rank] if rank else None
        if shape is not None:
            vals = np.broadcast_to(vals, shape + (grid.n,) * 3)
        return cls.from_values(grid, np.array(vals), rank)

    @classmethod
    def zeros(cls, grid: Grid3, rank: str = "scalar"):
        return cls(grid, rank, np.zeros(_RANK_SHAPE[rank] + grid.spectral_shape, dtype=complex))

    # --- access ------------------------------------------------------------
    def values(self) -> np.ndarray:
        return self.grid.ifft(np.asarray(self.coeffs))

    def _new(self, coeffs: np.ndarray, rank: str | None = None, trace_free: bool = False):
        # operators of this module preserve Hermitian and tensor symmetry exactly, and a
        # result that is pure rounding (say div of a curl) would fail a relative check
        return SpectralField(self.grid, rank or self.rank, coeffs, trace_free=trace_free, validate=False)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._compatible(other)
        return self._new(self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._compatible(other)
        return self._new(self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> "SpectralField":
        return self._new(self.coeffs * float(c), trace_free=self.trace_free)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return self * -1.0

    def _compatible(self, other: "SpectralField") -> None:
        if other.grid != self.grid or other.rank != self.rank:
            raise GridMismatchError("fields live on different grids or ranks")

    # --- operators ---------------------------------------------------------
    def div(self) -> "SpectralField":
        rank = {"vector": "scalar", "tensor": "vector"}[self.rank]
        return self._new(div_hat(self.grid, self.coeffs), rank)

    def grad(self) -> "SpectralField":
        if self.rank != "scalar":
            raise ValueError("gradient is only defined for scalars here")
        return self._new(grad_hat(self.grid, self.coeffs), "vector")

    def curl(self) -> "SpectralField":
        return self._new(curl_hat(self.grid, self.coeffs))

    def lap(self) -> "SpectralField":
        return self._new(lap_hat(self.grid, self.coeffs))

    def leray(self) -> "SpectralField":
        if self.rank != "vector":
            raise ValueError("Leray projection acts on vector fields")
        return self._new(leray_hat(self.grid, self.coeffs))

    def inverse_divergence(self, tol: float = 1e-12) -> "SpectralField":
        if self.rank != "vector":
            raise ValueError("inverse divergence acts on vector fields")
        mean = np.abs(self.coeffs[:, 0, 0, 0]).max()
        if mean > tol * max(np.abs(self.coeffs).max(), 1e-300):
            raise ValueError("inverse divergence requires mean-zero input")
        return self._new(inverse_divergence_hat(self.grid, self.coeffs), "tensor", trace_free=True)

    def filter_leq(self, cutoff: float) -> "SpectralField":
        return self._new(filter_leq_hat(self.grid, self.coeffs, cutoff), trace_free=self.trace_free)

    def filter_neq0(self) -> "SpectralField":
        return self._new(filter_neq0_hat(self.grid, self.coeffs), trace_free=self.trace_free)

    def heat(self, t: float) -> "SpectralField":
        return self._new(heat_hat(self.grid, self.coeffs, t), trace_free=self.trace_free)

    def norm(self, kind: "NormKind") -> float:
        return compute_norm(self, kind)

    def mean(self) -> np.ndarray:
        return np.real(self.coeffs[..., 0, 0, 0])


def leray_project(v: SpectralField) -> SpectralField:
    return v.leray()


def spectral_filter(f: SpectralField, mode: str, cutoff: float | None = None) -> SpectralField:
    """``mode='leq'`` keeps ``|k| <= cutoff``; ``mode='neq0'`` removes the mean."""
    if mode == "leq":
        if cutoff is None:
            raise ValueError("leq mode needs a cutoff")
        return f.filter_leq(cutoff)
    if mode == "neq0":
        return f.filter_neq0()
    raise ValueError(f"unknown filter mode {mode!r}")


def heat_apply(f: SpectralField, t: float) -> SpectralField:
    return f.heat(t)


def transform(grid: Grid3, values: np.ndarray, rank: str | None = None) -> SpectralField:
    return SpectralField.from_values(grid, values, rank)


# ---------------------------------------------------------------------------
# Norms


@dataclass(frozen=True)
class Lp:
    p: float

    def __post_init__(self):
        if not (self.p >= 1):
            raise ValueError("L^p norms need p >= 1")


@dataclass(frozen=True)
class Sobolev:
    s: float


@dataclass(frozen=True)
class Besov:
    """``B^beta_{1,1}`` with the smooth dyadic partition documented in ``lp_blocks``."""

    beta: float


@dataclass(frozen=True)
class CNtx:
    N: int


@dataclass(frozen=True)
class HolderTime:
    alpha: float
    base: object = Lp(2)

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise ValueError("Holder exponent must lie in (0, 1)")


NormKind = Lp | Sobolev | Besov | CNtx | HolderTime


def pointwise_magnitude(values: np.ndarray, ncomp_axes: int) -> np.ndarray:
    if ncomp_axes == 0:
        return np.abs(values)
    axes = tuple(range(values.ndim - 3 - ncomp_axes, values.ndim - 3))
    return np.sqrt(np.sum(values**2, axis=axes))


def lp_norm_values(grid: Grid3, values: np.ndarray, p: float, ncomp_axes: int | None = None) -> np.ndarray:
    """``L^p`` norm by grid quadrature of the pointwise Euclidean magnitude."""
    if p < 1:
        raise ValueError("L^p norms need p >= 1")
    if ncomp_axes is None:
        ncomp_axes = max(values.ndim - 3, 0)
    mag = pointwise_magnitude(values, ncomp_axes)
    if np.isinf(p):
        return mag.max(axis=(-3, -2, -1))
    return (grid.integrate(mag**p)) ** (1.0 / p)


def sobolev_norm_hat(grid: Grid3, f_hat: np.ndarray, s: float, ncomp_axes: int | None = None) -> np.ndarray:
    if ncomp_axes is None:
        ncomp_axes = max(f_hat.ndim - 3, 0)
    w = (1.0 + grid.k2) ** s * grid.half_weights
    dens = np.abs(f_hat) ** 2 * w
    axes = tuple(range(f_hat.ndim - 3 - ncomp_axes, f_hat.ndim))
    return np.sqrt(VOLUME * dens.sum(axis=axes))


def _theta(r: np.ndarray) -> np.ndarray:
    """Smooth radial cutoff: 1 on [0, 1], 0 on [2, inf), C-infinity in between."""
    r = np.asarray(r, dtype=float)

    def h(t):
        out = np.zeros_like(t)
        m = t > 0
        out[m] = np.exp(-1.0 / t[m])
        return out

    a = h(2.0 - r)
    b = h(r - 1.0)
    return a / (a + b)


def lp_blocks(grid: Grid3) -> list[tuple[int, np.ndarray]]:
    """Littlewood-Paley symbols ``(j, symbol)`` on the integer lattice.

    ``Delta_{-1}`` has symbol ``theta(2|k|)`` (support ``|k| <= 1``) and for ``j >= 0``
    ``Delta_j`` has symbol ``theta(2^-j |k|) - theta(2^(1-j) |k|)``, supported in the
    annulus ``2^(j-1) <= |k| <= 2^(j+1)``.  The symbols sum to one on the lattice.
    """
    kabs = grid.kabs
    blocks = [(-1, _theta(2.0 * kabs))]
    kmax = kabs.max()
    j = 0
    while 2.0 ** (j - 1) <= kmax:
        blocks.append((j, _theta(kabs / 2.0**j) - _theta(kabs * 2.0 ** (1 - j))))
        j += 1
    return blocks


def besov_norm_hat(grid: Grid3, f_hat: np.ndarray, beta: float) -> float:
    total = 0.0
    for j, sym in lp_blocks(grid):
        piece = grid.ifft(sym * f_hat)
        total += 2.0 ** (j * beta) * float(np.sum(lp_norm_values(grid, piece, 1)))
    return total


def holder_seminorm(
    times: np.ndarray,
    samples: np.ndarray,
    alpha: float,
    norm: Callable[[np.ndarray], float] | None = None,
    h_min: float | None = None,
    gram: np.ndarray | None = None,
) -> float:
    """Discrete time-Holder seminorm ``max |f(t)-f(s)| / |t-s|^alpha``.

    The maximum runs over sample pairs with ``|t - s| >= h_min`` (default: the
    smallest time step).  For Hilbert norms pass ``gram`` (the matrix of inner
    products between samples); differences are then evaluated in ``O(n^2)`` without
    forming them.
    """
    times = np.asarray(times, dtype=float)
    nt = len(times)
    if nt < 2:
        raise ValueError("Holder seminorm needs at least two time samples")
    if h_min is None:
        h_min = float(np.min(np.diff(times)))
    dt = np.abs(times[:, None] - times[None, :])
    mask = dt >= h_min * (1 - 1e-12)
    if gram is not None:
        d = np.diag(gram)
        sq = np.maximum(d[:, None] + d[None, :] - 2 * gram, 0.0)
        diffs = np.sqrt(sq)
    else:
        if norm is None:
            norm = lambda a: float(np.max(np.abs(a)))  # noqa: E731
        diffs = np.zeros((nt, nt))
        for i in range(nt):
            for j in range(i + 1, nt):
                v = norm(samples[j] - samples[i])
                diffs[i, j] = diffs[j, i] = v
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mask, diffs / np.where(dt > 0, dt, 1.0) ** alpha, 0.0)
    return float(ratio.max())


def l2_gram(grid: Grid3, samples: np.ndarray) -> np.ndarray:
    """Gram matrix of L^2 inner products between stacked samples ``(nt, ...)``."""
    flat = samples.reshape(samples.shape[0], -1)
    return (flat @ flat.T) * grid.cell_volume


def cntx_norm(
    grid: Grid3,
    samples: np.ndarray,
    dt: float,
    N: int,
    time_derivatives: Sequence[np.ndarray] | None = None,
) -> float:
    """``sum_{0 <= n + |a| <= N} sup |d_t^n D^a f|`` over a time family.

    ``samples`` has shape ``(nt, *components, n, n, n)``.  Time derivatives are
    taken from ``time_derivatives[m-1]`` when supplied and otherwise by second-order
    finite differences on the uniform time grid.
    """
    ncomp = samples.ndim - 4
    total = 0.0
    derivs = [samples]
    for m in range(1, N + 1):
        if time_derivatives is not None and len(time_derivatives) >= m:
            derivs.append(np.asarray(time_derivatives[m - 1]))
        else:
            if samples.shape[0] < 3:
                raise ValueError("time derivatives need at least three samples")
            derivs.append(np.gradient(derivs[-1], dt, axis=0, edge_order=2))
    for n_t in range(N + 1):
        f = derivs[n_t]
        f_hat = grid.fft(f)
        for order in range(N - n_t + 1):
            for alpha in _multi_indices(order):
                g_hat = f_hat
                for axis, power in enumerate(alpha):
                    if power:
                        g_hat = (1j * grid.kd[axis]) ** power * g_hat
                g = grid.ifft(g_hat)
                mag = pointwise_magnitude(g, ncomp) if ncomp else np.abs(g)
                total += float(mag.max())
    return total


def _multi_indices(order: int) -> Iterable[tuple[int, int, int]]:
    for a in range(order + 1):
        for b in range(order - a + 1):
            yield (a, b, order - a - b)


def compute_norm(f, kind, **kwargs) -> float:
    """Evaluate ``kind`` on a :class:`SpectralField` (or a time family for the
    time-dependent kinds: pass ``times`` and ``samples`` keyword arguments)."""
    if isinstance(kind, Lp):
        return float(lp_norm_values(f.grid, f.values(), kind.p, len(_RANK_SHAPE[f.rank])))
    if isinstance(kind, Sobolev):
        return float(sobolev_norm_hat(f.grid, f.coeffs, kind.s, len(_RANK_SHAPE[f.rank])))
    if isinstance(kind, Besov):
        return besov_norm_hat(f.grid, f.coeffs, kind.beta)
    if isinstance(kind, CNtx):
        samples = kwargs.get("samples")
        if samples is None:
            raise ValueError("C^N_{t,x} needs a sampled time family")
        return cntx_norm(f, samples, kwargs["dt"], kind.N, kwargs.get("time_derivatives"))
    if isinstance(kind, HolderTime):
        times, samples = kwargs.get("times"), kwargs.get("samples")
        if times is None or samples is None:
            raise ValueError("time-Holder seminorm needs a sampled time family")
        grid = f
        if isinstance(kind.base, Lp) and kind.base.p == 2:
            return holder_seminorm(times, samples, kind.alpha, gram=l2_gram(grid, samples), h_min=kwargs.get("h_min"))
        base = kind.base

        def nrm(a):
            return compute_norm(SpectralField.from_values(grid, a), base)

        return holder_seminorm(times, samples, kind.alpha, norm=nrm, h_min=kwargs.get("h_min"))
    raise TypeError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# Persistence


def dump_wf1(f: SpectralField | np.ndarray, path_or_buffer, grid: Grid3 | None = None) -> None:
    """Write the field as ``WF1 <rank> <n>`` followed by little-endian float64 values."""
    if isinstance(f, SpectralField):
        values, rank, n = f.values(), RANKS[f.rank], f.grid.n
    else:
        values = np.asarray(f, dtype=float)
        rank = values.ndim - 3
        n = values.shape[-1]
    header = f"WF1 {rank} {n}\n".encode("ascii")
    payload = np.ascontiguousarray(values, dtype="<f8").tobytes(order="C")
    if isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__"):
        with open(path_or_buffer, "wb") as fh:
            fh.write(header + payload)
    else:
        path_or_buffer.write(header + payload)


def load_wf1(path_or_buffer) -> np.ndarray:
    if isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__"):
        with open(path_or_buffer, "rb") as fh:
            raw = fh.read()
    else:
        raw = path_or_buffer.read()
    buf = io.BytesIO(raw)
    header = buf.readline().decode("ascii").split()
    if len(header) != 3 or header[0] != "WF1":
        raise ValueError("not a WF1 dump")
    rank, n = int(header[1]), int(header[2])
    shape = (3,) * rank + (n, n, n)
    data = np.frombuffer(buf.read(), dtype="<f8")
    return data.reshape(shape).astype(float)


def norm_report_rows(quantities: dict[str, SpectralField], kinds: Sequence) -> list[tuple[str, str, float]]:
    rows = []
    for name, fld in quantities.items():
        for kind in kinds:
            rows.append((name, repr(kind), compute_norm(fld, kind)))
    return rows
