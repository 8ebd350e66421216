"""One convex-integration step for Navier-Stokes with noise on the 3-torus.

A level ``q`` of the iteration is an object that can be evaluated at any time
``t``: it returns the velocity ``v_q(t)``, the Reynolds stress ``R_q(t)`` and the
noise part ``z_q(t)`` on a collocation grid.  The starting level is given in closed
form.  A step builds level ``q+1`` from level ``q`` by mollifying, constructing the
energy profile ``rho`` and the amplitudes, adding the intermittent-jet
perturbation and assembling the new stress term by term.

Three regimes are supported:

``additive``
    ``d_t v - Lap v + div((v+z)(x)(v+z)) + grad p = div R``, ``z`` the stochastic
    convolution truncated to ``|k| <= f(q)``.
``multiplicative``
    ``d_t v + v/2 - Lap v + theta div(v (x) v) + grad p = div R`` with
    ``theta = exp(B)`` for a scalar Brownian motion.
``nonlinear``
    as ``additive``, with ``z_{q+1}`` solving the stochastic Stokes equation
    ``dz - Lap z dt = G(v_q + z) dB`` through the rough-path solver.

Conventions fixed here:

* trace-free products ``u (x)o w`` and all identities are formed pointwise on the
  collocation grid, so the algebraic identities hold to rounding;
* time mollification is one-sided with the polynomial kernel of
  :class:`~wildflow.field3.TimeKernel`, extending every family by its value at
  ``t = 0`` for ``t < 0``; the defect this extension creates in the mollified
  equation is carried by the term ``R_ext``;
* the mean-free part of a jet product is taken against its continuum mean
  ``xi (x) xi``, so ``P_{!=0}(W (x) W) = W (x) W - xi (x) xi``.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from . import field3 as f3
from .field3 import TWO_PI, Grid3, TimeKernel
from .jets import DirectionSet, GammaDomainError, JetFamily, JetParams, build_direction_set, gamma_squared
from .stochastic import ModalPath, SampledPath, ThetaPath, m_L_squared

log = logging.getLogger(__name__)

REGIMES = ("additive", "multiplicative", "nonlinear")
_C32 = TWO_PI**1.5


class UnresolvedError(ValueError):
    """The grid cannot represent the frequency of the next step."""


# ---------------------------------------------------------------------------
# Parameter schedule and admissibility


@dataclass(frozen=True)
class Inequality:
    """One admissibility condition, stored in log space as ``lhs <= rhs`` (or ``<``).

    ``holds`` is ``None`` for conditions that are recorded but not evaluated.
    """

    name: str
    lhs: float
    rhs: float
    strict: bool = False
    q: int | None = None
    note: str = ""

    @property
    def holds(self) -> bool | None:
        if math.isnan(self.lhs) or math.isnan(self.rhs):
            return None
        return bool(self.lhs < self.rhs) if self.strict else bool(self.lhs <= self.rhs)

    @property
    def margin(self) -> float:
        """``rhs - lhs`` in log space (positive when the condition holds)."""
        return self.rhs - self.lhs


@dataclass(frozen=True)
class ParamSchedule:
    """Frequencies, amplitudes and mollification scales of the iteration.

    Attributes:
        a, b: base and growth of the frequencies.  ``paper`` mode uses
            ``lambda_q = a^(b^q)``; ``toy`` mode uses ``lambda_q = a b^q``.
        beta: amplitude exponent, ``delta_q = lambda_q^(-2 beta)``.
        alpha: small exponent in the mollification scale and the jet parameters.
        L: the size parameter of the start pair and the stopping time.
        mode: ``paper`` or ``toy``.
        c_R: the small constant in the stress bound (no value is fixed by the
            analysis; 1e-2 by default).
        log_a: ``ln a``, for paper-mode bases too large for a float.
        regime: which noise regime the schedule serves.
    """

    a: float = 2.0
    b: float = 8.0
    beta: float = 0.1
    alpha: float = 1.0 / 196
    L: float = 2.0
    mode: str = "toy"
    c_R: float = 1e-2
    log_a: float | None = None
    regime: str = "additive"

    def __post_init__(self):
        if self.mode not in ("paper", "toy"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not (0 < self.beta < 1 and 0 < self.alpha < 1):
            raise ValueError("beta and alpha must lie in (0, 1)")
        if self.L <= 1:
            raise ValueError("L must exceed 1")
        if self.b < 1 or self.ln_a <= 0:
            raise ValueError("need b >= 1 and a > 1")
        if self.c_R <= 0:
            raise ValueError("c_R must be positive")

    # --- shipped schedules ---------------------------------------------------
    @classmethod
    def toy(cls, **kw) -> "ParamSchedule":
        """The shipped toy schedule: ``lambda = 2, 16, 128, ...``."""
        base = dict(a=2.0, b=8.0, beta=0.1, alpha=1.0 / 196, L=2.0, mode="toy", c_R=1e-2)
        base.update(kw)
        return cls(**base)

    @classmethod
    def paper(cls, **kw) -> "ParamSchedule":
        """A paper-mode schedule for the additive regime.

        ``alpha = 1/196``, ``L = 80000`` (so ``c_R L > 45 (2 pi)^{3/2}`` for
        ``c_R = 1e-2``), ``b = 8 * 14^2 * L^2``, ``ln a = 8000`` and
        ``beta = alpha / (36 b)``, which places ``a^{2 beta b} = exp(alpha ln a / 18)``
        inside the window ``(9, c_R L / (5 (2 pi)^{3/2})]``.
        """
        L = kw.pop("L", 80000.0)
        alpha = kw.pop("alpha", 1.0 / 196)
        b = kw.pop("b", 8.0 * 14**2 * L**2)
        base = dict(a=math.inf, b=b, beta=alpha / (36.0 * b), alpha=alpha, L=L, mode="paper", c_R=1e-2,
                    log_a=8000.0)
        base.update(kw)
        return cls(**base)

    # --- frequencies and scales -------------------------------------------
    @property
    def ln_a(self) -> float:
        return float(self.log_a) if self.log_a is not None else math.log(self.a)

    def log_lam(self, q: int) -> float:
        if self.mode == "paper":
            return self.b**q * self.ln_a
        return self.ln_a + q * math.log(self.b)

    def lam(self, q: int) -> float:
        ll = self.log_lam(q)
        return math.exp(ll) if ll < 700 else math.inf

    def log_delta(self, q: int) -> float:
        return -2.0 * self.beta * self.log_lam(q)

    def delta(self, q: int) -> float:
        return math.exp(self.log_delta(q))

    def log_ell(self, q: int) -> float:
        """``ln ell`` with ``ell = lambda_{q+1}^{-3 alpha/2} lambda_q^{-2}``."""
        return -1.5 * self.alpha * self.log_lam(q + 1) - 2.0 * self.log_lam(q)

    def ell(self, q: int) -> float:
        return math.exp(self.log_ell(q))

    def f_exact(self, q: int) -> float:
        return math.exp(self.alpha / 8.0 * self.log_lam(q + 1))

    def f(self, q: int) -> float:
        """Noise truncation ``f(q) = lambda_{q+1}^{alpha/8}``; rounded in toy mode."""
        val = self.f_exact(q)
        if self.mode == "toy":
            r = max(1, int(round(val)))
            if r != val:
                log.info("f(%d) = %.6g rounded to %d", q, val, r)
            return float(r)
        return val

    def M0(self, t: float) -> float:
        """Energy envelope: ``L^4 e^{4Lt}``, or ``e^{4Lt + 2L}`` in the multiplicative regime."""
        return math.exp(self.log_M0(t))

    def log_M0(self, t: float) -> float:
        if self.regime == "multiplicative":
            return 4 * self.L * t + 2 * self.L
        return 4 * math.log(self.L) + 4 * self.L * t

    def dM0(self, t: float) -> float:
        return 4 * self.L * self.M0(t)

    @property
    def m_L(self) -> float:
        return math.sqrt(m_L_squared(self.L))

    def jet_params(self, q: int) -> JetParams:
        """Jet parameters for the perturbation built at step ``q -> q+1``."""
        return JetParams.from_lambda(self.lam(q + 1), self.regime)

    # --- admissibility ------------------------------------------------------
    def admissibility(self, steps: int = 3) -> list[Inequality]:
        """All parameter conditions of the active regime, evaluated in log space."""
        if self.regime == "additive":
            return self._additive_conditions(steps)
        if self.regime == "multiplicative":
            return self._multiplicative_conditions(steps)
        return self._nonlinear_conditions(steps)

    def admissible(self, steps: int = 3) -> bool:
        return all(c.holds is not False for c in self.admissibility(steps))

    def _ell_conditions(self, steps: int) -> list[Inequality]:
        out = []
        a = self.alpha
        for q in range(steps):
            le, l0, l1 = self.log_ell(q), self.log_lam(q), self.log_lam(q + 1)
            out.append(Inequality("ell:scale", le + 4 * l0, -a * l1, q=q, note="ell lambda_q^4 <= lambda_{q+1}^-alpha"))
            out.append(Inequality("ell:inverse", -le, 2 * a * l1, q=q, note="ell^-1 <= lambda_{q+1}^{2 alpha}"))
            out.append(Inequality("ell:L", math.log(4 * self.L), -le, q=q, note="4L <= ell^-1"))
        return out

    def _additive_conditions(self, steps: int) -> list[Inequality]:
        ln_a, bb, al, L, cR = self.ln_a, self.beta * self.b, self.alpha, self.L, self.c_R
        ln_c32 = math.log(_C32)
        ln_cRL = math.log(cR * L)
        upper = math.log(cR) + ln_c32 + 4 * ln_a - math.log(2.0)
        corr = _C32 * math.exp(4 * ln_a) / 2 if 4 * ln_a < 700 else math.inf
        if math.isfinite(corr):
            upper = math.log(cR) + math.log(corr - 1.0)
        out = [
            Inequality("aaa", math.log(3.0), bb * ln_a, strict=True, note="a^{beta b} > 3"),
            Inequality("c:a2", math.log(45.0) + ln_c32, ln_cRL, strict=True, note="c_R L > 45 (2pi)^{3/2}"),
            Inequality("c:a3:chain", math.log(45.0) + ln_c32, math.log(5.0) + ln_c32 + 2 * bb * ln_a, strict=True,
                       note="45 (2pi)^{3/2} < 5 (2pi)^{3/2} a^{2 beta b}"),
            Inequality("c:a3:lower", math.log(5.0) + ln_c32 + 2 * bb * ln_a, ln_cRL,
                       note="5 (2pi)^{3/2} a^{2 beta b} <= c_R L"),
            Inequality("c:a3:upper", ln_cRL, upper, note="c_R L <= c_R ((2pi)^{3/2} a^4 / 2 - 1)"),
            Inequality("alpha-b", math.log(16.0), math.log(al * self.b), strict=True, note="alpha b > 16"),
            Inequality("alpha-beta", math.log(18 * bb), math.log(al), strict=True, note="alpha > 18 beta b"),
            Inequality("a-e2", 2.0, ln_a, note="e^2 <= a"),
            Inequality("v0:C1", math.log(2 * (1 + L)) - ln_c32, 4 * ln_a, note="2(1+L)/(2pi)^{3/2} <= a^4"),
        ]
        out += self._ell_conditions(steps)
        half_log_M0L = 2 * math.log(L) + 2 * L * L
        for q in range(steps):
            lhs = half_log_M0L + (13 * al - 1.0 / 7.0) * self.log_lam(q + 1)
            rhs = math.log(cR / 10.0) + self.log_delta(q + 2)
            out.append(Inequality("c:M", lhs, rhs, q=q, note="M_0(L)^{1/2} lambda_{q+1}^{13 alpha - 1/7} <= c_R delta_{q+2}/10"))
        return out

    def _multiplicative_conditions(self, steps: int) -> list[Inequality]:
        ln_a, bb, al, L, cR = self.ln_a, self.beta * self.b, self.alpha, self.L, self.c_R
        ln_c32 = math.log(_C32)
        target = math.log(cR) + L - 0.25 * math.log(L) - math.log(2 * L + 1.5) - 0.5 * L**0.25
        ln_mL = 0.5 * math.log(m_L_squared(L)) if L < 1e6 else 0.5 * (math.log(3) + 0.5 * math.log(L) + L**0.25)
        out = [
            Inequality("c:li1:chain", math.log(18.0), math.log(2.0) + 2 * bb * ln_a, strict=True,
                       note="18 (2pi)^{3/2} sqrt3 < 2 (2pi)^{3/2} sqrt3 a^{2 beta b}"),
            Inequality("c:li1:upper", math.log(2 * math.sqrt(3)) + ln_c32 + 2 * bb * ln_a, target,
                       note="2 (2pi)^{3/2} sqrt3 a^{2 beta b} <= c_R e^L / (L^{1/4}(2L+3/2) e^{L^{1/4}/2})"),
            Inequality("c:li2", math.log(18 * math.sqrt(3)) + ln_c32, target, strict=True,
                       note="18 (2pi)^{3/2} sqrt3 < c_R e^L / (L^{1/4}(2L+3/2) e^{L^{1/4}/2})"),
            Inequality("cl:2", math.log(4 * L), 4 * ln_a, note="4L <= a^4"),
            Inequality("cl:3", math.log(3.0), bb * ln_a, strict=True, note="a^{beta b} > 3"),
            Inequality("alpha-b", math.log(16.0), math.log(al * self.b), strict=True, note="alpha b > 16"),
            Inequality("alpha-beta", math.log(8 * bb), math.log(al), strict=True, note="alpha > 8 beta b"),
        ]
        out += self._ell_conditions(steps)
        half_log_M0L = 2 * L * L + L
        for q in range(steps):
            lhs = 4 * ln_mL + half_log_M0L + (13 * al - 1.0 / 7.0) * self.log_lam(q + 1)
            rhs = math.log(cR / 10.0) + self.log_delta(q + 2)
            out.append(Inequality("c:M li", lhs, rhs, q=q,
                                  note="m_L^4 M_0(L)^{1/2} lambda_{q+1}^{13 alpha - 1/7} <= c_R delta_{q+2}/10"))
            out.append(Inequality("c:M li:ell", ln_mL, -self.log_ell(q), q=q, note="m_L <= ell^-1"))
        return out

    def _nonlinear_conditions(self, steps: int) -> list[Inequality]:
        nan = math.nan
        note = ("involves M_L = ceil(L^2 M_0(lnln L)^{M_0(lnln L)^7}), far beyond floating "
                "point even in log space; recorded symbolically and not evaluated")
        out = [
            Inequality("alpha-b (nonlinear)", nan, nan, note="alpha b > 32; " + note),
            Inequality("alpha-beta (nonlinear)", nan, nan, note="alpha > 16 beta b^2; " + note),
        ]
        for q in range(steps):
            out.append(Inequality("c:M (nonlinear)", nan, nan, q=q, note=note))
        return out


# ---------------------------------------------------------------------------
# The energy profile rho and the cutoff chi


def _smooth_step(u: np.ndarray) -> np.ndarray:
    """C-infinity step from 0 at ``u <= 0`` to 1 at ``u >= 1`` and its derivative."""
    u = np.asarray(u, dtype=float)
    a = np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
    b = np.where(u < 1, np.exp(-1.0 / np.where(u < 1, 1.0 - u, 1.0)), 0.0)
    s = a / (a + b)
    # derivative of a/(a+b) = (a' b - a b')/(a+b)^2, a' = a/u^2, b' = -b/(1-u)^2
    with np.errstate(divide="ignore", invalid="ignore"):
        da = np.where(u > 0, a / np.where(u > 0, u, 1.0) ** 2, 0.0)
        db = np.where(u < 1, -b / np.where(u < 1, 1.0 - u, 1.0) ** 2, 0.0)
    ds = (da * b - a * db) / (a + b) ** 2
    return s, ds


def chi(z: np.ndarray) -> np.ndarray:
    """``chi(z) = 1`` on ``[0, 1]``, ``z`` on ``[2, inf)`` and a smooth blend in between.

    The blend ``(1 - s) + s z`` with a smooth step ``s`` keeps ``chi`` between ``1`` and
    ``z`` on ``(1, 2)``.  Hence ``z <= 2 chi(z)`` for all ``z >= 0`` and
    ``2 chi(z) <= 4 z`` for ``z >= 1``, so ``|R| / rho = z / (4 chi(z)) <= 1/2``.
    """
    s, _ = _smooth_step(np.asarray(z, dtype=float) - 1.0)
    return (1.0 - s) + s * z


def chi_prime(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    s, ds = _smooth_step(z - 1.0)
    return s + ds * (z - 1.0)


def chi_sandwich(samples: int = 20001, zmax: float = 10.0) -> dict[str, float]:
    """Check ``z <= 2 chi(z)`` on ``[0, zmax]`` and ``2 chi(z) <= 4 z`` on ``[1, zmax]``.

    Returns:
        The smallest slack of each inequality on the sample.
    """
    z = np.linspace(0.0, zmax, samples)
    c = chi(z)
    m = z >= 1.0
    return {"lower": float(np.min(2 * c - z)), "upper": float(np.min(4 * z[m] - 2 * c[m]))}


def _frob(R: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(R**2, axis=(0, 1)))


def build_energy_rho(
    R_l: np.ndarray, dR_l: np.ndarray, schedule: ParamSchedule, q: int, t: float
) -> tuple[np.ndarray, np.ndarray]:
    """``rho = 4 c_R delta_{q+1} M_0(t) chi(|R_l| / (c_R delta_{q+1} M_0(t)))`` and ``d_t rho``.

    Args:
        R_l, dR_l: mollified stress and its time derivative, ``(3, 3, n, n, n)``.
        schedule: parameters; ``q`` is the level being corrected.
        t: time.
    """
    scale = schedule.c_R * schedule.delta(q + 1) * schedule.M0(t)
    dscale = 4 * schedule.L * scale
    mag = _frob(R_l)
    with np.errstate(divide="ignore", invalid="ignore"):
        dmag = np.where(mag > 0, np.sum(R_l * dR_l, axis=(0, 1)) / np.where(mag > 0, mag, 1.0), 0.0)
    zz = mag / scale
    dz = dmag / scale - mag * dscale / scale**2
    c = chi(zz)
    rho = 4 * scale * c
    drho = 4 * dscale * c + 4 * scale * chi_prime(zz) * dz
    return rho, drho


# ---------------------------------------------------------------------------
# Amplitudes


@dataclass(frozen=True, eq=False)
class AmplitudeBundle:
    """``rho``, the squared amplitudes per direction and their time derivatives.

    In the multiplicative regime ``a2`` carries the full stress-balancing amplitude and
    ``abar2 = a2 / theta_l`` is the one multiplying the jets; elsewhere they coincide.
    """

    rho: np.ndarray
    drho: np.ndarray
    a2: np.ndarray  # (6, n, n, n)
    da2: np.ndarray
    abar2: np.ndarray
    dabar2: np.ndarray
    theta_l: float = 1.0

    def cancellation_residual(self, ds: DirectionSet, R_l: np.ndarray) -> float:
        """Relative pointwise defect of ``sum a2 xi (x) xi = rho Id - R_l``."""
        lhs = np.einsum("k...,ka,kb->ab...", self.a2, ds.xi, ds.xi)
        rhs = -R_l.copy()
        for i in range(3):
            rhs[i, i] = rhs[i, i] + self.rho
        return float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(self.rho)))


def build_amplitudes(
    rho: np.ndarray,
    drho: np.ndarray,
    R_l: np.ndarray,
    dR_l: np.ndarray,
    ds: DirectionSet,
    theta_l: float = 1.0,
    dtheta_l: float = 0.0,
) -> AmplitudeBundle:
    """Squared amplitudes ``a_xi^2 = rho gamma_xi^2(Id - R_l / rho)``.

    The map ``R -> gamma^2(R)`` is linear, so ``a^2 = rho gamma^2(Id) - gamma^2(R_l)`` and
    the time derivative follows termwise.

    Raises:
        GammaDomainError: if some squared amplitude is negative.
    """
    g_id = gamma_squared(ds, np.eye(3))
    shape = rho.shape
    gR = _gamma_field(ds, R_l)
    gdR = _gamma_field(ds, dR_l)
    a2 = g_id[:, None, None, None] * rho[None] - gR
    da2 = g_id[:, None, None, None] * drho[None] - gdR
    if np.min(a2) < 0:
        raise GammaDomainError(f"negative squared amplitude {np.min(a2):.3g}")
    abar2 = a2 / theta_l
    dabar2 = da2 / theta_l - a2 * dtheta_l / theta_l**2
    assert a2.shape[1:] == shape
    return AmplitudeBundle(rho, drho, a2, da2, abar2, dabar2, theta_l)


def _gamma_field(ds: DirectionSet, R: np.ndarray) -> np.ndarray:
    """``gamma^2`` of a tensor field, ``(3, 3, ...) -> (6, ...)``."""
    sv = np.stack([R[0, 0], R[1, 1], R[2, 2], R[0, 1], R[0, 2], R[1, 2]])
    return np.einsum("ks,s...->k...", ds.M_inv, sv)


# ---------------------------------------------------------------------------
# Jets sampled on the grid


@dataclass(frozen=True, eq=False)
class JetSamples:
    """Per-direction jet scalars at one time: ``psi``, ``d_t psi``, ``phi``, ``Phi``."""

    psi: np.ndarray  # (6, n, n, n)
    dpsi: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    xi: np.ndarray  # (6, 3)
    corr: float
    mu: float


class JetSampler:
    """Cache of the time-independent jet factors of a family on a grid."""

    def __init__(self, fam: JetFamily, grid: Grid3):
        if grid.n < 4 * fam.params.lam:
            raise UnresolvedError(f"grid n={grid.n} does not resolve lambda={fam.params.lam} (need n >= 4 lambda)")
        self.fam = fam
        self.grid = grid
        shape = (grid.n,) * 3
        x = grid.mesh
        K = len(fam.ds)
        self.phi = np.stack([np.broadcast_to(fam.phi(k, x), shape) for k in range(K)])
        self.Phi = np.stack([np.broadcast_to(fam.Phi(k, x), shape) for k in range(K)])

    def at(self, t: float) -> JetSamples:
        fam, x = self.fam, self.grid.mesh
        shape = (self.grid.n,) * 3
        K = len(fam.ds)
        rate = fam.nm * fam.params.mu
        psi = np.stack([np.broadcast_to(fam.psi(k, t, x), shape) for k in range(K)])
        dpsi = np.stack([np.broadcast_to(rate * fam.psi(k, t, x, 1), shape) for k in range(K)])
        return JetSamples(psi, dpsi, self.phi, self.Phi, fam.ds.xi, fam._corr(), fam.params.mu)


# ---------------------------------------------------------------------------
# Perturbation


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Principal, incompressibility and temporal parts of ``w_{q+1}`` and derivatives.

    ``wpc = w^(p) + w^(c)`` is formed as ``curl curl sum abar V``; ``wc`` is the difference.
    """

    wp: np.ndarray
    wc: np.ndarray
    wt: np.ndarray
    w: np.ndarray
    dwpc: np.ndarray
    dwt: np.ndarray

    @property
    def wpc(self) -> np.ndarray:
        return self.wp + self.wc

    @property
    def dw(self) -> np.ndarray:
        return self.dwpc + self.dwt


def _vec_along(xi: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``sum_k s_k xi_k`` for scalars ``s`` of shape ``(6, ...)``."""
    return np.einsum("k...,ka->a...", s, xi)


def _curlcurl(grid: Grid3, U: np.ndarray) -> np.ndarray:
    return grid.ifft(f3.curl_hat(grid, f3.curl_hat(grid, grid.fft(U))))


def _leray_neq0(grid: Grid3, u: np.ndarray) -> np.ndarray:
    return grid.ifft(f3.leray_hat(grid, f3.filter_neq0_hat(grid, grid.fft(u))))


def build_perturbation(grid: Grid3, amps: AmplitudeBundle, jets: JetSamples) -> Perturbation:
    """Assemble ``w_{q+1}`` and its time derivative from amplitudes and jets."""
    abar = np.sqrt(amps.abar2)
    with np.errstate(divide="ignore", invalid="ignore"):
        dabar = np.where(abar > 0, amps.dabar2 / (2 * np.where(abar > 0, abar, 1.0)), 0.0)
    xi = jets.xi
    wp = _vec_along(xi, abar * jets.psi * jets.phi)
    U = jets.corr * _vec_along(xi, abar * jets.psi * jets.Phi)
    dU = jets.corr * _vec_along(xi, (dabar * jets.psi + abar * jets.dpsi) * jets.Phi)
    wpc = _curlcurl(grid, U)
    dwpc = _curlcurl(grid, dU)
    phi2 = jets.phi**2
    T = _vec_along(xi, amps.a2 * phi2 * jets.psi**2)
    dT = _vec_along(xi, (amps.da2 * jets.psi**2 + 2 * amps.a2 * jets.psi * jets.dpsi) * phi2)
    wt = -_leray_neq0(grid, T) / jets.mu
    dwt = -_leray_neq0(grid, dT) / jets.mu
    return Perturbation(wp, wpc - wp, wt, wpc + wt, dwpc, dwt)


def oscillation_identity_residual(
    grid: Grid3, amps: AmplitudeBundle, jets: JetSamples, pert: Perturbation, R_l: np.ndarray
) -> float:
    """Relative defect of ``theta_l w^p (x) w^p + R_l = sum a^2 P_{!=0}(W (x) W) + rho Id``."""
    lhs = amps.theta_l * f3.outer(pert.wp, pert.wp) + R_l
    s = (jets.psi * jets.phi) ** 2 - 1.0
    rhs = np.einsum("k...,ka,kb->ab...", amps.a2 * s, jets.xi, jets.xi)
    for i in range(3):
        rhs[i, i] = rhs[i, i] + amps.rho
    scale = max(np.max(np.abs(lhs)), np.max(np.abs(amps.rho)))
    return float(np.max(np.abs(lhs - rhs)) / scale)


# ---------------------------------------------------------------------------
# Mollified data


@dataclass(frozen=True, eq=False)
class Mollified:
    """Mollified level data at one time.

    ``prod`` is the mollified nonlinearity: ``((v+z) (x)o (v+z))_l`` or, in the
    multiplicative regime, ``(theta v (x)o v)_l``.
    """

    t: float
    v: np.ndarray
    dv: np.ndarray
    z: np.ndarray
    R: np.ndarray
    dR: np.ndarray
    prod: np.ndarray
    theta: float = 1.0
    dtheta: float = 0.0


def _smooth_x(grid: Grid3, values: np.ndarray, ell: float) -> np.ndarray:
    return grid.ifft(f3.space_mollifier_symbol(grid, ell) * grid.fft(values))


def _zeros_vec(grid: Grid3) -> np.ndarray:
    return np.zeros((3,) + (grid.n,) * 3)


def _zeros_ten(grid: Grid3) -> np.ndarray:
    return np.zeros((3, 3) + (grid.n,) * 3)


# ---------------------------------------------------------------------------
# Iteration states


class IterationState:
    """Level ``q`` of the iteration as a time family evaluated on demand.

    Attributes:
        q: level index.
        regime: noise regime.
        grid: collocation grid.
        schedule: parameters.
        times: the uniform grid of stored sample times used for norms.
        kernel: the time mollifier.
    """

    q: int
    regime: str
    grid: Grid3
    schedule: ParamSchedule
    times: np.ndarray
    kernel: TimeKernel

    # --- to be provided by subclasses ---------------------------------------
    def v(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def R(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def z(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def theta(self, t: float) -> float:
        return 1.0

    def dvdt(self, t: float) -> np.ndarray | None:
        """Exact time derivative of ``v`` when available."""
        return None

    def mollified(self, t: float, ell: float) -> Mollified:
        raise NotImplementedError

    # --- shared -------------------------------------------------------------
    def M0(self, t: float) -> float:
        return self.schedule.M0(t)

    def product(self, t: float) -> np.ndarray:
        """The nonlinearity inside the divergence (trace-free part)."""
        return self._product_of(t, self.v(t), None if self.regime == "multiplicative" else self.z(t))

    def _product_of(self, t: float, v: np.ndarray, z: np.ndarray | None) -> np.ndarray:
        if self.regime == "multiplicative":
            return self.theta(t) * f3.outer_tf(v, v)
        u = v + z
        return f3.outer_tf(u, u)

    def equation_terms(self, t: float, dvdt: np.ndarray) -> dict[str, np.ndarray]:
        """Leray-projected terms of the level equation at time ``t``."""
        g = self.grid
        v = self.v(t)
        P = lambda u_hat: g.ifft(f3.leray_hat(g, u_hat))  # noqa: E731
        v_hat = g.fft(v)
        terms = {
            "dt v": P(g.fft(dvdt)),
            "-Lap v": P(-f3.lap_hat(g, v_hat)),
            "div nonlinear": P(f3.div_hat(g, g.fft(self._full_product(t, v)))),
            "-div R": P(-f3.div_hat(g, g.fft(self.R(t)))),
        }
        if self.regime == "multiplicative":
            terms["v/2"] = P(0.5 * v_hat)
        return terms

    def _full_product(self, t: float, v: np.ndarray) -> np.ndarray:
        if self.regime == "multiplicative":
            return self.theta(t) * f3.outer(v, v)
        u = v + self.z(t)
        return f3.outer(u, u)

    def dvdt0(self) -> np.ndarray:
        """``P d_t v(0+)`` from the level equation at ``t = 0``."""
        g = self.grid
        v = self.v(0.0)
        rhs = f3.lap_hat(g, g.fft(v)) - f3.div_hat(g, g.fft(self._full_product(0.0, v))) + f3.div_hat(g, g.fft(self.R(0.0)))
        if self.regime == "multiplicative":
            rhs = rhs - 0.5 * g.fft(v)
        return g.ifft(f3.leray_hat(g, rhs))


# --- starting level ----------------------------------------------------------


class StartState(IterationState):
    """The explicit level ``q = 0``.

    ``v_0 = e^{2Lt} V`` with ``V = A (sin x_3, 0, 0)`` and
    ``R_0 = e^{2Lt} S + (z-coupling)`` with ``S = -c A cos(x_3) (e_1 e_3 + e_3 e_1)``,
    where ``A = L^2 (2 pi)^{-3/2}``, ``c = 2L + 1`` (additive and nonlinear) or
    ``A = m_L e^L (2 pi)^{-3/2}``, ``c = 2L + 3/2`` (multiplicative).  All mollified
    quantities are computed exactly: the time dependence is a known exponential times
    a piecewise-constant noise read.
    """

    def __init__(
        self,
        schedule: ParamSchedule,
        grid: Grid3,
        times: np.ndarray,
        z_path: ModalPath | None = None,
        driver: SampledPath | None = None,
        kernel: TimeKernel | None = None,
    ):
        self.q = 0
        self.regime = schedule.regime
        self.schedule = schedule
        self.grid = grid
        self.times = np.asarray(times, dtype=float)
        self.kernel = kernel or TimeKernel()
        self.driver = driver
        L = schedule.L
        self.rate = 2.0 * L
        if self.regime == "multiplicative":
            self.amp = schedule.m_L * math.exp(L) / _C32
            self.coef = 2 * L + 1.5
            if driver is None:
                raise ValueError("multiplicative start needs the scalar driving path")
            z_path = None
        else:
            self.amp = L**2 / _C32
            self.coef = 2 * L + 1.0
        self.z_path = z_path if (z_path is not None and not z_path.is_zero()) else None
        x3 = grid.mesh[2]
        shape = (grid.n,) * 3
        self.V = _zeros_vec(grid)
        self.V[0] = np.broadcast_to(self.amp * np.sin(x3), shape)
        self.S = _zeros_ten(grid)
        off = np.broadcast_to(-self.coef * self.amp * np.cos(x3), shape)
        self.S[0, 2] = off
        self.S[2, 0] = off

    # --- level data -----------------------------------------------------------
    def v(self, t: float) -> np.ndarray:
        return math.exp(self.rate * t) * self.V

    def dvdt(self, t: float) -> np.ndarray:
        return self.rate * self.v(t)

    def z(self, t: float) -> np.ndarray:
        if self.z_path is None:
            return _zeros_vec(self.grid)
        return self.z_path.values_at(self.grid, t)

    def theta(self, t: float) -> float:
        if self.regime != "multiplicative":
            return 1.0
        return float(math.exp(self.driver.at(t)[0]))

    def R(self, t: float) -> np.ndarray:
        out = math.exp(self.rate * t) * self.S
        if self.z_path is not None:
            v, z = self.v(t), self.z(t)
            out = out + f3.outer_tf(v, z) + f3.outer_tf(z, v) + f3.outer_tf(z, z)
        return out

    def dvdt0(self) -> np.ndarray:
        return self.rate * self.V

    # --- exact mollification ----------------------------------------------------
    def _zz_moll(self, t: float, ell: float, order: int) -> np.ndarray:
        """``d^order (z (x)o z)_l`` as a finite sum over the intervals the kernel sees."""
        zp = self.z_path
        w, w_ext = f3.kernel_interval_weights(self.kernel, ell, t, zp.edges, 0.0, order)
        acc = _zeros_ten(self.grid)
        mask = zp._mask
        for j in np.flatnonzero(w):
            zj = zp.basis.values(self.grid, np.where(mask, zp.coeffs[j], 0.0))
            acc += w[j] * f3.outer_tf(zj, zj)
        if w_ext and np.any(zp.coeffs[0][mask]):
            z0 = zp.basis.values(self.grid, np.where(mask, zp.coeffs[0], 0.0))
            acc += w_ext * f3.outer_tf(z0, z0)
        return _smooth_x(self.grid, acc, ell)

    def _vz_moll(self, t: float, ell: float, order: int) -> np.ndarray:
        """``d^order (v (x)o z + z (x)o v)_l`` using ``v = e^{2Lt} V``."""
        zp = self.z_path
        w, w_ext = f3.kernel_interval_weights(self.kernel, ell, t, zp.edges, self.rate, order)
        c = w @ np.where(zp._mask, zp.coeffs, 0.0) + w_ext * np.where(zp._mask, zp.coeffs[0], 0.0)
        Z = zp.basis.values(self.grid, c)
        return _smooth_x(self.grid, f3.outer_tf(self.V, Z) + f3.outer_tf(Z, self.V), ell)

    def mollified(self, t: float, ell: float) -> Mollified:
        g, k = self.grid, self.kernel
        s1 = float(f3.space_mollifier_radial(np.array(1.0), ell))
        E0 = f3.kernel_exp_moment(k, ell, t, self.rate, 0)
        E1 = f3.kernel_exp_moment(k, ell, t, self.rate, 1)
        VV = _smooth_x(g, f3.outer_tf(self.V, self.V), ell)
        v = s1 * E0 * self.V
        dv = s1 * E1 * self.V
        R = s1 * E0 * self.S
        dR = s1 * E1 * self.S
        if self.regime == "multiplicative":
            th = ThetaPath(self.driver, ell, k)
            prod = th.theta_ell(t, 0, 2 * self.rate) * VV
            return Mollified(t, v, dv, _zeros_vec(g), R, dR, prod, th.theta_ell(t, 0), th.theta_ell(t, 1))
        prod = f3.kernel_exp_moment(k, ell, t, 2 * self.rate, 0) * VV
        z = _zeros_vec(g)
        if self.z_path is not None:
            z = self.z_path.basis.values(g, self.z_path.mollified_coeff(t, k, ell, ell))
            cross, dcross = self._vz_moll(t, ell, 0), self._vz_moll(t, ell, 1)
            zz, dzz = self._zz_moll(t, ell, 0), self._zz_moll(t, ell, 1)
            R = R + cross + zz
            dR = dR + dcross + dzz
            prod = prod + cross + zz
        return Mollified(t, v, dv, z, R, dR, prod)


# --- step levels -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepPieces:
    """Everything computed for level ``q+1`` at one time."""

    t: float
    moll: Mollified
    amps: AmplitudeBundle
    jets: JetSamples
    pert: Perturbation
    v: np.ndarray
    dv: np.ndarray
    z: np.ndarray
    terms: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def R(self) -> np.ndarray:
        return sum(self.terms.values())


RESERVED_TERMS = ("R_lin", "R_cor", "R_osc_x", "R_osc_t", "R_osc_d", "R_com", "R_ext", "R_com1")


class StepState(IterationState):
    """Level ``q+1`` built from level ``q``.

    Mollification of this level (needed for a further step) uses Gauss-Legendre
    quadrature in time with ``moll_nodes`` nodes on the kernel support.
    """

    def __init__(
        self,
        prev: IterationState,
        z_path: ModalPath | None = None,
        moll_nodes: int = 16,
        cache_size: int | None = None,
    ):
        self.prev = prev
        self.q = prev.q + 1
        self.regime = prev.regime
        self.schedule = prev.schedule
        self.grid = prev.grid
        self.times = prev.times
        self.kernel = prev.kernel
        self.driver = getattr(prev, "driver", None)
        self.ell = self.schedule.ell(prev.q)
        self.params = self.schedule.jet_params(prev.q)
        self.fam = JetFamily(self.params)
        self.sampler = JetSampler(self.fam, self.grid)
        self.ds = self.fam.ds
        self.z_path = z_path if (z_path is not None and not z_path.is_zero()) else None
        self.moll_nodes = moll_nodes
        self._cache: OrderedDict[float, StepPieces] = OrderedDict()
        # one evaluation holds a few dozen full fields, so keep fewer of them on large grids
        self._cache_size = cache_size if cache_size is not None else (4 if self.grid.n <= 64 else 1)
        self._dvdt0_prev: np.ndarray | None = None

    # --- evaluation ---------------------------------------------------------------
    def _compute(self, t: float) -> StepPieces:
        m = self.prev.mollified(t, self.ell)
        rho, drho = build_energy_rho(m.R, m.dR, self.schedule, self.prev.q, t)
        amps = build_amplitudes(rho, drho, m.R, m.dR, self.ds, m.theta, m.dtheta)
        jets = self.sampler.at(t)
        pert = build_perturbation(self.grid, amps, jets)
        z = _zeros_vec(self.grid) if self.z_path is None else self.z_path.values_at(self.grid, t)
        return StepPieces(t, m, amps, jets, pert, m.v + pert.w, m.dv + pert.dw, z)

    def _core(self, t: float) -> StepPieces:
        t = float(t)
        hit = self._cache.get(t)
        if hit is not None:
            self._cache.move_to_end(t)
            return hit
        pieces = self._compute(t)
        self._cache[t] = pieces
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return pieces

    def _light(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(v, R, z)`` at ``t`` without keeping the intermediate fields.

        Mollifying this level visits each quadrature node once, so caching the full
        pieces there only costs memory (about 3 GB per time on 128^3).
        """
        t = float(t)
        p = self._cache.get(t)
        if p is not None:
            return p.v, self.pieces(t).R, p.z
        p = self._compute(t)
        return p.v, sum(self._assemble(p).values()), p.z

    def pieces(self, t: float) -> StepPieces:
        """Full evaluation at ``t`` including every stress term."""
        p = self._core(t)
        if not p.terms:
            p.terms.update(self._assemble(p))
        return p

    def v(self, t: float) -> np.ndarray:
        return self._core(t).v

    def dvdt(self, t: float) -> np.ndarray:
        return self._core(t).dv

    def z(self, t: float) -> np.ndarray:
        return self._core(t).z

    def theta(self, t: float) -> float:
        if self.regime != "multiplicative":
            return 1.0
        return float(math.exp(self.driver.at(t)[0]))

    def R(self, t: float) -> np.ndarray:
        return self.pieces(t).R

    def w(self, t: float) -> np.ndarray:
        return self._core(t).pert.w

    # --- stress assembly ------------------------------------------------------------
    def _prev_dvdt0(self) -> np.ndarray:
        if self._dvdt0_prev is None:
            self._dvdt0_prev = self.prev.dvdt0()
        return self._dvdt0_prev

    def _assemble(self, p: StepPieces) -> dict[str, np.ndarray]:
        return assemble_reynolds(self, p)

    # --- mollification of this level ---------------------------------------------------
    def mollified(self, t: float, ell: float) -> Mollified:
        k = self.kernel
        g = self.grid
        span = min(t, ell)
        v = _zeros_vec(g)
        dv = _zeros_vec(g)
        z = _zeros_vec(g)
        R = _zeros_ten(g)
        dR = _zeros_ten(g)
        prod = _zeros_ten(g)
        th = dth = 0.0
        if span > 0:
            nodes, weights = np.polynomial.legendre.leggauss(self.moll_nodes)
            s = 0.5 * span * (nodes + 1.0)
            w = 0.5 * span * weights
            k0 = w * k.density(s, ell, 0)
            k1 = w * k.density(s, ell, 1)
            for si, a0, a1 in zip(s, k0, k1):
                r = t - si
                vi, Ri, zi = self._light(r)
                pi = self._product_of(r, vi, zi)
                v += a0 * vi
                dv += a1 * vi
                z += a0 * zi
                R += a0 * Ri
                dR += a1 * Ri
                prod += a0 * pi
                th += a0 * self.theta(r)
                dth += a1 * self.theta(r)
        if t < ell:
            e0 = 1.0 - float(k.cdf(t, ell))
            e1 = -float(k.density(t, ell, 0))
            v0, R0, z0 = self._light(0.0)
            v += e0 * v0
            dv += e1 * v0
            z += e0 * z0
            R += e0 * R0
            dR += e1 * R0
            prod += e0 * self._product_of(0.0, v0, z0)
            th += e0 * self.theta(0.0)
            dth += e1 * self.theta(0.0)
        sx = lambda a: _smooth_x(g, a, ell)  # noqa: E731
        if self.regime != "multiplicative":
            th, dth = 1.0, 0.0
        return Mollified(t, sx(v), sx(dv), sx(z), sx(R), sx(dR), sx(prod), th, dth)


def assemble_reynolds(state: StepState, p: StepPieces) -> dict[str, np.ndarray]:
    """All terms of the new stress at one time.

    Returns:
        ``R_lin``, ``R_cor``, ``R_osc_x``, ``R_osc_t``, ``R_osc_d`` (the remainder that
        makes the oscillation split exact), ``R_com`` (commutator and mollification
        defect without the extension term), ``R_ext`` and ``R_com1``.
    """
    g = state.grid
    m, amps, jets, pert = p.moll, p.amps, p.jets, p.pert
    mult = state.regime == "multiplicative"
    th_l = m.theta if mult else 1.0
    Rinv = lambda u_hat: g.ifft(f3.inverse_divergence_hat(g, u_hat))  # noqa: E731
    w_hat = g.fft(pert.w)
    lin_hat = g.fft(pert.dwpc) - f3.lap_hat(g, w_hat)
    if mult:
        lin_hat = lin_hat + 0.5 * w_hat
    base = m.v if mult else m.v + m.z
    R_lin = Rinv(lin_hat) + th_l * (f3.outer_tf(base, pert.w) + f3.outer_tf(pert.w, base))
    wct = pert.wc + pert.wt
    R_cor = th_l * (f3.outer_tf(wct, pert.w) + f3.outer_tf(pert.wp, wct))
    # oscillation
    xi = jets.xi
    s = (jets.psi * jets.phi) ** 2 - 1.0
    ps2 = jets.phi**2 * jets.psi**2
    F_hat = g.fft(pert.dwt)
    Fx = _zeros_vec(g)
    for k in range(len(xi)):
        sk_hat = g.fft(amps.a2[k] * s[k])
        dir_hat = sum(xi[k][c] * 1j * g.kd[c] * sk_hat for c in range(3))
        F_hat = F_hat + np.stack([xi[k][c] * dir_hat for c in range(3)])
        grad_a2 = g.ifft(f3.grad_hat(g, g.fft(amps.a2[k])))
        Fx += np.einsum("a...,a->...", grad_a2, xi[k])[None] * s[k][None] * xi[k].reshape(3, 1, 1, 1)
    Ft = -_vec_along(xi, amps.da2 * ps2) / jets.mu
    Fx_hat, Ft_hat = g.fft(Fx), g.fft(Ft)
    R_osc_x = Rinv(Fx_hat)
    R_osc_t = Rinv(Ft_hat)
    R_osc_d = Rinv(f3.leray_hat(g, F_hat - Fx_hat - Ft_hat))
    # commutators
    R_com = th_l * f3.outer_tf(base, base) - m.prod
    w_ext = 1.0 - float(state.kernel.cdf(p.t, state.ell)) if p.t < state.ell else 0.0
    R_ext = _zeros_ten(g)
    if w_ext:
        R_ext = -w_ext * Rinv(g.fft(_smooth_x(g, state._prev_dvdt0(), state.ell)))
    v1 = p.v
    if mult:
        R_com1 = (state.theta(p.t) - th_l) * f3.outer_tf(v1, v1)
    else:
        u1, ul = v1 + p.z, v1 + m.z
        R_com1 = f3.outer_tf(u1, u1) - f3.outer_tf(ul, ul)
    return {"R_lin": R_lin, "R_cor": R_cor, "R_osc_x": R_osc_x, "R_osc_t": R_osc_t, "R_osc_d": R_osc_d,
            "R_com": R_com, "R_ext": R_ext, "R_com1": R_com1}


# ---------------------------------------------------------------------------
# Construction entry points


def uniform_times(T: float, dt: float) -> np.ndarray:
    steps = T / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError("T must be an integer multiple of dt")
    return np.linspace(0.0, T, int(round(steps)) + 1)


def start_pair(
    schedule: ParamSchedule,
    grid: Grid3,
    times: np.ndarray,
    z_full: ModalPath | None = None,
    driver: SampledPath | None = None,
    kernel: TimeKernel | None = None,
) -> StartState:
    """The level-0 state.  ``z_full`` is the untruncated noise-part family.

    In the additive regime the level carries ``P_{<= f(0)} z_full``; in the nonlinear
    regime ``z_full`` is ``z_0`` as produced by the rough-path solver; the
    multiplicative regime needs the scalar ``driver`` instead.
    """
    if schedule.mode == "paper":
        bad = [c.name for c in schedule.admissibility() if c.holds is False]
        if bad:
            log.warning("paper-mode schedule violates %s", ", ".join(sorted(set(bad))))
    z = z_full
    if z is not None and schedule.regime == "additive":
        z = z_full.filtered(schedule.f(0))
    st = StartState(schedule, grid, times, z, driver, kernel)
    st.z_full = z_full
    return st


def ci_step(
    state: IterationState,
    z_next: ModalPath | None = None,
    rpde: Callable[[IterationState], ModalPath] | None = None,
    moll_nodes: int = 16,
) -> StepState:
    """Build level ``q+1`` from ``state``.

    Args:
        state: level ``q``.
        z_next: the noise part of the new level when already known.  By default the
            additive regime truncates the stored full family to ``|k| <= f(q+1)``; the
            nonlinear regime reuses ``z_0`` at ``q = 0`` and otherwise calls ``rpde``
            with the current level as drift.
        rpde: solver for the nonlinear regime's noise equation.
        moll_nodes: quadrature nodes used when the new level is mollified later.
    """
    z_full = getattr(state, "z_full", None)
    if z_next is None:
        if state.regime == "additive" and z_full is not None:
            z_next = z_full.filtered(state.schedule.f(state.q + 1))
        elif state.regime == "nonlinear":
            if state.q == 0:
                z_next = state.z_path
            elif rpde is not None:
                z_next = rpde(state)
            else:
                raise ValueError("nonlinear step beyond q = 0 needs an RPDE solver")
    new = StepState(state, z_next, moll_nodes=moll_nodes)
    new.z_full = z_full
    return new


# ---------------------------------------------------------------------------
# Residuals and bounds


@dataclass(frozen=True)
class Residual:
    """Leray-projected equation residual at sample times."""

    times: np.ndarray
    values: np.ndarray
    scales: np.ndarray
    h: float | None

    @property
    def max(self) -> float:
        return float(np.max(self.values / self.scales)) if len(self.values) else 0.0


def residual_check(state: IterationState, times: np.ndarray, h: float | None = None) -> Residual:
    """``max_t ||P[equation](t)||_{L^2} / scale`` with ``d_t v`` exact or by centered differences.

    Args:
        state: the level.
        times: sample times (each must satisfy ``t - h >= 0``).
        h: finite-difference step, or ``None`` for the exact derivative.

    Raises:
        ValueError: with fewer than three samples when a difference is requested, or
            when no exact derivative is available and ``h`` is ``None``.
    """
    g = state.grid
    vals, scales = [], []
    for t in np.atleast_1d(times):
        t = float(t)
        if h is None:
            dv = state.dvdt(t)
            if dv is None:
                raise ValueError("exact time derivative unavailable; pass h")
        else:
            if t - h < 0:
                raise ValueError("centered differences need t - h >= 0")
            dv = (state.v(t + h) - state.v(t - h)) / (2 * h)
        terms = state.equation_terms(t, dv)
        total = sum(terms.values())
        vals.append(float(f3.lp_norm_values(g, total, 2)))
        scales.append(max(max(float(f3.lp_norm_values(g, x, 2)) for x in terms.values()), 1e-300))
    return Residual(np.atleast_1d(np.asarray(times, dtype=float)), np.array(vals), np.array(scales), h)


def residual_convergence(state: IterationState, times: np.ndarray, h0: float, levels: int = 3) -> dict:
    """Residual under step halving and the fitted convergence order."""
    hs = [h0 / 2**j for j in range(levels)]
    res = [residual_check(state, times, h).max for h in hs]
    order = np.polyfit(np.log(hs), np.log(np.maximum(res, 1e-300)), 1)[0]
    ratios = [res[j] / res[j + 1] if res[j + 1] > 0 else np.inf for j in range(levels - 1)]
    return {"h": hs, "residual": res, "ratios": ratios, "order": float(order)}


@dataclass(frozen=True)
class BoundRow:
    name: str
    t: float
    measured: float
    allowed: float

    @property
    def ratio(self) -> float:
        return self.measured / self.allowed if self.allowed > 0 else np.inf

    @property
    def passed(self) -> bool:
        return bool(self.measured <= self.allowed)


def _c1_terms(g: Grid3, v: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """``(sup|v|, sup|d_t v|, sup|d_1 v|, sup|d_2 v|, sup|d_3 v|)`` at one time."""
    v_hat = g.fft(v)
    out = [float(f3.pointwise_magnitude(v, 1).max()), float(f3.pointwise_magnitude(dv, 1).max())]
    for c in range(3):
        out.append(float(f3.pointwise_magnitude(g.ifft(1j * g.kd[c] * v_hat), 1).max()))
    return np.array(out)


def check_inductive_bounds(
    state: IterationState,
    times: np.ndarray | None = None,
    prev: IterationState | None = None,
    alpha0: float = 2.0 / 3 + 0.01,
    besov_delta: float = 0.1,
) -> list[BoundRow]:
    """Evaluate the inductive bounds of ``state`` at the sample times.

    Running suprema over ``[0, t]`` are compared with the envelope at ``t`` for
    ``||v||_{C_t L^2}``, ``||v||_{C^1_{t,x}}`` (sum of running suprema of ``v``, ``d_t v``
    and the three first derivatives) and ``||R||_{C_t L^1}``.  In the nonlinear
    regime with ``prev`` given, the increment bounds in ``L^2`` and in
    ``C^{alpha0}_t B^{-5-delta}_{1,1}`` are added.
    """
    sch = state.schedule
    g = state.grid
    times = state.times if times is None else np.asarray(times, dtype=float)
    mult = state.regime == "multiplicative"
    mfac = sch.m_L if mult else 1.0
    dsum = sum(sch.delta(r) ** 0.5 for r in range(1, state.q + 1))
    rows: list[BoundRow] = []
    run_l2 = run_r = 0.0
    run_c1 = np.zeros(5)
    incr = []
    for t in times:
        t = float(t)
        v = state.v(t)
        dv = state.dvdt(t)
        if dv is None:
            h = 1e-4
            dv = (state.v(t + h) - state.v(max(t - h, 0.0))) / (t + h - max(t - h, 0.0))
        run_l2 = max(run_l2, float(f3.lp_norm_values(g, v, 2)))
        run_c1 = np.maximum(run_c1, _c1_terms(g, v, dv))
        run_r = max(run_r, float(f3.lp_norm_values(g, state.R(t), 1)))
        M0 = sch.M0(t)
        rows.append(BoundRow("v:CtL2", t, run_l2, mfac * M0**0.5 * (1 + dsum)))
        rows.append(BoundRow("v:C1tx", t, float(run_c1.sum()), mfac * M0**0.5 * sch.lam(state.q) ** 4))
        rows.append(BoundRow("R:CtL1", t, run_r, M0 * sch.c_R * sch.delta(state.q + 1)))
        if prev is not None and state.regime == "nonlinear":
            d = v - prev.v(t)
            incr.append(d)
            rows.append(BoundRow("dv:L2", t, float(f3.lp_norm_values(g, d, 2)), M0**0.5 * sch.delta(state.q) ** 0.5))
    if incr:
        samples = np.stack(incr)
        besov = lambda a: f3.besov_norm_hat(g, g.fft(a), -5.0 - besov_delta)  # noqa: E731
        sup = max(besov(a) for a in samples)
        semi = f3.holder_seminorm(times, samples, alpha0, norm=besov) if len(times) > 1 else 0.0
        T = float(times[-1])
        rows.append(BoundRow("dv:C^a0 B^-5-d", T, sup + semi, sch.M0(T) ** 0.5 * sch.delta(state.q) ** 0.5))
    return rows


def reynolds_ctl1(state: IterationState, times: np.ndarray | None = None) -> float:
    """``||R||_{C_t L^1}`` over the sample times."""
    times = state.times if times is None else times
    return max(float(f3.lp_norm_values(state.grid, state.R(float(t)), 1)) for t in times)


def term_norms(state: StepState, times: np.ndarray | None = None) -> dict[str, float]:
    """Per-term ``C_t L^1`` norms of the new stress (the accounting of the decomposition)."""
    times = state.times if times is None else times
    out: dict[str, float] = {}
    for t in times:
        for name, val in state.pieces(float(t)).terms.items():
            out[name] = max(out.get(name, 0.0), float(f3.lp_norm_values(state.grid, val, 1)))
    return out


def step_identities(state: StepState, t: float) -> dict[str, float]:
    """Grid checks of the algebraic identities of one step at time ``t``."""
    g = state.grid
    p = state.pieces(t)
    m = p.moll
    w = p.pert.w
    v1 = p.v
    scale_v = max(float(np.max(np.abs(v1))), 1e-300)
    sym = max(float(np.max(np.abs(R - np.swapaxes(R, 0, 1)))) for R in p.terms.values())
    tr = max(float(np.max(np.abs(R[0, 0] + R[1, 1] + R[2, 2]))) for R in p.terms.values())
    rs = max(float(np.max(np.abs(p.R))), 1e-300)
    return {
        "cancellation": p.amps.cancellation_residual(state.ds, m.R),
        "oscillation": oscillation_identity_residual(g, p.amps, p.jets, p.pert, m.R),
        "rho_ratio": float(np.max(_frob(m.R) / p.amps.rho)),
        "div_v": float(np.max(np.abs(f3.div(g, v1)))) / scale_v,
        "div_w": float(np.max(np.abs(f3.div(g, w)))) / max(float(np.max(np.abs(w))), 1e-300),
        "mean_w": float(np.max(np.abs(g.mean(w)))) / max(float(np.max(np.abs(w))), 1e-300),
        "mean_v": float(np.max(np.abs(g.mean(v1)))) / scale_v,
        "symmetry": sym / rs,
        "trace": tr / rs,
    }
