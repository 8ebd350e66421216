"""Intermittent jets on T^3 and the geometric decomposition of matrices near Id.

Coordinates
-----------
Each direction ``xi`` carries an orthonormal rational frame ``(xi, A, xi x A)`` with
``n_star * frame`` integral.  With ``m = lambda * r_perp`` (an integer) the jet for
``xi`` is a function of the reduced coordinates

* ``theta = n_star*m*(x.xi + mu*t)`` on ``T^1`` (the travelling 1D profile), and
* ``y = n_star*m*(x.A, x.(xi x A)) - Y_xi`` on ``T^2`` (the concentrated 2D profile).

``Y_xi`` is the per-direction shift written directly in reduced coordinates; it is
related to a physical shift ``alpha_xi`` by ``Y = n_star*m*O alpha``.  Because the
linear map ``x -> n_star*m*O x`` is an integer matrix it covers ``T^3`` and pushes
Lebesgue measure forward to Lebesgue measure, so every ``L^p`` norm of a jet factors
into a 1D norm times a 2D norm.  ``verify_jet_bounds`` uses that factorization as a
continuum measurement, which stays exact even when no affordable grid resolves the
jets.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
import sympy as sp
from scipy import integrate
from scipy.special import j0

from .field3 import TWO_PI, Grid3

# ---------------------------------------------------------------------------
# Direction set and geometric lemma

_DIRECTIONS = ((3, 4, 0), (3, -4, 0), (0, 3, 4), (0, 3, -4), (4, 0, 3), (-4, 0, 3))
_DENOM = 5
_SYM_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


class GammaDomainError(ValueError):
    """The matrix lies outside the region where all coefficients are positive."""


@dataclass(frozen=True)
class DirectionSet:
    """Six rational unit directions with frames and the decomposition matrix."""

    xi_rational: tuple[tuple[Fraction, ...], ...]
    a_rational: tuple[tuple[Fraction, ...], ...]
    n_star: int

    @cached_property
    def xi(self) -> np.ndarray:
        return np.array([[float(c) for c in v] for v in self.xi_rational])

    @cached_property
    def A(self) -> np.ndarray:
        return np.array([[float(c) for c in v] for v in self.a_rational])

    @cached_property
    def B(self) -> np.ndarray:
        """The third frame vector ``xi x A``."""
        return np.cross(self.xi, self.A)

    @cached_property
    def frames_int(self) -> np.ndarray:
        """Integer matrices ``n_star * (A; xi x A; xi)`` of shape ``(6, 3, 3)``."""
        out = []
        for xi, a in zip(self.xi_rational, self.a_rational):
            b = _cross(xi, a)
            rows = [a, b, xi]
            out.append([[int(c * self.n_star) for c in r] for r in rows])
        return np.array(out, dtype=np.int64)

    @cached_property
    def M_rational(self) -> sp.Matrix:
        """Map from coefficients ``c_xi`` to the six independent entries of ``sum c xi xi^T``."""
        return sp.Matrix(
            [[sp.Rational(xi[a].numerator, xi[a].denominator) * sp.Rational(xi[b].numerator, xi[b].denominator)
              for xi in self.xi_rational] for a, b in _SYM_INDEX]
        )

    @cached_property
    def M(self) -> np.ndarray:
        return np.array(self.M_rational.evalf(), dtype=float)

    @cached_property
    def M_inv(self) -> np.ndarray:
        return np.linalg.inv(self.M)

    def gamma_sq_identity_rational(self) -> list[sp.Rational]:
        rhs = sp.Matrix([1, 1, 1, 0, 0, 0])
        return list(self.M_rational.LUsolve(rhs))

    def __len__(self) -> int:
        return len(self.xi_rational)


def build_direction_set() -> DirectionSet:
    """Return the fixed sextet ``{(3,4,0), (3,-4,0), (0,3,4), (0,3,-4), (4,0,3), (-4,0,3)}/5``.

    The companion vector ``A_xi`` is the first of ``e3, e1, e2`` orthogonal to ``xi``.
    Every identity is verified in exact rational arithmetic before returning.
    """
    xis = tuple(tuple(Fraction(c, _DENOM) for c in v) for v in _DIRECTIONS)
    basis = [(0, 0, 1), (1, 0, 0), (0, 1, 0)]
    As = []
    for xi in xis:
        a = next(tuple(Fraction(c) for c in e) for e in basis if _dot(e, xi) == 0)
        As.append(a)
    for xi, a in zip(xis, As):
        b = _cross(xi, a)
        for u in (xi, a, b):
            if _dot(u, u) != 1:
                raise AssertionError("direction frame is not orthonormal")
        if _dot(xi, a) != 0 or _dot(xi, b) != 0 or _dot(a, b) != 0:
            raise AssertionError("direction frame is not orthogonal")
    n_star = None
    for n in range(1, 100):
        if all((c * n).denominator == 1 for xi, a in zip(xis, As) for u in (xi, a, _cross(xi, a)) for c in u):
            n_star = n
            break
    ds = DirectionSet(xis, tuple(As), n_star)
    det = ds.M_rational.det()
    if abs(float(det)) <= 1e-6:
        raise AssertionError("decomposition matrix is degenerate")
    if any(c <= 0 for c in ds.gamma_sq_identity_rational()):
        raise AssertionError("gamma^2(Id) must be positive")
    return ds


def sym_vec(R: np.ndarray) -> np.ndarray:
    """Independent entries of symmetric ``R`` with shape ``(3, 3, ...)`` as ``(6, ...)``."""
    return np.stack([R[a, b] for a, b in _SYM_INDEX])


def gamma_squared(ds: DirectionSet, R: np.ndarray) -> np.ndarray:
    """Coefficients ``gamma_xi^2(R)`` by the linear solve (works pointwise on fields)."""
    return np.tensordot(ds.M_inv, sym_vec(np.asarray(R, dtype=float)), axes=(1, 0))


def gamma_coefficients(ds: DirectionSet, R: np.ndarray, radius: float = 0.5) -> np.ndarray:
    """Return ``gamma_xi(R)`` for symmetric ``R`` (shape ``(3, 3, ...)``).

    Args:
        ds: direction set.
        R: symmetric matrix or matrix field.
        radius: Frobenius radius around ``Id`` accepted as input.

    Returns:
        Array of shape ``(6, ...)`` with ``sum gamma^2 xi xi^T = R``.

    Raises:
        GammaDomainError: if ``R`` is outside the radius, or a coefficient is not positive.
    """
    R = np.asarray(R, dtype=float)
    E = R - np.eye(3).reshape((3, 3) + (1,) * (R.ndim - 2))
    if np.max(np.sqrt(np.sum(E**2, axis=(0, 1)))) > radius + 1e-12:
        raise GammaDomainError("matrix outside the Frobenius ball around Id")
    if np.max(np.abs(R - np.swapaxes(R, 0, 1))) > 1e-12 * max(1.0, np.abs(R).max()):
        raise GammaDomainError("matrix is not symmetric")
    g2 = gamma_squared(ds, R)
    if np.min(g2) <= 0:
        raise GammaDomainError("nonpositive decomposition coefficient")
    return np.sqrt(g2)


def positivity_radius(ds: DirectionSet) -> float:
    """Largest Frobenius radius around ``Id`` on which every ``gamma_xi^2`` stays positive."""
    w = np.array([1, 1, 1, np.sqrt(2), np.sqrt(2), np.sqrt(2)])
    g_id = gamma_squared(ds, np.eye(3))
    return float(min(g / np.linalg.norm(row / w) for g, row in zip(g_id, ds.M_inv)))


def reconstruct(ds: DirectionSet, g2: np.ndarray) -> np.ndarray:
    """``sum_xi g2_xi xi (x) xi`` for coefficient arrays of shape ``(6, ...)``."""
    return np.einsum("k...,ka,kb->ab...", g2, ds.xi, ds.xi)


# ---------------------------------------------------------------------------
# Profiles


_U_CUT = 700.0


class RadialFunction:
    """Callable ``P(s, u) exp(-u)`` with ``u = 1/(1 - s)``, zero for ``s >= 1``.

    Writing a bump and its derivatives in this form avoids the overflow of a naive
    symbolic derivative near the edge of the support.
    """

    _s, _u = sp.symbols("s u")

    def __init__(self, poly: sp.Expr):
        self.poly = sp.expand(poly)
        self._fn = sp.lambdify((self._s, self._u), self.poly, "numpy")

    def d(self) -> "RadialFunction":
        """Derivative with respect to ``s``."""
        s, u = self._s, self._u
        return RadialFunction(sp.diff(self.poly, s) + sp.diff(self.poly, u) * u**2 - self.poly * u**2)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape)
        m = s < 1.0
        if np.any(m):
            u = 1.0 / (1.0 - s[m])
            keep = u < _U_CUT
            vals = np.zeros(u.shape)
            uu = u[keep]
            ss = s[m][keep]
            vals[keep] = np.broadcast_to(self._fn(ss, uu), uu.shape) * np.exp(-uu)
            out[m] = vals
        return out

    def scaled(self, c: float) -> "RadialFunction":
        return RadialFunction(self.poly * c)


def _lap2d(F: RadialFunction) -> RadialFunction:
    """2D Laplacian of a radial function of ``s = |y|^2``: ``4 s F'' + 4 F'``."""
    s = RadialFunction._s
    d1 = F.d()
    d2 = d1.d()
    return RadialFunction(4 * s * d2.poly + 4 * d1.poly)


@dataclass(frozen=True)
class Profiles:
    """Normalized profiles: 2D ``chi``, ``Phi = -Lap chi``, ``phi = Lap^2 chi`` and 1D ``psi``.

    2D functions are stored as functions of ``s = |y|^2``; the 1D profile
    ``psi = d/dx exp(-1/(1-x^2))`` is stored through the even bump ``b(x^2)`` so that
    ``psi(x) = 2 x b'(x^2)``.
    """

    chi: RadialFunction
    Phi: RadialFunction
    phi: RadialFunction
    bump1: RadialFunction
    psi_scale: float

    @cached_property
    def Phi_d(self) -> RadialFunction:
        return self.Phi.d()

    @cached_property
    def Phi_dd(self) -> RadialFunction:
        return self.Phi_d.d()

    @cached_property
    def phi_d(self) -> RadialFunction:
        return self.phi.d()

    @cached_property
    def _b1(self):
        return self.bump1.d()

    @cached_property
    def _b2(self):
        return self._b1.d()

    @cached_property
    def _b3(self):
        return self._b2.d()

    @cached_property
    def _b4(self):
        return self._b3.d()

    def psi(self, x: np.ndarray, order: int = 0) -> np.ndarray:
        """``psi`` and its first three derivatives on ``[-1, 1]`` (zero outside)."""
        x = np.asarray(x, dtype=float)
        s = x * x
        c = self.psi_scale
        if order == 0:
            return c * 2 * x * self._b1(s)
        if order == 1:
            return c * (2 * self._b1(s) + 4 * s * self._b2(s))
        if order == 2:
            return c * (12 * x * self._b2(s) + 8 * x * s * self._b3(s))
        if order == 3:
            return c * (12 * self._b2(s) + 48 * s * self._b3(s) + 16 * s * s * self._b4(s))
        raise ValueError("psi derivatives available up to order 3")


def _radial_integral(fn, power: int = 2) -> float:
    val, _ = integrate.quad(lambda r: 2 * np.pi * r * fn(np.array([r * r]))[0] ** power, 0.0, 1.0,
                            epsabs=0.0, epsrel=1e-13, limit=400)
    return val


@lru_cache(maxsize=None)
def build_profiles() -> Profiles:
    """Build and normalize the profiles; ``chi(s) = exp(-1/(1-s))`` before rescaling."""
    chi = RadialFunction(sp.Integer(1))
    Phi = RadialFunction(-_lap2d(chi).poly)
    phi = RadialFunction(-_lap2d(Phi).poly)
    # (1/4 pi^2) int phi^2 = 1
    norm2 = _radial_integral(phi)
    c = np.sqrt(4 * np.pi**2 / norm2)
    chi, Phi, phi = chi.scaled(c), Phi.scaled(c), phi.scaled(c)
    bump1 = RadialFunction(sp.Integer(1))
    raw = Profiles(chi, Phi, phi, bump1, 1.0)
    n1, _ = integrate.quad(lambda x: raw.psi(np.array([x]))[0] ** 2, -1, 1, epsabs=0.0, epsrel=1e-13, limit=400)
    return Profiles(chi, Phi, phi, bump1, float(np.sqrt(TWO_PI / n1)))


def profile_normalizations(prof: Profiles) -> dict[str, float]:
    """Quadrature values of the two normalization integrals and the profile means."""
    phi_sq = _radial_integral(prof.phi) / (4 * np.pi**2)
    psi_sq, _ = integrate.quad(lambda x: prof.psi(np.array([x]))[0] ** 2, -1, 1, epsabs=0.0, epsrel=1e-13, limit=400)
    phi_mean = _radial_integral(prof.phi, power=1)
    psi_mean, _ = integrate.quad(lambda x: prof.psi(np.array([x]))[0], -1, 1, epsabs=1e-15, limit=400)
    return {
        "phi_l2_normalized": phi_sq,
        "psi_l2_normalized": psi_sq / TWO_PI,
        "phi_integral": phi_mean,
        "psi_integral": psi_mean,
    }


# ---------------------------------------------------------------------------
# Parameters and shifts


@dataclass(frozen=True)
class JetParams:
    """Jet parameters. ``shifts`` (reduced coordinates, shape ``(6, 2)``) default to
    the deterministic disjoint placement of :func:`find_shifts`."""

    lam: float
    r_perp: float
    r_par: float
    mu: float
    shifts: tuple | None = None
    require_disjoint: bool = True

    def __post_init__(self):
        m = self.lam * self.r_perp
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ValueError(f"lambda*r_perp must be a positive integer, got {m}")
        if not (0 < self.r_perp < 1 and 0 < self.r_par < 1):
            raise ValueError("concentration scales must lie in (0, 1)")
        if self.r_perp > self.r_par:
            raise ValueError("need r_perp <= r_par")

    @property
    def m(self) -> int:
        return int(round(self.lam * self.r_perp))

    @classmethod
    def from_lambda(cls, lam: float, regime: str = "additive", **kw) -> "JetParams":
        """Parameters tied to ``lam`` by the standard exponents, with ``lam*r_perp`` rounded
        to the nearest positive integer (the rounding is part of the returned object)."""
        e_perp = 27.0 / 28.0 if regime == "nonlinear" else 6.0 / 7.0
        m = max(1, int(round(lam ** (1 - e_perp))))
        return cls(lam=lam, r_perp=m / lam, r_par=lam ** (-4.0 / 7.0), mu=lam ** (9.0 / 7.0), **kw)


def pair_relations(ds: DirectionSet) -> list[tuple[int, int, np.ndarray]]:
    """For each pair of directions, the primitive integer ``k`` with ``k . (P_i x, P_j x) = 0``.

    ``P_i`` is the 2x3 integer block ``n_star*(A_i; xi_i x A_i)``; the image of ``T^3``
    under ``x -> (P_i x, P_j x)`` is the subtorus ``{w in T^4 : k.w = 0}``.
    """
    out = []
    F = ds.frames_int
    for i, j in itertools.combinations(range(len(ds)), 2):
        N = sp.Matrix(np.vstack([F[i][:2], F[j][:2]]).tolist())
        ns = N.T.nullspace()
        if len(ns) != 1:
            raise AssertionError("pair map has unexpected rank")
        v = ns[0]
        v = v * sp.ilcm(*[t.q for t in v])
        v = v / sp.gcd(list(v))
        out.append((i, j, np.array([int(t) for t in v], dtype=np.int64)))
    return out


def _wrap(x: np.ndarray) -> np.ndarray:
    return (x + np.pi) % TWO_PI - np.pi


def shift_margins(ds: DirectionSet, shifts: np.ndarray, r_perp: float) -> np.ndarray:
    """Separation margin per pair; supports of ``Phi_(xi)`` are disjoint iff all > 0."""
    out = []
    for i, j, k in pair_relations(ds):
        c = k[:2] @ shifts[i] + k[2:] @ shifts[j]
        reach = r_perp * (np.hypot(*k[:2]) + np.hypot(*k[2:]))
        out.append(abs(_wrap(c)) - reach)
    return np.array(out)


@lru_cache(maxsize=None)
def _optimal_shifts(seed: int = 20240611, starts: int = 200) -> tuple:
    from scipy.optimize import minimize

    ds = build_direction_set()
    rel = pair_relations(ds)
    A = np.zeros((len(rel), 12))
    weights = np.zeros(len(rel))
    for p, (i, j, k) in enumerate(rel):
        A[p, 2 * i:2 * i + 2] = k[:2]
        A[p, 2 * j:2 * j + 2] = k[2:]
        weights[p] = np.hypot(*k[:2]) + np.hypot(*k[2:])

    def obj(y):
        return float(np.sum(weights * np.cos(A @ y)))

    def jac(y):
        return -A.T @ (weights * np.sin(A @ y))

    rng = np.random.default_rng(seed)
    best, best_val = None, -np.inf
    for _ in range(starts):
        res = minimize(obj, rng.uniform(-np.pi, np.pi, 12), jac=jac, method="BFGS")
        c = A @ res.x
        score = np.min(np.abs(_wrap(c)) / weights)
        if score > best_val:
            best, best_val = res.x, score
    return tuple(map(tuple, _wrap(best).reshape(6, 2))), float(best_val)


def find_shifts() -> tuple[np.ndarray, float]:
    """Deterministic shifts maximizing the admissible ``r_perp`` for pairwise disjointness.

    Returns:
        ``(shifts, r_max)``: shifts of shape ``(6, 2)`` in reduced coordinates and the
        largest ``r_perp`` for which the six supports stay pairwise disjoint.
    """
    shifts, r_max = _optimal_shifts()
    return np.array(shifts), r_max


class DisjointnessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Jet family


@dataclass
class JetFamily:
    """Intermittent jets for all directions at fixed parameters.

    Every field is evaluated analytically at arbitrary points ``x`` (shape
    ``(3, ...)``) and time ``t``; ``sample`` evaluates on a grid.
    """

    params: JetParams
    ds: DirectionSet = field(default_factory=build_direction_set)
    prof: Profiles = field(default_factory=build_profiles)

    def __post_init__(self):
        p = self.params
        if p.shifts is None:
            self.shifts, _ = find_shifts()
        else:
            self.shifts = np.asarray(p.shifts, dtype=float).reshape(len(self.ds), 2)
        self.margins = shift_margins(self.ds, self.shifts, p.r_perp)
        if p.require_disjoint and np.min(self.margins) <= 0:
            raise DisjointnessError(
                f"supports overlap for r_perp={p.r_perp}: minimum margin {np.min(self.margins):.3g}"
            )
        self.nm = self.ds.n_star * p.m
        # integer reduced-coordinate matrices n_star*m*(A; xi x A; xi)
        self.P = self.ds.frames_int * p.m

    # --- reduced coordinates ----------------------------------------------
    def _theta(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        P3 = self.P[k][2]
        lin = sum(P3[a] * x[a] for a in range(3))
        return _wrap(lin + self.nm * self.params.mu * t)

    def _y(self, k: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        P = self.P[k]
        y1 = _wrap(sum(P[0][a] * x[a] for a in range(3)) - self.shifts[k][0])
        y2 = _wrap(sum(P[1][a] * x[a] for a in range(3)) - self.shifts[k][1])
        return y1, y2

    # --- scalar factors ----------------------------------------------------
    def psi(self, k: int, t: float, x: np.ndarray, order: int = 0) -> np.ndarray:
        """``d^order/dtheta^order`` of ``psi_{r_par}`` evaluated at the jet phase."""
        rp = self.params.r_par
        th = self._theta(k, t, x)
        return rp ** (-0.5 - order) * self.prof.psi(th / rp, order)

    def phi(self, k: int, x: np.ndarray) -> np.ndarray:
        rp = self.params.r_perp
        y1, y2 = self._y(k, x)
        return self.prof.phi((y1**2 + y2**2) / rp**2) / rp

    def Phi(self, k: int, x: np.ndarray) -> np.ndarray:
        rp = self.params.r_perp
        y1, y2 = self._y(k, x)
        return self.prof.Phi((y1**2 + y2**2) / rp**2) / rp

    def _perp_basis(self, k: int) -> np.ndarray:
        return np.stack([self.ds.A[k], self.ds.B[k]])  # (2, 3)

    def grad_profile(self, k: int, x: np.ndarray, which: str = "Phi") -> np.ndarray:
        """Physical gradient of ``Phi_(xi)`` or ``phi_(xi)`` by the chain rule."""
        rp = self.params.r_perp
        y1, y2 = self._y(k, x)
        s = (y1**2 + y2**2) / rp**2
        F1 = (self.prof.Phi_d if which == "Phi" else self.prof.phi_d)(s)
        gy1 = 2 * F1 * y1 / rp**3
        gy2 = 2 * F1 * y2 / rp**3
        E = self._perp_basis(k)
        return self.nm * np.stack([E[0][a] * gy1 + E[1][a] * gy2 for a in range(3)])

    def hess_Phi(self, k: int, x: np.ndarray) -> np.ndarray:
        rp = self.params.r_perp
        y1, y2 = self._y(k, x)
        s = (y1**2 + y2**2) / rp**2
        F1 = self.prof.Phi_d(s) / rp**3
        F2 = self.prof.Phi_dd(s) / rp**5
        H = [[2 * F1 + 4 * F2 * y1 * y1, 4 * F2 * y1 * y2], [4 * F2 * y1 * y2, 2 * F1 + 4 * F2 * y2 * y2]]
        E = self._perp_basis(k)
        out = np.zeros((3, 3) + np.shape(y1))
        for a in range(3):
            for b in range(3):
                out[a, b] = sum(E[i][a] * H[i][j] * E[j][b] for i in range(2) for j in range(2))
        return self.nm**2 * out

    # --- vector fields -----------------------------------------------------
    def _corr(self) -> float:
        return 1.0 / (self.ds.n_star**2 * self.params.lam**2)

    def W(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        s = self.psi(k, t, x) * self.phi(k, x)
        return self.ds.xi[k].reshape((3,) + (1,) * s.ndim) * s

    def W_c(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        """Corrector ``(n_star lambda)^-2 grad psi x curl(Phi xi) = (n_star lambda)^-2 (xi.grad psi) grad Phi``."""
        dpsi = self.nm * self.psi(k, t, x, 1)
        return self._corr() * dpsi * self.grad_profile(k, x, "Phi")

    def V(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        s = self._corr() * self.psi(k, t, x) * self.Phi(k, x)
        return self.ds.xi[k].reshape((3,) + (1,) * s.ndim) * s

    def dt_W(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        s = self.nm * self.params.mu * self.psi(k, t, x, 1) * self.phi(k, x)
        return self.ds.xi[k].reshape((3,) + (1,) * s.ndim) * s

    def dt_V(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        s = self._corr() * self.nm * self.params.mu * self.psi(k, t, x, 1) * self.Phi(k, x)
        return self.ds.xi[k].reshape((3,) + (1,) * s.ndim) * s

    def div_W_plus_Wc(self, k: int, t: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise divergence of ``W + W_c`` by exact chain-rule derivatives.

        Returns:
            ``(div, scale)`` where ``scale`` is the size of the two terms that cancel.
        """
        xi = self.ds.xi[k]
        psi0 = self.psi(k, t, x)
        dpsi = self.nm * self.psi(k, t, x, 1)  # xi . grad psi
        ddpsi = self.nm**2 * self.psi(k, t, x, 2)
        grad_phi = self.grad_profile(k, x, "phi")
        grad_Phi = self.grad_profile(k, x, "Phi")
        lap_Phi = np.trace(self.hess_Phi(k, x))
        phi = self.phi(k, x)
        div_W = dpsi * phi + psi0 * np.einsum("a,a...->...", xi, grad_phi)
        # div(dpsi grad Phi) = grad(dpsi).grad Phi + dpsi Lap Phi, grad(dpsi) = ddpsi xi
        div_c = self._corr() * (ddpsi * np.einsum("a,a...->...", xi, grad_Phi) + dpsi * lap_Phi)
        return div_W + div_c, np.abs(dpsi * phi)

    def curl_curl_V(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        """Analytic ``curl curl V = grad div V - Lap V`` through the chain rule."""
        xi = self.ds.xi[k]
        psi0 = self.psi(k, t, x)
        dpsi = self.nm * self.psi(k, t, x, 1)
        ddpsi = self.nm**2 * self.psi(k, t, x, 2)
        Phi = self.Phi(k, x)
        gPhi = self.grad_profile(k, x, "Phi")
        H = self.hess_Phi(k, x)
        xi_b = xi.reshape((3,) + (1,) * np.ndim(Phi))
        xi_gPhi = np.einsum("a,a...->...", xi, gPhi)
        grad_div = ddpsi * Phi * xi_b + dpsi * gPhi + dpsi * xi_b * xi_gPhi + psi0 * np.einsum("ab...,b->a...", H, xi)
        lap = psi0 * np.trace(H) + Phi * ddpsi + 2 * dpsi * xi_gPhi
        return self._corr() * (grad_div - xi_b * lap)

    def sample(self, grid: Grid3, t: float, which: str = "W") -> np.ndarray:
        """Stack of the requested field over all directions on the grid, ``(6, 3, n, n, n)``."""
        fn = {"W": self.W, "W_c": self.W_c, "V": self.V, "dt_W": self.dt_W, "dt_V": self.dt_V}[which]
        x = grid.mesh
        shape = (3,) + (grid.n,) * 3
        return np.stack([np.broadcast_to(fn(k, t, x), shape) for k in range(len(self.ds))])

    def sample_scalar(self, grid: Grid3, t: float, which: str) -> np.ndarray:
        x = grid.mesh
        shape = (grid.n,) * 3
        if which == "phi":
            return np.stack([np.broadcast_to(self.phi(k, x), shape) for k in range(len(self.ds))])
        if which == "Phi":
            return np.stack([np.broadcast_to(self.Phi(k, x), shape) for k in range(len(self.ds))])
        if which == "psi":
            return np.stack([np.broadcast_to(self.psi(k, t, x), shape) for k in range(len(self.ds))])
        raise ValueError(which)

    def time_period(self) -> float:
        """Period in ``t`` of every jet: the phase advances by ``2 pi`` per ``2 pi / (n_star m mu)``."""
        return TWO_PI / (self.nm * self.params.mu)

    # --- continuum (reduced-coordinate) quantities --------------------------
    def continuum_mean_WW(self) -> np.ndarray:
        """Exact ``mean(W (x) W)`` per direction, ``(6, 3, 3)``, by 1D x 2D quadrature."""
        m1 = reduced_norms(self.prof, self.params).psi_l2_sq / TWO_PI
        m2 = reduced_norms(self.prof, self.params).phi_l2_sq / TWO_PI**2
        return np.einsum("ka,kb->kab", self.ds.xi, self.ds.xi) * m1 * m2


def build_jet_family(params: JetParams) -> JetFamily:
    return JetFamily(params)


# ---------------------------------------------------------------------------
# Identity checks on the grid


def check_jet_identities(fam: JetFamily, grid: Grid3, t: float = 0.0) -> dict[str, float]:
    """Grid evaluation of the jet identities.

    Returns:
        ``div_rel`` (analytic divergence of ``W + W_c``), ``cross_sup`` (sup of
        ``W_xi (x) W_xi'`` over distinct pairs relative to ``sup|W|^2``),
        ``phi_cross_sup`` (same for ``Phi``), ``mean_err_grid`` (grid average of
        ``W (x) W`` against ``xi (x) xi``), ``mean_err_continuum`` (exact average),
        ``curlcurl_rel`` (``W + W_c`` against the analytic ``curl curl V``),
        ``curlcurl_spectral_rel`` (against a spectral ``curl curl V``, a resolution
        diagnostic) and
        ``mean_W`` (largest grid mean of a component of ``W``).
    """
    if grid.n < 4 * fam.params.lam:
        raise ValueError(f"grid n={grid.n} does not resolve lambda={fam.params.lam} (need n >= 4 lambda)")
    from . import field3 as f3

    x = grid.mesh
    ndir = len(fam.ds)
    shape = (grid.n,) * 3
    amp = np.stack([np.broadcast_to(fam.psi(k, t, x) * fam.phi(k, x), shape) for k in range(ndir)])
    Phis = fam.sample_scalar(grid, t, "Phi")
    div_rel, cc_rel, cc_spec = 0.0, 0.0, 0.0
    for k in range(ndir):
        d, scale = fam.div_W_plus_Wc(k, t, x)
        div_rel = max(div_rel, float(np.abs(d).max() / scale.max()))
        V = np.broadcast_to(fam.V(k, t, x), (3,) + shape)
        cc = f3.curl(grid, f3.curl(grid, V))
        ref = fam.W(k, t, x) + fam.W_c(k, t, x)
        scale = np.abs(ref).max()
        cc_spec = max(cc_spec, float(np.abs(cc - ref).max() / scale))
        cc_rel = max(cc_rel, float(np.abs(fam.curl_curl_V(k, t, x) - ref).max() / scale))
    # |W_i (x) W_j| = |xi_i||xi_j||amp_i amp_j| with unit directions
    wmax2 = float(np.max(np.abs(amp))) ** 2
    cross, pcross = 0.0, 0.0
    for i, j in itertools.combinations(range(ndir), 2):
        cross = max(cross, float(np.abs(amp[i] * amp[j]).max()))
        pcross = max(pcross, float(np.abs(Phis[i] * Phis[j]).max()))
    sq_mean = np.mean(amp**2, axis=(-3, -2, -1))
    target = np.einsum("ka,kb->kab", fam.ds.xi, fam.ds.xi)
    means = target * sq_mean[:, None, None]
    return {
        "div_rel": div_rel,
        "cross_sup": cross / wmax2,
        "phi_cross_sup": pcross / float(np.max(np.abs(Phis))) ** 2,
        "mean_err_grid": float(np.abs(means - target).max()),
        "mean_err_continuum": float(np.abs(fam.continuum_mean_WW() - target).max()),
        "curlcurl_rel": cc_rel,
        "curlcurl_spectral_rel": cc_spec,
        "mean_W": float(np.abs(amp.mean(axis=(-3, -2, -1))).max()),
    }


# ---------------------------------------------------------------------------
# Bounds


@dataclass(frozen=True)
class ReducedNorms:
    """1D and 2D profile integrals at given scales (all on one period)."""

    psi_l2_sq: float
    dpsi_l2_sq: float
    psi_sup: float
    dpsi_sup: float
    phi_l2_sq: float
    grad_phi_l2_sq: float
    phi_sup: float
    grad_Phi_l2_sq: float
    Phi_l2_sq: float


_GL_N = 400
_gl_x, _gl_w = np.polynomial.legendre.leggauss(_GL_N)


def _int_1d(fn) -> float:
    return float(np.sum(_gl_w * fn(_gl_x)))


def _int_disk(fn) -> float:
    r = 0.5 * (_gl_x + 1)
    return float(np.sum(0.5 * _gl_w * 2 * np.pi * r * fn(r)))


def reduced_norms(prof: Profiles, params: JetParams) -> ReducedNorms:
    """Profile norms at scales ``(r_par, r_perp)`` by Gauss-Legendre quadrature on the supports."""
    rpa, rpe = params.r_par, params.r_perp
    psi = lambda u: prof.psi(u) ** 2  # noqa: E731
    dpsi = lambda u: prof.psi(u, 1) ** 2  # noqa: E731
    xs = np.linspace(-1, 1, 4001)
    rs = np.linspace(0, 1, 4001)
    return ReducedNorms(
        psi_l2_sq=_int_1d(psi),
        dpsi_l2_sq=_int_1d(dpsi) / rpa**2,
        psi_sup=float(np.abs(prof.psi(xs)).max()) / rpa**0.5,
        dpsi_sup=float(np.abs(prof.psi(xs, 1)).max()) / rpa**1.5,
        phi_l2_sq=_int_disk(lambda r: prof.phi(r * r) ** 2),
        grad_phi_l2_sq=_int_disk(lambda r: (2 * r * prof.phi_d(r * r)) ** 2) / rpe**2,
        phi_sup=float(np.abs(prof.phi(rs * rs)).max()) / rpe,
        grad_Phi_l2_sq=_int_disk(lambda r: (2 * r * prof.Phi_d(r * r)) ** 2) / rpe**2,
        Phi_l2_sq=_int_disk(lambda r: prof.Phi(r * r) ** 2),
    )


def phi_negative_sobolev(prof: Profiles, params: JetParams, gamma: float, kmax: int | None = None) -> float:
    """Exact ``||phi_(xi)||_{H^-gamma}`` from the 2D lattice sum.

    ``phi_(xi)`` has Fourier modes only at ``k = n_star m O^T (k', 0)``, ``k' in Z^2``,
    where ``|k| = n_star m |k'|`` and the coefficient equals the ``k'`` Fourier
    coefficient of the periodized ``phi_{r_perp}``:
    ``c_{k'} = r_perp * hat_phi(r_perp |k'|) / (4 pi^2)`` with the 2D Hankel transform
    ``hat_phi(eta) = 2 pi int_0^1 phi(r) J0(eta r) r dr``.
    """
    rpe = params.r_perp
    nm = build_direction_set().n_star * params.m
    if kmax is None:
        kmax = int(np.ceil(60.0 / rpe))
    kk = np.arange(-kmax, kmax + 1)
    K1, K2 = np.meshgrid(kk, kk, indexing="ij")
    kab = np.sqrt(K1**2 + K2**2).ravel()
    uniq, inv = np.unique(kab, return_inverse=True)
    r = 0.5 * (_gl_x + 1)
    w = 0.5 * _gl_w * 2 * np.pi * r * prof.phi(r * r)
    hat = np.array([np.sum(w * j0(rpe * q * r)) for q in uniq])
    c = rpe * hat / (4 * np.pi**2)
    weight = (1.0 + (nm * uniq) ** 2) ** (-gamma)
    total = np.sum(np.bincount(inv, minlength=len(uniq)) * weight * np.abs(c) ** 2)
    return float(np.sqrt(TWO_PI**3 * total))


BOUND_MENU = ((0, 0, 2.0), (1, 0, 2.0), (0, 0, np.inf), (0, 1, 2.0))


def jet_norms(params: JetParams, prof: Profiles | None = None) -> dict[tuple, float]:
    """Continuum norms of ``W_(xi)`` (and correctors) over the bound menu.

    Keys are ``(field, N, M, p)``.  Every norm factorizes through the reduced
    coordinates; gradients split orthogonally into the ``xi`` direction (acting on
    ``psi``) and the transverse plane (acting on ``phi``).
    """
    prof = prof or build_profiles()
    rn = reduced_norms(prof, params)
    nm = build_direction_set().n_star * params.m
    mu = params.mu
    corr = 1.0 / (build_direction_set().n_star ** 2 * params.lam**2)
    out = {}
    out[("W", 0, 0, 2.0)] = np.sqrt(rn.psi_l2_sq * rn.phi_l2_sq)
    out[("W", 1, 0, 2.0)] = nm * np.sqrt(rn.dpsi_l2_sq * rn.phi_l2_sq + rn.psi_l2_sq * rn.grad_phi_l2_sq)
    out[("W", 0, 0, np.inf)] = rn.psi_sup * rn.phi_sup
    out[("W", 0, 1, 2.0)] = nm * mu * np.sqrt(rn.dpsi_l2_sq * rn.phi_l2_sq)
    out[("W_c", 0, 0, 2.0)] = corr * nm**2 * np.sqrt(rn.dpsi_l2_sq * rn.grad_Phi_l2_sq)
    out[("V", 0, 0, 2.0)] = corr * np.sqrt(rn.psi_l2_sq * rn.Phi_l2_sq)
    out[("phi", 0, 0, 2.0)] = np.sqrt(rn.phi_l2_sq)
    return out


def bound_scaling(params: JetParams, fieldname: str, N: int, M: int, p: float) -> float:
    """Right-hand side of the jet bounds without the implicit constant."""
    rpe, rpa, lam, mu = params.r_perp, params.r_par, params.lam, params.mu
    ip = 0.0 if np.isinf(p) else 1.0 / p
    if fieldname == "phi":
        return rpe ** (2 * ip - 1) * lam**N
    base = rpe ** (2 * ip - 1) * rpa ** (ip - 0.5) * lam**N * (rpe * lam * mu / rpa) ** M
    if fieldname == "W_c":
        return base * rpe / rpa
    if fieldname == "V":
        return base / lam**2
    return base


@dataclass
class BoundTable:
    rows: list[dict]
    slopes: dict[str, float]

    def max_abs_slope(self) -> float:
        return max(abs(s) for s in self.slopes.values()) if self.slopes else 0.0


def verify_jet_bounds(
    lambdas: Sequence[float],
    regime: str = "additive",
    gamma: float = 5.0,
    delta: float = 0.1,
) -> BoundTable:
    """Measured-to-theory ratios across a parameter sweep with log-log slopes.

    Args:
        lambdas: frequencies of the sweep; parameters follow :meth:`JetParams.from_lambda`.
        regime: selects the ``r_perp`` exponent.
        gamma, delta: negative Sobolev exponent and loss for the ``phi`` estimate.

    Returns:
        A table with one row per ``(lambda, quantity)`` and the fitted slope per quantity.
    """
    prof = build_profiles()
    rows = []
    for lam in lambdas:
        params = JetParams.from_lambda(lam, regime, require_disjoint=False)
        norms = jet_norms(params, prof)
        for (name, N, M, p), val in norms.items():
            theory = bound_scaling(params, name, N, M, p)
            rows.append(dict(lam=lam, r_perp=params.r_perp, r_par=params.r_par, mu=params.mu,
                             quantity=f"{name}[N={N},M={M},p={p}]", measured=float(val),
                             theory=float(theory), ratio=float(val / theory)))
        hval = phi_negative_sobolev(prof, params, gamma)
        theory = lam ** (-gamma) * params.r_perp ** (-delta)
        rows.append(dict(lam=lam, r_perp=params.r_perp, r_par=params.r_par, mu=params.mu,
                         quantity=f"phi[H^-{gamma:g}]", measured=hval, theory=theory, ratio=hval / theory))
    slopes = {}
    if len(lambdas) >= 2:
        for q in sorted({r["quantity"] for r in rows}):
            sel = [r for r in rows if r["quantity"] == q]
            xs = np.log([r["lam"] for r in sel])
            ys = np.log([r["ratio"] for r in sel])
            slopes[q] = float(np.polyfit(xs, ys, 1)[0])
    return BoundTable(rows, slopes)
