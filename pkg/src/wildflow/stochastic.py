"""Noise sampling, stochastic convolution, stopping times and a Galerkin reference solver.

Noise in every regime lives on a finite *modal basis*: real, divergence-free,
``L^2``-orthonormal fields ``e_m(x) = (2 pi)^{-3/2} sqrt(2) cs_m(k_m . x) p_m`` with
``cs`` either ``cos`` or ``sin`` and ``p_m`` a unit polarization orthogonal to ``k_m``.
Fields spanned by the basis are stored as coefficient vectors, and the heat
semigroup acts diagonally with eigenvalue ``|k_m|^2``.

Sampled paths are stored on a uniform time grid and read as piecewise-constant,
left-continuous functions: the value on ``[t_j, t_{j+1})`` is the sample at ``t_j``.
Reading a path at time ``t`` therefore never touches samples after ``t``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .field3 import TWO_PI, Grid3, TimeKernel, kernel_interval_weights, space_mollifier_radial

_NORM = np.sqrt(2.0) / TWO_PI**1.5


# ---------------------------------------------------------------------------
# Modal basis


def _half_lattice(K: float) -> list[tuple[int, int, int]]:
    """Nonzero integer vectors with ``|k| <= K``, one from each pair ``{k, -k}``."""
    r = int(np.floor(K))
    out = []
    for k in itertools.product(range(-r, r + 1), repeat=3):
        if k == (0, 0, 0) or k[0] ** 2 + k[1] ** 2 + k[2] ** 2 > K * K + 1e-9:
            continue
        if k > tuple(-c for c in k):  # lexicographic representative
            out.append(k)
    return sorted(out, key=lambda k: (k[0] ** 2 + k[1] ** 2 + k[2] ** 2, k))


def _polarizations(k: Sequence[int]) -> np.ndarray:
    """Two orthonormal vectors spanning the plane orthogonal to ``k``."""
    k = np.asarray(k, dtype=float)
    khat = k / np.linalg.norm(k)
    trial = np.eye(3)[int(np.argmin(np.abs(khat)))]
    p1 = trial - khat * (trial @ khat)
    p1 /= np.linalg.norm(p1)
    p2 = np.cross(khat, p1)
    return np.stack([p1, p2])


@dataclass(frozen=True, eq=False)
class ModalBasis:
    """Finite family of real divergence-free Fourier modes."""

    kvecs: np.ndarray  # (M, 3) integer wavenumbers
    pols: np.ndarray  # (M, 3) unit polarizations, orthogonal to k
    kinds: np.ndarray  # (M,) 0 for cos, 1 for sin

    def __post_init__(self):
        if not (len(self.kvecs) == len(self.pols) == len(self.kinds)):
            raise ValueError("basis arrays must have equal length")
        if len(self.kvecs) and np.max(np.abs(np.einsum("ma,ma->m", self.kvecs, self.pols))) > 1e-12:
            raise ValueError("polarizations must be orthogonal to the wavenumbers")

    def __len__(self) -> int:
        return len(self.kvecs)

    @classmethod
    def divergence_free(cls, K: float) -> "ModalBasis":
        """All divergence-free modes with ``0 < |k| <= K`` (four basis fields per ``{k, -k}``)."""
        ks, ps, kinds = [], [], []
        for k in _half_lattice(K):
            for p in _polarizations(k):
                for kind in (0, 1):
                    ks.append(k)
                    ps.append(p)
                    kinds.append(kind)
        return cls(np.array(ks, dtype=np.int64).reshape(-1, 3), np.array(ps).reshape(-1, 3), np.array(kinds, dtype=int))

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(np.sum(self.kvecs.astype(float) ** 2, axis=1))

    @cached_property
    def eig(self) -> np.ndarray:
        """Eigenvalues ``|k|^2`` of ``-Delta``."""
        return self.kabs**2

    def mask_leq(self, cutoff: float) -> np.ndarray:
        return self.kabs <= cutoff + 1e-12

    def subset(self, mask: np.ndarray) -> "ModalBasis":
        return ModalBasis(self.kvecs[mask], self.pols[mask], self.kinds[mask])

    def scalar_mode(self, grid: Grid3, m: int) -> np.ndarray:
        x1, x2, x3 = grid.mesh
        k = self.kvecs[m]
        phase = k[0] * x1 + k[1] * x2 + k[2] * x3
        return _NORM * (np.cos(phase) if self.kinds[m] == 0 else np.sin(phase))

    def values(self, grid: Grid3, coeffs: np.ndarray) -> np.ndarray:
        """Vector field ``sum_m c_m e_m`` on the grid, shape ``(3, n, n, n)``."""
        coeffs = np.asarray(coeffs, dtype=float)
        out = np.zeros((3,) + (grid.n,) * 3)
        x1, x2, x3 = grid.mesh
        for k in {tuple(k) for k in self.kvecs}:
            sel = np.flatnonzero(np.all(self.kvecs == k, axis=1))
            if not np.any(coeffs[sel]):
                continue
            phase = k[0] * x1 + k[1] * x2 + k[2] * x3
            c, s = np.cos(phase), np.sin(phase)
            for m in sel:
                if coeffs[m] == 0.0:
                    continue
                prof = c if self.kinds[m] == 0 else s
                for a in range(3):
                    if self.pols[m, a] != 0.0:
                        out[a] += (_NORM * coeffs[m] * self.pols[m, a]) * prof
        return out

    def project(self, grid: Grid3, values: np.ndarray) -> np.ndarray:
        """``L^2`` inner products ``<u, e_m>`` by grid quadrature (exact for band-limited ``u``)."""
        out = np.zeros(len(self))
        for m in range(len(self)):
            e = self.scalar_mode(grid, m)
            out[m] = grid.integrate(np.einsum("a,a...->...", self.pols[m], values) * e)
        return out


# ---------------------------------------------------------------------------
# Noise specification and sampled paths


@dataclass(frozen=True)
class NoiseSpec:
    """Noise configuration.

    Attributes:
        kind: ``additive`` (Q-Wiener on the modal basis), ``multiplicative`` (scalar
            Brownian motion) or ``nonlinear`` (``m``-dimensional Brownian motion).
        sigma: amplitude; additive weights are ``g_k = sigma |k|^-decay``.
        K: largest wavenumber magnitude carrying additive noise.
        decay: additive weight decay exponent.
        m: dimension of the driving Brownian motion in the nonlinear regime.
        seed: 64-bit seed.
        dt, T: time step and horizon of the sampling grid.
    """

    kind: str = "additive"
    sigma: float = 1.0
    K: float = 2.0
    decay: float = 3.5
    m: int = 1
    seed: int = 0
    dt: float = 1.0 / 64
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in ("additive", "multiplicative", "nonlinear"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("need dt > 0 and T > 0")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("T must be an integer multiple of dt")
        if self.kind == "additive" and self.sigma != 0 and self.decay <= 1.5 and np.isinf(self.K):
            raise ValueError("weights are not square summable")

    @property
    def nsteps(self) -> int:
        return int(round(self.T / self.dt))

    @cached_property
    def basis(self) -> ModalBasis:
        return ModalBasis.divergence_free(self.K)

    @cached_property
    def weights(self) -> np.ndarray:
        """Per-basis-field weights ``g_m``."""
        if self.kind != "additive":
            return np.ones(self.m if self.kind == "nonlinear" else 1)
        return self.sigma / self.basis.kabs**self.decay

    def trace(self) -> float:
        """``Tr(G G*) = sum_m g_m^2`` over the orthonormal modal basis."""
        if self.kind != "additive":
            raise ValueError("trace is defined for additive noise")
        return float(np.sum(self.weights**2))


@dataclass(frozen=True, eq=False)
class SampledPath:
    """Sampled Brownian path (coordinates already scaled by the weights).

    ``values[j]`` is ``B(t_j)`` with ``B(0) = 0``.  For additive noise ``ou[j]`` holds
    the exact heat-flow stochastic integrals over step ``j`` sampled jointly with the
    increments (``None`` otherwise).
    """

    times: np.ndarray
    values: np.ndarray
    ou: np.ndarray | None = None
    spec: NoiseSpec | None = None

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def index(self, t: float) -> int:
        """Index of the sample that is current at time ``t`` (left-continuous read)."""
        return max(int(np.searchsorted(self.times, t + 1e-12 * self.dt, side="right")) - 1, 0)

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index(t)]


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]))


def sample_wiener(spec: NoiseSpec, replica: int = 0) -> SampledPath:
    """Sample the driving Brownian motion on the uniform grid of ``spec``.

    Additive noise samples, per basis field and step, the pair ``(dB, I)`` with
    ``dB`` the weighted Wiener increment and ``I = int g exp(-|k|^2 (h - s)) dW_s``;
    the pair is jointly Gaussian and is drawn exactly from its covariance.
    """
    n = spec.nsteps
    times = np.linspace(0.0, spec.T, n + 1)
    h = spec.dt
    rng = _rng(spec.seed, replica)
    if spec.kind == "additive":
        g = spec.weights
        lam = spec.basis.eig
        xi = rng.standard_normal((n, 2, len(g)))
        var_b = h * np.ones_like(lam)
        e1 = -np.expm1(-lam * h)
        var_i = -np.expm1(-2 * lam * h) / (2 * lam)
        cov = e1 / lam
        # Cholesky of [[var_b, cov], [cov, var_i]] per mode
        l11 = np.sqrt(var_b)
        l21 = cov / l11
        l22 = np.sqrt(np.maximum(var_i - l21**2, 0.0))
        db = g * l11 * xi[:, 0]
        di = g * (l21 * xi[:, 0] + l22 * xi[:, 1])
        values = np.vstack([np.zeros(len(g)), np.cumsum(db, axis=0)])
        return SampledPath(times, values, di, spec)
    d = 1 if spec.kind == "multiplicative" else spec.m
    db = np.sqrt(h) * spec.sigma * rng.standard_normal((n, d))
    values = np.vstack([np.zeros(d), np.cumsum(db, axis=0)])
    return SampledPath(times, values, None, spec)


def perturb_after(path: SampledPath, t: float, seed: int) -> SampledPath:
    """Copy of ``path`` whose increments on steps starting at or after ``t`` are resampled."""
    j = int(np.searchsorted(path.times, t, side="left"))
    rng = np.random.default_rng(seed)
    inc = path.increments.copy()
    ou = None if path.ou is None else path.ou.copy()
    scale = np.std(inc) if inc.size else 1.0
    inc[j:] = scale * rng.standard_normal(inc[j:].shape)
    if ou is not None:
        ou[j:] = np.std(ou) * rng.standard_normal(ou[j:].shape)
    values = np.vstack([np.zeros(inc.shape[1]), np.cumsum(inc, axis=0)])
    values[: j + 1] = path.values[: j + 1]
    return SampledPath(path.times, values, ou, path.spec)


# ---------------------------------------------------------------------------
# Modal time families


@dataclass(frozen=True, eq=False)
class ModalPath:
    """Piecewise-constant time family of fields on a modal basis.

    ``coeffs[j]`` is the coefficient vector at ``times[j]``; the family is read
    left-continuously.  ``cutoff`` restricts evaluation to ``|k| <= cutoff``.
    """

    times: np.ndarray
    coeffs: np.ndarray
    basis: ModalBasis
    cutoff: float = np.inf

    @cached_property
    def _mask(self) -> np.ndarray:
        return self.basis.mask_leq(self.cutoff) if np.isfinite(self.cutoff) else np.ones(len(self.basis), bool)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def filtered(self, cutoff: float) -> "ModalPath":
        return ModalPath(self.times, self.coeffs, self.basis, min(cutoff, self.cutoff))

    def index(self, t: float) -> int:
        return max(int(np.searchsorted(self.times, t + 1e-12 * self.dt, side="right")) - 1, 0)

    def coeff_at(self, t: float) -> np.ndarray:
        return np.where(self._mask, self.coeffs[self.index(t)], 0.0)

    def values_at(self, grid: Grid3, t: float) -> np.ndarray:
        return self.basis.values(grid, self.coeff_at(t))

    def is_zero(self) -> bool:
        return not np.any(self.coeffs[:, self._mask])

    @cached_property
    def edges(self) -> np.ndarray:
        """Interval edges ``[t_0, t_1, ..., t_N, +inf)`` of the piecewise-constant read."""
        return np.append(self.times, np.inf)

    def mollified_coeff(
        self, t: float, kernel: TimeKernel, ell_t: float, ell_x: float, rate: float = 0.0, order: int = 0
    ) -> np.ndarray:
        """Coefficients of ``d^order/dt^order ((e^{rate t} z) *_x phi *_t varphi)(t)``.

        Space mollification is the symbol of the radial bump; time mollification is
        exact for the piecewise-constant read.  The factor ``e^{rate t}`` lets
        products with exponentially growing fields be mollified exactly.
        """
        w, w_ext = kernel_interval_weights(kernel, ell_t, t, self.edges, rate, order)
        c = w @ self.coeffs + w_ext * self.coeffs[0]
        sym = space_mollifier_radial(self.basis.kabs, ell_x)
        return np.where(self._mask, sym * c, 0.0)


def stochastic_convolution(path: SampledPath) -> ModalPath:
    """Exact Ornstein-Uhlenbeck recursion for ``dz - Delta z dt = dB``, ``z(0) = 0``.

    Per basis field, ``z(t + h) = exp(-|k|^2 h) z(t) + I`` with ``I`` the heat-flow
    stochastic integral stored in the sampled path.
    """
    if path.ou is None:
        raise ValueError("stochastic convolution needs an additive path")
    lam = path.spec.basis.eig
    decay = np.exp(-lam * path.dt)
    z = np.zeros((len(path.times), len(lam)))
    for j, inc in enumerate(path.ou):
        z[j + 1] = decay * z[j] + inc
    return ModalPath(path.times, z, path.spec.basis)


def ou_variance(g: float, kabs: float, t: float) -> float:
    """Closed-form ``Var z_k(t) = g^2 (1 - exp(-2|k|^2 t)) / (2|k|^2)``."""
    lam = kabs**2
    return g * g * -np.expm1(-2 * lam * t) / (2 * lam)


def euler_maruyama_convolution(spec: NoiseSpec, replica: int, refine: int) -> np.ndarray:
    """Brute-force Euler-Maruyama reference for ``z(T)`` at step ``dt/refine``."""
    lam = spec.basis.eig
    g = spec.weights
    h = spec.dt / refine
    rng = _rng(spec.seed, replica, refine)
    z = np.zeros(len(lam))
    for _ in range(spec.nsteps * refine):
        z = z - h * lam * z + g * np.sqrt(h) * rng.standard_normal(len(lam))
    return z


# ---------------------------------------------------------------------------
# Stopping times


@dataclass(frozen=True)
class StoppingRule:
    """Thresholds of the stopping time in one regime.

    ``additive``: ``||z(t)||_{H^{1-delta}} >= L^{1/4}/C_S`` or
    ``||z||_{C_t^{1/2-2 delta} L^2} >= L^{1/2}/C_S``, capped at ``L``.
    ``multiplicative``: ``|B(t)| >= L^{1/4}`` or ``||B||_{C_t^{1/2-2 delta}} >= L^{1/2}``,
    capped at ``L``.  ``nonlinear``: ``||B||_{C_t^{1/2-2 delta}}`` or
    ``||BB||_{1-4 delta}`` reaching ``ln ln L``, or ``||z_0(t)||_{L^2} >= L``, capped at
    ``ln ln L``.  Holder quantities are the discrete seminorms over pairs of samples.
    """

    variant: str
    L: float
    delta: float = 0.05
    C_S: float = 1.0

    def __post_init__(self):
        if self.variant not in ("additive", "multiplicative", "nonlinear"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (0 < self.delta < 1.0 / 12):
            raise ValueError("delta must lie in (0, 1/12)")
        if self.L <= 1:
            raise ValueError("L must exceed 1")
        if self.variant == "nonlinear" and np.log(np.log(self.L)) <= 0:
            raise ValueError("nonlinear rule needs ln ln L > 0, i.e. L > e")

    @property
    def cap(self) -> float:
        return float(np.log(np.log(self.L))) if self.variant == "nonlinear" else float(self.L)


def running_holder(times: np.ndarray, diff_norm: Callable[[int, int], float] | np.ndarray, alpha: float) -> np.ndarray:
    """``H[j] = max_{i < i' <= j} d(i, i') / |t_i' - t_i|^alpha`` for every ``j``.

    ``diff_norm`` is either a callable ``(i, i') -> ||f_i' - f_i||`` or a precomputed
    matrix of pairwise distances.
    """
    nt = len(times)
    out = np.zeros(nt)
    best = 0.0
    for j in range(1, nt):
        if callable(diff_norm):
            d = np.array([diff_norm(i, j) for i in range(j)])
        else:
            d = np.asarray(diff_norm)[:j, j]
        best = max(best, float(np.max(d / (times[j] - times[:j]) ** alpha)))
        out[j] = best
    return out


def pairwise_distances(samples: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``samples`` (shape ``(nt, d)``)."""
    flat = samples.reshape(samples.shape[0], -1)
    sq = np.sum(flat**2, axis=1)
    g = flat @ flat.T
    return np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * g, 0.0))


def first_passage(times: np.ndarray, series: np.ndarray, threshold: float) -> float:
    """First grid time with ``series >= threshold`` (``inf`` when never reached)."""
    hit = np.flatnonzero(np.asarray(series) >= threshold)
    return float(times[hit[0]]) if hit.size else np.inf


def hitting_time(times: np.ndarray, observables: dict[str, np.ndarray], rule: StoppingRule) -> float:
    """Stopping time from sampled observables.

    Args:
        times: the sampling grid.
        observables: running series on ``times``.  ``additive`` needs ``sobolev``
            (``||z(t)||_{H^{1-delta}}``) and ``holder`` (running ``C^{1/2-2 delta} L^2``
            norm); ``multiplicative`` needs ``abs`` and ``holder``; ``nonlinear`` needs
            ``holder``, ``area`` (running ``||BB||_{1-4 delta}``) and ``l2`` (``||z_0(t)||``).
        rule: the thresholds.

    Returns:
        The first grid time at which any threshold is met, else the cap.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("empty time grid")
    L = rule.L
    if rule.variant == "additive":
        hits = [first_passage(times, observables["sobolev"], L**0.25 / rule.C_S),
                first_passage(times, observables["holder"], L**0.5 / rule.C_S)]
    elif rule.variant == "multiplicative":
        hits = [first_passage(times, observables["abs"], L**0.25),
                first_passage(times, observables["holder"], L**0.5)]
    else:
        lnln = rule.cap
        hits = [first_passage(times, observables["holder"], lnln),
                first_passage(times, observables["area"], lnln),
                first_passage(times, observables["l2"], L)]
    return float(min(min(hits), rule.cap))


def additive_observables(z: ModalPath, rule: StoppingRule) -> dict[str, np.ndarray]:
    """Running observables of the additive rule from a modal path (no grid needed)."""
    w = (1.0 + z.basis.eig) ** (1.0 - rule.delta)
    c = np.where(z._mask, z.coeffs, 0.0)
    sob = np.sqrt(np.sum(w * c**2, axis=1))
    dist = pairwise_distances(c)
    sup = np.maximum.accumulate(np.sqrt(np.sum(c**2, axis=1)))
    hold = running_holder(z.times, dist, 0.5 - 2 * rule.delta) + sup
    return {"sobolev": sob, "holder": hold}


def scalar_observables(path: SampledPath, rule: StoppingRule) -> dict[str, np.ndarray]:
    """Running observables of the multiplicative rule (first coordinate of the path)."""
    b = path.values[:, 0]
    dist = np.abs(b[:, None] - b[None, :])
    return {"abs": np.abs(b), "holder": running_holder(path.times, dist, 0.5 - 2 * rule.delta)}


def stopping_time(rule: StoppingRule, path: SampledPath | None = None, z: ModalPath | None = None,
                  area: np.ndarray | None = None, z0_l2: np.ndarray | None = None) -> float:
    """Convenience wrapper assembling observables per variant and calling :func:`hitting_time`."""
    if rule.variant == "additive":
        if z is None:
            raise ValueError("additive rule needs the stochastic convolution")
        return hitting_time(z.times, additive_observables(z, rule), rule)
    if path is None:
        raise ValueError("rule needs the driving path")
    if rule.variant == "multiplicative":
        return hitting_time(path.times, scalar_observables(path, rule), rule)
    dist = pairwise_distances(path.values)
    obs = {
        "holder": running_holder(path.times, dist, 0.5 - 2 * rule.delta),
        "area": np.zeros(len(path.times)) if area is None else area,
        "l2": np.zeros(len(path.times)) if z0_l2 is None else z0_l2,
    }
    return hitting_time(path.times, obs, rule)


# ---------------------------------------------------------------------------
# theta transform


@dataclass(frozen=True, eq=False)
class ThetaPath:
    """``theta = exp(B)`` for a scalar path and its one-sided time mollification."""

    path: SampledPath
    ell: float
    kernel: TimeKernel = field(default_factory=TimeKernel)

    @cached_property
    def _edges(self) -> np.ndarray:
        return np.append(self.path.times, np.inf)

    @cached_property
    def _theta_samples(self) -> np.ndarray:
        return np.exp(self.path.values[:, 0])

    def theta(self, t: float) -> float:
        return float(self._theta_samples[self.path.index(t)])

    def theta_ell(self, t: float, order: int = 0, rate: float = 0.0) -> float:
        """``d^order/dt^order (e^{rate t} theta) *_t varphi_ell`` at ``t``.

        With ``rate != 0`` this mollifies the product of ``theta`` with an exponential,
        which is how ``theta v (x) v`` is mollified for exponentially growing ``v``.
        """
        if self.ell <= 0:
            if order:
                raise ValueError("derivative of the unmollified path is not defined")
            return self.theta(t) * np.exp(rate * t)
        w, w_ext = kernel_interval_weights(self.kernel, self.ell, t, self._edges, rate, order)
        return float(w @ self._theta_samples + w_ext * self._theta_samples[0])


def theta_path(path: SampledPath, ell: float, kernel: TimeKernel | None = None) -> ThetaPath:
    """Build ``theta = e^B`` and ``theta_ell`` for a scalar Brownian path."""
    if path.values.ndim != 2 or path.values.shape[1] < 1:
        raise ValueError("theta needs a scalar path")
    return ThetaPath(path, ell, kernel or TimeKernel())


def m_L_squared(L: float) -> float:
    """The bound ``3 L^{1/2} exp(L^{1/4})`` on ``theta``, ``theta^{-1}`` and the Holder seminorm."""
    return 3.0 * L**0.5 * np.exp(L**0.25)


# ---------------------------------------------------------------------------
# Galerkin reference solver


@dataclass
class GalerkinResult:
    """Per-replica energies and Monte Carlo summary on the output times."""

    times: np.ndarray
    energies: np.ndarray  # (replicas, nt) values of ||u(t)||_{L^2}^2
    bound: np.ndarray  # energy bound per time
    neutrality: float  # worst relative <N(u), u> over all steps

    @property
    def mean(self) -> np.ndarray:
        return self.energies.mean(axis=0)

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.energies.shape[0]
        half = 1.959963984540054 * self.energies.std(axis=0, ddof=1) / np.sqrt(r) if r > 1 else 0 * self.mean
        return self.mean - half, self.mean + half

    def passes(self) -> bool:
        """Energy bound respected by the lower end of the 95% interval at every time."""
        lo, _ = self.ci
        return bool(np.all(lo <= self.bound * (1 + 1e-12)))

    def summary_rows(self) -> list[tuple[float, float, float, float, float, bool]]:
        lo, hi = self.ci
        return [(float(t), float(m), float(a), float(b), float(c), bool(a <= c * (1 + 1e-12)))
                for t, m, a, b, c in zip(self.times, self.mean, lo, hi, self.bound)]


class CFLError(RuntimeError):
    pass


def _dealias_mask(grid: Grid3) -> np.ndarray:
    kmax = (grid.n - 1) // 3
    k1, k2, k3 = grid.k
    return (np.abs(k1) <= kmax) & (np.abs(k2) <= kmax) & (np.abs(k3) <= kmax)


def _leray_batch(grid: Grid3, u_hat: np.ndarray) -> np.ndarray:
    k = np.stack([np.broadcast_to(c, grid.spectral_shape) for c in grid.k])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(grid.k2 > 0, 1.0 / grid.k2, 0.0)
    proj = np.einsum("i...,ri...->r...", k, u_hat) * inv
    return u_hat - k[None] * proj[:, None]


def _nonlinear(grid: Grid3, u_hat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``-P div(u (x) u)`` of the truncated system with exact (dealiased) products."""
    u = grid.ifft(u_hat)
    ik = [1j * np.broadcast_to(c, grid.spectral_shape) for c in grid.k]
    div = np.zeros_like(u_hat)
    for a in range(3):
        for b in range(a, 3):
            p_hat = grid.fft(u[:, a] * u[:, b])
            div[:, b] += ik[a] * p_hat
            if a != b:
                div[:, a] += ik[b] * p_hat
    return -_leray_batch(grid, div) * mask


def _inner(grid: Grid3, a_hat: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
    w = grid.half_weights
    return TWO_PI**3 * np.real(np.sum(w * a_hat * np.conj(b_hat), axis=(-4, -3, -2, -1)))


def galerkin_reference(
    spec: NoiseSpec,
    u0: np.ndarray,
    n: int = 32,
    dt: float = 1.0 / 128,
    replicas: int = 200,
    out_every: int = 8,
    batch: int = 50,
    cfl: float = 0.5,
    neutrality_tol: float = 1e-10,
) -> GalerkinResult:
    """Monte Carlo energies of the Galerkin truncation of stochastic Navier-Stokes.

    The heat term is integrated exactly per mode, the nonlinearity explicitly with
    2/3 dealiasing, and the noise by its exact increment (additive: the heat-flow
    stochastic integral on the modal basis of ``spec``; multiplicative: ``u dB``).

    Args:
        spec: noise specification; its ``seed`` keys the replicas.
        u0: initial velocity values on the ``n``-grid, shape ``(3, n, n, n)``.
        n: grid size of the truncated system.
        dt: time step (must divide ``spec.T``).
        replicas: number of independent Monte Carlo paths.
        out_every: store energies every this many steps.
        batch: replicas advanced together.
        cfl: bound on ``dt * max|u| * k_max`` checked at every output time.
        neutrality_tol: bound on ``|<N(u), u>| / (||u|| ||N(u)||)``, asserted per step.

    Returns:
        :class:`GalerkinResult` with energies and the energy bound
        ``||u0||^2 + t Tr(GG*)`` (additive) or ``e^t ||u0||^2`` (multiplicative).
    """
    if spec.kind == "nonlinear":
        raise ValueError("the Galerkin reference covers additive and multiplicative noise")
    grid = Grid3(n)
    steps = spec.T / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError("dt must divide T")
    steps = int(round(steps))
    mask = _dealias_mask(grid)
    u0_hat = grid.fft(np.asarray(u0, dtype=float)) * mask
    heat = np.exp(-grid.k2 * dt)
    kmax = (n - 1) // 3
    basis = spec.basis if spec.kind == "additive" else None
    if basis is not None and np.max(np.abs(basis.kvecs)) > kmax:
        raise ValueError("noise modes exceed the truncation")
    if basis is not None:
        modes_hat = np.stack([grid.fft(basis.values(grid, np.eye(len(basis))[m])) for m in range(len(basis))])
        # each mode touches a handful of coefficients, so inject the noise on that support only
        support = np.any(np.abs(modes_hat) > 1e-14, axis=0)
        modes_sub = modes_hat[:, support]
        g = spec.weights
        lam = basis.eig
        var_i = -np.expm1(-2 * lam * dt) / (2 * lam)
    out_idx = list(range(0, steps + 1, out_every))
    if out_idx[-1] != steps:
        out_idx.append(steps)
    energies = np.zeros((replicas, len(out_idx)))
    worst = 0.0
    e0 = float(_inner(grid, u0_hat[None], u0_hat[None])[0])
    for start in range(0, replicas, batch):
        reps = range(start, min(start + batch, replicas))
        rngs = [_rng(spec.seed, r, 7919) for r in reps]
        u_hat = np.repeat(u0_hat[None], len(reps), axis=0)
        col = 0
        for step in range(steps + 1):
            if step in out_idx:
                energies[start:start + len(reps), col] = _inner(grid, u_hat, u_hat)
                col += 1
                umax = np.abs(grid.ifft(u_hat)).max()
                if dt * umax * kmax > cfl:
                    raise CFLError(f"dt*max|u|*k_max = {dt * umax * kmax:.3g} exceeds {cfl}")
            if step == steps:
                break
            N = _nonlinear(grid, u_hat, mask)
            nu = np.sqrt(_inner(grid, u_hat, u_hat) * _inner(grid, N, N))
            ip = np.abs(_inner(grid, N, u_hat))
            rel = float(np.max(np.where(nu > 0, ip / np.where(nu > 0, nu, 1.0), 0.0)))
            worst = max(worst, rel)
            if rel > neutrality_tol:
                raise AssertionError(f"nonlinearity not energy-neutral: {rel:.3g}")
            if spec.kind == "additive":
                xi = np.stack([r.standard_normal(len(lam)) for r in rngs])
                incr = g * np.sqrt(var_i) * xi  # exact heat-flow stochastic integral
                u_hat = heat * (u_hat + dt * N)
                u_hat[:, support] += incr @ modes_sub
            else:
                db = spec.sigma * np.sqrt(dt) * np.array([r.standard_normal() for r in rngs])
                u_hat = heat * (u_hat + dt * N + db[:, None, None, None, None] * u_hat)
    times = np.array(out_idx) * dt
    if spec.kind == "additive":
        bound = e0 + times * spec.trace()
    else:
        bound = np.exp(spec.sigma**2 * times) * e0
    return GalerkinResult(times, energies, bound, worst)


def ks_same_law(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov p-value."""
    return float(stats.ks_2samp(a, b).pvalue)
