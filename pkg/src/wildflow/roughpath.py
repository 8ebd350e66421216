"""Ito rough-path lift, controlled paths, semigroup sewing and an RPDE solver.

All paths live on a uniform time grid.  The second level of the lift is the Ito
iterated integral built from left-point sums,

    BB_{s,t} = sum_{s <= t_k < t} (B_{t_k} - B_s) (x) (B_{t_{k+1}} - B_{t_k}),

which vanishes on a single grid step and satisfies Chen's relation exactly for every
triple of grid times.  It is stored through its running sums, so any grid pair is
reconstructed in ``O(m^2)``.

Space is represented modally: the unknown of the stochastic Stokes equation is a
coefficient vector on a finite basis of divergence-free Fourier fields, on which the
heat semigroup is the diagonal ``exp(-|k|^2 t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .stochastic import ModalBasis, NoiseSpec, SampledPath, _rng


# ---------------------------------------------------------------------------
# The lift


@dataclass(frozen=True, eq=False)
class RoughDriver:
    """Brownian path with its Ito second level on a uniform grid.

    Attributes:
        times: grid ``t_0 < ... < t_N``.
        B: path values, ``(N+1, m)``.
        step_area: second level over each grid step, ``(N, m, m)``.  Zero for a lift
            built from the grid itself; nonzero after coarsening.
        alpha: Holder exponent used by :meth:`rho_alpha`.
    """

    times: np.ndarray
    B: np.ndarray
    step_area: np.ndarray
    alpha: float = 0.4

    def __post_init__(self):
        if len(self.times) < 2:
            raise ValueError("a rough driver needs at least two samples")
        if not (1.0 / 3 < self.alpha < 0.5):
            raise ValueError("alpha must lie in (1/3, 1/2)")

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.B, axis=0)

    @cached_property
    def _cum(self) -> np.ndarray:
        """``C_j = sum_{k < j} (B_k (x) dB_k + step_area_k)``, shape ``(N+1, m, m)``."""
        dB = self.increments
        terms = np.einsum("ka,kb->kab", self.B[:-1], dB) + self.step_area
        out = np.zeros((len(self.times), self.m, self.m))
        out[1:] = np.cumsum(terms, axis=0)
        return out

    def increment(self, i: int, j: int) -> np.ndarray:
        return self.B[j] - self.B[i]

    def area(self, i: int, j: int) -> np.ndarray:
        """``BB_{t_i, t_j}`` by reconstruction from running sums."""
        return self._cum[j] - self._cum[i] - np.outer(self.B[i], self.B[j] - self.B[i])

    def area_matrix(self) -> np.ndarray:
        """``BB_{t_i, t_j}`` for all pairs ``i <= j``, shape ``(N+1, N+1, m, m)`` (zero below)."""
        C, B = self._cum, self.B
        out = C[None, :] - C[:, None] - np.einsum("ia,ijb->ijab", B, B[None, :] - B[:, None])
        iu = np.tril_indices(len(self.times), -1)
        out[iu] = 0.0
        return out

    def chen_residual(self) -> float:
        """``max |BB_{s,t} - BB_{s,u} - BB_{u,t} - B_{s,u} (x) B_{u,t}|`` over all grid triples."""
        A = self.area_matrix()
        B = self.B
        n = len(self.times)
        worst = 0.0
        for u in range(n):
            s = np.arange(0, u + 1)[:, None]
            t = np.arange(u, n)[None, :]
            lhs = A[s, t]
            rhs = A[s[:, 0], u][:, None] + A[u, t[0]][None, :]
            rhs = rhs + np.einsum("sa,tb->stab", B[u] - B[s[:, 0]], B[t[0]] - B[u])
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        return worst

    def rho_alpha(self) -> float:
        """``sup |B_{s,t}|/|t-s|^alpha + sup |BB_{s,t}|^{1/2}/|t-s|^alpha`` over grid pairs."""
        n = len(self.times)
        i, j = np.triu_indices(n, 1)
        dt = self.times[j] - self.times[i]
        inc = np.linalg.norm(self.B[j] - self.B[i], axis=1)
        A = self.area_matrix()[i, j]
        ar = np.sqrt(np.linalg.norm(A.reshape(len(i), -1), axis=1))
        return float(np.max(inc / dt**self.alpha) + np.max(ar / dt**self.alpha))

    def running_area_norm(self, exponent: float) -> np.ndarray:
        """``max_{s < t <= t_j} |BB_{s,t}| / |t-s|^exponent`` for every ``j``."""
        A = np.linalg.norm(self.area_matrix().reshape(len(self.times), len(self.times), -1), axis=2)
        n = len(self.times)
        out = np.zeros(n)
        best = 0.0
        for j in range(1, n):
            best = max(best, float(np.max(A[:j, j] / (self.times[j] - self.times[:j]) ** exponent)))
            out[j] = best
        return out

    def coarsen(self, factor: int) -> "RoughDriver":
        """The lift on every ``factor``-th grid point, with step areas from the fine grid."""
        if factor < 1 or (len(self.times) - 1) % factor:
            raise ValueError("coarsening factor must divide the number of steps")
        idx = np.arange(0, len(self.times), factor)
        areas = np.stack([self.area(a, b) for a, b in zip(idx[:-1], idx[1:])])
        return RoughDriver(self.times[idx], self.B[idx], areas, self.alpha)

    def restrict(self, t: float) -> "RoughDriver":
        """The driver on ``[0, t]``."""
        j = int(np.searchsorted(self.times, t + 1e-12 * self.dt, side="right"))
        return RoughDriver(self.times[:j], self.B[:j], self.step_area[: j - 1], self.alpha)


def ito_lift(path: SampledPath | tuple[np.ndarray, np.ndarray], alpha: float = 0.4) -> RoughDriver:
    """Ito lift of a sampled path (or ``(times, values)``) by left-point sums."""
    if isinstance(path, SampledPath):
        times, values = path.times, path.values
    else:
        times, values = path
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(times) < 2:
        raise ValueError("a rough driver needs at least two samples")
    return RoughDriver(np.asarray(times, dtype=float), values, np.zeros((len(times) - 1,) + (values.shape[1],) * 2), alpha)


# ---------------------------------------------------------------------------
# Controlled paths


@dataclass(frozen=True, eq=False)
class ControlledPath:
    """A path ``y`` with Gubinelli derivative ``dy`` relative to a driver.

    ``y`` has shape ``(N+1, *shape)`` and ``dy`` has shape ``(N+1, *shape, m)``.
    ``scale`` selects the spatial norm: ``sup`` (max modulus) or ``L2`` (Euclidean,
    times ``sqrt(cell_volume)`` when ``cell_volume`` is given, i.e. grid samples).
    """

    y: np.ndarray
    dy: np.ndarray
    scale: str = "sup"
    cell_volume: float | None = None

    def __post_init__(self):
        if self.scale not in ("sup", "L2"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.dy.shape[:-1] != self.y.shape:
            raise ValueError("derivative shape must be the path shape plus the driver dimension")

    def norm(self, a: np.ndarray) -> float:
        a = np.asarray(a)
        if self.scale == "sup":
            return float(np.max(np.abs(a))) if a.size else 0.0
        val = float(np.sqrt(np.sum(a**2)))
        return val * np.sqrt(self.cell_volume) if self.cell_volume else val

    def remainder(self, driver: RoughDriver, i: int, j: int) -> np.ndarray:
        """``R^y_{s,t} = y_t - y_s - dy_s B_{s,t}``."""
        return self.y[j] - self.y[i] - self.dy[i] @ driver.increment(i, j)


def _check_grid(cp: ControlledPath, driver: RoughDriver) -> None:
    if cp.y.shape[0] != len(driver.times):
        raise ValueError("controlled path and driver live on different grids")


def controlled_norm(cp: ControlledPath, driver: RoughDriver) -> float:
    """``||y|| + ||dy|| + ||dy||_{C^alpha} + ||R^y||_{2 alpha}`` on the grid."""
    _check_grid(cp, driver)
    return sum(controlled_norm_parts(cp, driver).values())


def controlled_norm_parts(cp: ControlledPath, driver: RoughDriver) -> dict[str, float]:
    _check_grid(cp, driver)
    a = driver.alpha
    t = driver.times
    n = len(t)
    sup_y = max(cp.norm(cp.y[k]) for k in range(n))
    sup_dy = max(cp.norm(cp.dy[k]) for k in range(n))
    hold = rem = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            h = t[j] - t[i]
            hold = max(hold, cp.norm(cp.dy[j] - cp.dy[i]) / h**a)
            rem = max(rem, cp.norm(cp.remainder(driver, i, j)) / h ** (2 * a))
    return {"sup": sup_y, "sup_derivative": sup_dy, "holder_derivative": hold, "remainder": rem}


# ---------------------------------------------------------------------------
# Sewing


def _compensated_sum(y, dy, driver: RoughDriver, lam, idx: np.ndarray) -> np.ndarray:
    """``sum P(t - s)(y_s B_{s,r} + dy_s BB_{s,r})`` over the partition ``idx`` of ``[0, t]``."""
    t = driver.times[idx[-1]]
    total = np.zeros(y.shape[1:-1])
    for s, r in zip(idx[:-1], idx[1:]):
        inc = driver.increment(s, r)
        area = driver.area(s, r)
        germ = y[s] @ inc + np.einsum("...ml,lm->...", dy[s], area)
        total = total + _semigroup(lam, t - driver.times[s], germ)
    return total


def _semigroup(lam, tau: float, x: np.ndarray) -> np.ndarray:
    if lam is None:
        return x
    return np.exp(-np.asarray(lam) * tau) * x


@dataclass(frozen=True)
class SewingResult:
    value: np.ndarray
    levels: list[np.ndarray]
    differences: np.ndarray
    rate: float

    @property
    def cauchy(self) -> bool:
        """The fitted rate is positive and the finest difference is below the coarsest."""
        d = self.differences
        return bool(self.rate > 0 and len(d) >= 2 and d[-1] < d[0])


def sewing_integral(
    y: np.ndarray,
    dy: np.ndarray,
    driver: RoughDriver,
    t_index: int,
    lam: np.ndarray | None = None,
    levels: int | None = None,
) -> SewingResult:
    """``int_0^t P(t - r) y_r dB_r`` by dyadic compensated sums.

    Args:
        y: integrand, ``(N+1, d, m)`` (matrix acting on ``dB``).
        dy: its Gubinelli derivative, ``(N+1, d, m, m)``.
        driver: the lift.
        t_index: grid index of ``t``; must be divisible by ``2^(levels-1)``.
        lam: diagonal semigroup eigenvalues ``(d,)`` (``None`` for the identity).
        levels: number of dyadic levels (default: as many as ``t_index`` allows).

    Returns:
        The finest-level value, all level values (coarse to fine), successive
        differences and the fitted geometric rate ``theta`` of
        ``|I_k - I_{k+1}| ~ 2^{-k theta}``.

    Raises:
        ValueError: if ``t_index`` is not compatible with the requested levels.
    """
    if t_index < 1:
        return SewingResult(np.zeros(y.shape[1:-1]), [], np.zeros(0), 0.0)
    max_levels = 1
    while t_index % (2**max_levels) == 0:
        max_levels += 1
    if levels is None:
        levels = max_levels
    if levels > max_levels:
        raise ValueError(f"grid segment of {t_index} steps is not dyadic to {levels} levels")
    vals = []
    for k in range(levels - 1, -1, -1):
        idx = np.arange(0, t_index + 1, 2**k)
        vals.append(_compensated_sum(y, dy, driver, lam, idx))
    diffs = np.array([np.max(np.abs(vals[k + 1] - vals[k])) for k in range(len(vals) - 1)])
    rate = 0.0
    good = diffs > 0
    if np.count_nonzero(good) >= 2:
        kk = np.arange(len(diffs))[good]
        rate = float(-np.polyfit(kk, np.log2(diffs[good]), 1)[0])
    return SewingResult(vals[-1], vals, diffs, rate)


# ---------------------------------------------------------------------------
# Cylindrical nonlinearity in modal coordinates


@dataclass(frozen=True)
class ModalG:
    """``G(u) dB = sum_j U_j h_j(<u, phi_j>) dB^j`` in modal coordinates.

    Attributes:
        fields: ``(d, m)`` coordinates of the divergence-free fields ``U_j`` on the
            basis of the unknown.
        pairings: ``(m, d)`` coordinates of the test functions ``phi_j``.
        h: ``(u) -> (value, derivative)`` acting elementwise on the ``m`` pairings.
    """

    fields: np.ndarray
    pairings: np.ndarray
    h: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

    @property
    def d(self) -> int:
        return self.fields.shape[0]

    @property
    def m(self) -> int:
        return self.fields.shape[1]

    def sigma(self, a: np.ndarray) -> np.ndarray:
        """``G`` at pairing values ``a`` (shape ``(..., m)``), shape ``(..., d, m)``."""
        hv, _ = self.h(a)
        return self.fields * hv[..., None, :]

    def dsigma(self, a: np.ndarray) -> np.ndarray:
        """Derivative with respect to the unknown: ``(..., d, m, d)``."""
        _, dh = self.h(a)
        return np.einsum("dj,...j,je->...dje", self.fields, dh, self.pairings)


def tanh_coefficient(c0: float | np.ndarray, c1: float | np.ndarray) -> Callable:
    """``h(a) = c0 + c1 tanh(a)`` with its derivative."""

    def h(a):
        th = np.tanh(a)
        return c0 + c1 * th + 0 * a, c1 * (1 - th**2) + 0 * a

    return h


def modal_g_from_basis(basis: ModalBasis, indices: Sequence[int], c0=1.0, c1=0.5) -> tuple[ModalBasis, ModalG]:
    """``m`` basis fields as both ``U_j`` and ``phi_j``; the unknown lives on their span."""
    idx = np.asarray(indices, dtype=int)
    sub = basis.subset(np.isin(np.arange(len(basis)), idx))
    m = len(idx)
    return sub, ModalG(np.eye(m), np.eye(m), tanh_coefficient(c0, c1))


def compose_nonlinearity(p: np.ndarray, z: np.ndarray, G: ModalG) -> ControlledPath:
    """``(G(v + z), DG(v + z) G(v + z))`` as a controlled path.

    The drift pairing ``p = <v, phi>`` is ``C^1`` in time and enters the remainder; the
    unknown ``z`` is assumed controlled with derivative ``G(v + z)`` (the solution's
    own structure), so the chain rule gives ``dy = DG(v+z) . G(v+z)``.

    Args:
        p: ``(N+1, m)`` pairings of the drift.
        z: ``(N+1, d)`` coordinates of the unknown.
    """
    a = p + z @ G.pairings.T
    s = G.sigma(a)
    ds = np.einsum("...dje,...el->...djl", G.dsigma(a), s)
    return ControlledPath(s, ds)


# ---------------------------------------------------------------------------
# RPDE solver


class ContractionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RPDESolution:
    times: np.ndarray
    z: np.ndarray  # (N+1, d)
    sweeps: list[int]
    contraction: list[float]
    subinterval: int


def _drift_at(p, times: np.ndarray, m: int) -> np.ndarray:
    if p is None:
        return np.zeros((len(times), m))
    if callable(p):
        return np.stack([np.asarray(p(float(t)), dtype=float) for t in times])
    return np.asarray(p, dtype=float)


def solve_rpde(
    driver: RoughDriver,
    lam: np.ndarray,
    G: ModalG,
    p: np.ndarray | Callable[[float], np.ndarray] | None = None,
    z0: np.ndarray | None = None,
    C: float = 1.0,
    theta: float | None = None,
    max_halvings: int = 8,
    max_sweeps: int = 200,
) -> RPDESolution:
    """Mild solution of ``dz - Lap z dt = G(v + z) dB`` on the driver grid.

    On each subinterval the map ``z -> P z(T_k) + int P G(v + z) dB`` (compensated
    sums with the exact second level of the driver) is iterated until it reaches its
    fixed point bitwise.  Because the compensated sum at a grid time reads the
    iterate only at earlier grid times, the fixed point is the causal forward
    recursion and does not depend on the driver after that time.

    The subinterval length follows ``C (1 + rho_alpha)^3 T^theta <= 1/2`` with
    ``theta = 3 alpha - 1`` by default, floored at one grid step; it is halved whenever the observed Picard differences
    fail to shrink by a factor two between the first sweeps.

    Args:
        driver: the lift (coarsen it first to use second-level corrections).
        lam: eigenvalues ``|k|^2`` of the unknown's basis fields, ``(d,)``.
        G: the cylindrical coefficient.
        p: drift pairings on the driver grid ``(N+1, m)`` or a callable of time.
        z0: initial coordinates (default zero).

    Raises:
        ContractionError: if contraction is not observed after ``max_halvings``.
    """
    times = driver.times
    n = len(times)
    lam = np.asarray(lam, dtype=float)
    pp = _drift_at(p, times, G.m)
    z = np.zeros((n, G.d))
    if z0 is not None:
        z[0] = z0
    theta = 3 * driver.alpha - 1 if theta is None else theta
    rho = driver.rho_alpha()
    span = (0.5 / (C * (1 + rho) ** 3)) ** (1 / theta)
    nsub = max(1, int(span / driver.dt))
    dB = driver.increments
    A = driver.step_area
    decay = np.exp(-lam * driver.dt)
    for _ in range(max_halvings + 1):
        z[1:] = 0.0
        sweeps, ratios, ok = [], [], True
        k0 = 0
        while k0 < n - 1:
            k1 = min(k0 + nsub, n - 1)
            guess = np.repeat(z[k0][None], k1 - k0 + 1, axis=0)
            prev_diff = None
            for sweep in range(max_sweeps):
                cp = compose_nonlinearity(pp[k0:k1 + 1], guess, G)
                new = np.empty_like(guess)
                new[0] = z[k0]
                for i in range(k1 - k0):
                    germ = cp.y[i] @ dB[k0 + i] + np.einsum("dml,lm->d", cp.dy[i], A[k0 + i])
                    new[i + 1] = decay * (new[i] + germ)
                diff = float(np.max(np.abs(new - guess)))
                guess = new
                if diff == 0.0:
                    break
                if prev_diff is not None and sweep <= 2 and prev_diff > 0 and diff > 0.5 * prev_diff and k1 - k0 > sweep + 1:
                    ok = False
                if prev_diff is not None and prev_diff > 0:
                    ratios.append(diff / prev_diff)
                prev_diff = diff
            else:
                raise ContractionError("Picard iteration did not reach its fixed point")
            sweeps.append(sweep + 1)
            z[k0:k1 + 1] = guess
            k0 = k1
        if ok or nsub == 1:
            return RPDESolution(times, z.copy(), sweeps, ratios, nsub)
        nsub = max(1, nsub // 2)
    raise ContractionError("no contraction after the allowed halvings")


def euler_maruyama_rpde(
    driver: RoughDriver,
    lam: np.ndarray,
    G: ModalG,
    p: np.ndarray | Callable[[float], np.ndarray] | None = None,
    z0: np.ndarray | None = None,
    factor: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama for the same equation on every ``factor``-th driver step."""
    idx = np.arange(0, len(driver.times), factor)
    times = driver.times[idx]
    B = driver.B[idx]
    pp = _drift_at(p, times, G.m) if not isinstance(p, np.ndarray) else np.asarray(p)[idx]
    lam = np.asarray(lam, dtype=float)
    z = np.zeros((len(times), G.d))
    if z0 is not None:
        z[0] = z0
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        s = G.sigma(pp[k] + G.pairings @ z[k])
        z[k + 1] = z[k] - h * lam * z[k] + s @ (B[k + 1] - B[k])
    return times, z


# ---------------------------------------------------------------------------
# Consistency with Ito calculus


@dataclass(frozen=True)
class ConsistencyReport:
    steps: list[float]
    medians: list[float]
    discrepancies: np.ndarray  # (replicas, levels)

    @property
    def monotone(self) -> bool:
        return all(b < a for a, b in zip(self.medians[:-1], self.medians[1:]))

    @property
    def rate(self) -> float:
        return float(np.polyfit(np.log(self.steps), np.log(self.medians), 1)[0])


def ito_consistency_check(
    spec: NoiseSpec,
    G: ModalG,
    lam: np.ndarray,
    replicas: int = 50,
    fine_factor: int = 16,
    rpde_factor: int = 4,
    em_factors: Sequence[int] = (4, 2, 1),
    p: np.ndarray | None = None,
) -> ConsistencyReport:
    """RPDE against Euler-Maruyama references sharing the same Brownian samples.

    The Brownian path is sampled on ``spec.dt / fine_factor``.  The rough solution uses
    the grid coarsened by ``rpde_factor`` with exact second-level corrections; the
    Euler-Maruyama references use coarsenings ``em_factors`` of the fine grid.  The
    discrepancy is the maximum over the rough solver's grid times.
    """
    n = spec.nsteps * fine_factor
    h = spec.T / n
    times = np.linspace(0.0, spec.T, n + 1)
    out = np.zeros((replicas, len(em_factors)))
    for r in range(replicas):
        rng = _rng(spec.seed, 7919, r)
        B = np.vstack([np.zeros(G.m), np.cumsum(np.sqrt(h) * spec.sigma * rng.standard_normal((n, G.m)), axis=0)])
        fine = ito_lift((times, B))
        sol = solve_rpde(fine.coarsen(rpde_factor), lam, G, None if p is None else p[::rpde_factor])
        for c, f in enumerate(em_factors):
            et, ez = euler_maruyama_rpde(fine, lam, G, p, None, f)
            # compare on the rough grid
            step = rpde_factor // f if rpde_factor >= f else None
            if step is None or rpde_factor % f:
                raise ValueError("EM factors must divide the rough factor")
            out[r, c] = float(np.max(np.abs(ez[::step] - sol.z)))
    steps = [h * f for f in em_factors]
    return ConsistencyReport(steps, [float(np.median(out[:, c])) for c in range(len(em_factors))], out)


# ---------------------------------------------------------------------------
# Self-test battery


def selftest(seed: int = 0, steps: int = 256) -> list[tuple[str, float, float, bool]]:
    """Invariant battery: ``(name, measured, tolerance, passed)`` rows."""
    rng = _rng(seed, 1)
    times = np.linspace(0.0, 1.0, steps + 1)
    B = np.vstack([np.zeros(2), np.cumsum(np.sqrt(1.0 / steps) * rng.standard_normal((steps, 2)), axis=0)])
    drv = ito_lift((times, B))
    rows = []
    chen = drv.chen_residual()
    rows.append(("chen", chen, 1e-14, chen <= 1e-14))
    b = B[:, :1]
    d1 = ito_lift((times, b))
    y = b[:, :, None]
    dy = np.ones((steps + 1, 1, 1, 1))
    res = sewing_integral(y, dy, d1, steps, None)
    qv = float(np.sum(np.diff(b[:, 0]) ** 2))
    err = abs(float(res.value[0]) - (b[-1, 0] ** 2 - qv) / 2)
    rows.append(("ito-identity", err, 1e-12, err <= 1e-12))
    ys = np.sin(b)[:, :, None]
    dys = np.cos(b)[:, :, None, None]
    res2 = sewing_integral(ys, dys, d1, steps, np.array([1.0]))
    rows.append(("sewing-rate", res2.rate, 0.0, res2.cauchy))
    return rows


def nonlinear_noise(state, basis: ModalBasis, G: ModalG, driver: RoughDriver) -> "ModalPath":
    """``z_{q+1}`` for the nonlinear regime: the RPDE driven by the drift ``v_q`` of ``state``.

    The drift enters only through the pairings ``<v_q(t), phi_j>`` at driver grid
    times, so the result at ``t`` depends on ``v_q`` and ``B`` on ``[0, t]`` only.
    """
    from .stochastic import ModalPath

    p = np.stack([G.pairings @ basis.project(state.grid, state.v(float(t))) for t in driver.times])
    sol = solve_rpde(driver, basis.eig, G, p)
    return ModalPath(driver.times, sol.z, basis)
