"""Superadiabatic projection, Kato-Nagy intertwiner and effective Hamiltonian symbols.

The resolvent symbols q_j(x, xi; z) are sampled on a *contour grid*: the base
phase-space grid extended by an angle axis theta, with the spectral parameter

    z = |xi|^2 + c(x) + rho * exp(i theta).

Moyal products need derivatives at fixed z.  Writing w = z - |xi|^2 - c(x), the
chain rule gives

    d/dxi_i |_z = d/dxi_i |_theta - 2 xi_i d/dw,
    d/dx_i  |_z = d/dx_i  |_theta - dc/dx_i d/dw,
    d/dw        = (i w)^{-1} d/dtheta,

with d/dtheta spectral on the periodic angle axis.  At fixed w the matrix
p_0 - z = P_e(x) - c(x) - w does not depend on xi, so every q_j is a polynomial
in xi and Chebyshev xi-axes differentiate it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .symbols import (
    DEFAULT_ORDER,
    HSeries,
    StructureError,
    check_compatible,
    compose,
    hermitian_defect,
    moyal_product,
    series_norm,
)


class ContourError(RuntimeError):
    """The contour is too close to the spectrum or the quadrature does not converge."""


class PreconditionError(RuntimeError):
    """An input series is too far from the regime where the expansion converges."""


@dataclass
class Contour:
    center: np.ndarray  # shape x_shape
    radius: float
    nodes: int = 32
    clearance: float = float("nan")
    rank: int = 1

    @classmethod
    def from_spectrum(cls, energies, rank=1, nodes=32):
        """Loop around the lowest ``rank`` levels of ``energies`` (x_shape + (n,))."""
        energies = np.asarray(energies, dtype=float)
        low = energies[..., :rank]
        center = 0.5 * (low.min(axis=-1) + low.max(axis=-1))
        spread = 0.5 * float(np.max(low.max(axis=-1) - low.min(axis=-1)))
        if energies.shape[-1] > rank:
            gap = float(np.min(energies[..., rank] - low.max(axis=-1)))
        else:
            gap = 1.0
        if gap <= 0:
            raise ContourError(f"no spectral gap above level {rank} (min gap {gap:.3e})")
        radius = spread + gap / 4
        dist = np.abs(energies - center[..., None])
        inside = np.min(radius - dist[..., :rank])
        outside = np.min(dist[..., rank:] - radius) if energies.shape[-1] > rank else np.inf
        return cls(center=center, radius=radius, nodes=nodes,
                   clearance=float(min(inside, outside)), rank=rank)

    def with_nodes(self, nodes):
        return Contour(self.center, self.radius, nodes, self.clearance, self.rank)

    def with_radius(self, radius):
        return Contour(self.center, radius, self.nodes, self.clearance, self.rank)


class ContourGrid:
    """Base phase-space grid times a trapezoidal angle axis on a loop in z."""

    def __init__(self, base, center, radius, nodes, kinetic_shift=True):
        self.base = base
        self.d = base.d
        self.radius = float(radius)
        self.nodes = int(nodes)
        self.kinetic_shift = kinetic_shift
        self.shape = base.shape + (self.nodes,)
        nd = len(base.shape)
        self.theta = 2 * np.pi * (np.arange(self.nodes) + 0.5) / self.nodes
        self.phase = np.exp(1j * self.theta)
        self.w = self.radius * self.phase
        self._kth = np.fft.fftfreq(self.nodes, d=1.0 / self.nodes)
        self._kth_odd = self._kth.copy()
        self._kth_odd[self.nodes // 2] = 0.0

        d = base.d
        center = np.asarray(center, dtype=float)
        if center.ndim == 0:
            center = np.full(base.x_shape, float(center))
        self.center = center
        self.position_dependent = bool(np.ptp(center) > 0)
        if self.position_dependent:
            c_arr = center.reshape(base.x_shape + (1,) * d)
        else:
            c_arr = np.full((1,) * (2 * d), float(center.flat[0]))
        self.center_slopes = []
        for i in range(d):
            if self.position_dependent:
                dc = base.x[i].derivative(np.array(c_arr), i, 1)
                self.center_slopes.append(dc[..., None, None, None])
            else:
                self.center_slopes.append(None)
        # xi_i as arrays with singleton axes everywhere except xi-axis i
        self.xi = []
        for i, ax in enumerate(base.xi):
            shape = [1] * (nd + 3)
            shape[d + i] = ax.n
            self.xi.append(ax.points.reshape(shape))
        shift = c_arr.astype(complex)
        if kinetic_shift:
            for i, ax in enumerate(base.xi):
                shape = [1] * nd
                shape[d + i] = ax.n
                shift = shift + ax.points.reshape(shape) ** 2
        self.z = shift[..., None] + self.w.reshape((1,) * nd + (self.nodes,))
        self._ndim_base = nd

    def __eq__(self, other):
        return self is other

    def __hash__(self):
        return id(self)

    def describe_mismatch(self, other):
        return "contour"

    def lift(self, data):
        """View a base-grid array (base.shape + fiber) as z-independent on this grid."""
        nd = self._ndim_base
        return np.broadcast_to(np.expand_dims(data, nd), data.shape[:nd] + (self.nodes,) + data.shape[nd:])

    def lift_series(self, a):
        return HSeries(self, [self.lift(c) for c in a.coeffs])

    def d_dw(self, data):
        axis = self._ndim_base
        shape = [1] * data.ndim
        shape[axis] = self.nodes
        spec = sfft.fft(data, axis=axis) * (1j * self._kth_odd).reshape(shape)
        dth = sfft.ifft(spec, axis=axis)
        return dth / (1j * self.w).reshape(shape)

    def derivative(self, data, var, i, order):
        out = data
        for _ in range(order):
            if var == "x":
                base_d = self.base.x[i].derivative(out, i, 1)
                if self.position_dependent:
                    base_d = base_d - self.center_slopes[i] * self.d_dw(out)
            else:
                base_d = self.base.xi[i].derivative(out, self.d + i, 1)
                if self.kinetic_shift:
                    base_d = base_d - 2 * self.xi[i] * self.d_dw(out)
            out = base_d
        return out

    def contour_integral(self, data):
        """(i / 2 pi) times the loop integral over z, by the trapezoidal rule."""
        nd = self._ndim_base
        shape = [1] * data.ndim
        shape[nd] = self.nodes
        weights = (-(self.radius / self.nodes) * self.phase).reshape(shape)
        return np.sum(data * weights, axis=nd)


@dataclass
class ProjectionSeries:
    pi: HSeries
    N: int
    contour: Contour
    doubling_change: float = float("nan")
    defects: dict = field(default_factory=dict)


@dataclass
class EffectiveSymbol:
    g: HSeries
    mu: np.ndarray  # x_shape + (k, k)
    u: HSeries | None = None
    hermitian_defect: float = 0.0


def resolvent_q0(p0, cgrid, max_condition=1e12):
    """Pointwise inverse of p_0 - z on the contour grid."""
    p0 = np.asarray(p0)
    n = p0.shape[-1]
    shifted = cgrid.lift(p0) - cgrid.z[..., None, None] * np.eye(n)
    cond = np.linalg.cond(shifted)
    worst = np.unravel_index(np.argmax(cond), cond.shape)
    if not np.all(np.isfinite(cond)) or cond[worst] > max_condition:
        raise ContourError(
            f"contour too close to the spectrum: condition number {cond[worst]:.3e} at grid index {worst}"
        )
    q0 = np.linalg.inv(shifted)
    resid = np.max(np.abs(shifted @ q0 - np.eye(n)))
    if resid > 1e-10:
        raise ContourError(f"resolvent residual {resid:.3e} exceeds 1e-10")
    return q0


def remainder_r(p, q0, cgrid, N=DEFAULT_ORDER):
    """r = 1 - (p - z) # q_0 on the contour grid, through order h^N."""
    n = p.fiber_shape[0]
    coeffs = [cgrid.lift(c) for c in p.coeffs[: N + 1]]
    coeffs[0] = coeffs[0] - cgrid.z[..., None, None] * np.eye(n)
    pz = HSeries(cgrid, coeffs)
    prod = moyal_product(pz, HSeries(cgrid, [q0]), N)
    out = [-c for c in prod.coeffs]
    out[0] = out[0] + np.eye(n)
    return HSeries(cgrid, out)


def resolvent_series(q0, r, N=DEFAULT_ORDER):
    """q = q_0 + q_0 # (r + r#r + ... + r^{#N})."""
    cgrid = r.grid
    q0s = HSeries(cgrid, [q0])
    if N == 0 or all(not np.any(c) for c in r.coeffs):
        return HSeries(cgrid, [q0] + [np.zeros_like(q0) for _ in range(N)])
    power = r.truncate(N)
    total = power
    for _ in range(2, N + 1):
        power = moyal_product(power, r, N)
        total = total + power
    corr = moyal_product(q0s, total, N)
    coeffs = [corr[j] for j in range(N + 1)]
    coeffs[0] = coeffs[0] + q0
    return HSeries(cgrid, coeffs)


def contour_projection(p, contour, N=DEFAULT_ORDER):
    """Contour integrals of the resolvent series, without convergence checks."""
    cgrid = ContourGrid(p.grid, contour.center, contour.radius, contour.nodes)
    q0 = resolvent_q0(p[0], cgrid)
    r = remainder_r(p, q0, cgrid, N)
    q = resolvent_series(q0, r, N)
    coeffs = [cgrid.contour_integral(q[j]) for j in range(N + 1)]
    # the loop is symmetric under conjugation, so the exact integrals are hermitian
    coeffs = [0.5 * (c + np.conj(np.swapaxes(c, -1, -2))) for c in coeffs]
    return HSeries(p.grid, coeffs)


def projection_series(p, contour, N=DEFAULT_ORDER, check_doubling=True, tol=1e-8):
    """Superadiabatic projection coefficients pi_0 .. pi_N."""
    if contour.clearance <= 0:
        raise ContourError(f"contour clearance {contour.clearance:.3e} is not positive")
    pi = contour_projection(p, contour, N)
    change = float("nan")
    if check_doubling:
        fine = contour_projection(p, contour.with_nodes(2 * contour.nodes), N)
        change = max(float(np.max(np.abs(a - b))) for a, b in zip(pi.coeffs, fine.coeffs))
        if change > tol:
            raise ContourError(
                f"quadrature not converged: doubling {contour.nodes} nodes changes pi by {change:.3e}"
                f" (radius {contour.radius:.4g}, clearance {contour.clearance:.4g})"
            )
    return ProjectionSeries(pi=pi, N=N, contour=contour, doubling_change=change)


def idempotency_defect(pi, N=None):
    N = pi.order if N is None else N
    sq = moyal_product(pi, pi, N)
    return HSeries(pi.grid, [sq[j] - pi[j] for j in range(N + 1)])


def commutator_defect(p, pi, N=None):
    N = pi.order if N is None else N
    a = moyal_product(p, pi, N)
    b = moyal_product(pi, p, N)
    return HSeries(pi.grid, [a[j] - b[j] for j in range(N + 1)])


def riesz_purify(pi, N=None, nodes=64, tol=0.1):
    """Symbol-level Riesz projection of pi around the eigenvalue 1.

    pi' = (i/2 pi) loop integral over |z - 1| = 1/2 of the #-inverse of (pi - z).
    """
    N = pi.order if N is None else N
    defect = idempotency_defect(pi, N)
    norms = [series_norm(defect, j) for j in range(N + 1)]
    if max(norms) > tol:
        raise PreconditionError(f"idempotency defect too large for purification: {norms}")
    if pi.order == 0 or all(not np.any(c) for c in pi.coeffs[1:]):
        if norms[0] <= 1e-10:
            return pi
    cgrid = ContourGrid(pi.grid, 1.0, 0.5, nodes, kinetic_shift=False)
    n = pi.fiber_shape[0]
    pz = [cgrid.lift(c) for c in pi.coeffs[: N + 1]]
    pz[0] = pz[0] - cgrid.z[..., None, None] * np.eye(n)
    s0 = np.linalg.inv(pz[0])
    prod = moyal_product(HSeries(cgrid, pz), HSeries(cgrid, [s0]), N)
    r = [-c for c in prod.coeffs]
    r[0] = r[0] + np.eye(n)
    s = resolvent_series(s0, HSeries(cgrid, r), N)
    coeffs = [cgrid.contour_integral(s[j]) for j in range(N + 1)]
    coeffs = [0.5 * (c + np.conj(np.swapaxes(c, -1, -2))) for c in coeffs]
    return HSeries(pi.grid, coeffs)


def nagy_intertwiner(pi, pi0=None, N=None):
    """Symbol u of (P0 P + (1-P0)(1-P)) (1 - (P0 - P)^2)^{-1/2}.

    The inverse square root is the binomial series sum_k binom(2k, k)/4^k D^k
    in the defect D = (pi_0 - pi)^2, truncated at h^N.
    """
    N = pi.order if N is None else N
    grid = pi.grid
    n = pi.fiber_shape[0]
    p0 = HSeries(grid, [pi[0] if pi0 is None else np.asarray(pi0, dtype=complex)])
    one = HSeries.identity(grid, n)
    diff = HSeries(grid, [p0[j] - pi[j] for j in range(N + 1)])
    if all(not np.any(c) for c in diff.coeffs):
        return HSeries.identity(grid, n, N)
    comp0 = one - p0
    compl = HSeries(grid, [(one[j] if j == 0 else 0) - pi[j] for j in range(N + 1)])
    T = compose(p0, pi, N) + compose(comp0, compl, N)
    D = compose(diff, diff, N)
    S = HSeries.identity(grid, n, N)
    power = HSeries.identity(grid, n, N)
    last = math.inf
    for k in range(1, N + 1):
        power = compose(power, D, N)
        term_norm = max(series_norm(power, j) for j in range(N + 1))
        if term_norm == 0:
            break
        coef = math.comb(2 * k, k) / 4**k
        if coef * term_norm > last * (1 + 1e-12) and coef * term_norm > 1e-12:
            raise PreconditionError(f"binomial series terms grow at k={k}: {coef * term_norm:.3e} > {last:.3e}")
        last = coef * term_norm
        S = S + hseries_scale(power, coef)
    return compose(T, S, N)


def hseries_scale(a, c):
    return HSeries(a.grid, [c * x for x in a.coeffs])


def effective_hamiltonian(u, p, basis, N=None, tol=1e-8):
    """g = w # p # w^dagger in operator order W P W^*, with w = B^dagger u.

    ``basis`` holds the columns u_1..u_k on the x-grid: shape x_shape + (n, k).
    """
    N = u.order if N is None else N
    grid = u.grid
    basis = np.asarray(basis, dtype=complex)
    d = grid.d
    B = basis.reshape(basis.shape[:d] + (1,) * d + basis.shape[d:])
    Bh = np.conj(np.swapaxes(B, -1, -2))
    k = B.shape[-1]
    rank_err = np.max(np.abs(Bh @ B - np.eye(k)), axis=(-2, -1))
    if np.max(rank_err) > tol:
        worst = np.unravel_index(np.argmax(rank_err), rank_err.shape)
        xs = [grid.x[i].points[worst[i]] for i in range(d)]
        raise StructureError(f"fiber basis loses orthonormality at x = {xs} (error {rank_err[worst]:.3e})")
    w = compose(HSeries(grid, [Bh]), u, N)
    wh = HSeries(grid, [np.conj(np.swapaxes(c, -1, -2)) for c in w.coeffs])
    g = compose(w, compose(_pad(p, N), wh, N), N)
    herm = hermitian_defect(g)
    g = HSeries(grid, [0.5 * (c + np.conj(np.swapaxes(c, -1, -2))) for c in g.coeffs])
    # mu(x) = B^dagger (p_0 - |xi|^2) B, read at the first xi node
    _, XI = grid.mesh()
    kin = np.sum(XI**2, axis=0)[..., None, None] * np.eye(basis.shape[-2])
    sl = (slice(None),) * d + (0,) * d
    mu = np.broadcast_to(Bh @ (p.full(0) - kin) @ B, grid.shape + (k, k))[sl]
    out = EffectiveSymbol(g=g, mu=mu, u=u, hermitian_defect=herm)
    return out


def _pad(a, N):
    """Extend (with zeros) or cut a series to order N."""
    return HSeries(a.grid, [a[j] for j in range(N + 1)])


def fit_loglog(hs, values, floor=1e-12):
    """Least-squares slope of log(values) against log(hs); None when at the floor."""
    hs = np.asarray(hs, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values <= floor):
        return {"slope": None, "residual": None, "marker": "floor"}
    A = np.vstack([np.log(hs), np.ones_like(hs)]).T
    coef, *_ = np.linalg.lstsq(A, np.log(values), rcond=None)
    resid = np.log(values) - A @ coef
    monotone = bool(np.all(np.diff(values[np.argsort(hs)]) > 0))
    return {
        "slope": float(coef[0]),
        "residual": float(np.sqrt(np.mean(resid**2))),
        "marker": "ok" if monotone else "non-monotone",
    }


def defect_report(pi, p, hs, extra_orders=2):
    """Sup norms of the idempotency and commutator defects evaluated at each h."""
    N = pi.order + extra_orders
    pip = _pad(pi, N)
    pp = _pad(p, N)
    idem = idempotency_defect(pip, N)
    comm = commutator_defect(pp, pip, N)
    rows = []
    for h in hs:
        rows.append({
            "h": float(h),
            "idempotency": float(np.max(np.linalg.norm(idem.evaluate(h), ord=2, axis=(-2, -1)))),
            "commutator": float(np.max(np.linalg.norm(comm.evaluate(h), ord=2, axis=(-2, -1)))),
        })
    fits = {
        key: fit_loglog([r["h"] for r in rows], [r[key] for r in rows], floor=1e-9)
        for key in ("idempotency", "commutator")
    }
    return {"rows": rows, "fits": fits}


__all__ = [
    "Contour",
    "ContourError",
    "ContourGrid",
    "EffectiveSymbol",
    "PreconditionError",
    "ProjectionSeries",
    "check_compatible",
    "commutator_defect",
    "contour_projection",
    "defect_report",
    "effective_hamiltonian",
    "fit_loglog",
    "idempotency_defect",
    "nagy_intertwiner",
    "projection_series",
    "remainder_r",
    "resolvent_q0",
    "resolvent_series",
    "riesz_purify",
]
