"""Classical flow, variational frame, action phase and coherent-state assembly.

Hamilton's equations are x' = dg/dxi, xi' = -dg/dx.  The frame (Y, Z) solves
(Y', Z') = J M_t (Y, Z) with J = [[0, I], [-I, 0]] and M_t the Hessian of g
along the trajectory, started from Y = I, Z = iI.

Evolved packets use the Weyl-translation phase convention,

    psi_t(x) = e^{i delta_t/h} e^{i(x_0.xi_0 - x_t.xi_t)/2h} e^{i x.xi_t/h} G_t(x - x_t),
    G_t(u) = (pi h)^{-d/4} det(Y)^{-1/2} exp(i u.Z Y^{-1} u / 2h),

which equals e^{i x.xi_0/h} (pi h)^{-d/4} e^{-|x - x_0|^2/2h} at t = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import sympy as sp
from scipy.integrate import cumulative_simpson


class FrameError(RuntimeError):
    """The variational frame lost its symplectic invariants or became singular."""


# ------------------------------------------------------------ hamiltonians

class AnalyticHamiltonian:
    """Scalar symbol g(x, xi) from a sympy expression in x1.., xi1.."""

    def __init__(self, expr, d=1):
        self.d = d
        xs = sp.symbols(" ".join(f"x{i + 1}" for i in range(d)), real=True)
        ps = sp.symbols(" ".join(f"xi{i + 1}" for i in range(d)), real=True)
        xs = xs if isinstance(xs, tuple) else (xs,)
        ps = ps if isinstance(ps, tuple) else (ps,)
        if d == 1:
            local = {"x": xs[0], "xi": ps[0], "x1": xs[0], "xi1": ps[0]}
        else:
            local = {f"x{i + 1}": xs[i] for i in range(d)} | {f"xi{i + 1}": ps[i] for i in range(d)}
        self.expr = sp.sympify(expr, locals=local) if isinstance(expr, str) else expr
        self.text = str(expr)
        v = list(xs) + list(ps)
        self._f = sp.lambdify(v, self.expr, "numpy")
        self._g = [sp.lambdify(v, sp.diff(self.expr, a), "numpy") for a in v]
        self._h = [[sp.lambdify(v, sp.diff(self.expr, a, b), "numpy") for b in v] for a in v]

    def value(self, x, xi):
        return float(self._f(*x, *xi))

    def grad(self, x, xi):
        g = np.array([float(f(*x, *xi)) for f in self._g])
        return g[: self.d], g[self.d:]

    def hessian(self, x, xi):
        return np.array([[float(f(*x, *xi)) for f in row] for row in self._h])


def _axis_weights(ax, t, order):
    """Interpolation weights on axis nodes for the value and derivatives up to ``order``."""
    if ax.kind == "fourier":
        # trigonometric interpolant; the Nyquist mode enters as a cosine
        n = ax.n
        k = ax.wavenumbers
        arg = t - ax.points
        nyq = n // 2
        keep = np.arange(n) != nyq
        kk = k[keep]
        kn = abs(k[nyq])
        expo = np.exp(1j * np.outer(kk, arg))
        out = []
        for m in range(order + 1):
            w = ((1j * kk) ** m)[:, None] * expo
            w = w.sum(axis=0).real + kn**m * np.cos(kn * arg + m * np.pi / 2)
            out.append(w / n)
        return out
    base = ax.interpolation_matrix([t])[0]
    out = [base]
    D = ax.diff_matrix
    cur = base
    for _ in range(order):
        cur = cur @ D
        out.append(cur)
    return out


class SampledHamiltonian:
    """Scalar branch of a sampled matrix symbol, evaluated by spectral interpolation."""

    def __init__(self, grid, values):
        self.grid = grid
        self.d = grid.d
        self.values = np.asarray(np.broadcast_to(values, grid.shape), dtype=float)

    @classmethod
    def from_series(cls, g, h, branch=0):
        vals = g.evaluate(h)
        vals = np.broadcast_to(vals, g.grid.shape + g.fiber_shape)
        if vals.shape[-1] == 1:
            scalar = vals[..., 0, 0].real
        else:
            scalar = np.linalg.eigvalsh(0.5 * (vals + np.conj(np.swapaxes(vals, -1, -2))))[..., branch]
        return cls(g.grid, scalar)

    def _contract(self, point, derivs):
        weights = [_axis_weights(ax, c, 2) for ax, c in zip(self.grid.axes, point)]
        out = self.values
        for ax_w, m in zip(weights, derivs):
            out = np.tensordot(ax_w[m], out, axes=([0], [0]))
        return float(out)

    def contains(self, x, xi, margin=0.0):
        for ax, c in zip(self.grid.axes, list(x) + list(xi)):
            if c < ax.lo + margin or c > ax.hi - margin:
                if ax.kind == "fourier" and ax in self.grid.x:
                    continue
                return False
        return True

    def value(self, x, xi):
        return self._contract(list(x) + list(xi), [0] * (2 * self.d))

    def grad(self, x, xi):
        pt = list(x) + list(xi)
        g = []
        for i in range(2 * self.d):
            dv = [0] * (2 * self.d)
            dv[i] = 1
            g.append(self._contract(pt, dv))
        g = np.array(g)
        return g[: self.d], g[self.d:]

    def hessian(self, x, xi):
        pt = list(x) + list(xi)
        n = 2 * self.d
        H = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                dv = [0] * n
                dv[i] += 1
                dv[j] += 1
                H[i, j] = H[j, i] = self._contract(pt, dv)
        return H


def hessian_at(g, x, xi):
    """Symmetrized 2d x 2d Hessian of g at (x, xi), ordered (x, xi)."""
    H = np.asarray(g.hessian(np.atleast_1d(x), np.atleast_1d(xi)), dtype=float)
    return 0.5 * (H + H.T)


# ------------------------------------------------------------ trajectories

@dataclass
class TrajectoryBundle:
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    Y: np.ndarray | None = None
    Z: np.ndarray | None = None
    delta: np.ndarray | None = None
    energy: np.ndarray | None = None
    exit_report: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.x.shape[1]

    def sample(self, i):
        return {
            "t": float(self.t[i]), "x": self.x[i], "xi": self.xi[i],
            "Y": None if self.Y is None else self.Y[i],
            "Z": None if self.Z is None else self.Z[i],
            "delta": None if self.delta is None else float(self.delta[i]),
        }

    def index_at(self, t):
        i = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a stored sample")
        return i

    def table(self):
        """Columns for CSV export: t, x, xi, Re/Im of Y and Z entries, delta, energy."""
        d = self.d
        cols = {"t": self.t}
        for i in range(d):
            cols[f"x{i + 1}"] = self.x[:, i]
        for i in range(d):
            cols[f"xi{i + 1}"] = self.xi[:, i]
        for name, M in (("Y", self.Y), ("Z", self.Z)):
            for i in range(d):
                for j in range(d):
                    v = M[:, i, j] if M is not None else np.full(len(self.t), np.nan)
                    cols[f"re_{name}{i + 1}{j + 1}"] = np.real(v)
                    cols[f"im_{name}{i + 1}{j + 1}"] = np.imag(v)
        cols["delta"] = self.delta if self.delta is not None else np.full(len(self.t), np.nan)
        cols["energy"] = self.energy if self.energy is not None else np.full(len(self.t), np.nan)
        return cols


def trajectory_columns(d):
    cols = ["t"] + [f"x{i + 1}" for i in range(d)] + [f"xi{i + 1}" for i in range(d)]
    for name in ("Y", "Z"):
        for i in range(d):
            for j in range(d):
                cols += [f"re_{name}{i + 1}{j + 1}", f"im_{name}{i + 1}{j + 1}"]
    return cols + ["delta", "energy"]


def _rhs(g, state, d, with_frame):
    x, xi = state[:d].real, state[d:2 * d].real
    gx, gxi = g.grad(x, xi)
    out = np.zeros_like(state)
    out[:d] = gxi
    out[d:2 * d] = -gx
    if with_frame:
        M = hessian_at(g, x, xi)
        Y = state[2 * d:2 * d + d * d].reshape(d, d)
        Z = state[2 * d + d * d:].reshape(d, d)
        Mxx, Mxp = M[:d, :d], M[:d, d:]
        Mpx, Mpp = M[d:, :d], M[d:, d:]
        out[2 * d:2 * d + d * d] = (Mpx @ Y + Mpp @ Z).ravel()
        out[2 * d + d * d:] = (-Mxx @ Y - Mxp @ Z).ravel()
    return out


def _integrate(g, x0, xi0, T, dt, with_frame, box=None):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_1d(np.asarray(xi0, dtype=float))
    d = x0.size
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = int(round(abs(T) / dt))
    if steps == 0 or abs(steps * dt - abs(T)) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"T = {T} is not an integer multiple of dt = {dt}")
    h = math.copysign(dt, T) if T != 0 else dt
    state = np.concatenate([x0, xi0]).astype(complex)
    if with_frame:
        state = np.concatenate([state, np.eye(d).ravel(), 1j * np.eye(d).ravel()])
    states = [state]
    exit_report = None
    for s in range(steps):
        k1 = _rhs(g, state, d, with_frame)
        k2 = _rhs(g, state + 0.5 * h * k1, d, with_frame)
        k3 = _rhs(g, state + 0.5 * h * k2, d, with_frame)
        k4 = _rhs(g, state + h * k3, d, with_frame)
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if box is not None and not box(state[:d].real, state[d:2 * d].real):
            exit_report = f"trajectory left the phase-space box at t = {(s + 1) * h:.6g}"
            break
        states.append(state)
    states = np.array(states)
    t = h * np.arange(len(states))
    return t, states, d, exit_report


def integrate_flow(g, x0, xi0, T, dt=1e-3, box=None):
    """Fixed-step RK4 integration of Hamilton's equations for the scalar symbol g."""
    t, states, d, report = _integrate(g, x0, xi0, T, dt, False, box)
    x = states[:, :d].real
    xi = states[:, d:2 * d].real
    energy = np.array([g.value(a, b) for a, b in zip(x, xi)])
    return TrajectoryBundle(t, x, xi, energy=energy, exit_report=report)


def check_frame(Y, Z, tol=1e-6):
    """Return the two symplectic invariant defects of (Y, Z); raise beyond ``tol``."""
    d = Y.shape[-1]
    sym = np.max(np.abs(np.swapaxes(Y, -1, -2) @ Z - np.swapaxes(Z, -1, -2) @ Y))
    herm = np.max(np.abs(np.conj(np.swapaxes(Y, -1, -2)) @ Z - np.conj(np.swapaxes(Z, -1, -2)) @ Y - 2j * np.eye(d)))
    if max(sym, herm) > tol:
        raise FrameError(f"variational frame invariants violated: {sym:.3e}, {herm:.3e}; reduce dt")
    return float(sym), float(herm)


def integrate_linearized(traj_or_g, g=None, x0=None, xi0=None, T=None, dt=1e-3, box=None):
    """Trajectory with the variational frame (Y, Z) integrated alongside.

    Called as ``integrate_linearized(traj, g)`` it re-integrates from the
    trajectory's initial point with the same step, so that the frame and the
    flow share one RK4 discretization.
    """
    if isinstance(traj_or_g, TrajectoryBundle):
        traj = traj_or_g
        x0, xi0 = traj.x[0], traj.xi[0]
        dt = abs(traj.t[1] - traj.t[0])
        T = traj.t[-1]
    else:
        g = traj_or_g
    t, states, d, report = _integrate(g, x0, xi0, T, dt, True, box)
    x = states[:, :d].real
    xi = states[:, d:2 * d].real
    Y = states[:, 2 * d:2 * d + d * d].reshape(-1, d, d)
    Z = states[:, 2 * d + d * d:].reshape(-1, d, d)
    check_frame(Y, Z)
    energy = np.array([g.value(a, b) for a, b in zip(x, xi)])
    bundle = TrajectoryBundle(t, x, xi, Y, Z, energy=energy, exit_report=report)
    bundle.delta = action_phase(bundle, g)
    conds = np.linalg.cond(Y)
    bundle.metadata["max_condition_Y"] = float(np.max(conds))
    return bundle


def action_phase(traj, g):
    """delta_t = int_0^t (x'.xi - g) ds + (x_0.xi_0 - x_t.xi_t)/2 by cumulative Simpson."""
    xdot = np.array([g.grad(a, b)[1] for a, b in zip(traj.x, traj.xi)])
    gv = np.array([g.value(a, b) for a, b in zip(traj.x, traj.xi)])
    integrand = np.sum(xdot * traj.xi, axis=1) - gv
    if len(traj.t) < 3:
        integral = np.concatenate([[0.0], 0.5 * (integrand[1:] + integrand[:-1]) * np.diff(traj.t)])
    else:
        integral = cumulative_simpson(integrand, x=traj.t, initial=0.0)
    boundary = 0.5 * (np.dot(traj.x[0], traj.xi[0]) - np.sum(traj.x * traj.xi, axis=1))
    return integral + boundary


def _det_sqrt_branch(Ys):
    """Continuous branch of det(Y)^{1/2} along the stored samples."""
    dets = np.linalg.det(Ys)
    ang = np.unwrap(np.angle(dets))
    return np.sqrt(np.abs(dets)) * np.exp(0.5j * ang)


def assemble_packet(bundle, index, h, x_axes, fiber=None, mu=0, squeezed=True):
    """Coherent state at sample ``index`` on the nuclear grid spanned by ``x_axes``.

    ``fiber`` is an array x_shape + fiber_shape (the electronic state u_1(x, .))
    or None for a scalar packet.  ``mu`` is a ladder index (int for d = 1, tuple
    otherwise).  ``squeezed=False`` gives the frozen-width Gaussian.
    """
    d = bundle.d
    X = np.stack(np.meshgrid(*x_axes, indexing="ij"))
    s = bundle.sample(index)
    xt, xit = s["x"], s["xi"]
    x0, xi0 = bundle.x[0], bundle.xi[0]
    delta = s["delta"] if s["delta"] is not None else 0.0
    u = X - xt.reshape((d,) + (1,) * d)
    phase = np.exp(1j * delta / h + 1j * (np.dot(x0, xi0) - np.dot(xt, xit)) / (2 * h)
                   + 1j * np.tensordot(xit, X, axes=(0, 0)) / h)
    norm = (np.pi * h) ** (-d / 4)
    if squeezed:
        Y, Z = s["Y"], s["Z"]
        if np.linalg.cond(Y) > 1e12:
            raise FrameError(f"Y is singular (condition {np.linalg.cond(Y):.3e})")
        Yi = np.linalg.inv(Y)
        Q = Z @ Yi
        sq = _det_sqrt_branch(bundle.Y[: index + 1])[-1]
        quad = np.einsum("i...,ij,j...->...", u, Q, u)
        base = norm / sq * np.exp(1j * quad / (2 * h))
    else:
        Y = np.eye(d, dtype=complex)
        Yi = Y
        base = norm * np.exp(-np.sum(u**2, axis=0) / (2 * h))
    mu = (mu,) if np.isscalar(mu) else tuple(mu)
    if any(mu):
        base = _ladder(base, u, Y, Yi, h, mu)
    psi = phase * base
    if fiber is None:
        return psi
    fiber = np.asarray(fiber)
    extra = fiber.ndim - d
    return psi.reshape(psi.shape + (1,) * extra) * fiber


def _ladder(phi0, u, Y, Yi, h, mu):
    """Hagedorn raising recursion from the Gaussian phi0 up to multi-index mu."""
    d = len(mu)
    M = Yi @ np.conj(Y)
    Yu = np.einsum("ij,j...->i...", Yi, u)
    cache = {(0,) * d: phi0}

    def get(k):
        if k in cache:
            return cache[k]
        j = max(i for i in range(d) if k[i] > 0)
        km = list(k)
        km[j] -= 1
        km = tuple(km)
        val = math.sqrt(2.0 / h) * Yu[j] * get(km)
        for l in range(d):
            if km[l] > 0:
                kl = list(km)
                kl[l] -= 1
                val = val - math.sqrt(km[l]) * M[j, l] * get(tuple(kl))
        out = val / math.sqrt(km[j] + 1)
        cache[k] = out
        return out

    return get(tuple(mu))
