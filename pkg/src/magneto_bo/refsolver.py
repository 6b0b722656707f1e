"""Brute-force grid propagation of i h d/dt phi = P phi, observables and gauge conversions.

The state lives on a tensor grid: the nuclear x-grid (d periodic axes) times
the fiber, which is either the electron y-grid (pair models, d = 2) or the
index space of a matrix fiber.  Time stepping uses a Lanczos approximation of
exp(-i dt P / h) with an a-posteriori error check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla
from scipy.linalg.blas import dznrm2, zaxpy

from .symbols import Axis


class FrameMismatch(ValueError):
    """State and operator belong to different gauge frames."""


class PropagationError(RuntimeError):
    """The Krylov step could not meet its accuracy requirement."""


@dataclass(frozen=True)
class TensorGrid:
    x: tuple  # nuclear Axis objects
    fiber_shape: tuple  # (ny, ny) for pair models, (n,) for matrix models
    budget: int = 2**22

    def __post_init__(self):
        if self.size > self.budget:
            raise ValueError(f"tensor grid has {self.size} points, above the budget {self.budget}")
        for ax in self.x:
            if ax.kind != "fourier":
                raise ValueError("nuclear axes of the tensor grid must be periodic")

    @classmethod
    def build(cls, d, x_range, nx, fiber_shape, budget=2**22):
        if np.ndim(x_range[0]) == 0:
            x_range = [x_range] * d
        nx = [nx] * d if np.ndim(nx) == 0 else list(nx)
        axes = tuple(Axis(float(r[0]), float(r[1]), int(n)) for r, n in zip(x_range, nx))
        return cls(axes, tuple(fiber_shape), budget)

    @property
    def d(self):
        return len(self.x)

    @property
    def x_shape(self):
        return tuple(ax.n for ax in self.x)

    @property
    def shape(self):
        return self.x_shape + self.fiber_shape

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def x_cell(self):
        return float(np.prod([ax.spacing for ax in self.x]))

    def x_mesh(self):
        return np.stack(np.meshgrid(*[ax.points for ax in self.x], indexing="ij"))

    def wavenumbers(self):
        return np.stack(np.meshgrid(*[ax.wavenumbers for ax in self.x], indexing="ij"))


@dataclass
class GridState:
    data: np.ndarray
    grid: TensorGrid
    frame: str = "gauged"
    t: float = 0.0
    h: float = 0.1
    y_cell: float = 1.0

    def norm(self):
        return float(np.sqrt(np.sum(np.abs(self.data) ** 2) * self.grid.x_cell * self.y_cell))

    def copy(self, data=None, **kw):
        return replace(self, data=self.data.copy() if data is None else data, **kw)


@dataclass
class PropagatorConfig:
    dt: float
    T: float
    m: int = 24
    stride: int = 1
    tol: float = 1e-9
    enforce_range: bool = True
    reorthogonalize: bool = False


# ---------------------------------------------------------------- operators

class GridHamiltonian:
    """Matrix-free P for a model on a tensor grid, in a given gauge frame.

    With A = b J v every first-order term pairs D along one axis with a
    field that does not depend on that axis, so each axis is handled by a
    single 1D FFT pair with a combined multiplier.
    """

    def __init__(self, model, grid, frame="gauged"):
        if frame not in ("gauged", "ungauged"):
            raise ValueError(f"unknown frame {frame!r}")
        self.model = model
        self.grid = grid
        self.frame = frame
        self.h = model.h
        self.K = grid.wavenumbers()
        self.K2 = np.sum(self.K**2, axis=0)
        X = grid.x_mesh()
        if model.pathway == "matrix":
            self.V = model.fiber_matrix(X[0])
            self.mixed = False
            return
        c = self.c = model.frame(frame)
        y = model.ygrid.mesh
        ky = model.ygrid.wavenumbers
        BX = np.einsum("ij,j...->i...", model.B, X)[..., None, None]
        By = np.einsum("ij,j...->i...", model.B, y)[:, None, None]
        field_X = c["MX_X"] * BX + c["MX_y"] * By
        field_y = c["My_X"] * BX + c["My_y"] * By
        S = (c["S_XX"] * np.sum(BX * BX, axis=0) + c["S_Xy"] * np.sum(BX * By, axis=0)
             + c["S_yy"] * np.sum(By * By, axis=0))
        shape = grid.shape
        V = model.potential(np.broadcast_to(X[..., None, None], (2,) + shape),
                            np.broadcast_to(y[:, None, None], (2,) + shape))
        # X-translation invariance lets the state stay in X-Fourier space
        self.mixed = bool(
            model.x_independent
            and c["MX_X"] == 0 and c["My_X"] == 0 and c["S_XX"] == 0 and c["S_Xy"] == 0
        )
        Kb = self.K[..., None, None]
        kb = ky[:, None, None]
        self.y_mult = [np.broadcast_to(c["gamma"] * kb[a] ** 2 + field_y[a] * kb[a], shape).copy() for a in range(2)]
        self.beta = c["beta"]
        self.kb = kb
        self.Kb = Kb
        if self.mixed:
            self.diag = np.broadcast_to(
                c["alpha"] * self.K2[..., None, None] + field_X[0] * Kb[0] + field_X[1] * Kb[1] + S + V, shape
            ).copy()
        else:
            self.x_mult = [np.broadcast_to(c["alpha"] * Kb[a] ** 2 + field_X[a] * Kb[a], shape).copy()
                           for a in range(2)]
            self.diag = np.broadcast_to(S + V, shape).copy()

    # representation changes, identity unless mixed
    def to_rep(self, psi):
        return sfft.fft2(psi, axes=(0, 1)) if self.mixed else psi

    def from_rep(self, psi):
        return sfft.ifft2(psi, axes=(0, 1)) if self.mixed else psi

    def apply(self, psi):
        """Apply P to psi given in the working representation."""
        if self.model.pathway == "matrix":
            kin = sfft.ifft(sfft.fft(psi, axis=0) * (self.h**2 * self.K2)[:, None], axis=0)
            return kin + np.einsum("xij,xj->xi", self.V, psi)
        out = self.diag * psi
        for a in range(2):
            out += _axis_multiply(psi, self.y_mult[a], 2 + a)
        if not self.mixed:
            for a in range(2):
                out += _axis_multiply(psi, self.x_mult[a], a)
        if self.beta:
            for a in range(2):
                if self.mixed:
                    out += self.beta * self.Kb[a] * _axis_multiply(psi, self.kb[a], 2 + a)
                else:
                    ax = (a, 2 + a)
                    t = sfft.fft2(psi, axes=ax)
                    t *= self.Kb[a] * self.kb[a]
                    out += self.beta * sfft.ifft2(t, axes=ax, overwrite_x=True)
        return out


def _axis_multiply(psi, mult, axis):
    """ifft(mult * fft(psi)) along one axis, reusing the transform buffer."""
    t = sfft.fft(psi, axis=axis)
    t *= mult
    return sfft.ifft(t, axis=axis, overwrite_x=True)


def apply_hamiltonian(model, state, grid=None, operator=None):
    """P applied to a grid state in the state's frame."""
    op = operator or GridHamiltonian(model, state.grid, state.frame)
    if op.frame != state.frame:
        raise FrameMismatch(f"operator frame {op.frame} vs state frame {state.frame}")
    out = op.from_rep(op.apply(op.to_rep(state.data)))
    return state.copy(data=out)


# ------------------------------------------------------------------ Krylov

def _tridiag(a, b, k):
    return np.diag(a[:k]) + np.diag(b[: k - 1], 1) + np.diag(b[: k - 1], -1)


def spectral_range(apply, shape, iters=30, seed=0, pad_fraction=0.02):
    """Extreme eigenvalue estimates of a hermitian operator.

    Plain Lanczos from a seeded random start; loss of orthogonality only
    produces duplicate Ritz values, which does not affect the extremes.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    prev = np.zeros_like(v)
    a, b = np.zeros(iters), np.zeros(iters)
    beta = 0.0
    k = iters
    for j in range(iters):
        w = apply(v) - beta * prev
        a[j] = np.vdot(v, w).real
        w -= a[j] * v
        beta = np.linalg.norm(w)
        b[j] = beta
        if beta < 1e-12:
            k = j + 1
            break
        prev, v = v, w / beta
    ev = np.linalg.eigvalsh(_tridiag(a, b, k))
    # extreme Ritz values converge from inside; widen slightly to bracket the spectrum
    pad = pad_fraction * (ev[-1] - ev[0])
    return float(ev[0] - pad), float(ev[-1] + pad)


def krylov_step(apply, psi, tau, h, m=24, tol=1e-9, shift=0.0, check_every=2, reorthogonalize=False):
    """exp(-i tau (P - shift)/h) psi by the Lanczos method.

    Iterates until the a-posteriori error estimate falls below ``tol`` (scaled
    by the norm of psi) or m vectors are used.  The short three-term recursion
    is accurate for the small bases used here; ``reorthogonalize`` adds a full
    Gram-Schmidt sweep per vector.  Returns (result, estimate, k).
    """
    shape = psi.shape
    beta0 = np.linalg.norm(psi)
    V = np.empty((m, psi.size), dtype=complex)
    a = np.zeros(m)
    b = np.zeros(m)
    np.multiply(psi.ravel(), 1.0 / beta0, out=V[0])
    err = np.inf
    coef = None
    k = 0
    for j in range(m):
        w = np.ascontiguousarray(apply(V[j].reshape(shape)), dtype=complex).ravel()
        # in-place BLAS updates keep each pass over the vector to one read and one write
        a[j] = np.vdot(V[j], w).real - shift
        w = zaxpy(V[j], w, a=-(a[j] + shift))
        if j:
            w = zaxpy(V[j - 1], w, a=-b[j - 1])
        if reorthogonalize:
            # classical Gram-Schmidt against the whole basis, repeated if cancellation was severe
            for _ in range(2):
                before = dznrm2(w)
                w -= (V[: j + 1] @ w.conj()).conj() @ V[: j + 1]
                b[j] = dznrm2(w)
                if b[j] > 0.7 * before:
                    break
        else:
            b[j] = dznrm2(w)
        k = j + 1
        if b[j] < 1e-14 * max(1.0, abs(a[j])) or k % check_every == 0 or k == m:
            ev, U = np.linalg.eigh(_tridiag(a, b, k))
            coef = U @ (np.exp(-1j * tau * ev / h) * U[0].conj())
            err = 0.0 if b[j] < 1e-14 * max(1.0, abs(a[j])) else float(b[j] * abs(coef[k - 1]))
            if err <= tol:
                break
        if j + 1 < m:
            np.multiply(w, 1.0 / b[j], out=V[j + 1])
    if err > tol:
        raise PropagationError(f"Krylov error estimate {err:.3e} exceeds {tol:.1e}; reduce dt or raise m")
    out = beta0 * (coef @ V[:k])
    return out.reshape(shape), err * beta0, k


def propagate(model, state, config, operator=None, observer=None, spectrum=None, keep_samples=True):
    """Lanczos time stepping; returns the list of sampled states (including t = 0).

    ``observer(state)`` is called on each sample and its results collected in
    the returned record under ``observations``.  ``spectrum`` reuses a known
    (lo, hi) range; with ``keep_samples=False`` only the first and last
    states are stored.
    """
    op = operator or GridHamiltonian(model, state.grid, state.frame)
    if op.frame != state.frame:
        raise FrameMismatch(f"operator frame {op.frame} vs state frame {state.frame}")
    h = state.h
    steps = int(round(abs(config.T) / config.dt))
    if steps == 0 or abs(steps * config.dt - abs(config.T)) > 1e-9 * max(1.0, abs(config.T)):
        raise ValueError("T must be an integer multiple of dt")
    tau = math.copysign(config.dt, config.T) if config.T != 0 else 0.0
    psi = op.to_rep(state.data)
    lo, hi = spectrum if spectrum is not None else spectral_range(op.apply, psi.shape)
    shift = 0.5 * (lo + hi)
    half_width = 0.5 * (hi - lo)
    ratio = abs(tau) * half_width / h
    if config.enforce_range and ratio > config.m / 2:
        raise PropagationError(
            f"dt * spectral half-width / h = {ratio:.2f} exceeds m/2 = {config.m / 2}; reduce dt"
        )
    norm0 = np.linalg.norm(psi)
    samples = [state.copy()]
    observations = [observer(state)] if observer else []
    max_err = 0.0
    max_drift = 0.0
    krylov_dims = []
    phase = 1.0 + 0j
    for s in range(1, steps + 1):
        psi, err, k = krylov_step(op.apply, psi, tau, h, config.m, config.tol, shift,
                                  reorthogonalize=config.reorthogonalize)
        krylov_dims.append(k)
        phase *= np.exp(-1j * tau * shift / h)
        max_err = max(max_err, err)
        drift = abs(np.linalg.norm(psi) / norm0 - 1)
        if drift > 1e-9 * s + 1e-12:
            raise PropagationError(f"norm drift {drift:.3e} after {s} steps")
        max_drift = max(max_drift, drift)
        if s % config.stride == 0 or s == steps:
            data = op.from_rep(psi * phase)
            st = state.copy(data=data, t=state.t + s * tau)
            if keep_samples or s == steps:
                samples.append(st)
            if observer:
                observations.append(observer(st))
    return {
        "samples": samples,
        "observations": observations,
        "max_error": max_err,
        "norm_drift": max_drift,
        "spectral_range": (lo, hi),
        "steps": steps,
        "dt": abs(tau),
        "krylov_dims": krylov_dims,
    }


# ------------------------------------------------------------ states

def choose_dt(operator, shape, h, T, m=24, fill=0.45, samples=1):
    """Largest step with dt * half-width / h <= fill * m and T / dt a multiple of ``samples``.

    Returns (dt, steps, (lo, hi)).
    """
    lo, hi = spectral_range(operator.apply, shape)
    half = 0.5 * (hi - lo)
    steps = max(1, math.ceil(abs(T) * half / (h * fill * m)))
    steps = samples * math.ceil(steps / samples)
    return abs(T) / steps, steps, (lo, hi)


def _y_cell(model):
    if model.pathway == "matrix":
        return 1.0
    return model.ygrid.dy**2


def wrap_mass(state, fraction=0.1):
    """Probability mass within ``fraction`` of the box edge along the nuclear axes."""
    w = np.abs(state.data) ** 2
    total = np.sum(w)
    d = state.grid.d
    mask = np.zeros(state.grid.x_shape, dtype=bool)
    for i, ax in enumerate(state.grid.x):
        pts = ax.points
        edge = (pts < ax.lo + fraction * ax.length) | (pts > ax.hi - fraction * ax.length)
        shape = [1] * d
        shape[i] = ax.n
        mask |= edge.reshape(shape)
    extra = tuple(range(d, w.ndim))
    return float(np.sum(np.sum(w, axis=extra)[mask]) / total)


def initial_packet_state(model, grid, x0, xi0, h=None, fiber=None, frame="gauged", support_tol=1e-6):
    """(pi h)^{-d/4} e^{i x.xi0/h - |x-x0|^2/2h} u_1(x, .) on the tensor grid, normalized."""
    h = model.h if h is None else h
    X = grid.x_mesh()
    d = grid.d
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_1d(np.asarray(xi0, dtype=float))
    u = X - x0.reshape((d,) + (1,) * d)
    gauss = (np.pi * h) ** (-d / 4) * np.exp(1j * np.tensordot(xi0, X, axes=(0, 0)) / h - np.sum(u**2, 0) / (2 * h))
    if fiber is None:
        raise ValueError("a fiber state u_1 is required")
    fiber = np.asarray(fiber)
    # the fiber state is either x-independent or sampled on the nuclear grid
    extra = len(grid.fiber_shape)
    if fiber.shape not in (grid.fiber_shape, grid.shape):
        raise ValueError(f"fiber state shape {fiber.shape} does not fit the grid {grid.shape}")
    data = gauss.reshape(gauss.shape + (1,) * extra) * fiber
    data = np.broadcast_to(data, grid.shape).astype(complex)
    st = GridState(data, grid, frame, 0.0, h, _y_cell(model))
    edge = wrap_mass(st)
    if edge > support_tol:
        raise ValueError(f"initial packet not supported inside the grid: edge mass {edge:.3e}")
    nrm = st.norm()
    st.data /= nrm
    if frame == "ungauged":
        st = gauge_conjugate(model, st.copy(frame="gauged"), "to_ungauged")
    return st


def band_projection(operator, state, band=0, amp_tol=1e-10):
    """Project a state onto one band of a translation-invariant operator.

    In the mixed representation P acts on each nuclear wavenumber K as an
    electronic matrix H_K; the band projector keeps the ``band``-th eigenvector
    of every H_K.  Wavenumbers whose amplitude is below ``amp_tol`` times the
    largest are left untouched.  Returns (projected state, fraction moved).
    """
    op = operator
    if not getattr(op, "mixed", False):
        raise ValueError("band projection needs an operator in the mixed representation")
    psi = op.to_rep(state.data)
    fshape = psi.shape[2:]
    n = int(np.prod(fshape))
    eye = np.eye(n, dtype=complex).reshape((n,) + fshape)
    Hy = np.zeros((n, n), dtype=complex)
    for a in range(2):
        mult = op.y_mult[a][0, 0]
        Hy += sfft.ifft(sfft.fft(eye, axis=1 + a) * mult, axis=1 + a).reshape(n, n).T
    Dy = [sfft.ifft(sfft.fft(eye, axis=1 + a) * op.kb[a][0, 0], axis=1 + a).reshape(n, n).T
          for a in range(2)] if op.beta else []
    amp = np.sqrt(np.sum(np.abs(psi) ** 2, axis=(2, 3)))
    out = psi.copy()
    for i, j in zip(*np.nonzero(amp > amp_tol * amp.max())):
        H = Hy + np.diag(op.diag[i, j].ravel())
        for a, D in enumerate(Dy):
            H += op.beta * op.K[a][i, j] * D
        _, v = sla.eigh(H, subset_by_index=[band, band], driver="evr")
        u = v[:, 0]
        out[i, j] = (u * np.vdot(u, psi[i, j].ravel())).reshape(fshape)
    moved = float(np.linalg.norm(out - psi) / np.linalg.norm(psi))
    data = op.from_rep(out)
    new = state.copy(data=data)
    new.data /= new.norm()
    return new, moved


def gauge_conjugate(model, state, direction):
    """Multiply by the gauge phase (to_gauged) or its conjugate (to_ungauged)."""
    if direction == "to_gauged":
        if state.frame != "ungauged":
            raise FrameMismatch("to_gauged expects an ungauged state")
        conj, new = False, "gauged"
    elif direction == "to_ungauged":
        if state.frame != "gauged":
            raise FrameMismatch("to_ungauged expects a gauged state")
        conj, new = True, "ungauged"
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if model.pathway == "matrix" or model.b == 0:
        return state.copy(frame=new)
    X = state.grid.x_mesh()[..., None, None]
    y = model.ygrid.mesh[:, None, None]
    ph = model.gauge_phase(X, y)
    if conj:
        ph = np.conj(ph)
    return state.copy(data=state.data * ph, frame=new)


def fiber_projection(state, vectors):
    """Pi_0 phi: per-x projection onto the columns of ``vectors`` (x_shape+fiber+(k,))."""
    d = state.grid.d
    V = np.asarray(vectors)
    fiber_axes = "".join("abcd"[: state.data.ndim - d])
    xs = "".join("pqrs"[:d])
    amps = np.einsum(f"{xs}{fiber_axes}k,{xs}{fiber_axes}->{xs}k", np.conj(np.broadcast_to(V, state.grid.x_shape + V.shape[d:])), state.data)
    return np.einsum(f"{xs}{fiber_axes}k,{xs}k->{xs}{fiber_axes}", np.broadcast_to(V, state.grid.x_shape + V.shape[d:]), amps)


def observables(state, vectors=None, operator=None):
    """<x>, <xi>, norm, adiabatic population and energy of a grid state."""
    d = state.grid.d
    w = np.abs(state.data) ** 2
    extra = tuple(range(d, w.ndim))
    rho = np.sum(w, axis=extra)
    total = np.sum(rho)
    X = state.grid.x_mesh()
    mean_x = np.array([np.sum(X[i] * rho) / total for i in range(d)])
    spec = sfft.fftn(state.data, axes=tuple(range(d)))
    ws = np.sum(np.abs(spec) ** 2, axis=extra)
    K = state.grid.wavenumbers()
    mean_xi = np.array([state.h * np.sum(K[i] * ws) / np.sum(ws) for i in range(d)])
    out = {
        "x": mean_x,
        "xi": mean_xi,
        "norm": state.norm(),
    }
    if vectors is not None:
        proj = fiber_projection(state, vectors)
        out["population"] = float(np.sum(np.abs(proj) ** 2) / np.sum(w))
    if operator is not None:
        Hpsi = operator.from_rep(operator.apply(operator.to_rep(state.data)))
        out["energy"] = float(np.vdot(state.data, Hpsi).real / np.sum(w))
    return out


def compare_states(a, b):
    if a.frame != b.frame:
        raise FrameMismatch(f"cannot compare {a.frame} and {b.frame} states")
    if a.grid != b.grid:
        raise ValueError("states live on different grids")
    cell = a.grid.x_cell * a.y_cell
    diff = float(np.sqrt(np.sum(np.abs(a.data - b.data) ** 2) * cell))
    overlap = complex(np.vdot(a.data, b.data) * cell)
    na, nb = a.norm(), b.norm()
    mod = float(np.sqrt(np.sum((np.abs(a.data) - np.abs(b.data)) ** 2) * cell))
    return {"distance": diff, "overlap": overlap / (na * nb), "modulus_distance": mod}


def make_state(model, grid, data, frame="gauged", h=None):
    return GridState(np.asarray(data, dtype=complex), grid, frame, 0.0, model.h if h is None else h, _y_cell(model))
