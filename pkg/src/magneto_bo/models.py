"""Physical models: center-of-mass frames, gauge transform, electronic fibers and the symbol p.

Two pathways share one interface:

* ``PairModel``: a nucleus and one electron in the plane (d = 2) with a
  constant perpendicular field, electron coordinate y on a periodic grid.
* ``MatrixModel``: a one-dimensional nucleus with a finite matrix fiber
  V(x) (two-level surrogates for clean convergence studies).

Kinetic convention: the lab-frame kinetic energy of particle j is
(1/m_j)(D - e_j A)^2 with electron mass 1, so that after the transform the
electronic operator is L^2 + V_0 and the nuclear kinetic symbol is |xi|^2.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla
import scipy.sparse.linalg as spla
import sympy as sp

from .superadiabatic import Contour, ContourError
from .symbols import Axis, HSeries, PhaseGrid

log = logging.getLogger(__name__)

J = np.array([[0.0, -1.0], [1.0, 0.0]])


class ModelError(ValueError):
    """Invalid model configuration."""


class GapError(RuntimeError):
    """The selected electronic levels are not separated from the rest of the spectrum."""


class BasisError(RuntimeError):
    """Fiber basis cannot be aligned smoothly."""


# ---------------------------------------------------------------- potentials

U1, U2 = sp.symbols("u1 u2", real=True)
_COORDS = (U1, U2)


def _potential_expr(spec, dim):
    kind = spec.get("kind", "zero")
    r2 = sum(c**2 for c in _COORDS[:dim])
    if kind == "zero":
        return sp.Integer(0)
    if kind == "harmonic":
        return sp.Float(spec.get("k", 1.0)) * r2 / 2
    if kind == "softcore":
        return -sp.Float(spec.get("strength", 1.0)) / sp.sqrt(r2 + sp.Float(spec.get("a", 1.0)) ** 2)
    if kind == "cosine":
        amp = sp.Float(spec.get("amplitude", 1.0))
        k = sp.Float(spec.get("wavenumber", 1.0))
        axis = int(spec.get("axis", 1)) - 1
        return amp * sp.cos(k * _COORDS[axis])
    if kind == "expr":
        local = {f"u{i + 1}": _COORDS[i] for i in range(dim)}
        return sp.sympify(spec["expr"], locals=local)
    raise ModelError(f"unknown potential kind {kind!r}")


class Potential:
    """Smooth potential given by a sympy expression in u1..u_dim."""

    def __init__(self, spec, dim):
        self.spec = dict(spec or {"kind": "zero"})
        self.dim = dim
        self.expr = _potential_expr(self.spec, dim)
        coords = _COORDS[:dim]
        self.is_zero = self.expr == 0
        self._f = sp.lambdify(coords, self.expr, "numpy")
        self._grad = [sp.lambdify(coords, sp.diff(self.expr, c), "numpy") for c in coords]
        self._hess = [[sp.lambdify(coords, sp.diff(self.expr, a, b), "numpy") for b in coords] for a in coords]

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(np.asarray(self._f(*u), dtype=float), u.shape[1:])

    def grad(self, u):
        u = np.asarray(u, dtype=float)
        return np.stack([np.broadcast_to(np.asarray(g(*u), dtype=float), u.shape[1:]) for g in self._grad])

    def hessian(self, u):
        u = np.asarray(u, dtype=float)
        return np.stack([
            np.stack([np.broadcast_to(np.asarray(f(*u), dtype=float), u.shape[1:]) for f in row])
            for row in self._hess
        ])

    def check_bounded_derivatives(self, radii=(5.0, 10.0, 20.0, 40.0), growth=2.0):
        """Sample check that gradient and Hessian stay bounded at large radius."""
        if self.is_zero:
            return True
        ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        maxima = []
        for r in radii:
            if self.dim == 1:
                u = np.array([[-r, r]])
            else:
                u = np.stack([r * np.cos(ang), r * np.sin(ang)])
            g = np.abs(self.grad(u)).max()
            hs = np.abs(self.hessian(u)).max()
            if not (np.isfinite(g) and np.isfinite(hs)):
                return False
            maxima.append(max(g, hs))
        base = max(maxima[1], 1e-12)
        return maxima[-1] <= growth * base + 1e-12


# ----------------------------------------------------------- frame algebra

_H = sp.Symbol("h", positive=True)


@dataclass(frozen=True)
class Particle:
    """Particle i in center-of-mass variables.

    D_{x_i} = a D_X + b D_y,  x_i = X + s y,  kinetic weight w = 1/m_i.
    """

    charge: float
    weight: sp.Expr
    a: sp.Expr
    b: sp.Expr
    s: sp.Expr


def pair_particles(e_electron, e_nucleus):
    h2 = _H**2
    nucleus = Particle(e_nucleus, h2 / (1 - h2), 1 - h2, sp.Integer(-1), -h2)
    electron = Particle(e_electron, sp.Integer(1), h2, sp.Integer(1), 1 - h2)
    return nucleus, electron


FRAME_KEYS = ("alpha", "beta", "gamma", "MX_X", "MX_y", "My_X", "My_y", "S_XX", "S_Xy", "S_yy")


def derive_frame(particles, e_gauge, b_field, gauged):
    """Coefficients of the transformed kinetic operator as functions of h.

    With A(v) = B v, B = b J, particle i has momentum
        Pi_i = a_i D_X + b_i D_y + cX_i B X + cy_i B y,
    with cX_i = -q_i, cy_i = -q_i s_i before the gauge transform.  Conjugating
    by exp(-i e (B X).y) adds (-e B y, e B X) to (D_X, D_y), giving
    cX_i += e b_i, cy_i -= e a_i.  Since B is traceless, every vector field
    below is divergence free and
        sum_i w_i Pi_i^2 = alpha D_X^2 + beta D_X.D_y + gamma D_y^2
            + (MX_X BX + MX_y By).D_X + (My_X BX + My_y By).D_y
            + S_XX |BX|^2 + S_Xy (BX).(By) + S_yy |By|^2.
    """
    e = sp.Float(e_gauge)
    out = dict.fromkeys(FRAME_KEYS, sp.Integer(0))
    for p in particles:
        cX = -sp.Float(p.charge)
        cy = -sp.Float(p.charge) * p.s
        if gauged:
            cX = cX + e * p.b
            cy = cy - e * p.a
        w = p.weight
        out["alpha"] += w * p.a**2
        out["beta"] += 2 * w * p.a * p.b
        out["gamma"] += w * p.b**2
        out["MX_X"] += 2 * w * p.a * cX
        out["MX_y"] += 2 * w * p.a * cy
        out["My_X"] += 2 * w * p.b * cX
        out["My_y"] += 2 * w * p.b * cy
        out["S_XX"] += w * cX**2
        out["S_Xy"] += 2 * w * cX * cy
        out["S_yy"] += w * cy**2
    return {k: sp.simplify(v) for k, v in out.items()}


def series_coefficients(expr, N, shift=0):
    """Coefficients c_0..c_N of h^shift * expr expanded in h (numeric floats)."""
    ser = sp.series(expr * _H**shift, _H, 0, N + 1).removeO()
    poly = sp.Poly(sp.expand(ser), _H)
    coeffs = [0.0] * (N + 1)
    for (deg,), c in poly.terms():
        if deg < 0:
            raise ModelError(f"negative power of h in {expr}")
        if deg <= N:
            coeffs[deg] = float(c)
    return coeffs


# ----------------------------------------------------------------- models

@dataclass
class YGrid:
    lo: float
    hi: float
    n: int

    @cached_property
    def axis(self):
        return Axis(self.lo, self.hi, self.n)

    @cached_property
    def points(self):
        return self.axis.points

    @property
    def dy(self):
        return self.axis.spacing

    @cached_property
    def mesh(self):
        return np.stack(np.meshgrid(self.points, self.points, indexing="ij"))

    @cached_property
    def wavenumbers(self):
        k = self.axis.wavenumbers
        return np.stack(np.meshgrid(k, k, indexing="ij"))


@dataclass
class MatrixModel:
    """One nuclear dimension with a 2x2 fiber V(x); b = 0."""

    kind: str = "mixing"
    h: float = 0.1
    gap: float = 2.0
    well: float = 1.0
    mixing: float = 0.4
    d: int = 1
    b: float = 0.0
    n: int = 2
    metadata: dict = field(default_factory=dict)

    pathway = "matrix"

    def energies(self, x):
        x = np.asarray(x, dtype=float)
        E1 = self.well * (1 - np.cos(x))
        if self.kind == "crossing":
            E2 = E1 + self.gap * np.cos(x)
        else:
            E2 = E1 + self.gap
        return np.stack([E1, E2], axis=-1)

    def angle(self, x):
        if self.kind == "constant":
            return np.zeros_like(np.asarray(x, dtype=float))
        return self.mixing * np.sin(x)

    def eigenvectors(self, x):
        th = self.angle(x)
        c, s = np.cos(th), np.sin(th)
        U = np.empty(np.shape(x) + (2, 2))
        U[..., 0, 0], U[..., 1, 0] = c, s
        U[..., 0, 1], U[..., 1, 1] = -s, c
        return U

    def fiber_matrix(self, x):
        """V(x) = R(theta) diag(E1, E2) R(theta)^T."""
        E = self.energies(x)
        U = self.eigenvectors(x)
        return np.einsum("...ik,...k,...jk->...ij", U, E, U)

    def with_h(self, h):
        return MatrixModel(self.kind, h, self.gap, self.well, self.mixing, self.d, self.b, self.n, dict(self.metadata))


@dataclass
class PairModel:
    """Nucleus plus one electron in the plane, constant field A(v) = b J v."""

    h: float
    b: float = 1.0
    e: float = 1.0
    e_nucleus: float | None = None
    interaction: dict = field(default_factory=lambda: {"kind": "harmonic", "k": 1.0})
    external_nucleus: dict = field(default_factory=lambda: {"kind": "zero"})
    external_electron: dict = field(default_factory=lambda: {"kind": "zero"})
    y_range: tuple = (-5.0, 5.0)
    ny: int = 32
    n: int = 4
    allow_charged: bool = False
    d: int = 2
    metadata: dict = field(default_factory=dict)

    pathway = "grid"

    def __post_init__(self):
        if self.e_nucleus is None:
            self.e_nucleus = -self.e
        if self.d != 2:
            raise ModelError("the grid pathway needs a planar nucleus (d = 2)")
        if not 0 < self.h < 1:
            raise ModelError(f"h must lie in (0, 1), got {self.h}")
        if abs(self.e_nucleus + self.e) > 1e-14:
            if not self.allow_charged:
                raise ModelError(
                    f"total charge {self.e_nucleus + self.e:+g} is not zero; set allow_charged for control runs"
                )
            self.metadata["charged_control"] = True
        self.V12 = Potential(self.interaction, 2)
        self.V1 = Potential(self.external_nucleus, 2)
        self.V2 = Potential(self.external_electron, 2)
        for name, pot in (("nucleus", self.V1), ("electron", self.V2)):
            if not pot.check_bounded_derivatives():
                raise ModelError(f"external potential on the {name} fails the bounded-derivative check")
        self.ygrid = YGrid(float(self.y_range[0]), float(self.y_range[1]), int(self.ny))
        self.B = self.b * J

    @property
    def x_independent(self):
        return self.V1.is_zero and self.V2.is_zero

    def with_h(self, h):
        return PairModel(h, self.b, self.e, self.e_nucleus, self.interaction, self.external_nucleus,
                         self.external_electron, self.y_range, self.ny, self.n, self.allow_charged, self.d,
                         dict(self.metadata))

    @cached_property
    def particles(self):
        return pair_particles(self.e, self.e_nucleus)

    @cached_property
    def frame_exprs(self):
        return {
            "gauged": derive_frame(self.particles, self.e, self.b, True),
            "ungauged": derive_frame(self.particles, self.e, self.b, False),
        }

    def frame(self, which="gauged"):
        """Numeric kinetic coefficients at the model's h."""
        return {k: float(v.subs(_H, self.h)) for k, v in self.frame_exprs[which].items()}

    def frame_series(self, N, which="gauged"):
        """Coefficient series of the nuclear symbol, in xi = h D_X units.

        Returns dict key -> [c_0..c_N]; xi-terms carry the 1/h (xi) or 1/h^2
        (|xi|^2) rescaling.
        """
        ex = self.frame_exprs[which]
        shift = {"alpha": -2, "beta": -1, "MX_X": -1, "MX_y": -1}
        return {k: series_coefficients(v, N, shift.get(k, 0)) for k, v in ex.items()}

    def position_shifts(self):
        """(s_nucleus(h), s_electron(h)) with x_i = X + s_i y."""
        return tuple(float(p.s.subs(_H, self.h)) for p in self.particles)

    def shift_series(self, N):
        return [series_coefficients(p.s, N) for p in self.particles]

    # -------------------------------------------------- fiber operators

    def potential(self, X, y, h=None):
        """Full V(X, y) at the given h (exact, not expanded); X, y of shape (2, ...)."""
        h = self.h if h is None else h
        s1 = float(self.particles[0].s.subs(_H, h))
        s2 = float(self.particles[1].s.subs(_H, h))
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        out = self.V12(y) + self.V1(X + s1 * y) + self.V2(X + s2 * y)
        return out

    def potential_series(self, X, N):
        """Taylor coefficients in h of V(X, y) on the y-grid, to order N <= 3."""
        if N > 3:
            raise ModelError("potential Taylor expansion is implemented through order h^3")
        y = self.ygrid.mesh
        Xb = np.asarray(X, dtype=float).reshape(2, 1, 1)
        out = [np.zeros(y.shape[1:]) for _ in range(N + 1)]
        out[0] = out[0] + self.V12(y)
        for pot, sser in zip((self.V1, self.V2), self.shift_series(N)):
            if pot.is_zero:
                continue
            base = Xb + sser[0] * y
            out[0] = out[0] + pot(base)
            grad_dot = np.sum(pot.grad(base) * y, axis=0)
            for j in range(1, N + 1):
                if sser[j]:
                    out[j] = out[j] + sser[j] * grad_dot
        return out

    def gauge_phase(self, X, y):
        """exp(-i e A(X).f) with f = y for one electron."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        AX = np.einsum("ij,j...->i...", self.B, X)
        return np.exp(-1j * self.e * np.sum(AX * y, axis=0))

    def y_derivatives(self, psi):
        """(D_y1 psi, D_y2 psi, D_y^2 psi) along the last two axes."""
        k1, k2 = self.ygrid.wavenumbers
        spec = sfft.fft2(psi, axes=(-2, -1))
        d1 = sfft.ifft2(spec * k1, axes=(-2, -1))
        d2 = sfft.ifft2(spec * k2, axes=(-2, -1))
        dd = sfft.ifft2(spec * (k1**2 + k2**2), axes=(-2, -1))
        return d1, d2, dd

    def fiber_apply(self, coeffs, X, psi, scalar=None):
        """Apply gamma D_y^2 + (My_X BX + My_y By).D_y + S(X, y) + scalar to psi(y)."""
        y = self.ygrid.mesh
        X = np.asarray(X, dtype=float).reshape(2, 1, 1)
        BX = np.einsum("ij,j...->i...", self.B, X)
        By = np.einsum("ij,j...->i...", self.B, y)
        field_ = coeffs["My_X"] * BX + coeffs["My_y"] * By
        S = (coeffs["S_XX"] * np.sum(BX * BX, axis=0) + coeffs["S_Xy"] * np.sum(BX * By, axis=0)
             + coeffs["S_yy"] * np.sum(By * By, axis=0))
        if scalar is not None:
            S = S + scalar
        d1, d2, dd = self.y_derivatives(psi)
        return coeffs["gamma"] * dd + field_[0] * d1 + field_[1] * d2 + S * psi

    def electronic_coeffs(self):
        ser = self.frame_series(0)
        return {k: v[0] for k, v in ser.items()}

    def electronic_operator(self, X):
        """P_e(X) = L^2 + V_0(X, .) as a function on y-grid arrays."""
        coeffs = self.electronic_coeffs()
        V0 = self.potential_series(X, 0)[0]

        def apply(psi):
            return self.fiber_apply(coeffs, X, psi, scalar=V0)

        return apply


def build_model(config):
    """Construct a model from a plain config mapping."""
    config = dict(config)
    kind = config.pop("kind", "pair")
    if kind in ("mixing", "constant", "crossing"):
        b = float(config.pop("b", 0.0))
        if b > 0:
            raise ModelError("a magnetic field needs a planar nucleus; matrix models are one-dimensional")
        d = int(config.pop("d", 1))
        if d != 1:
            raise ModelError("matrix models are one-dimensional")
        return MatrixModel(kind=kind, **config)
    if kind == "pair":
        d = int(config.get("d", 2))
        if float(config.get("b", 1.0)) > 0 and d != 2:
            raise ModelError("b > 0 requires d = 2")
        if "y_range" in config:
            config["y_range"] = tuple(config["y_range"])
        return PairModel(**config)
    raise ModelError(f"unknown model kind {kind!r}")


# ------------------------------------------------------------ fiber basis

@dataclass
class FiberBasis:
    """Electronic eigendata over a nuclear grid.

    ``vectors`` has shape x_shape + fiber_shape + (n,) but may be broadcast
    (leading singleton x-dims) when the fiber does not depend on x.
    """

    energies: np.ndarray
    vectors: np.ndarray
    x_shape: tuple
    aligned: bool = False
    residual: float = 0.0
    smoothness: float = float("nan")

    @property
    def n(self):
        return self.energies.shape[-1]

    def gap(self, k=1):
        return float(np.min(self.energies[..., k] - self.energies[..., k - 1]))

    def orthonormality_error(self):
        V = self.vectors
        d = len(self.x_shape)
        flat = V.reshape(V.shape[:d] + (-1, V.shape[-1]))
        gram = np.einsum("...ai,...aj->...ij", np.conj(flat), flat)
        return float(np.max(np.abs(gram - np.eye(V.shape[-1]))))


def _dense_matrix(apply, shape):
    size = int(np.prod(shape))
    eye = np.eye(size, dtype=complex).reshape((size,) + shape)
    cols = apply(eye).reshape(size, size)
    return cols.T


def electronic_eigensolve(model, X, n=None, dense_limit=2048, check_resolution=False):
    """Lowest n eigenpairs of P_e(X) on the y-grid, vectors l2-normalized on the grid."""
    n = model.n if n is None else n
    shape = (model.ygrid.n, model.ygrid.n)
    size = shape[0] * shape[1]
    apply = model.electronic_operator(X)
    if size <= dense_limit:
        H = _dense_matrix(apply, shape)
        H = 0.5 * (H + H.conj().T)
        E, U = sla.eigh(H, subset_by_index=(0, n - 1))
    else:
        op = spla.LinearOperator((size, size), matvec=lambda v: apply(v.reshape(shape)).ravel(), dtype=complex)
        E, U = spla.eigsh(op, k=n, which="SA", tol=1e-12)
        order = np.argsort(E)
        E, U = E[order], U[:, order]
    vecs = U.reshape(shape + (n,))
    # fix the global phase of each vector by its largest entry
    flat = U
    idx = np.argmax(np.abs(flat), axis=0)
    ph = flat[idx, np.arange(n)]
    vecs = vecs * (np.abs(ph) / ph)
    resid = 0.0
    for i in range(n):
        r = apply(vecs[..., i]) - E[i] * vecs[..., i]
        resid = max(resid, float(np.linalg.norm(r)))
    if resid > 1e-8:
        raise RuntimeError(f"electronic eigensolver residual {resid:.3e} exceeds 1e-8")
    if check_resolution:
        fine = model.__class__.__new__(model.__class__)
        fine.__dict__.update(model.__dict__)
        fine.ny = 2 * model.ny
        fine.ygrid = YGrid(model.ygrid.lo, model.ygrid.hi, 2 * model.ygrid.n)
        Ef, _ = electronic_eigensolve(fine, X, n, dense_limit=dense_limit)
        shift = float(np.max(np.abs(Ef - E)))
        if shift > 1e-6:
            raise RuntimeError(f"y-grid under-resolved: doubling points moves levels by {shift:.3e}")
    return E, vecs


def fiber_basis(model, x_points=None, n=None):
    """Electronic eigendata over nuclear grid points.

    For matrix models ``x_points`` is a 1D array.  For pair models with no
    external potentials the fiber is x-independent and one solve suffices.
    """
    if model.pathway == "matrix":
        x = np.asarray(x_points, dtype=float)
        E = model.energies(x)
        U = model.eigenvectors(x)
        return FiberBasis(E, U.astype(complex), x.shape)
    if model.x_independent or x_points is None:
        E, U = electronic_eigensolve(model, np.zeros(2), n)
        xs = () if x_points is None else tuple(np.shape(x_points)[1:])
        d = len(xs)
        return FiberBasis(
            np.broadcast_to(E, xs + E.shape).copy(),
            U.reshape((1,) * d + U.shape),
            xs,
        )
    X = np.asarray(x_points, dtype=float)
    xs = X.shape[1:]
    Es, Us = [], []
    for idx in np.ndindex(*xs):
        E, U = electronic_eigensolve(model, X[(slice(None),) + idx], n)
        Es.append(E)
        Us.append(U)
    E = np.array(Es).reshape(xs + Es[0].shape)
    U = np.array(Us).reshape(xs + Us[0].shape)
    return FiberBasis(E, U, xs)


def phase_align_basis(basis, min_overlap=0.5):
    """Choose per-x phases so that neighbouring vectors overlap with real positive phase.

    Sweeps along the first x-axis, then along each further axis from the
    already aligned hyperplane (a discrete parallel transport).
    """
    d = len(basis.x_shape)
    full = np.broadcast_to(basis.vectors, basis.x_shape + basis.vectors.shape[d:])
    if d == 0:
        return FiberBasis(basis.energies, basis.vectors, basis.x_shape, True, basis.residual, 0.0)
    fiber_shape = full.shape[d:-1]
    n = full.shape[-1]
    V = np.array(full.reshape(basis.x_shape + (-1, n)), dtype=complex)
    for axis in range(d):
        W = np.moveaxis(V, axis, 0)
        for j in range(1, W.shape[0]):
            ov = np.sum(np.conj(W[j - 1]) * W[j], axis=-2)
            mag = np.abs(ov)
            if np.min(mag) < min_overlap:
                raise BasisError(
                    f"neighbour overlap {np.min(mag):.3f} below {min_overlap} at index {j} along axis {axis}"
                )
            W[j] = W[j] * (np.conj(ov) / mag)[..., None, :]
        V = np.moveaxis(W, 0, axis)
    smooth = 0.0
    for axis in range(d):
        diffs = np.diff(V, axis=axis)
        smooth = max(smooth, float(np.max(np.sqrt(np.sum(np.abs(diffs) ** 2, axis=-2)))))
    V = V.reshape(basis.x_shape + fiber_shape + (n,))
    return FiberBasis(basis.energies, V, basis.x_shape, True, basis.residual, smooth)


def gap_report(basis, rank=1, threshold=1e-3, x_points=None, nodes=32):
    """Minimum gap above the lowest ``rank`` levels and a suggested contour."""
    E = basis.energies
    gaps = E[..., rank] - E[..., rank - 1]
    worst = np.unravel_index(np.argmin(gaps), gaps.shape) if gaps.ndim else ()
    gmin = float(gaps[worst]) if gaps.ndim else float(gaps)
    where = None
    if x_points is not None and gaps.ndim:
        xp = np.asarray(x_points)
        where = xp[worst] if xp.ndim == 1 else xp[(slice(None),) + worst]
    if gmin < threshold:
        raise GapError(f"spectral gap {gmin:.3e} below threshold {threshold:g} (crossing near x = {where})")
    contour = Contour.from_spectrum(E, rank=rank, nodes=nodes)
    return {
        "min_gap": gmin,
        "location": where,
        "center": contour.center,
        "radius": contour.radius,
        "clearance": contour.clearance,
        "contour": contour,
    }


def decay_rate(model, vector, quantile=0.9):
    """Fitted exponential decay rate alpha of |u(y)| from the radial envelope."""
    y = model.ygrid.mesh
    r = np.sqrt(np.sum(y**2, axis=0)).ravel()
    amp = np.abs(vector).ravel()
    rmax = 0.5 * (model.ygrid.hi - model.ygrid.lo)
    mask = (r > 0.3 * rmax) & (r < 0.8 * rmax) & (amp > 1e-300)
    A = np.vstack([r[mask], np.ones(mask.sum())]).T
    coef, *_ = np.linalg.lstsq(A, np.log(amp[mask]), rcond=None)
    return float(-coef[0])


# ------------------------------------------------------- symbol assembly

def _grid_expectations(model, X, U, N, which="gauged"):
    """Matrix elements of the h-series fiber pieces at nuclear point X."""
    ser = model.frame_series(N, which)
    pots = model.potential_series(X, N)
    y = model.ygrid.mesh
    X = np.asarray(X, dtype=float)
    BX = model.B @ X
    By = np.einsum("ij,j...->i...", model.B, y)
    n = U.shape[-1]
    cols = np.moveaxis(U, -1, 0)  # (n, ny, ny)
    d1, d2, _ = model.y_derivatives(cols)
    Dy = (d1, d2)

    def mel(ops):
        return np.einsum("iab,jab->ij", np.conj(cols), ops)

    leak = 0.0
    blocks = []
    for j in range(N + 1):
        coeffs = {k: v[j] for k, v in ser.items()}
        fiber = model.fiber_apply(coeffs, X, cols, scalar=pots[j])
        xi_vec = []
        for k in range(2):
            op = coeffs["beta"] * Dy[k] + (coeffs["MX_X"] * BX[k] + coeffs["MX_y"] * By[k]) * cols
            xi_vec.append(op)
        F = mel(fiber)
        G = [mel(op) for op in xi_vec]
        for op in [fiber] + xi_vec:
            proj = np.einsum("iab,ij->jab", cols, mel(op))
            rest = op - proj
            nrm = np.sqrt(np.sum(np.abs(op) ** 2, axis=(-2, -1)))
            rn = np.sqrt(np.sum(np.abs(rest) ** 2, axis=(-2, -1)))
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.where(nrm > 1e-12, rn / np.maximum(nrm, 1e-300), 0.0)
            leak = max(leak, float(np.max(rel)))
        blocks.append((coeffs["alpha"], G, F))
    return blocks, leak


def assemble_p_symbol(model, grid, N=2, basis=None, frame="gauged", leak_warn=0.05):
    """The symbol p = sum h^j p_j on ``grid`` in a fixed fiber basis.

    Matrix models use the standard basis of C^2.  Pair models use the
    electronic eigenbasis at X = 0 (frozen basis); when there are no external
    potentials this is the exact eigenbasis at every X and p_0 = |xi|^2 + diag(E).
    """
    X, XI = grid.mesh()
    xi2 = np.sum(XI**2, axis=0)
    if model.pathway == "matrix":
        if grid.d != 1:
            raise ModelError("matrix models live on d = 1 grids")
        V = model.fiber_matrix(X[0])
        p0 = V + xi2[..., None, None] * np.eye(2)
        return HSeries(grid, [p0.astype(complex)] + [np.zeros_like(p0, dtype=complex) for _ in range(N)])

    if grid.d != 2:
        raise ModelError("pair models live on d = 2 grids")
    if basis is None:
        _, U = electronic_eigensolve(model, np.zeros(2))
    else:
        U = np.asarray(basis)
    n = U.shape[-1]
    xs = grid.x_shape
    xpts = grid.x_mesh()
    if model.x_independent:
        # constant along x: keep singleton x-axes
        XI = np.stack(np.meshgrid(*[ax.points for ax in grid.xi], indexing="ij"))[:, None, None]
        xi2 = np.sum(XI**2, axis=0)
        cshape = (1, 1) + grid.shape[2:]
    else:
        cshape = grid.shape
    coeffs = [np.zeros(cshape + (n, n), dtype=complex) for _ in range(N + 1)]
    leak = 0.0
    x_list = [()] if model.x_independent else list(np.ndindex(*xs))
    for idx in x_list:
        Xp = np.zeros(2) if idx == () else xpts[(slice(None),) + idx]
        blocks, lk = _grid_expectations(model, Xp, U, N, frame)
        leak = max(leak, lk)
        for j, (alpha, G, F) in enumerate(blocks):
            sym = (alpha * xi2[..., None, None] * np.eye(n) + XI[0][..., None, None] * G[0]
                   + XI[1][..., None, None] * G[1] + F)
            if idx == ():
                coeffs[j][...] = sym
            else:
                coeffs[j][idx] = sym[idx]
    herm = max(float(np.max(np.abs(c - np.conj(np.swapaxes(c, -1, -2))))) for c in coeffs)
    if herm > 1e-10:
        raise RuntimeError(f"assembled symbol is not hermitian (defect {herm:.3e})")
    coeffs = [0.5 * (c + np.conj(np.swapaxes(c, -1, -2))) for c in coeffs]
    if leak > leak_warn:
        warnings.warn(f"fiber basis of size {n} misses {leak:.3f} of an assembled operator's action", stacklevel=2)
    out = HSeries(grid, coeffs)
    out.leakage = leak
    return out
