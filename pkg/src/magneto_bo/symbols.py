"""Matrix-valued phase-space symbols, truncated h-series and the Weyl-Moyal product.

Symbols are sampled on a tensor grid in (x, xi).  The x-axes are periodic
Fourier axes; xi-axes may be Fourier or Chebyshev (Gauss-Lobatto) axes.  The
latter differentiate polynomials in xi exactly, which is what the resolvent
construction produces once the spectral parameter is shifted by xi^2.

Product convention: ``moyal_product(a1, a2)`` returns the symbol of
Op(a2) Op(a1).  ``compose(A, B)`` is the operator-order helper, the symbol of
Op(A) Op(B).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft
from numpy.polynomial import chebyshev as cheb

DEFAULT_ORDER = 2


class StructureError(ValueError):
    """Raised when symbols living on different grids or fibers are combined."""


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    n: int
    kind: str = "fourier"

    def __post_init__(self):
        if self.kind not in ("fourier", "chebyshev"):
            raise ValueError(f"unknown axis kind {self.kind!r}")
        if not self.hi > self.lo:
            raise ValueError(f"axis range must be increasing, got [{self.lo}, {self.hi}]")
        if self.n < 8 or not _is_pow2(self.n):
            raise ValueError(f"axis point count must be a power of two >= 8, got {self.n}")

    @property
    def length(self):
        return self.hi - self.lo

    @cached_property
    def points(self):
        if self.kind == "fourier":
            return self.lo + self.length * np.arange(self.n) / self.n
        j = np.arange(self.n)
        mid = 0.5 * (self.lo + self.hi)
        return mid - 0.5 * self.length * np.cos(np.pi * j / (self.n - 1))

    @property
    def spacing(self):
        if self.kind == "fourier":
            return self.length / self.n
        return float(np.min(np.diff(self.points)))

    @cached_property
    def wavenumbers(self):
        if self.kind != "fourier":
            raise ValueError("wavenumbers are defined on Fourier axes only")
        return 2 * np.pi * np.fft.fftfreq(self.n, d=self.spacing)

    @cached_property
    def diff_matrix(self):
        """First-derivative collocation matrix on the Chebyshev nodes."""
        t = self.points
        w = (-1.0) ** np.arange(self.n)
        w[0] *= 0.5
        w[-1] *= 0.5
        diff = t[:, None] - t[None, :]
        np.fill_diagonal(diff, 1.0)
        D = (w[None, :] / w[:, None]) / diff
        np.fill_diagonal(D, 0.0)
        D[np.diag_indices(self.n)] = -D.sum(axis=1)
        return D

    def derivative(self, data, axis, order):
        """Spectral derivative of ``data`` along array axis ``axis``.

        A singleton axis marks data that is constant along this axis.
        """
        if order == 0:
            return data
        if data.shape[axis] == 1:
            return np.zeros(data.shape, dtype=np.result_type(data, float))
        if self.kind == "fourier":
            k = self.wavenumbers.copy()
            if order % 2 == 1:
                k[self.n // 2] = 0.0
            shape = [1] * data.ndim
            shape[axis] = self.n
            mult = ((1j * k) ** order).reshape(shape)
            out = sfft.ifft(sfft.fft(data, axis=axis) * mult, axis=axis)
            if np.isrealobj(data):
                out = out.real
            return out
        D = np.linalg.matrix_power(self.diff_matrix, order)
        moved = np.moveaxis(data, axis, -1)
        return np.moveaxis(moved @ D.T, -1, axis)

    def interpolation_matrix(self, targets):
        """Matrix mapping nodal values to values at ``targets`` (Chebyshev axes)."""
        if self.kind != "chebyshev":
            raise ValueError("interpolation_matrix is implemented for Chebyshev axes")
        mid = 0.5 * (self.lo + self.hi)
        t_nodes = (self.points - mid) / (0.5 * self.length)
        t = (np.asarray(targets, dtype=float) - mid) / (0.5 * self.length)
        V = cheb.chebvander(t_nodes, self.n - 1)
        to_coef = np.linalg.inv(V)
        return cheb.chebvander(t, self.n - 1) @ to_coef


@dataclass(frozen=True)
class PhaseGrid:
    """Tensor grid in (x, xi); array layout is (x_1..x_d, xi_1..xi_d).

    Quantization needs Fourier x-axes; Chebyshev x-axes are allowed for pure
    symbol calculus on non-periodic symbols.
    """

    x: tuple
    xi: tuple

    def __post_init__(self):
        if len(self.x) != len(self.xi) or len(self.x) not in (1, 2):
            raise ValueError("PhaseGrid needs matching x/xi axes with d in {1, 2}")

    @classmethod
    def uniform(cls, d, x_range, nx, xi_range, nxi, xi_kind="chebyshev", x_kind="fourier"):
        xs = tuple(Axis(x_range[0], x_range[1], nx, x_kind) for _ in range(d))
        xis = tuple(Axis(xi_range[0], xi_range[1], nxi, xi_kind) for _ in range(d))
        return cls(xs, xis)

    @property
    def d(self):
        return len(self.x)

    @property
    def axes(self):
        return self.x + self.xi

    @property
    def shape(self):
        return tuple(ax.n for ax in self.axes)

    @property
    def x_shape(self):
        return tuple(ax.n for ax in self.x)

    def mesh(self):
        """Return arrays (X, XI) of shape (d,) + grid.shape."""
        grids = np.meshgrid(*[ax.points for ax in self.axes], indexing="ij")
        return np.stack(grids[: self.d]), np.stack(grids[self.d:])

    def x_mesh(self):
        return np.stack(np.meshgrid(*[ax.points for ax in self.x], indexing="ij"))

    def sample(self, func, n=1, m=None):
        """Sample ``func(x, xi) -> (..., n, m)`` or scalar onto the grid."""
        X, XI = self.mesh()
        vals = np.asarray(func(X, XI), dtype=complex)
        m = n if m is None else m
        if vals.shape == self.shape:
            if n != 1 or m != 1:
                raise StructureError("scalar sample for non-scalar fiber")
            vals = vals[..., None, None]
        if vals.shape != self.shape + (n, m):
            vals = np.broadcast_to(vals, self.shape + (n, m)).copy()
        return vals

    def derivative(self, data, var, i, order):
        axis = i if var == "x" else self.d + i
        return self.axes[axis].derivative(data, axis, order)

    def describe_mismatch(self, other):
        if getattr(other, "d", None) != self.d:
            return "nuclear dimension"
        for name, mine, theirs in (("x", self.x, other.x), ("xi", self.xi, other.xi)):
            for i, (a, b) in enumerate(zip(mine, theirs)):
                if a != b:
                    return f"{name}_{i + 1}"
        return "grid"


@dataclass(frozen=True, eq=False)
class MatrixSymbol:
    grid: PhaseGrid
    data: np.ndarray
    hermitian: bool = False

    def __post_init__(self):
        if np.broadcast_shapes(self.data.shape[:-2], self.grid.shape) != self.grid.shape:
            raise StructureError("symbol data does not match grid shape")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("symbol has non-finite entries")
        if self.hermitian:
            defect = np.max(np.abs(self.data - np.conj(np.swapaxes(self.data, -1, -2))), initial=0.0)
            if defect > 1e-12:
                raise ValueError(f"symbol flagged hermitian has defect {defect:.3e}")

    @property
    def fiber_shape(self):
        return self.data.shape[-2:]


class HSeries:
    """Truncated series sum_j h^j a_j with matrix coefficients on a shared grid.

    Coefficients beyond ``order`` are treated as zero by the product routines.
    Coefficient arrays may keep singleton grid axes for data that is constant
    along them (e.g. symbols independent of x); they are broadcast on demand.
    """

    def __init__(self, grid, coeffs):
        coeffs = [np.asarray(c) for c in coeffs]
        if not coeffs:
            raise ValueError("HSeries needs at least one coefficient")
        nd = len(grid.shape)
        fiber = coeffs[0].shape[-2:]
        for c in coeffs:
            if c.ndim != nd + 2:
                raise StructureError(f"coefficient rank {c.ndim} does not match grid rank {nd} plus fiber")
            if c.shape[-2:] != fiber:
                raise StructureError("coefficients differ in fiber dimension")
            for ax, (m, g) in enumerate(zip(c.shape[:-2], grid.shape)):
                if m not in (1, g):
                    raise StructureError(f"coefficient does not match grid along axis {ax}")
        common = np.broadcast_shapes(*[c.shape for c in coeffs])
        self.grid = grid
        self.coeffs = tuple(np.broadcast_to(c.astype(complex, copy=False), common) for c in coeffs)

    def full(self, j):
        """Coefficient j broadcast to the full grid shape."""
        return np.broadcast_to(self[j], self.grid.shape + self.fiber_shape)

    @property
    def order(self):
        return len(self.coeffs) - 1

    @property
    def fiber_shape(self):
        return self.coeffs[0].shape[-2:]

    def __getitem__(self, j):
        if j > self.order:
            return np.zeros_like(self.coeffs[0])
        return self.coeffs[j]

    def symbol(self, j):
        return MatrixSymbol(self.grid, self[j])

    def evaluate(self, h):
        out = np.zeros_like(self.coeffs[0])
        for j in range(self.order, -1, -1):
            out = out * h + self.coeffs[j]
        return out

    def truncate(self, N):
        return HSeries(self.grid, [self[j] for j in range(N + 1)])

    @classmethod
    def constant(cls, grid, data, N=0):
        data = np.asarray(data, dtype=complex)
        zeros = [np.zeros_like(data) for _ in range(N)]
        return cls(grid, [data] + zeros)

    @classmethod
    def identity(cls, grid, n, N=0):
        eye = np.eye(n, dtype=complex).reshape((1,) * len(grid.shape) + (n, n))
        return cls.constant(grid, eye, N)

    @classmethod
    def zeros(cls, grid, n, N=0, m=None):
        m = n if m is None else m
        shape = (1,) * len(grid.shape) + (n, m)
        return cls(grid, [np.zeros(shape, dtype=complex) for _ in range(N + 1)])

    def __add__(self, other):
        return hseries_algebra(self, other, "add")

    def __sub__(self, other):
        return hseries_algebra(self, other, "sub")

    def __neg__(self):
        return hseries_algebra(self, None, "scale", -1.0)

    def __repr__(self):
        return f"HSeries(order={self.order}, fiber={self.fiber_shape}, grid={self.grid.shape})"


def check_compatible(a, b, need_inner=False):
    if a.grid is not b.grid and a.grid != b.grid:
        mismatch = a.grid.describe_mismatch(b.grid) if hasattr(a.grid, "describe_mismatch") else "grid"
        raise StructureError(f"grid mismatch on axis {mismatch}")
    if need_inner:
        if a.fiber_shape[1] != b.fiber_shape[0]:
            raise StructureError(f"fiber dimensions {a.fiber_shape} and {b.fiber_shape} do not compose")
    elif a.fiber_shape != b.fiber_shape:
        raise StructureError(f"fiber dimension mismatch {a.fiber_shape} vs {b.fiber_shape}")


def hseries_algebra(a, b, op, c=1.0):
    if op == "scale":
        return HSeries(a.grid, [c * x for x in a.coeffs])
    check_compatible(a, b)
    N = min(a.order, b.order)
    if op == "add":
        return HSeries(a.grid, [a[j] + b[j] for j in range(N + 1)])
    if op == "sub":
        return HSeries(a.grid, [a[j] - b[j] for j in range(N + 1)])
    raise ValueError(f"unknown operation {op!r}")


def differentiate(a, axis, order, N=DEFAULT_ORDER):
    """Derivative of a MatrixSymbol along ``axis`` ('x1', 'xi2', ...)."""
    if order > 2 * N + 2:
        raise ValueError(f"derivative order {order} exceeds the 2N+2 = {2 * N + 2} guard")
    var, idx = _parse_axis(axis)
    data = a.grid.derivative(a.data, var, idx, order)
    return MatrixSymbol(a.grid, np.asarray(data, dtype=complex))


def _parse_axis(axis):
    if axis.startswith("xi"):
        return "xi", int(axis[2:] or 1) - 1
    if axis.startswith("x"):
        return "x", int(axis[1:] or 1) - 1
    raise ValueError(f"unknown axis {axis!r}")


class _Jet:
    """Lazily computed mixed derivatives of one sampled array."""

    def __init__(self, grid, data):
        self.grid = grid
        self.cache = {(0,) * (2 * grid.d): data}

    def get(self, idx):
        idx = tuple(idx)
        if idx in self.cache:
            return self.cache[idx]
        pos = max(i for i, v in enumerate(idx) if v > 0)
        lower = list(idx)
        lower[pos] -= 1
        base = self.get(lower)
        d = self.grid.d
        var, i = ("x", pos) if pos < d else ("xi", pos - d)
        out = self.grid.derivative(base, var, i, 1)
        self.cache[idx] = out
        return out


def _multi_indices(d, total):
    for combo in itertools.product(range(total + 1), repeat=d):
        if sum(combo) == total:
            yield combo


def moyal_terms(d, s):
    """Yield (alpha, beta, coefficient) for the |alpha|+|beta| = s terms."""
    for sa in range(s + 1):
        for alpha in _multi_indices(d, sa):
            for beta in _multi_indices(d, s - sa):
                fact = math.prod(math.factorial(k) for k in alpha + beta)
                coef = (-1) ** sa / ((2j) ** s * fact)
                yield alpha, beta, coef


def moyal_product(a1, a2, N=None):
    """a1 # a2 through order h^N: the symbol of Op(a2) Op(a1)."""
    check_compatible(a2, a1, need_inner=True)
    if N is None:
        N = min(a1.order, a2.order)
    grid = a1.grid
    d = grid.d
    jets1 = [_Jet(grid, a1[j]) for j in range(min(a1.order, N) + 1)]
    jets2 = [_Jet(grid, a2[k]) for k in range(min(a2.order, N) + 1)]
    compact = np.broadcast_shapes(a1.coeffs[0].shape[:-2], a2.coeffs[0].shape[:-2])
    shape = compact + (a2.fiber_shape[0], a1.fiber_shape[1])
    out = [np.zeros(shape, dtype=complex) for _ in range(N + 1)]
    for s in range(N + 1):
        terms = list(moyal_terms(d, s))
        for j, jet1 in enumerate(jets1):
            for k, jet2 in enumerate(jets2):
                n = j + k + s
                if n > N:
                    continue
                for alpha, beta, coef in terms:
                    left = jet2.get(alpha + beta)
                    right = jet1.get(beta + alpha)
                    out[n] += coef * (left @ right)
    return HSeries(grid, out)


def compose(A, B, N=None):
    """Symbol of Op(A) Op(B)."""
    return moyal_product(B, A, N)


def adjoint_symbol(a):
    return HSeries(a.grid, [np.conj(np.swapaxes(c, -1, -2)) for c in a.coeffs])


def series_norm(a, j):
    if j > a.order:
        raise ValueError(f"coefficient {j} requested from series of order {a.order}")
    c = a.coeffs[j]
    if not np.any(c):
        return 0.0
    if c.shape[-1] == 1 or c.shape[-2] == 1:
        return float(np.max(np.sqrt(np.sum(np.abs(c) ** 2, axis=(-2, -1)))))
    return float(np.max(np.linalg.norm(c, ord=2, axis=(-2, -1))))


def hermitian_defect(a):
    return max(
        float(np.max(np.abs(c - np.conj(np.swapaxes(c, -1, -2))), initial=0.0)) for c in a.coeffs
    )


def weyl_apply(a, h, psi, h0=1.0, chunk=256):
    """Apply Op_h^w(sum h^j a_j) to ``psi`` of shape x_shape + (m,).

    In Fourier space the Weyl operator with symbol a(x, xi) maps mode k' to
    mode k with weight a^(k - k', h (k + k') / 2), the midpoint rule.  The
    xi-dependence is read from the sampled symbol by Chebyshev interpolation,
    exact for polynomial symbols of degree below the xi point count.
    """
    if not (0 < h <= h0):
        raise ValueError(f"h = {h} outside (0, {h0}]")
    grid = a.grid
    d = grid.d
    for ax in grid.x:
        if ax.kind != "fourier":
            raise ValueError("weyl_apply needs periodic Fourier x-axes")
    for ax in grid.xi:
        if ax.kind != "chebyshev":
            raise ValueError("weyl_apply reads xi-dependence from Chebyshev axes")
    xs = grid.x_shape
    if psi.shape[:d] != xs:
        raise StructureError("state grid does not match the symbol's x-axes")
    sym = np.broadcast_to(a.evaluate(h), grid.shape + a.fiber_shape)
    n, m = sym.shape[-2:]
    if psi.shape[d:] != (m,):
        raise StructureError(f"state fiber {psi.shape[d:]} does not match symbol input dimension {m}")

    x_axes = tuple(range(d))
    a_hat = sfft.fftn(sym, axes=x_axes) / math.prod(xs)
    psi_hat = sfft.fftn(psi, axes=x_axes)

    ks = [ax.wavenumbers for ax in grid.x]
    kgrid = np.stack(np.meshgrid(*ks, indexing="ij")).reshape(d, -1)
    idx = np.stack(np.meshgrid(*[np.arange(s) for s in xs], indexing="ij")).reshape(d, -1)
    Q = kgrid.shape[1]
    a_flat = a_hat.reshape((Q,) + grid.shape[d:] + (n, m))
    psi_flat = psi_hat.reshape(Q, m)
    out = np.zeros((Q, n), dtype=complex)

    for start in range(0, Q, chunk):
        rows = slice(start, min(start + chunk, Q))
        diff = (idx[:, rows, None] - idx[:, None, :]) % np.array(xs)[:, None, None]
        flat_diff = np.ravel_multi_index(tuple(diff), xs)
        mid = 0.5 * h * (kgrid[:, rows, None] + kgrid[:, None, :])
        vals = a_flat[flat_diff]  # (r, Q, nxi..., n, m)
        for i, ax in enumerate(grid.xi):
            W = ax.interpolation_matrix(mid[i].ravel()).reshape(mid[i].shape + (ax.n,))
            # contract the leading remaining xi-axis with interpolation weights
            vals = np.einsum("rqj,rqj...->rq...", W, vals)
        out[rows] = np.einsum("rqnm,qm->rn", vals, psi_flat)

    res = sfft.ifftn(out.reshape(xs + (n,)), axes=x_axes)
    return res
