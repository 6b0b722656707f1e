"""Test symbols shared by the algebra tests.

Polynomial symbols on Chebyshev axes and trigonometric-polynomial symbols on
Fourier x-axes are differentiated exactly by the grid, so truncated-series
identities hold to rounding error.
"""

import numpy as np

from magneto_bo.symbols import Axis, HSeries, PhaseGrid


def chebyshev_grid(d=1, n=16):
    return PhaseGrid(tuple(Axis(-1.0, 1.0, n, "chebyshev") for _ in range(d)),
                     tuple(Axis(-2.0, 2.0, n, "chebyshev") for _ in range(d)))


def fourier_grid(d=1, nx=16, nxi=16):
    return PhaseGrid.uniform(d, [-np.pi, np.pi], nx, [-2.0, 2.0], nxi)


def _series(grid, funcs, n=2):
    coeffs = [grid.sample(f, n) for f in funcs]
    return HSeries(grid, coeffs)


def polynomial_set(grid):
    """Three 2x2 series with polynomial coefficients (any d)."""
    d = grid.d

    def m(a, b, c, e):
        return lambda X, XI: np.stack([np.stack([a(X, XI), b(X, XI)], -1), np.stack([c(X, XI), e(X, XI)], -1)], -2)

    x = lambda X, XI: X[0]  # noqa: E731
    p = lambda X, XI: XI[0]  # noqa: E731
    y = (lambda X, XI: X[d - 1]) if d > 1 else x
    q = (lambda X, XI: XI[d - 1]) if d > 1 else p
    one = lambda X, XI: np.ones_like(X[0])  # noqa: E731
    a = _series(grid, [
        m(lambda X, XI: x(X, XI) ** 2 + p(X, XI), lambda X, XI: x(X, XI) * q(X, XI),
          lambda X, XI: 1j * y(X, XI), lambda X, XI: p(X, XI) ** 3),
        m(lambda X, XI: x(X, XI) * p(X, XI), one, lambda X, XI: q(X, XI) ** 2, lambda X, XI: y(X, XI)),
        m(one, lambda X, XI: p(X, XI), lambda X, XI: x(X, XI), lambda X, XI: 2 * one(X, XI)),
    ])
    b = _series(grid, [
        m(lambda X, XI: p(X, XI) ** 2, lambda X, XI: x(X, XI) ** 3, lambda X, XI: q(X, XI), one),
        m(lambda X, XI: y(X, XI) * p(X, XI), lambda X, XI: -x(X, XI), one, lambda X, XI: p(X, XI) * q(X, XI)),
        m(lambda X, XI: x(X, XI), one, one, lambda X, XI: -p(X, XI)),
    ])
    c = _series(grid, [
        m(lambda X, XI: x(X, XI) * p(X, XI) ** 2, lambda X, XI: 2j * one(X, XI), lambda X, XI: -2j * one(X, XI),
          lambda X, XI: y(X, XI) ** 2),
        m(one, lambda X, XI: q(X, XI), lambda X, XI: x(X, XI), one),
        m(lambda X, XI: p(X, XI), one, one, lambda X, XI: x(X, XI) * p(X, XI)),
    ])
    return a, b, c


def trigonometric_set(grid):
    """Three 2x2 series, trigonometric in x and polynomial in xi (Fourier x-axes)."""
    def m(f):
        return lambda X, XI: f(X, XI)

    def mat(X, XI, s):
        c, sn = np.cos(X[0] + s), np.sin(2 * X[0] - s)
        p = XI[0]
        q = XI[-1]
        top = np.stack([c + p**2, sn * q + 1j * c], -1)
        bot = np.stack([sn * q - 1j * c, p * c - 1], -1)
        return np.stack([top, bot], -2)

    out = []
    for s in (0.1, 0.7, 1.3):
        out.append(_series(grid, [m(lambda X, XI, s=s: mat(X, XI, s)),
                                  m(lambda X, XI, s=s: mat(X, XI, 2 * s) * 0.5),
                                  m(lambda X, XI, s=s: mat(X, XI, -s) * 0.25)]))
    return tuple(out)


def standard_sets():
    """(label, (a, b, c)) pairs making up the standard test-symbol set."""
    sets = []
    for d in (1, 2):
        g = chebyshev_grid(d, 16 if d == 1 else 8)
        sets.append((f"polynomial-d{d}", polynomial_set(g)))
    for d in (1, 2):
        g = fourier_grid(d, 32, 16 if d == 1 else 8)
        sets.append((f"trigonometric-d{d}", trigonometric_set(g)))
    return sets
