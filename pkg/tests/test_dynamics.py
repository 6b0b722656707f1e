import numpy as np
import pytest

from magneto_bo.dynamics import (
    AnalyticHamiltonian,
    FrameError,
    SampledHamiltonian,
    assemble_packet,
    check_frame,
    integrate_flow,
    integrate_linearized,
)
from magneto_bo.symbols import PhaseGrid


def test_harmonic_flow_is_a_rotation():
    g = AnalyticHamiltonian("xi**2 + x**2")
    b = integrate_flow(g, [1.0], [0.0], np.pi / 2, dt=np.pi / 2000)
    t = b.t
    assert np.max(np.abs(b.x[:, 0] - np.cos(2 * t))) < 1e-9
    assert np.max(np.abs(b.xi[:, 0] + np.sin(2 * t))) < 1e-9
    assert np.ptp(b.energy) < 1e-10


def test_time_must_be_a_multiple_of_dt():
    g = AnalyticHamiltonian("xi**2")
    with pytest.raises(ValueError):
        integrate_flow(g, [0.0], [1.0], 1.0, dt=0.3)


def test_free_frame_spreads_linearly():
    g = AnalyticHamiltonian("xi**2")
    b = integrate_linearized(g, None, [0.0], [1.0], 2.0, 1e-2)
    # Y' = 2 Z, Z' = 0 with Y(0) = 1, Z(0) = i
    assert np.allclose(b.Y[:, 0, 0], 1 + 2j * b.t, atol=1e-12)
    assert np.allclose(b.Z[:, 0, 0], 1j, atol=1e-12)


def test_frame_check_raises_on_broken_frame():
    Y = np.eye(1)[None] * 1.0
    Z = np.eye(1)[None] * 2j
    with pytest.raises(FrameError):
        check_frame(Y, Z)


def test_two_dimensional_magnetic_like_symbol():
    g = AnalyticHamiltonian("(xi1 + x2)**2 + (xi2 - x1)**2", d=2)
    b = integrate_linearized(g, None, [0.3, -0.2], [0.1, 0.4], 3.0, 1e-3)
    assert np.ptp(b.energy) < 1e-9
    herm = np.conj(np.swapaxes(b.Y, -1, -2)) @ b.Z - np.conj(np.swapaxes(b.Z, -1, -2)) @ b.Y
    assert np.max(np.abs(herm - 2j * np.eye(2))) < 1e-8


def test_sampled_hamiltonian_matches_analytic():
    grid = PhaseGrid.uniform(1, [-np.pi, np.pi], 32, [-3.0, 3.0], 16)
    X, XI = grid.mesh()
    sampled = SampledHamiltonian(grid, XI[0] ** 2 + np.cos(X[0]))
    exact = AnalyticHamiltonian("xi**2 + cos(x)")
    pt = ([0.37], [0.81])
    assert sampled.value(*pt) == pytest.approx(exact.value(*pt), abs=1e-10)
    for a, b in zip(sampled.grad(*pt), exact.grad(*pt)):
        assert np.allclose(a, b, atol=1e-9)
    assert np.allclose(sampled.hessian(*pt), exact.hessian(*pt), atol=1e-8)
    assert not sampled.contains([0.0], [5.0])


def test_initial_packet_is_normalized_gaussian():
    g = AnalyticHamiltonian("xi**2")
    b = integrate_linearized(g, None, [0.0], [0.5], 1.0, 1e-2)
    h = 0.1
    x = np.linspace(-6, 6, 1024, endpoint=False)
    psi = assemble_packet(b, 0, h, [x])
    dx = x[1] - x[0]
    assert np.sum(np.abs(psi) ** 2) * dx == pytest.approx(1.0, abs=1e-10)
    expected = (np.pi * h) ** -0.25 * np.exp(0.5j * x / h - x**2 / (2 * h))
    assert np.max(np.abs(np.ravel(psi) - expected)) < 1e-10


def test_free_packet_width_follows_frame():
    # |psi_t|^2 of a free Gaussian has variance h (1 + 4 t^2) / 2 for g = xi^2
    g = AnalyticHamiltonian("xi**2")
    b = integrate_linearized(g, None, [0.0], [0.0], 1.0, 1e-2)
    h = 0.1
    x = np.linspace(-8, 8, 2048, endpoint=False)
    i = b.index_at(1.0)
    rho = np.abs(np.ravel(assemble_packet(b, i, h, [x]))) ** 2
    rho /= rho.sum()
    assert np.sum(rho * x**2) == pytest.approx(h * 5 / 2, rel=1e-8)
    frozen = np.abs(np.ravel(assemble_packet(b, i, h, [x], squeezed=False))) ** 2
    frozen /= frozen.sum()
    assert np.sum(frozen * x**2) == pytest.approx(h / 2, rel=1e-8)
