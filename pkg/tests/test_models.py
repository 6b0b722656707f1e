import numpy as np
import pytest
import sympy as sp

from magneto_bo.models import (
    GapError,
    MatrixModel,
    ModelError,
    PairModel,
    build_model,
    electronic_eigensolve,
    fiber_basis,
    gap_report,
    pair_particles,
)


def test_matrix_model_diagonalizes_its_fiber():
    m = MatrixModel("mixing", 0.1)
    x = np.linspace(-3, 3, 17)
    V = m.fiber_matrix(x)
    E, _ = np.linalg.eigh(V)
    assert np.allclose(E, m.energies(x), atol=1e-12)
    U = m.eigenvectors(x)
    assert np.allclose(np.einsum("...ij,...jk->...ik", V, U[..., :, :1])[..., 0],
                       m.energies(x)[..., :1] * U[..., :, 0], atol=1e-12)


def test_crossing_model_gap_closes():
    m = MatrixModel("crossing", 0.1)
    x = np.linspace(-np.pi, np.pi, 65)
    basis = fiber_basis(m, x)
    with pytest.raises(GapError):
        gap_report(basis, x_points=x)


def test_build_model_validation():
    with pytest.raises(ModelError):
        build_model({"kind": "mixing", "b": 1.0})
    with pytest.raises(ModelError):
        build_model({"kind": "pair", "h": 0.1, "e_nucleus": 1.0})
    m = build_model({"kind": "pair", "h": 0.1, "e_nucleus": 1.0, "allow_charged": True})
    assert m.metadata["charged_control"]
    with pytest.raises(ModelError):
        build_model({"kind": "helium"})


def test_particles_sit_at_the_centre_of_mass():
    nucleus, electron = pair_particles(-1.0, 1.0)
    # kinetic weights are inverse masses; the mass-weighted shifts cancel
    com = nucleus.s / nucleus.weight + electron.s / electron.weight
    assert sp.simplify(com) == 0
    assert sp.simplify(electron.s - nucleus.s - 1) == 0


def test_fock_darwin_levels():
    # (D - A)^2 + k|y|^2/2 with A = bJy: w = sqrt(b^2 + k/2), E = 2w(N + 1) - 2bL, |L| <= N
    m = PairModel(h=0.1, ny=32, y_range=(-6.0, 6.0), n=4)
    E, U = electronic_eigensolve(m, np.zeros(2), 4)
    w = np.sqrt(1.5)
    assert np.allclose(E, [2 * w, 4 * w - 2, 6 * w - 4, 8 * w - 6], atol=1e-9)
    flat = U.reshape(-1, 4)
    assert np.allclose(flat.conj().T @ flat, np.eye(4), atol=1e-10)


def test_zero_field_levels_are_oscillator_levels():
    m = PairModel(h=0.1, b=0.0, ny=32, y_range=(-6.0, 6.0), n=3)
    E, _ = electronic_eigensolve(m, np.zeros(2), 3)
    w = np.sqrt(0.5)
    assert np.allclose(E, [2 * w, 4 * w, 4 * w], atol=1e-9)


def test_gauge_phase_is_unimodular_and_linear_in_X():
    m = PairModel(h=0.1)
    X = np.array([0.3, -1.2])
    y = np.array([0.7, 0.4])
    ph = m.gauge_phase(X, y)
    assert abs(abs(ph) - 1) < 1e-15
    assert np.isclose(m.gauge_phase(2 * X, y), ph**2)


def test_with_h_keeps_everything_else():
    m = PairModel(h=0.1, ny=16, y_range=(-4.5, 4.5))
    m2 = m.with_h(0.05)
    assert m2.h == 0.05 and m2.ny == 16 and m2.ygrid.lo == -4.5
    assert MatrixModel("constant", 0.1).with_h(0.2).kind == "constant"
