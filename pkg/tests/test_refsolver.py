import numpy as np
import pytest

from magneto_bo.models import MatrixModel, PairModel, electronic_eigensolve
from magneto_bo.refsolver import (
    FrameMismatch,
    GridHamiltonian,
    PropagationError,
    PropagatorConfig,
    TensorGrid,
    apply_hamiltonian,
    band_projection,
    choose_dt,
    compare_states,
    gauge_conjugate,
    initial_packet_state,
    krylov_step,
    make_state,
    observables,
    propagate,
    spectral_range,
    wrap_mass,
)


def _free():
    # well = 0 and no mixing: the lower channel is a free particle with symbol xi^2
    return MatrixModel("constant", 0.1, gap=2.0, well=0.0)


def _matrix_grid(nx=256, L=8.0):
    return TensorGrid.build(1, [-L, L], nx, (2,))


def test_tensor_grid_budget_and_periodicity():
    with pytest.raises(ValueError):
        TensorGrid.build(2, [-1, 1], 64, (32, 32), budget=2**20)
    g = TensorGrid.build(2, [-1, 1], 16, (4, 4))
    assert g.shape == (16, 16, 4, 4) and g.size == 16 * 16 * 4 * 4


def test_plane_wave_is_an_eigenfunction():
    m = _free()
    g = _matrix_grid(64, np.pi)
    x = g.x[0].points
    data = np.zeros((64, 2), complex)
    data[:, 0] = np.exp(5j * x)
    data[:, 1] = np.exp(-2j * x)
    st = make_state(m, g, data)
    out = apply_hamiltonian(m, st).data
    assert np.allclose(out[:, 0], (0.1 * 5) ** 2 * data[:, 0], atol=1e-12)
    assert np.allclose(out[:, 1], ((0.1 * 2) ** 2 + 2.0) * data[:, 1], atol=1e-12)


def _dense(op, shape):
    n = int(np.prod(shape))
    cols = [op.apply(e.reshape(shape)).ravel() for e in np.eye(n, dtype=complex)]
    return np.array(cols).T


def test_matrix_operator_is_hermitian():
    m = MatrixModel("mixing", 0.2)
    g = _matrix_grid(32, np.pi)
    H = _dense(GridHamiltonian(m, g), g.shape)
    assert np.max(np.abs(H - H.conj().T)) < 1e-12


@pytest.mark.parametrize("frame", ["gauged", "ungauged"])
def test_pair_operator_is_hermitian(frame):
    m = PairModel(h=0.3, ny=8, y_range=(-3.0, 3.0))
    g = TensorGrid.build(2, [-3, 3], 8, (8, 8))
    op = GridHamiltonian(m, g, frame)
    H = _dense(op, g.shape)
    # in the mixed representation the X axes are Fourier modes, still an orthogonal basis
    assert np.max(np.abs(H - H.conj().T)) < 1e-10


def test_gauge_conjugation_round_trip():
    m = PairModel(h=0.3, ny=16, y_range=(-4.0, 4.0))
    g = TensorGrid.build(2, [-4, 4], 16, (16, 16))
    _, U = electronic_eigensolve(m, np.zeros(2), 1)
    st = initial_packet_state(m, g, [0.0, 0.0], [0.3, 0.0], fiber=U[..., 0])
    back = gauge_conjugate(m, gauge_conjugate(m, st, "to_ungauged"), "to_gauged")
    assert compare_states(st, back)["distance"] < 1e-14
    with pytest.raises(FrameMismatch):
        gauge_conjugate(m, st, "to_gauged")
    with pytest.raises(FrameMismatch):
        compare_states(st, gauge_conjugate(m, st, "to_ungauged"))


def test_krylov_matches_dense_exponential():
    from scipy.linalg import expm

    rng = np.random.default_rng(1)
    A = rng.normal(size=(40, 40)) + 1j * rng.normal(size=(40, 40))
    H = 0.5 * (A + A.conj().T)
    psi = rng.normal(size=40) + 0j
    out, err, k = krylov_step(lambda v: H @ v, psi, 0.05, 0.1, m=30, tol=1e-12)
    ref = expm(-1j * 0.05 * H / 0.1) @ psi
    assert np.linalg.norm(out - ref) < 1e-10
    re, _, _ = krylov_step(lambda v: H @ v, psi, 0.05, 0.1, m=30, tol=1e-12, reorthogonalize=True)
    assert np.linalg.norm(re - ref) < 1e-10
    with pytest.raises(PropagationError):
        krylov_step(lambda v: H @ v, psi, 5.0, 0.1, m=4, tol=1e-12)


def test_free_gaussian_spreads_at_the_exact_rate():
    m = _free()
    g = _matrix_grid()
    h = m.h
    st = initial_packet_state(m, g, [0.0], [0.0], fiber=np.array([1.0, 0.0]))
    op = GridHamiltonian(m, g)
    dt, steps, spec = choose_dt(op, st.data.shape, h, 1.0, samples=4)
    out = propagate(m, st, PropagatorConfig(dt=dt, T=1.0, stride=steps // 4), operator=op, spectrum=spec)
    x = g.x[0].points
    for s in out["samples"]:
        rho = np.abs(s.data[:, 0]) ** 2
        rho /= rho.sum()
        assert np.sum(rho * x**2) == pytest.approx(h * (1 + 4 * s.t**2) / 2, rel=1e-8)
    assert out["norm_drift"] < 1e-10
    assert wrap_mass(out["samples"][-1]) < 1e-6


def test_moving_packet_follows_group_velocity():
    m = _free()
    g = _matrix_grid()
    st = initial_packet_state(m, g, [-1.0], [0.5], fiber=np.array([1.0, 0.0]))
    op = GridHamiltonian(m, g)
    dt, steps, spec = choose_dt(op, st.data.shape, m.h, 1.0)
    out = propagate(m, st, PropagatorConfig(dt=dt, T=1.0, stride=steps), operator=op, spectrum=spec)
    obs = observables(out["samples"][-1], operator=op)
    assert obs["x"][0] == pytest.approx(0.0, abs=1e-9)
    assert obs["xi"][0] == pytest.approx(0.5, abs=1e-9)
    assert obs["energy"] == pytest.approx(0.25 + m.h / 2, abs=1e-9)


def test_step_size_guard():
    m = _free()
    g = _matrix_grid()
    st = initial_packet_state(m, g, [0.0], [0.0], fiber=np.array([1.0, 0.0]))
    with pytest.raises(PropagationError):
        propagate(m, st, PropagatorConfig(dt=0.5, T=1.0, m=8), keep_samples=False)
    with pytest.raises(ValueError):
        propagate(m, st, PropagatorConfig(dt=0.3, T=1.0))


def test_spectral_range_brackets_the_spectrum():
    m = MatrixModel("mixing", 0.2)
    g = _matrix_grid(32, np.pi)
    op = GridHamiltonian(m, g)
    E = np.linalg.eigvalsh(_dense(op, g.shape))
    lo, hi = spectral_range(op.apply, g.shape)
    assert lo <= E[0] and hi >= E[-1]


def test_initial_packet_must_fit_the_box():
    m = _free()
    g = _matrix_grid(64, 2.0)
    with pytest.raises(ValueError):
        initial_packet_state(m, g, [1.9], [0.0], fiber=np.array([1.0, 0.0]))


def test_band_projection_lands_in_the_lowest_band():
    m = PairModel(h=0.3, ny=8, y_range=(-3.0, 3.0))
    g = TensorGrid.build(2, [-4, 4], 16, (8, 8))
    op = GridHamiltonian(m, g)
    assert op.mixed
    _, U = electronic_eigensolve(m, np.zeros(2), 1)
    st = initial_packet_state(m, g, [0.0, 0.0], [0.5, 0.0], fiber=U[..., 0])
    new, moved = band_projection(op, st)
    assert 0 < moved < 0.5
    assert new.norm() == pytest.approx(1.0)
    # idempotent
    again, moved2 = band_projection(op, new)
    assert moved2 < 1e-12
    # each occupied wavenumber is an eigenvector of its electronic block
    psi = op.to_rep(new.data)
    Hpsi = op.apply(psi)
    amp = np.sum(np.abs(psi) ** 2, axis=(2, 3))
    i, j = np.unravel_index(np.argmax(amp), amp.shape)
    lam = np.vdot(psi[i, j], Hpsi[i, j]) / np.vdot(psi[i, j], psi[i, j])
    assert np.linalg.norm(Hpsi[i, j] - lam * psi[i, j]) < 1e-9 * np.linalg.norm(psi[i, j])
    with pytest.raises(ValueError):
        band_projection(GridHamiltonian(_free(), _matrix_grid(32, 4.0)), st)
