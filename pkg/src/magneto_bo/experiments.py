"""Experiment pipelines behind the command line: build, project, propagate, compare.

Each pipeline takes a resolved config (see ``config.resolve``) and returns an
ExperimentReport holding tables, binary fields, figure recipes, metrics and
the evaluated assertions.  Nothing here writes files; ``export`` does.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import fieldio, plotting
from .config import ASSERTIONS, ConfigError, model_config
from .dynamics import FrameError, SampledHamiltonian, assemble_packet, integrate_linearized
from .models import (
    BasisError,
    FiberBasis,
    GapError,
    ModelError,
    assemble_p_symbol,
    build_model,
    electronic_eigensolve,
    fiber_basis,
    gap_report,
    phase_align_basis,
)
from .refsolver import (
    GridHamiltonian,
    PropagationError,
    PropagatorConfig,
    TensorGrid,
    band_projection,
    choose_dt,
    compare_states,
    gauge_conjugate,
    initial_packet_state,
    make_state,
    observables,
    propagate,
    wrap_mass,
)
from .superadiabatic import (
    ContourError,
    PreconditionError,
    commutator_defect,
    defect_report,
    effective_hamiltonian,
    fit_loglog,
    idempotency_defect,
    nagy_intertwiner,
    projection_series,
    riesz_purify,
)
from .symbols import HSeries, PhaseGrid, StructureError, compose, series_norm

# failures of a numerical precondition (gap, contour, resolution, frame)
PRECONDITION_ERRORS = (
    GapError,
    ContourError,
    PreconditionError,
    PropagationError,
    BasisError,
    FrameError,
    StructureError,
    ModelError,
)

METRICS_BY_KIND = {
    "project": {"defect", "projector_error", "doubling_change"},
    "effective": {"defect", "projector_error", "doubling_change", "g0_error", "hermitian_defect", "xi_linear"},
    "propagate-coherent": {"energy_drift", "frame_defect"},
    "propagate-grid": {"norm_drift", "wrap_mass"},
    "compare": {"norm_drift", "wrap_mass", "gauge_distance", "packet_slope", "packet_monotone",
                "squeezed_beats_frozen", "packet_error", "leakage_slope"},
    "scan-h": {"idempotency_slope", "commutator_slope", "fit_residual", "leakage_slope"},
    "straight-line": {"norm_drift", "wrap_mass", "line_deviation", "control_deviation"},
}


def metric_name(assertion):
    for prefix in ("max_", "min_"):
        if assertion.startswith(prefix):
            return assertion[len(prefix):]
    return assertion


def check_assertions_supported(cfg):
    """Raise ConfigError for assertions the chosen experiment kind cannot evaluate."""
    have = METRICS_BY_KIND[cfg["kind"]]
    bad = [a for a in cfg["assertions"] if metric_name(a) not in have]
    if bad:
        raise ConfigError(f"assertion(s) {', '.join(sorted(bad))} not available for kind {cfg['kind']}")


@dataclass
class ExperimentReport:
    name: str
    kind: str
    tables: dict = field(default_factory=dict)  # name -> (rows, columns)
    fields: dict = field(default_factory=dict)  # name -> (array, meta)
    figures: dict = field(default_factory=dict)  # file name -> (function, args, kwargs)
    metrics: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks)

    def add_table(self, name, rows, columns=None):
        rows = list(rows)
        if columns is None:
            columns = list(rows[0].keys()) if rows else []
        self.tables[name] = (rows, list(columns))

    def evaluate(self, assertions):
        self.checks = []
        for name, threshold in sorted(assertions.items()):
            op, desc = ASSERTIONS[name]
            value = self.metrics.get(metric_name(name))
            if value is None:
                passed = False
            elif op == "le":
                passed = bool(value <= threshold)
            elif op == "ge":
                passed = bool(value >= threshold)
            else:
                passed = bool(value) == bool(threshold)
            self.checks.append({
                "name": name, "value": value, "threshold": threshold,
                "passed": passed, "description": desc,
            })
        return self.passed


# ------------------------------------------------------------ building blocks

def make_model(cfg, h=None):
    return build_model(model_config(cfg, h))


def phase_grid(cfg, model):
    g = cfg["grid"]
    return PhaseGrid.uniform(model.d, g["x_range"], g["nx"], g["xi_range"], g["nxi"], x_kind=g["x_kind"])


def tensor_grid(cfg, model):
    g = cfg["grid"]
    fiber = (2,) if model.pathway == "matrix" else (model.ygrid.n, model.ygrid.n)
    return TensorGrid.build(model.d, g["tensor_x_range"], g["tensor_nx"], fiber)


def _kinetic(grid, n):
    _, XI = grid.mesh()
    return np.sum(XI**2, axis=0)[..., None, None] * np.eye(n)


def fiber_energies(p, grid):
    """Levels of p_0 - |xi|^2 read at the first xi node: x_shape + (n,)."""
    d = grid.d
    c = p[0]
    sl = (slice(None),) * d + (0,) * d
    xi2 = sum(ax.points[0] ** 2 for ax in grid.xi)
    n = c.shape[-1]
    return np.linalg.eigvalsh(c[sl] - xi2 * np.eye(n))


def eigenprojector(p, grid, rank):
    """Projector onto the lowest ``rank`` eigenvectors of p_0 - |xi|^2 by eigh."""
    n = p.fiber_shape[0]
    c = p[0]
    shape = c.shape[:-2]
    _, XI = grid.mesh()
    xi2 = np.sum(XI**2, axis=0)
    xi2 = xi2[tuple(slice(None) if m > 1 else slice(0, 1) for m in shape)]
    _, U = np.linalg.eigh(c - xi2[..., None, None] * np.eye(n))
    low = U[..., :rank]
    return low @ np.conj(np.swapaxes(low, -1, -2))


def projection_pipeline(cfg, model, grid):
    """Assemble p, check the gap, build the projection series."""
    pl = cfg["pipeline"]
    N = int(pl["N"])
    p = assemble_p_symbol(model, grid, N, frame=pl["frame"])
    E = fiber_energies(p, grid)
    x_points = grid.x[0].points if (model.pathway == "matrix") else None
    gap = gap_report(FiberBasis(E, None, E.shape[:-1]), pl["rank"], pl["gap_threshold"],
                     x_points=x_points, nodes=pl["contour_nodes"])
    series = projection_series(p, gap["contour"], N)
    pi = riesz_purify(series.pi, N) if pl["riesz"] else series.pi
    return p, pi, series, gap


def fiber_columns(model, grid_x_shape, x_points, rank):
    """Lowest ``rank`` electronic states as x_shape + fiber + (rank,) (broadcast if constant)."""
    if model.pathway == "matrix":
        return model.eigenvectors(x_points)[..., :rank].astype(complex)
    if model.x_independent:
        _, U = electronic_eigensolve(model, np.zeros(2), max(rank, 1))
        return U[..., :rank].reshape((1,) * len(grid_x_shape) + U.shape[:-1] + (rank,))
    basis = phase_align_basis(fiber_basis(model, x_points, max(rank, 2)))
    return basis.vectors[..., :rank]


def symbol_basis(model, grid, rank):
    """Columns spanning the reference subspace in the coordinates of the assembled p."""
    d = grid.d
    if model.pathway == "matrix":
        return model.eigenvectors(grid.x[0].points)[..., :rank].astype(complex)
    n = model.n
    return np.eye(n, dtype=complex)[:, :rank].reshape((1,) * d + (n, rank))


def defect_rows(p, pi, N):
    idem = idempotency_defect(pi, N)
    comm = commutator_defect(p, pi, N)
    return [{"order": j, "pi_norm": series_norm(pi, j), "idempotency": series_norm(idem, j),
             "commutator": series_norm(comm, j)} for j in range(N + 1)]


# ------------------------------------------------------------ experiments

def run_project(cfg):
    rep = ExperimentReport(cfg["name"], cfg["kind"])
    model = make_model(cfg)
    grid = phase_grid(cfg, model)
    N = int(cfg["pipeline"]["N"])
    p, pi, series, gap = projection_pipeline(cfg, model, grid)
    rows = defect_rows(p, pi, N)
    rep.add_table("defects", rows)
    oracle = eigenprojector(p, grid, cfg["pipeline"]["rank"])
    rep.metrics["projector_error"] = float(np.max(np.abs(pi[0] - oracle)))
    rep.metrics["defect"] = max(max(r["idempotency"], r["commutator"]) for r in rows)
    rep.metrics["doubling_change"] = series.doubling_change
    rep.add_table("contour", [{
        "min_gap": gap["min_gap"], "radius": gap["radius"], "clearance": gap["clearance"],
        "nodes": series.contour.nodes, "doubling_change": series.doubling_change,
    }])
    if grid.d == 1 and N >= 1:
        _, XI = grid.mesh()
        rep.figures["pi1_map.png"] = (plotting.symbol_map, (grid.x[0].points, grid.xi[0].points,
                                      np.abs(pi.full(1)[..., 0, 0])), {"title": "|pi_1| (0,0) entry"})
    if cfg["pipeline"]["fields"]:
        for j in range(N + 1):
            rep.fields[f"pi_{j}"] = (pi.full(j), _symbol_meta(cfg, grid, model.h))
    return rep, {"p": p, "pi": pi, "grid": grid, "model": model}


def _symbol_meta(cfg, grid, h):
    return {
        "x_ranges": [[ax.lo, ax.hi, ax.n, ax.kind] for ax in grid.x],
        "xi_ranges": [[ax.lo, ax.hi, ax.n, ax.kind] for ax in grid.xi],
        "frame": cfg["pipeline"]["frame"],
        "h": h,
        "t": 0.0,
    }


def effective_pipeline(cfg, model, grid, p, pi):
    N = int(cfg["pipeline"]["N"])
    rank = cfg["pipeline"]["rank"]
    u = nagy_intertwiner(pi, N=N)
    basis = symbol_basis(model, grid, rank)
    eff = effective_hamiltonian(u, p, basis, N)
    return u, eff


def run_effective(cfg):
    rep, ctx = run_project(cfg)
    rep.kind = cfg["kind"]
    model, grid, p, pi = ctx["model"], ctx["grid"], ctx["p"], ctx["pi"]
    N = int(cfg["pipeline"]["N"])
    k = cfg["pipeline"]["rank"]
    d = grid.d
    u, eff = effective_pipeline(cfg, model, grid, p, pi)
    g = eff.g
    mu = eff.mu.reshape(eff.mu.shape[:d] + (1,) * d + eff.mu.shape[-2:])
    g0 = g.full(0)
    expected = _kinetic(grid, k) + mu
    rep.metrics["g0_error"] = float(np.max(np.abs(g0 - expected)))
    rep.metrics["hermitian_defect"] = float(eff.hermitian_defect)
    flipped = np.flip(g0, axis=tuple(range(d, 2 * d)))
    rep.metrics["xi_linear"] = float(np.max(np.abs(0.5 * (g0 - flipped))))
    # W W^* = 1 and W Pi W^* = Pi_0 through order N
    uh = HSeries(grid, [np.conj(np.swapaxes(c, -1, -2)) for c in u.coeffs])
    unit = compose(u, uh, N)
    inter = compose(u, compose(pi, uh, N), N)
    rows = []
    n = p.fiber_shape[0]
    for j in range(N + 1):
        eye = np.eye(n) if j == 0 else 0
        rows.append({
            "order": j,
            "g_norm": series_norm(g, j),
            "g_hermitian": float(np.max(np.abs(g[j] - np.conj(np.swapaxes(g[j], -1, -2))))),
            "unitarity": float(np.max(np.abs(unit[j] - eye))),
            "intertwining": float(np.max(np.abs(inter[j] - (pi[0] if j == 0 else 0)))),
        })
    rep.add_table("effective", rows)
    if cfg["pipeline"]["fields"]:
        rep.fields["g"] = (g.evaluate(model.h) + np.zeros(grid.shape + (k, k)), _symbol_meta(cfg, grid, model.h))
    if d == 1:
        vals = np.broadcast_to(g.evaluate(model.h), grid.shape + (k, k))[..., 0, 0].real
        rep.figures["g_map.png"] = (plotting.symbol_map, (grid.x[0].points, grid.xi[0].points, vals),
                                    {"title": "effective symbol g(h)"})
    ctx.update(u=u, eff=eff)
    return rep, ctx


def coherent_trajectory(cfg, eff, grid, h, T, with_corrections=True):
    """Classical flow and variational frame of the lowest branch of g."""
    pl = cfg["pipeline"]
    g = eff.g if with_corrections else HSeries(grid, [eff.g[0]])
    ham = SampledHamiltonian.from_series(g, h)
    margin = 0.0
    return integrate_linearized(ham, None, pl["x0"], pl["xi0"], T, pl["dt"],
                                box=lambda x, xi: ham.contains(x, xi, margin)), ham


def run_propagate_coherent(cfg):
    rep, ctx = run_effective(cfg)
    rep.kind = cfg["kind"]
    model, grid, eff = ctx["model"], ctx["grid"], ctx["eff"]
    bundle, ham = coherent_trajectory(cfg, eff, grid, model.h, cfg["pipeline"]["T"])
    cols = bundle.table()
    rows = [{k: v[i] for k, v in cols.items()} for i in range(len(bundle.t))]
    rep.add_table("trajectory", rows, list(cols))
    Y, Z = bundle.Y, bundle.Z
    herm = np.conj(np.swapaxes(Y, -1, -2)) @ Z - np.conj(np.swapaxes(Z, -1, -2)) @ Y - 2j * np.eye(grid.d)
    rep.metrics["frame_defect"] = float(np.max(np.abs(herm)))
    rep.metrics["energy_drift"] = float(np.max(np.abs(bundle.energy - bundle.energy[0])))
    if bundle.exit_report:
        rep.notes.append(bundle.exit_report)
    rep.figures["phase_portrait.png"] = (plotting.phase_portrait, (bundle.x, bundle.xi), {"title": "classical flow"})
    ctx["bundle"] = bundle
    return rep, ctx


# ------------------------------------------------------------ grid runs

def _krylov(cfg, op, shape, h, T):
    pl = cfg["pipeline"]
    samples = pl["samples"]
    if pl["krylov_dt"]:
        dt = float(pl["krylov_dt"])
        steps = int(round(abs(T) / dt))
        stride = max(1, steps // samples)
        return PropagatorConfig(dt=dt, T=T, m=pl["krylov_m"], stride=stride, tol=pl["krylov_tol"]), None
    dt, steps, spec = choose_dt(op, shape, h, T, m=pl["krylov_m"], samples=samples)
    return PropagatorConfig(dt=dt, T=T, m=pl["krylov_m"], stride=steps // samples, tol=pl["krylov_tol"]), spec


def grid_run(cfg, model, T, frame="gauged", keep_samples=False, observe=True):
    """Propagate the adiabatic packet on the tensor grid; observables at every sample."""
    pl = cfg["pipeline"]
    grid = tensor_grid(cfg, model)
    X = grid.x_mesh()
    vectors = fiber_columns(model, grid.x_shape, X[0] if model.pathway == "matrix" else X, pl["rank"])
    fiber = vectors[..., 0]
    if fiber.shape != grid.shape and fiber.shape[len(grid.x_shape):] == grid.fiber_shape:
        if all(m == 1 for m in fiber.shape[: len(grid.x_shape)]):
            fiber = fiber.reshape(grid.fiber_shape)
    state = initial_packet_state(model, grid, pl["x0"], pl["xi0"], model.h, fiber=fiber, frame=frame)
    op = GridHamiltonian(model, grid, frame)
    dressing = None
    if pl["dress"] and getattr(op, "mixed", False):
        state, dressing = band_projection(op, state)
    pconf, spec = _krylov(cfg, op, op.to_rep(state.data).shape, model.h, T)

    def observer(st):
        if not observe:
            return None
        o = observables(st, vectors if frame == "gauged" else None, op)
        o["t"] = st.t
        o["wrap"] = wrap_mass(st)
        return o

    out = propagate(model, state, pconf, operator=op, observer=observer, spectrum=spec, keep_samples=keep_samples)
    out.update(grid=grid, vectors=vectors, fiber=fiber, operator=op, initial=state, dressing=dressing)
    return out


def observable_rows(observations, d):
    rows = []
    for o in observations:
        r = {"t": o["t"]}
        for i in range(d):
            r[f"x{i + 1}"] = o["x"][i]
        for i in range(d):
            r[f"xi{i + 1}"] = o["xi"][i]
        r["norm"] = o["norm"]
        r["population"] = o.get("population", float("nan"))
        r["energy"] = o.get("energy", float("nan"))
        r["wrap_mass"] = o["wrap"]
        rows.append(r)
    return rows


def _state_meta(state, model):
    meta = {
        "x_ranges": [[ax.lo, ax.hi, ax.n] for ax in state.grid.x],
        "frame": state.frame,
        "h": state.h,
        "t": state.t,
    }
    if model.pathway == "grid":
        meta["y_range"] = [model.ygrid.lo, model.ygrid.hi, model.ygrid.n]
    return meta


def run_propagate_grid(cfg):
    rep = ExperimentReport(cfg["name"], cfg["kind"])
    model = make_model(cfg)
    pl = cfg["pipeline"]
    out = grid_run(cfg, model, pl["T"], pl["frame"])
    d = model.d
    rows = observable_rows(out["observations"], d)
    rep.add_table("observables", rows)
    rep.metrics["norm_drift"] = out["norm_drift"]
    rep.metrics["wrap_mass"] = max(r["wrap_mass"] for r in rows)
    rep.add_table("propagator", [{
        "steps": out["steps"], "dt": out["dt"], "spectrum_lo": out["spectral_range"][0],
        "spectrum_hi": out["spectral_range"][1], "max_error": out["max_error"],
        "mean_krylov_dim": float(np.mean(out["krylov_dims"])) if out["krylov_dims"] else 0.0,
    }])
    t = [r["t"] for r in rows]
    rep.figures["population.png"] = (plotting.time_series, (t, {"1 - p0": [max(1 - r["population"], 1e-300) for r in rows]}),
                                     {"ylabel": "leakage", "logy": True})
    last = out["samples"][-1]
    rho = np.sum(np.abs(last.data) ** 2, axis=tuple(range(d, last.data.ndim)))
    rep.figures["density.png"] = (plotting.density, ([ax.points for ax in last.grid.x], rho),
                                  {"title": f"nuclear density at t = {last.t:g}"})
    if pl["fields"]:
        rep.fields["state_final"] = (last.data, _state_meta(last, model))
    return rep, {"model": model, "run": out}


def _packet_predictor(cfg, h):
    """Leading-order packet data: effective symbol g_0 on the phase grid and its flow."""
    sub = dict(cfg)
    model = make_model(cfg, h)
    grid = phase_grid(cfg, model)
    p, pi, _, _ = projection_pipeline(sub, model, grid)
    _, eff = effective_pipeline(sub, model, grid, p, pi)
    bundle, _ = coherent_trajectory(cfg, eff, grid, h, cfg["pipeline"]["T"], with_corrections=False)
    if bundle.exit_report:
        raise PreconditionError(bundle.exit_report)
    return bundle


def packet_errors(cfg, h, T):
    """Grid evolution vs squeezed and frozen-width packets at T; leakage at T."""
    model = make_model(cfg, h)
    if model.pathway != "matrix":
        raise ModelError("packet comparison is implemented for the one-dimensional matrix models")
    out = grid_run(cfg, model, T)
    final = out["samples"][-1]
    bundle = _packet_predictor(cfg, h)
    idx = bundle.index_at(T)
    x_axes = [ax.points for ax in final.grid.x]
    errs = {}
    for label, squeezed in (("squeezed", True), ("frozen", False)):
        psi = assemble_packet(bundle, idx, h, x_axes, fiber=out["fiber"], squeezed=squeezed)
        errs[label] = compare_states(final, make_state(model, final.grid, psi, h=h))["distance"]
    obs = out["observations"][-1]
    return {
        "h": h,
        "packet_error": errs["squeezed"],
        "frozen_error": errs["frozen"],
        "leakage": 1 - obs["population"],
        "norm_drift": out["norm_drift"],
        "wrap_mass": max(o["wrap"] for o in out["observations"]),
        "steps": out["steps"],
    }


def _h_list(cfg):
    hl = cfg["pipeline"]["h_list"]
    return [float(h) for h in hl] if hl else [float(cfg["model"]["h"])]


def run_compare(cfg):
    if cfg["pipeline"]["compare"] == "gauge":
        return run_gauge_compare(cfg)
    rep = ExperimentReport(cfg["name"], cfg["kind"])
    T = cfg["pipeline"]["T"]
    rows = [packet_errors(cfg, h, T) for h in _h_list(cfg)]
    rep.add_table("packet_errors", rows)
    hs = [r["h"] for r in rows]
    rep.metrics["packet_error"] = max(r["packet_error"] for r in rows)
    rep.metrics["squeezed_beats_frozen"] = all(r["packet_error"] < r["frozen_error"] for r in rows)
    rep.metrics["norm_drift"] = max(r["norm_drift"] for r in rows)
    rep.metrics["wrap_mass"] = max(r["wrap_mass"] for r in rows)
    if len(rows) >= 3:
        fit = fit_loglog(hs, [r["packet_error"] for r in rows])
        leak = fit_loglog(hs, [r["leakage"] for r in rows])
        rep.metrics["packet_slope"] = fit["slope"]
        rep.metrics["packet_monotone"] = fit["marker"] == "ok"
        rep.metrics["leakage_slope"] = leak["slope"]
        rep.add_table("fits", [{"quantity": "packet_error", **fit}, {"quantity": "leakage", **leak}])
        rep.figures["packet_errors.png"] = (plotting.loglog_scan, (hs, {
            "squeezed": [r["packet_error"] for r in rows], "frozen": [r["frozen_error"] for r in rows],
        }), {"fits": {"squeezed": fit}, "title": f"packet error at T = {T:g}"})
    return rep, {}


def run_gauge_compare(cfg):
    """Propagate-then-gauge against gauge-then-propagate with the ungauged operator."""
    rep = ExperimentReport(cfg["name"], cfg["kind"])
    pl = cfg["pipeline"]
    model = make_model(cfg)
    if model.pathway != "grid":
        raise ModelError("the gauge comparison needs a pair model")
    T = pl["T"]
    grid = tensor_grid(cfg, model)
    _, U = electronic_eigensolve(model, np.zeros(2), 1)
    if not model.x_independent:
        raise ModelError("the gauge comparison uses the x-independent fiber state")
    start = initial_packet_state(model, grid, pl["x0"], pl["xi0"], model.h, fiber=U[..., 0])
    op_g = GridHamiltonian(model, grid, "gauged")
    op_u = GridHamiltonian(model, grid, "ungauged")
    # one step size for both routes, set by the wider ungauged spectrum
    pconf, spec_u = _krylov(cfg, op_u, grid.shape, model.h, T)
    route_a = propagate(model, start, pconf, operator=op_g, keep_samples=False)
    a = gauge_conjugate(model, route_a["samples"][-1], "to_ungauged")
    route_b = propagate(model, gauge_conjugate(model, start, "to_ungauged"), pconf, operator=op_u,
                        spectrum=spec_u, keep_samples=False)
    b = route_b["samples"][-1]
    cmp = compare_states(a, b)
    rep.metrics["gauge_distance"] = cmp["distance"]
    rep.metrics["norm_drift"] = max(route_a["norm_drift"], route_b["norm_drift"])
    rep.metrics["wrap_mass"] = max(wrap_mass(a), wrap_mass(b))
    rep.add_table("gauge", [{
        "T": T, "distance": cmp["distance"], "modulus_distance": cmp["modulus_distance"],
        "overlap_re": cmp["overlap"].real, "overlap_im": cmp["overlap"].imag,
        "steps": route_a["steps"], "dt": route_a["dt"],
        "gauged_lo": route_a["spectral_range"][0], "gauged_hi": route_a["spectral_range"][1],
        "ungauged_lo": route_b["spectral_range"][0], "ungauged_hi": route_b["spectral_range"][1],
        "max_error": max(route_a["max_error"], route_b["max_error"]),
    }])
    if pl["fields"]:
        rep.fields["gauged_route"] = (a.data, _state_meta(a, model))
        rep.fields["ungauged_route"] = (b.data, _state_meta(b, model))
    return rep, {}


def run_scan_h(cfg):
    rep = ExperimentReport(cfg["name"], "scan-h")
    pl = cfg["pipeline"]
    hs = _h_list(cfg)
    rows = []
    for h in hs:
        model = make_model(cfg, h)
        grid = phase_grid(cfg, model)
        p, pi, _, _ = projection_pipeline(cfg, model, grid)
        rows.append(defect_report(pi, p, [h])["rows"][0])
    leak_rows = []
    if pl["leakage"] and make_model(cfg).pathway == "matrix":
        for h in hs:
            model = make_model(cfg, h)
            out = grid_run(cfg, model, pl["T"])
            leak_rows.append(1 - out["observations"][-1]["population"])
        for r, lk in zip(rows, leak_rows):
            r["leakage"] = lk
    fits = {key: fit_loglog(hs, [r[key] for r in rows], floor=1e-9) for key in ("idempotency", "commutator")}
    if leak_rows:
        fits["leakage"] = fit_loglog(hs, leak_rows)
    rep.add_table("scan", rows)
    rep.add_table("fits", [{"quantity": k, **v} for k, v in fits.items()], ["quantity", "slope", "residual", "marker"])
    rep.metrics["idempotency_slope"] = fits["idempotency"]["slope"]
    rep.metrics["commutator_slope"] = fits["commutator"]["slope"]
    resid = [f["residual"] for f in fits.values() if f["residual"] is not None]
    rep.metrics["fit_residual"] = max(resid) if resid else None
    if leak_rows:
        rep.metrics["leakage_slope"] = fits["leakage"]["slope"]
    for key, f in fits.items():
        if f["marker"] != "ok":
            rep.notes.append(f"{key}: {f['marker']}")
    series = {k: [r[k] for r in rows] for k in fits if all(r.get(k, 0) > 0 for r in rows)}
    if series:
        rep.figures["scan.png"] = (plotting.loglog_scan, (hs, series), {"fits": fits, "title": "defects against h"})
    return rep, {}


def line_deviation(points):
    """Largest distance from the total-least-squares line, over the polygonal path length."""
    P = np.asarray(points, dtype=float)
    c = P.mean(axis=0)
    _, _, vt = np.linalg.svd(P - c)
    dev = float(np.max(np.abs((P - c) @ vt[-1])))
    path = float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)))
    return dev / path if path > 0 else math.inf, dev, path


def run_straight_line(cfg):
    rep = ExperimentReport(cfg["name"], cfg["kind"])
    pl = cfg["pipeline"]
    model = make_model(cfg)
    if model.pathway != "grid":
        raise ModelError("the straight-line experiment needs a pair model")
    runs = {"neutral": model}
    if pl["control"]:
        ctrl = dict(model_config(cfg))
        ctrl.update(e_nucleus=abs(float(ctrl["e"])), allow_charged=True)
        runs["control"] = build_model(ctrl)
    paths, rows, drift, wrap = {}, [], 0.0, 0.0
    for label, m in runs.items():
        out = grid_run(cfg, m, pl["T"])
        P = np.array([o["x"] for o in out["observations"]])
        ratio, dev, path = line_deviation(P)
        paths[label] = P
        rows.append({"run": label, "deviation": dev, "path_length": path, "ratio": ratio,
                     "dressing": out["dressing"], "steps": out["steps"], "dt": out["dt"]})
        drift = max(drift, out["norm_drift"])
        if label == "neutral":
            wrap = max(o["wrap"] for o in out["observations"])
            rep.add_table("neutral_observables", observable_rows(out["observations"], m.d))
        else:
            rep.add_table("control_observables", observable_rows(out["observations"], m.d))
    rep.add_table("lines", rows)
    rep.metrics["line_deviation"] = rows[0]["ratio"]
    if len(rows) > 1:
        rep.metrics["control_deviation"] = rows[1]["ratio"]
    rep.metrics["norm_drift"] = drift
    rep.metrics["wrap_mass"] = wrap
    rep.figures["center_paths.png"] = (plotting.center_paths, (paths,), {"title": "<x>(t)"})
    return rep, {}


RUNNERS = {
    "project": run_project,
    "effective": run_effective,
    "propagate-coherent": run_propagate_coherent,
    "propagate-grid": run_propagate_grid,
    "compare": run_compare,
    "scan-h": run_scan_h,
    "straight-line": run_straight_line,
}


def run(cfg):
    """Execute the pipeline for ``cfg['kind']`` and evaluate its assertions."""
    check_assertions_supported(cfg)
    rep, _ = RUNNERS[cfg["kind"]](cfg)
    rep.evaluate(cfg["assertions"])
    return rep


# ------------------------------------------------------------ export

def export(report, directory, figures=True):
    """Write tables (CSV), fields (binary), figures (PNG) and the index; returns index entries."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name in sorted(report.tables):
        rows, columns = report.tables[name]
        rel = os.path.join("tables", f"{name}.csv")
        os.makedirs(os.path.join(directory, "tables"), exist_ok=True)
        fieldio.write_csv(os.path.join(directory, rel), rows, columns)
        entries.append({"path": rel, "kind": "table", "description": name})
    for name in sorted(report.fields):
        arr, meta = report.fields[name]
        rel = os.path.join("fields", f"{name}.mbo")
        os.makedirs(os.path.join(directory, "fields"), exist_ok=True)
        fieldio.write_field(os.path.join(directory, rel), arr, meta)
        entries.append({"path": rel, "kind": "field", "description": name})
    if figures:
        for name in sorted(report.figures):
            func, args, kwargs = report.figures[name]
            rel = os.path.join("figures", name)
            os.makedirs(os.path.join(directory, "figures"), exist_ok=True)
            func(os.path.join(directory, rel), *args, **kwargs)
            entries.append({"path": rel, "kind": "figure", "description": name.rsplit(".", 1)[0]})
    if report.checks:
        rel = "checks.csv"
        fieldio.write_csv(os.path.join(directory, rel), report.checks,
                          ["name", "value", "threshold", "passed", "description"])
        entries.append({"path": rel, "kind": "table", "description": "assertions"})
    fieldio.write_index(directory, entries)
    return entries
