"""Experiment configuration: YAML files with model/grid/pipeline/assertions sections.

Unknown keys anywhere are rejected.  ``resolve`` fills defaults so that the
resolved config written next to every report fully reproduces the run.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml

EXPERIMENT_KINDS = (
    "project",
    "effective",
    "propagate-coherent",
    "propagate-grid",
    "compare",
    "scan-h",
    "straight-line",
)


class ConfigError(ValueError):
    pass


MODEL_DEFAULTS = {
    "kind": "mixing",
    "h": 0.1,
    # matrix models
    "gap": 2.0,
    "well": 1.0,
    "mixing": 0.4,
    # pair models
    "b": None,
    "e": 1.0,
    "e_nucleus": None,
    "interaction": {"kind": "harmonic", "k": 1.0},
    "external_nucleus": {"kind": "zero"},
    "external_electron": {"kind": "zero"},
    "y_range": [-5.0, 5.0],
    "ny": 32,
    "n": None,
    "allow_charged": False,
}

GRID_DEFAULTS = {
    "x_range": None,
    "nx": 32,
    "x_kind": "fourier",
    "xi_range": [-3.0, 3.0],
    "nxi": 16,
    # tensor grid of the reference solver
    "tensor_x_range": None,
    "tensor_nx": 32,
}

PIPELINE_DEFAULTS = {
    "N": 2,
    "contour_nodes": 32,
    "rank": 1,
    "riesz": True,
    "h_list": None,
    "x0": None,
    "xi0": None,
    "T": 1.0,
    "dt": 1e-3,
    "krylov_m": 24,
    "krylov_dt": None,
    "krylov_tol": 1e-9,
    "samples": 20,
    "leakage": True,
    "dress": True,
    "frame": "gauged",
    "compare": "packet",
    "gap_threshold": 1e-3,
    "control": True,
    "fields": False,
}

# assertion name -> (comparison, description)
ASSERTIONS = {
    "max_defect": ("le", "largest defect coefficient through order N"),
    "max_projector_error": ("le", "sup error of pi_0 against the eigenprojector"),
    "max_doubling_change": ("le", "contour node doubling change"),
    "min_idempotency_slope": ("ge", "fitted slope of |pi#pi - pi|(h)"),
    "min_commutator_slope": ("ge", "fitted slope of |[p, pi]|(h)"),
    "max_fit_residual": ("le", "residual of the log-log fits"),
    "max_g0_error": ("le", "|g_0 - xi^2 - mu|"),
    "max_hermitian_defect": ("le", "largest anti-hermitian part of g_j"),
    "max_xi_linear": ("le", "xi-linear part of g_0"),
    "max_energy_drift": ("le", "energy drift along the flow"),
    "max_frame_defect": ("le", "Y*Z - Z*Y - 2i defect"),
    "max_norm_drift": ("le", "norm drift of the grid evolution"),
    "max_wrap_mass": ("le", "mass near the box edges"),
    "max_gauge_distance": ("le", "L2 distance between the two gauge routes"),
    "min_leakage_slope": ("ge", "fitted slope of the adiabatic leakage"),
    "min_packet_slope": ("ge", "fitted slope of the packet error"),
    "packet_monotone": ("flag", "packet error decreases with h"),
    "squeezed_beats_frozen": ("flag", "frame-squeezed predictor beats the frozen-width one"),
    "max_packet_error": ("le", "L2 distance between grid evolution and packet at T"),
    "max_line_deviation": ("le", "deviation of <x>(t) from a line, fraction of path length"),
    "min_control_deviation": ("ge", "same for the charged control pair"),
}

SECTIONS = {"model": MODEL_DEFAULTS, "grid": GRID_DEFAULTS, "pipeline": PIPELINE_DEFAULTS}
TOP_KEYS = {"kind", "name", "output_dir", "seed", "model", "grid", "pipeline", "assertions"}


def _check_keys(block, allowed, where):
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def resolve(raw):
    """Validate a raw mapping and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(raw, TOP_KEYS, "top level")
    kind = raw.get("kind")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"kind must be one of {', '.join(EXPERIMENT_KINDS)}; got {kind!r}")
    out = {
        "kind": kind,
        "name": str(raw.get("name", kind)),
        "output_dir": raw.get("output_dir"),
        "seed": int(raw.get("seed", 0)),
    }
    for sec, defaults in SECTIONS.items():
        block = raw.get(sec) or {}
        if not isinstance(block, dict):
            raise ConfigError(f"section {sec} must be a mapping")
        _check_keys(block, defaults, sec)
        merged = copy.deepcopy(defaults)
        merged.update(copy.deepcopy(block))
        out[sec] = merged
    asserts = raw.get("assertions") or {}
    if not isinstance(asserts, dict):
        raise ConfigError("section assertions must be a mapping")
    _check_keys(asserts, ASSERTIONS, "assertions")
    out["assertions"] = dict(asserts)
    _fill_model(out)
    _check_values(out)
    return out


def _fill_model(cfg):
    m = cfg["model"]
    g = cfg["grid"]
    p = cfg["pipeline"]
    pair = m["kind"] == "pair"
    if m["b"] is None:
        m["b"] = 1.0 if pair else 0.0
    if m["n"] is None:
        m["n"] = 4 if pair else 2
    d = 2 if pair else 1
    if g["x_range"] is None:
        g["x_range"] = [-4.0, 4.0] if pair else [-3.141592653589793, 3.141592653589793]
    if g["tensor_x_range"] is None:
        g["tensor_x_range"] = [-5.0, 5.0] if pair else [-6.283185307179586, 6.283185307179586]
    if p["x0"] is None:
        p["x0"] = [0.0] * d
    if p["xi0"] is None:
        p["xi0"] = [0.0] * d
    if np_len(p["x0"]) != d or np_len(p["xi0"]) != d:
        raise ConfigError(f"x0 and xi0 need {d} components for a {m['kind']} model")


def np_len(v):
    return len(v) if isinstance(v, (list, tuple)) else 1


def _check_values(cfg):
    m, g, p = cfg["model"], cfg["grid"], cfg["pipeline"]
    if m["kind"] not in ("mixing", "constant", "crossing", "pair"):
        raise ConfigError(f"unknown model kind {m['kind']!r}")
    for key in ("nx", "nxi", "tensor_nx"):
        n = g[key]
        if not isinstance(n, int) or n < 8 or n & (n - 1):
            raise ConfigError(f"grid.{key} must be a power of two >= 8, got {n}")
    if not isinstance(p["samples"], int) or p["samples"] < 1:
        raise ConfigError("pipeline.samples must be a positive integer")
    if int(p["N"]) < 0 or int(p["N"]) > 4:
        raise ConfigError("pipeline.N must lie in 0..4")
    if p["frame"] not in ("gauged", "ungauged"):
        raise ConfigError("pipeline.frame must be gauged or ungauged")
    if p["compare"] not in ("packet", "gauge"):
        raise ConfigError("pipeline.compare must be packet or gauge")
    hl = p["h_list"]
    if cfg["kind"] == "scan-h" or (hl is not None):
        if not hl or len(hl) < 3:
            raise ConfigError("pipeline.h_list needs at least three values")
        ratios = [hl[i + 1] / hl[i] for i in range(len(hl) - 1)]
        if max(ratios) - min(ratios) > 1e-9 * max(abs(r) for r in ratios):
            raise ConfigError("pipeline.h_list must be geometric")
    if not 0 < float(m["h"]) < 1:
        raise ConfigError("model.h must lie in (0, 1)")


def load(path):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return resolve(raw)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def model_config(cfg, h=None):
    """The model block as keyword arguments for models.build_model."""
    m = dict(cfg["model"])
    if h is not None:
        m["h"] = h
    if m["kind"] == "pair":
        keep = ("kind", "h", "b", "e", "e_nucleus", "interaction", "external_nucleus",
                "external_electron", "y_range", "ny", "n", "allow_charged")
    else:
        keep = ("kind", "h", "gap", "well", "mixing", "b", "n")
    return {k: m[k] for k in keep}
