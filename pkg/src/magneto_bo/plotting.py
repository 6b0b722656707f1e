"""Report figures, rendered off-screen with the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loglog_scan(path, hs, series, fits=None, title=None):
    """series: name -> values over hs; fits: name -> {"slope": ...}."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, vals in series.items():
            label = name
            if fits and fits.get(name) and fits[name].get("slope") is not None:
                label += f" (slope {fits[name]['slope']:.2f})"
            ax.loglog(hs, vals, "o-", label=label)
        ax.set_xlabel("h")
        ax.set_ylabel("sup norm")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def time_series(path, t, series, ylabel="", logy=False, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, vals in series.items():
            ax.plot(t, vals, label=name)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        return _save(fig, path)


def phase_portrait(path, x, xi, title=None):
    x = np.atleast_2d(np.asarray(x).T).T
    xi = np.atleast_2d(np.asarray(xi).T).T
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i in range(x.shape[1]):
            ax.plot(x[:, i], xi[:, i], label=f"(x{i + 1}, xi{i + 1})")
        ax.set_xlabel("x")
        ax.set_ylabel("xi")
        if title:
            ax.set_title(title)
        if x.shape[1] > 1:
            ax.legend()
        return _save(fig, path)


def center_paths(path, paths, title=None):
    """paths: name -> array (n, 2) of <x>(t) in the plane."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, p in paths.items():
            p = np.asarray(p)
            ax.plot(p[:, 0], p[:, 1], ".-", ms=2, label=name)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def symbol_map(path, x, xi, values, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        mesh = ax.pcolormesh(x, xi, np.asarray(values).T, shading="auto")
        fig.colorbar(mesh, ax=ax)
        ax.set_xlabel("x")
        ax.set_ylabel("xi")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def density(path, x, rho, title=None):
    """Nuclear density: 1D line or 2D image depending on rho's rank."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        rho = np.asarray(rho)
        if rho.ndim == 1:
            ax.plot(x[0], rho)
            ax.set_xlabel("x")
        else:
            mesh = ax.pcolormesh(x[0], x[1], rho.T, shading="auto")
            fig.colorbar(mesh, ax=ax)
            ax.set_aspect("equal")
            ax.set_xlabel("x1")
            ax.set_ylabel("x2")
        if title:
            ax.set_title(title)
        return _save(fig, path)
