"""Deterministic SVG figures for the CLI reports.

Figures are built on bare :class:`~matplotlib.figure.Figure` objects (no
pyplot state) and saved with a fixed hash salt and no date stamp, so the
same inputs always give byte-identical files.  The CSVs written next to
them remain the data contract; plots are a convenience.
"""

from __future__ import annotations

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from scipy.stats import gaussian_kde

from .plane import GridSpec, MinimaLine, PlaneField, gradient

_RC = {
    "svg.hashsalt": "ectk",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 10,
    "figure.dpi": 100,
}


def save_svg(fig: Figure, path) -> None:
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _figure(w=5.0, h=4.0) -> Figure:
    with matplotlib.rc_context(_RC):
        return Figure(figsize=(w, h), layout="constrained")


def _extent(grid: GridSpec):
    return (grid.x0, grid.x1, grid.y0, grid.y1)


def quiver_svg(field: PlaneField, path, title: str = "average velocity",
               labels=("Complexity", "logPRODY")) -> int:
    """Arrows at populated cell centres only; returns the number of arrows drawn."""
    g = field.grid
    X, Y = np.meshgrid(g.x_centers, g.y_centers, indexing="ij")
    ok = ~field.mask
    fig = _figure()
    ax = fig.add_subplot()
    if ok.any():
        ax.quiver(X[ok], Y[ok], field.vx[ok], field.vy[ok], angles="xy", color="0.15")
    ax.set_xlim(g.x0, g.x1)
    ax.set_ylim(g.y0, g.y1)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.set_title(title)
    save_svg(fig, path)
    return int(ok.sum())


def heatmap_svg(h_field: PlaneField, path, lines: list[MinimaLine] = (), arrows: bool = True,
                title: str = "H field", labels=("Complexity", "logPRODY")) -> np.ma.MaskedArray:
    """H heatmap (masked cells left blank), -grad H arrows and minima lines.

    Returns the masked array that was drawn.
    """
    g = h_field.grid
    img = np.ma.masked_invalid(h_field.h)
    fig = _figure()
    ax = fig.add_subplot()
    cmap = matplotlib.colormaps["viridis"].with_extremes(bad=(0, 0, 0, 0))
    im = ax.imshow(img.T, origin="lower", extent=_extent(g), cmap=cmap, aspect="auto",
                   interpolation="nearest")
    fig.colorbar(im, ax=ax, label="H")
    if arrows:
        gx, gy = gradient(h_field.h, g)
        X, Y = np.meshgrid(g.x_centers, g.y_centers, indexing="ij")
        ok = np.isfinite(gx) & np.isfinite(gy)
        if ok.any():
            ax.quiver(X[ok], Y[ok], -gx[ok], -gy[ok], angles="xy", color="white", alpha=0.8)
    styles = {"velocity": ("tab:red", "|v_y| minimum"), "h": ("tab:orange", "H minimum")}
    for ln in lines:
        color, label = styles.get(ln.which, ("k", ln.which))
        ax.errorbar(ln.x, ln.smoothed, yerr=ln.stderr, color=color, label=label,
                    capsize=2, lw=1.2)
    if len(lines):
        ax.legend(loc="upper left", fontsize=7)
    ax.set_xlim(g.x0, g.x1)
    ax.set_ylim(g.y0, g.y1)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.set_title(title)
    save_svg(fig, path)
    return img


def density_svg(points: np.ndarray, grid: GridSpec, path, title: str = "product density",
                labels=("Complexity", "logPRODY"), resolution: int = 80) -> np.ndarray:
    """Gaussian kernel density of plane positions; returns the evaluated density."""
    pts = np.asarray(points, dtype=float)
    pts = pts[np.isfinite(pts).all(axis=1)]
    xs = np.linspace(grid.x0, grid.x1, resolution)
    ys = np.linspace(grid.y0, grid.y1, resolution)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    dens = gaussian_kde(pts.T)(np.vstack([X.ravel(), Y.ravel()])).reshape(X.shape)
    fig = _figure()
    ax = fig.add_subplot()
    im = ax.imshow(dens.T, origin="lower", extent=_extent(grid), aspect="auto", cmap="magma")
    fig.colorbar(im, ax=ax, label="density")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.set_title(title)
    save_svg(fig, path)
    return dens


def nodf_svg(results: dict, path) -> int:
    """Observed NODF per dataset and the null/observed ratios.

    ``results[label] = {"nodf": value, "nulls": {model: significance report}}``.
    Returns the number of observed bars.
    """
    labels = list(results)
    fig = _figure(7.0, 3.2)
    a1, a2 = fig.subplots(1, 2)
    obs = [results[k]["nodf"] for k in labels]
    a1.bar(range(len(labels)), obs, color="0.4")
    a1.set_xticks(range(len(labels)), labels)
    a1.set_ylim(0, 100)
    a1.set_ylabel("NODF")
    a1.set_title("observed nestedness")
    models = sorted({m for k in labels for m in results[k].get("nulls", {})})
    width = 0.8 / max(len(models), 1)
    for j, m in enumerate(models):
        xs, ys, es = [], [], []
        for i, k in enumerate(labels):
            rep = results[k].get("nulls", {}).get(m)
            if rep is None or rep.get("null_over_obs") is None:
                continue
            xs.append(i + (j - (len(models) - 1) / 2) * width)
            ys.append(rep["null_over_obs"])
            es.append(rep["null_std_over_obs"] or 0.0)
        a2.bar(xs, ys, width, yerr=es, capsize=2, label=m)
    a2.axhline(1.0, color="k", lw=0.8, ls="--")
    a2.set_xticks(range(len(labels)), labels)
    a2.set_ylabel("null NODF / observed NODF")
    a2.set_title("null models")
    if models:
        a2.legend(fontsize=7)
    save_svg(fig, path)
    return len(obs)


def convergence_svg(table: list[dict], path) -> None:
    B = [r["B"] for r in table]
    fig = _figure(6.0, 3.0)
    a1, a2 = fig.subplots(1, 2)
    a1.loglog(B, [r["mae_expectation"] for r in table], "o-")
    a1.set_xlabel("bootstraps B")
    a1.set_ylabel("MAE of expectation")
    a2.loglog(B, [r["mae_sigma"] for r in table], "o-", color="tab:red")
    a2.set_xlabel("bootstraps B")
    a2.set_ylabel("MAE of sqrt(N) x std")
    save_svg(fig, path)


def kernel_prob_svg(p: np.ndarray, phi: np.ndarray, path) -> None:
    fig = _figure(4.5, 4.0)
    ax = fig.add_subplot()
    seen = phi > 0
    ax.loglog(p[seen], phi[seen], ".", ms=3, label="sampled")
    lo = max(p[p > 0].min(), 1e-30)
    ax.loglog([lo, p.max()], [lo, p.max()], "k--", lw=0.8, label="phi = p")
    ax.set_xlabel("kernel probability p")
    ax.set_ylabel("sampled frequency phi")
    ax.legend(fontsize=7)
    save_svg(fig, path)


def backtest_svg(mae: dict, path) -> None:
    """Grouped bars of MAE; ``mae[(method, metric, dt)] = value``."""
    methods = sorted({k[0] for k in mae})
    groups = sorted({(k[1], k[2]) for k in mae})
    fig = _figure(max(4.0, 1.2 * len(groups)), 3.2)
    ax = fig.add_subplot()
    width = 0.8 / max(len(methods), 1)
    for j, m in enumerate(methods):
        xs = [i + (j - (len(methods) - 1) / 2) * width for i in range(len(groups))]
        ax.bar(xs, [mae.get((m, g[0], g[1]), np.nan) for g in groups], width, label=m)
    ax.set_xticks(range(len(groups)), [f"{g[0]}\ndt={g[1]}" for g in groups])
    ax.set_ylabel("MAE of CAGR%")
    ax.legend(fontsize=7)
    save_svg(fig, path)


def flips_svg(raw: np.ndarray, regularized: np.ndarray, path) -> None:
    fig = _figure(4.5, 3.2)
    ax = fig.add_subplot()
    hi = int(max(raw.max(initial=0), regularized.max(initial=0))) + 1
    bins = np.arange(hi + 1) - 0.5
    ax.hist(raw.ravel(), bins=bins, alpha=0.6, label="thresholded")
    ax.hist(regularized.ravel(), bins=bins, alpha=0.6, label="regularized")
    ax.set_xlabel("flips per country-product")
    ax.set_ylabel("count")
    ax.legend(fontsize=7)
    save_svg(fig, path)
