"""Average motion of products on the Complexity-logPRODY plane.

Displacements between consecutive years are binned on a regular grid by
their origin cell and averaged into a velocity field; Herfindahl values are
averaged into a scalar field on the same grid.  The velocity field is then
regressed on the negative gradient of the H field, and per-column minima of
either field are traced with bootstrap error bars.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PlaneTrajectories
from .metrics import MetricSeries, tied_rank

__all__ = [
    "GridSpec",
    "PlaneField",
    "PlaneSamples",
    "FieldModelFit",
    "MinimaLine",
    "plane_from_metrics",
    "displacement_records",
    "build_velocity_field",
    "build_h_field",
    "gradient",
    "fit_gradient_model",
    "minima_line",
    "write_grid_csv",
]


@dataclass(frozen=True)
class GridSpec:
    nx: int = 20
    ny: int = 20
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0
    min_count: int = 5

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("grid extents must be increasing")

    @property
    def dx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def dy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    @property
    def x_centers(self) -> np.ndarray:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y_centers(self) -> np.ndarray:
        return self.y0 + (np.arange(self.ny) + 0.5) * self.dy

    @classmethod
    def covering(cls, points, nx: int = 20, ny: int = 20, min_count: int = 5) -> "GridSpec":
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        p = p[np.isfinite(p).all(axis=1)]
        lo, hi = p.min(axis=0), p.max(axis=0)
        pad = np.where(hi > lo, 1e-9 * (hi - lo), 0.5)
        return cls(nx, ny, lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1], min_count)

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Cell (ix, iy) of each point; the upper edges belong to the last cell."""
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        if np.any((p[:, 0] < self.x0) | (p[:, 0] > self.x1) | (p[:, 1] < self.y0) | (p[:, 1] > self.y1)):
            raise ValueError("points fall outside the grid; use GridSpec.covering")
        ix = np.minimum(((p[:, 0] - self.x0) / self.dx).astype(int), self.nx - 1)
        iy = np.minimum(((p[:, 1] - self.y0) / self.dy).astype(int), self.ny - 1)
        return ix, iy


@dataclass
class PlaneField:
    """Per-cell means on a grid, indexed ``[ix, iy]``; NaN where masked."""

    grid: GridSpec
    vx: np.ndarray | None = None
    vy: np.ndarray | None = None
    h: np.ndarray | None = None
    count: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        """True where the cell has fewer than ``min_count`` samples."""
        return self.count < self.grid.min_count


@dataclass
class PlaneSamples:
    """The raw records behind a pair of fields, kept for bootstrapping."""

    grid: GridSpec
    disp_origin: np.ndarray        # (N, 2)
    disp: np.ndarray               # (N, 2)
    h_pos: np.ndarray | None = None
    h: np.ndarray | None = None


@dataclass
class FieldModelFit:
    k_c: float
    k_l: float
    r2_c: float
    r2_l: float
    n_cells: int
    residuals_c: np.ndarray = field(repr=False, default=None)
    residuals_l: np.ndarray = field(repr=False, default=None)


@dataclass
class MinimaLine:
    which: str
    x: np.ndarray                  # column centres
    raw: np.ndarray                # per-column argmin ordinate, NaN for empty columns
    smoothed: np.ndarray
    stderr: np.ndarray
    bandwidth: float
    bootstrap: int
    degenerate: bool = False


# --------------------------------------------------------------------------
# plane coordinates

def plane_from_metrics(series: MetricSeries, coords: str = "tied-rank") -> tuple[PlaneTrajectories, np.ndarray]:
    """Product positions (Complexity, logPRODY) per year, plus H per product-year.

    ``tied-rank`` uses average ranks scaled to [0, 1] within each year;
    ``raw`` uses log10 Complexity and logPRODY directly.
    """
    P, T = series.complexity.shape
    pos = np.full((P, T, 2), np.nan)
    for t in range(T):
        c, lp = series.complexity[:, t], series.logprody[:, t]
        if coords == "tied-rank":
            ok = np.isfinite(c) & np.isfinite(lp)
            cx = np.where(ok, c, np.nan)
            ly = np.where(ok, lp, np.nan)
            pos[:, t, 0] = tied_rank(cx)
            pos[:, t, 1] = tied_rank(ly)
        elif coords == "raw":
            with np.errstate(divide="ignore", invalid="ignore"):
                pos[:, t, 0] = np.where(c > 0, np.log10(c), np.nan)
            pos[:, t, 1] = lp
        else:
            raise ValueError(f"unknown coordinate convention {coords!r}")
    traj = PlaneTrajectories(series.products.codes, series.years, pos, meta={"coords": coords})
    return traj, series.herfindahl.copy()


def displacement_records(traj) -> tuple[np.ndarray, np.ndarray]:
    """(origin, displacement) of every consecutive-year step with both ends known."""
    pos = traj.positions if isinstance(traj, PlaneTrajectories) else np.asarray(traj, dtype=float)
    if pos.ndim != 3 or pos.shape[1] < 2:
        raise ValueError("velocity fields need positions for at least 2 years")
    start, end = pos[:, :-1].reshape(-1, 2), pos[:, 1:].reshape(-1, 2)
    ok = np.isfinite(start).all(axis=1) & np.isfinite(end).all(axis=1)
    return start[ok], (end - start)[ok]


# --------------------------------------------------------------------------
# fields

def _cell_means(grid: GridSpec, pos, values) -> tuple[np.ndarray, np.ndarray]:
    ix, iy = grid.cell_index(pos)
    flat = ix * grid.ny + iy
    n = grid.nx * grid.ny
    count = np.bincount(flat, minlength=n)
    values = np.asarray(values, dtype=float).reshape(len(flat), -1)
    sums = np.stack([np.bincount(flat, weights=values[:, k], minlength=n)
                     for k in range(values.shape[1])], axis=1)
    keep = count >= grid.min_count
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(keep[:, None], sums / np.maximum(count, 1)[:, None], np.nan)
    return means.reshape(grid.nx, grid.ny, -1), count.reshape(grid.nx, grid.ny)


def build_velocity_field(points, grid: GridSpec | None = None) -> PlaneField:
    """Mean displacement per origin cell.

    ``points`` is a :class:`PlaneTrajectories`, a (E, T, 2) position array
    or an ``(origin, displacement)`` pair of (N, 2) arrays.
    """
    if isinstance(points, tuple):
        origin, disp = (np.asarray(a, dtype=float) for a in points)
    else:
        origin, disp = displacement_records(points)
    grid = grid or GridSpec()
    means, count = _cell_means(grid, origin, disp)
    return PlaneField(grid, vx=means[..., 0], vy=means[..., 1], count=count)


def build_h_field(points, h_values, grid: GridSpec | None = None,
                  point_ids=None, h_ids=None) -> PlaneField:
    """Mean H per cell; ``points`` and ``h_values`` share their leading shape.

    If both id sequences are given they must match element for element.
    """
    if point_ids is not None and h_ids is not None and list(point_ids) != list(h_ids):
        raise ValueError("point ids and H ids do not match")
    pos = points.positions if isinstance(points, PlaneTrajectories) else np.asarray(points, float)
    h = np.asarray(h_values, dtype=float)
    if pos.shape[:-1] != h.shape:
        raise ValueError(f"positions {pos.shape[:-1]} and H values {h.shape} do not match")
    pos, h = pos.reshape(-1, 2), h.ravel()
    ok = np.isfinite(pos).all(axis=1) & np.isfinite(h)
    grid = grid or GridSpec()
    means, count = _cell_means(grid, pos[ok], h[ok])
    return PlaneField(grid, h=means[..., 0], count=count)


def _diff_axis(f: np.ndarray, step: float, axis: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    n = f.shape[0]
    g = np.full(f.shape, np.nan)
    if n >= 3:
        g[1:-1] = (f[2:] - f[:-2]) / (2 * step)
        g[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * step)
        g[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * step)
    elif n == 2:
        g[0] = g[1] = (f[1] - f[0]) / step
    return np.moveaxis(g, 0, axis)


def gradient(f: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference gradient of a cell field.

    Central differences inside, second-order one-sided stencils at the
    edges; any stencil touching a masked (NaN) cell yields NaN.
    """
    f = np.asarray(f, dtype=float)
    return _diff_axis(f, grid.dx, 0), _diff_axis(f, grid.dy, 1)


def _fit_through_origin(a, v):
    k = float(np.dot(a, v) / np.dot(a, a)) if np.dot(a, a) > 0 else 0.0
    res = v - k * a
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res ** 2)) / ss_tot if ss_tot > 0 else (1.0 if np.allclose(res, 0) else 0.0)
    return k, r2, res


def fit_gradient_model(v_field: PlaneField, h_field: PlaneField, min_cells: int = 3) -> FieldModelFit:
    """Least-squares fits ``vx = k_c * (-dH/dx)`` and ``vy = k_l * (-dH/dy)``.

    Only cells where both velocity components and both derivatives exist
    enter the fits.  R^2 is ``1 - SS_res / SS_tot`` with the total sum of
    squares taken about the mean.
    """
    if v_field.grid != h_field.grid:
        raise ValueError("velocity and H fields are on different grids")
    gx, gy = gradient(h_field.h, h_field.grid)
    ok = np.isfinite(v_field.vx) & np.isfinite(v_field.vy) & np.isfinite(gx) & np.isfinite(gy)
    n = int(ok.sum())
    if n < min_cells:
        raise ValueError(f"only {n} populated cells shared by both fields; need {min_cells}")
    kc, r2c, rc = _fit_through_origin(-gx[ok], v_field.vx[ok])
    kl, r2l, rl = _fit_through_origin(-gy[ok], v_field.vy[ok])
    return FieldModelFit(kc, kl, r2c, r2l, n, rc, rl)


# --------------------------------------------------------------------------
# minima lines

def _column_minima(f: np.ndarray, grid: GridSpec) -> np.ndarray:
    out = np.full(grid.nx, np.nan)
    for i in range(grid.nx):
        col = f[i]
        if np.isfinite(col).any():
            out[i] = grid.y_centers[int(np.nanargmin(col))]
    return out


def _silverman(idx: np.ndarray) -> float:
    n = len(idx)
    s = np.std(idx, ddof=1) if n > 1 else 1.0
    return max(1.06 * s * n ** -0.2, 1e-6)


def _smooth(raw: np.ndarray, bandwidth: float) -> np.ndarray:
    idx = np.arange(len(raw), dtype=float)
    ok = np.isfinite(raw)
    out = np.full(len(raw), np.nan)
    if not ok.any():
        return out
    d = idx[ok][None, :] - idx[ok][:, None]
    w = np.exp(-0.5 * (d / bandwidth) ** 2)
    out[ok] = w @ raw[ok] / w.sum(axis=1)
    return out


def _line(samples: PlaneSamples, which: str, take=None) -> np.ndarray:
    g = samples.grid
    if which == "velocity":
        o, d = samples.disp_origin, samples.disp
        if take is not None:
            o, d = o[take], d[take]
        f = np.abs(build_velocity_field((o, d), g).vy)
    else:
        p, h = samples.h_pos, samples.h
        if take is not None:
            p, h = p[take], h[take]
        f = build_h_field(p, h, g).h
    return _column_minima(f, g)


def minima_line(samples: PlaneSamples, which: str = "velocity", bootstrap: int = 200,
                seed: int = 0) -> MinimaLine:
    """Per-column minimum of |v_y| (``velocity``) or of H (``h``), smoothed.

    The raw line is the ordinate of the minimising cell in every column.
    It is smoothed by Gaussian kernel regression over the column index with
    Silverman's bandwidth; error bars are the standard deviation of the
    smoothed line over ``bootstrap`` resamples of the underlying records.
    Columns with no populated cell are gaps (NaN).
    """
    if which not in ("velocity", "h"):
        raise ValueError(f"unknown field {which!r}; expected 'velocity' or 'h'")
    if which == "h" and samples.h is None:
        raise ValueError("no H records in samples")
    raw = _line(samples, which)
    present = np.flatnonzero(np.isfinite(raw))
    if present.size == 0:
        raise ValueError("field has no populated cells")
    bw = _silverman(present.astype(float))
    smoothed = _smooth(raw, bw)
    n = len(samples.disp) if which == "velocity" else len(samples.h)
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(max(int(bootstrap), 0)):
        take = rng.integers(0, n, size=n)
        boots.append(_smooth(_line(samples, which, take), bw))
    degenerate = len(boots) < 2
    if degenerate:
        stderr = np.where(np.isfinite(smoothed), 0.0, np.nan)
    else:
        with warnings.catch_warnings():
            # columns empty in almost every resample have no spread
            warnings.simplefilter("ignore", RuntimeWarning)
            stderr = np.nanstd(np.array(boots), axis=0, ddof=1)
        stderr = np.where(np.isfinite(smoothed), stderr, np.nan)
    return MinimaLine(which, samples.grid.x_centers, raw, smoothed, stderr, bw, int(bootstrap),
                      degenerate)


def write_grid_csv(path, v_field: PlaneField, h_field: PlaneField | None = None) -> None:
    """``cellX,cellY,vx,vy,H,count`` for every cell; masked values are blank.

    ``count`` is the number of displacement records in the cell.
    """
    g = v_field.grid

    def cell(a, i, j):
        if a is None or not np.isfinite(a[i, j]):
            return ""
        return repr(float(a[i, j]))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cellX", "cellY", "vx", "vy", "H", "count"])
        for i in range(g.nx):
            for j in range(g.ny):
                w.writerow([i, j, cell(v_field.vx, i, j), cell(v_field.vy, i, j),
                            cell(None if h_field is None else h_field.h, i, j),
                            int(v_field.count[i, j])])
