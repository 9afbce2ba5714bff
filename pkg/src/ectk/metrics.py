"""Per-year metrics of the export network.

RCA (Balassa index), its column-normalized form, the thresholded binary
matrix Mcp, the Fitness-Complexity fixed point, logPRODY and the
Herfindahl index.  All functions are pure.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import ExportPanel, GdpPanel, Registry

__all__ = [
    "StructuralError",
    "RcaMatrix",
    "BinaryExportMatrix",
    "FitnessComplexity",
    "NrcaWeights",
    "LogProdyVector",
    "HerfindahlVector",
    "MetricSeries",
    "rca_from_matrix",
    "compute_rca",
    "threshold_mcp",
    "fitness_complexity",
    "fitness_complexity_pruned",
    "prune_empty",
    "compute_nrca",
    "compute_logprody",
    "compute_herfindahl",
    "compute_metric_series",
    "tied_rank",
    "write_metric_csv",
]


class StructuralError(ValueError):
    """Matrix shape or support makes the requested computation undefined."""


@dataclass(frozen=True)
class RcaMatrix:
    rca: np.ndarray
    year: int | None = None
    zero_rows: np.ndarray | None = None
    zero_cols: np.ndarray | None = None
    countries: Registry | None = None
    products: Registry | None = None


@dataclass(frozen=True)
class BinaryExportMatrix:
    m: np.ndarray
    year: int | None = None
    provenance: str = "thresholded"
    countries: Registry | None = None
    products: Registry | None = None

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 2 or not np.isin(m, (0, 1)).all():
            raise ValueError("binary export matrix must be a 2-d 0/1 array")
        object.__setattr__(self, "m", m.astype(np.int8))
        if self.provenance not in ("thresholded", "hmm-regularized", "synthetic"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class FitnessComplexity:
    """Output of the Fitness-Complexity map.

    ``fitness_raw`` and ``complexity_raw`` are the last un-normalized
    iterates, kept so country fitness can be reconstructed from complexity.
    """

    fitness: np.ndarray
    complexity: np.ndarray
    iterations: int
    converged: bool
    fitness_raw: np.ndarray
    complexity_raw: np.ndarray
    ranking_stable: bool = False
    degenerate: bool = False
    history: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class NrcaWeights:
    weights: np.ndarray
    zero_cols: np.ndarray


@dataclass(frozen=True)
class LogProdyVector:
    values: np.ndarray
    missing: np.ndarray
    excluded_countries: tuple = ()
    year: int | None = None


@dataclass(frozen=True)
class HerfindahlVector:
    values: np.ndarray
    shares: np.ndarray
    missing: np.ndarray
    year: int | None = None


def rca_from_matrix(exm: np.ndarray) -> RcaMatrix:
    exm = np.asarray(exm, dtype=float)
    if exm.ndim != 2:
        raise ValueError("EXM must be two-dimensional")
    total = exm.sum()
    if total <= 0:
        raise StructuralError("all-zero export matrix")
    row = exm.sum(axis=1)
    col = exm.sum(axis=0)
    zero_rows, zero_cols = row == 0, col == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        share_in_country = exm / row[:, None]
        share_in_world = col / total
        rca = share_in_country / share_in_world[None, :]
    rca[zero_rows, :] = 0.0
    rca[:, zero_cols] = 0.0
    return RcaMatrix(rca, zero_rows=zero_rows, zero_cols=zero_cols)


def compute_rca(panel: ExportPanel, year: int) -> RcaMatrix:
    """Balassa index of ``panel`` in ``year``.

    Countries or products with zero total export get RCA 0 and are flagged
    in ``zero_rows`` / ``zero_cols``.
    """
    try:
        r = rca_from_matrix(panel.matrix(year))
    except StructuralError:
        raise StructuralError(f"no exports recorded in {year}") from None
    return RcaMatrix(r.rca, year, r.zero_rows, r.zero_cols, panel.countries, panel.products)


def threshold_mcp(rca: RcaMatrix | np.ndarray) -> BinaryExportMatrix:
    if isinstance(rca, RcaMatrix):
        return BinaryExportMatrix((rca.rca >= 1.0).astype(np.int8), rca.year, "thresholded",
                                  rca.countries, rca.products)
    return BinaryExportMatrix((np.asarray(rca) >= 1.0).astype(np.int8))


def _as_binary(mcp) -> tuple[np.ndarray, Registry | None, Registry | None]:
    if isinstance(mcp, BinaryExportMatrix):
        return mcp.m.astype(float), mcp.countries, mcp.products
    m = np.asarray(mcp, dtype=float)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ValueError("expected a 2-d binary matrix")
    return m, None, None


def _name(reg: Registry | None, i: int, kind: str) -> str:
    return f"{kind} {reg.codes[i]!r}" if reg is not None else f"{kind} index {i}"


class _Ranking:
    """Tied ranking of a vector, cheap to compare against a new vector."""

    def __init__(self, v: np.ndarray):
        self.order = np.argsort(v, kind="stable")
        self.ties = np.diff(v[self.order]) == 0

    def same_as(self, v: np.ndarray) -> bool:
        d = np.diff(v[self.order])
        return bool(np.all(d[self.ties] == 0) and np.all(d[~self.ties] > 0))


def fitness_complexity(mcp, tol: float = 1e-13, max_iter: int = 1000,
                       init: tuple[np.ndarray, np.ndarray] | None = None,
                       stable_window: int = 10,
                       keep_history: bool = False) -> FitnessComplexity:
    """Iterate the Fitness-Complexity map to its fixed point.

    Each step computes ``F~ = M C`` and ``C~ = 1 / (M^T (1/F))`` from the
    previous iterate, then divides both by their means.  The map is
    considered converged when the largest relative change of any value is
    below ``tol`` and the tied ranking of both vectors has not changed for
    the last ``stable_window`` iterations (or since the start, if fewer).

    Perfectly nested matrices have a degenerate fixed point where some
    values go to zero; if an iterate stops being finite and positive the
    last valid one is returned with ``degenerate=True``.
    """
    m, countries, products = _as_binary(mcp)
    empty_rows = np.flatnonzero(m.sum(axis=1) == 0)
    empty_cols = np.flatnonzero(m.sum(axis=0) == 0)
    if empty_rows.size or empty_cols.size:
        names = [_name(countries, i, "country") for i in empty_rows]
        names += [_name(products, j, "product") for j in empty_cols]
        raise StructuralError("empty rows/columns make the map undefined: " + ", ".join(names))

    if init is None:
        F = np.ones(m.shape[0])
        C = np.ones(m.shape[1])
    else:
        F, C = (np.array(v, dtype=float) for v in init)
        if np.any(F <= 0) or np.any(C <= 0):
            raise ValueError("initial condition must be positive")
    F_raw, C_raw = F.copy(), C.copy()
    ranks = (_Ranking(F), _Ranking(C))
    unchanged = 0
    converged = degenerate = False
    history = []
    n = 0
    mt = np.ascontiguousarray(m.T)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for n in range(1, max_iter + 1):
            F_t = m @ C
            C_t = 1.0 / (mt @ (1.0 / F))
            F_new = F_t / F_t.mean()
            C_new = C_t / C_t.mean()
            lo = min(F_new.min(), C_new.min())
            if not (lo > 0 and np.isfinite(F_new.max()) and np.isfinite(C_new.max())):
                degenerate = True
                n -= 1
                break
            change = max((np.abs(F_new - F) / F).max(), (np.abs(C_new - C) / C).max())
            if ranks[0].same_as(F_new) and ranks[1].same_as(C_new):
                unchanged += 1
            else:
                unchanged = 0
                ranks = (_Ranking(F_new), _Ranking(C_new))
            F, C, F_raw, C_raw = F_new, C_new, F_t, C_t
            if keep_history:
                history.append(float(change))
            if change < tol and unchanged >= min(stable_window, n):
                converged = True
                break
    return FitnessComplexity(F, C, n, converged, F_raw, C_raw,
                             ranking_stable=unchanged >= stable_window or converged,
                             degenerate=degenerate, history=history)


def prune_empty(mcp) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Drop empty rows and columns (repeatedly); returns matrix and kept indices."""
    m, _, _ = _as_binary(mcp)
    rows = np.arange(m.shape[0])
    cols = np.arange(m.shape[1])
    while True:
        r = m.sum(axis=1) > 0
        c = m.sum(axis=0) > 0
        if r.all() and c.all():
            return m, rows, cols
        m, rows, cols = m[r][:, c], rows[r], cols[c]


def fitness_complexity_pruned(mcp, **kwargs) -> FitnessComplexity:
    """Run the map on the non-empty block; pruned entries come back as NaN."""
    m, _, _ = _as_binary(mcp)
    sub, rows, cols = prune_empty(m)
    if sub.size == 0:
        raise StructuralError("matrix has no non-zero entries")
    fc = fitness_complexity(sub, **kwargs)

    def expand(v, idx, size):
        out = np.full(size, np.nan)
        out[idx] = v
        return out

    nr, nc = m.shape
    return FitnessComplexity(expand(fc.fitness, rows, nr), expand(fc.complexity, cols, nc),
                             fc.iterations, fc.converged,
                             expand(fc.fitness_raw, rows, nr), expand(fc.complexity_raw, cols, nc),
                             fc.ranking_stable, fc.degenerate, fc.history)


def compute_nrca(rca: RcaMatrix | np.ndarray) -> NrcaWeights:
    r = rca.rca if isinstance(rca, RcaMatrix) else np.asarray(rca, dtype=float)
    col = r.sum(axis=0)
    zero = col == 0
    w = np.zeros_like(r)
    w[:, ~zero] = r[:, ~zero] / col[~zero]
    return NrcaWeights(w, zero)


def compute_logprody(rca: RcaMatrix | np.ndarray, gdp, year: int | None = None) -> LogProdyVector:
    """nRCA-weighted mean of exporters' log10 GDP per capita.

    ``gdp`` is either a :class:`GdpPanel` on the same country registry (with
    ``year``) or a plain vector.  Countries without GDP are dropped and the
    remaining weights renormalized; products left with no weight are
    reported as missing (NaN).
    """
    r = rca.rca if isinstance(rca, RcaMatrix) else np.asarray(rca, dtype=float)
    if isinstance(gdp, GdpPanel):
        if year is None:
            year = getattr(rca, "year", None)
        if year is None:
            raise ValueError("year is required with a GdpPanel")
        g = gdp.vector(year)
        codes = gdp.countries.codes
    else:
        g = np.asarray(gdp, dtype=float)
        codes = tuple(str(i) for i in range(len(g)))
    if g.shape[0] != r.shape[0]:
        raise ValueError("GDP vector does not match the RCA rows")
    valid = ~np.isnan(g)
    excluded = tuple(c for c, v, w in zip(codes, valid, r.sum(axis=1) > 0) if w and not v)
    if excluded:
        warnings.warn(f"excluding countries without GDP from logPRODY: {list(excluded)}",
                      stacklevel=2)
    weights = compute_nrca(np.where(valid[:, None], r, 0.0))
    logg = np.where(valid, np.log10(np.where(valid, g, 1.0)), 0.0)
    values = weights.weights.T @ logg
    values[weights.zero_cols] = np.nan
    return LogProdyVector(values, weights.zero_cols, excluded, year)


def compute_herfindahl(panel: ExportPanel | np.ndarray, year: int | None = None) -> HerfindahlVector:
    exm = panel.matrix(year) if isinstance(panel, ExportPanel) else np.asarray(panel, dtype=float)
    world = exm.sum(axis=0)
    missing = world == 0
    shares = np.zeros_like(exm, dtype=float)
    shares[:, ~missing] = exm[:, ~missing] / world[~missing]
    h = (shares ** 2).sum(axis=0)
    h[missing] = np.nan
    return HerfindahlVector(h, shares, missing, year)


def tied_rank(values: np.ndarray, scaled: bool = True) -> np.ndarray:
    """Average ranks of the finite entries; NaN stays NaN.  Scaled to [0, 1]."""
    v = np.asarray(values, dtype=float)
    out = np.full(v.shape, np.nan)
    ok = np.isfinite(v)
    if ok.sum() == 0:
        return out
    r = rankdata(v[ok], method="average")
    if scaled:
        r = (r - 1.0) / max(ok.sum() - 1, 1)
    out[ok] = r
    return out


@dataclass
class MetricSeries:
    """Per-year metric vectors; arrays are indexed ``[entity, year]``."""

    countries: Registry
    products: Registry
    years: tuple[int, ...]
    fitness: np.ndarray
    complexity: np.ndarray
    logprody: np.ndarray
    herfindahl: np.ndarray
    notes: dict = field(default_factory=dict)


def compute_metric_series(panel: ExportPanel, gdp: GdpPanel | None = None,
                          mcps: Mapping[int, BinaryExportMatrix] | None = None,
                          tol: float = 1e-13, max_iter: int = 1000) -> MetricSeries:
    """All metrics for every year of ``panel``.

    ``mcps`` overrides the thresholded matrices (e.g. HMM-regularized ones).
    ``gdp`` must already be aligned to the panel's countries.
    """
    C, P, T = panel.shape
    fit = np.full((C, T), np.nan)
    comp = np.full((P, T), np.nan)
    lp = np.full((P, T), np.nan)
    herf = np.full((P, T), np.nan)
    notes: dict = {}
    for t, year in enumerate(panel.years):
        if panel.values[:, :, t].sum() == 0:
            notes.setdefault("empty_years", []).append(year)
            continue
        rca = compute_rca(panel, year)
        mcp = mcps[year] if mcps is not None else threshold_mcp(rca)
        fc = fitness_complexity_pruned(mcp, tol=tol, max_iter=max_iter)
        if not fc.converged:
            notes.setdefault("fc_not_converged", []).append(year)
        fit[:, t], comp[:, t] = fc.fitness, fc.complexity
        herf[:, t] = compute_herfindahl(panel, year).values
        if gdp is not None:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                lp[:, t] = compute_logprody(rca, gdp, year).values
            if caught:
                notes.setdefault("gdp_excluded", {})[year] = str(caught[0].message)
    return MetricSeries(panel.countries, panel.products, panel.years, fit, comp, lp, herf, notes)


def write_metric_csv(path, years: Sequence[int], entities: Iterable[str], values: np.ndarray) -> None:
    """``year,entity,value`` rows; NaN entries are omitted."""
    entities = list(entities)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "entity", "value"])
        for t, year in enumerate(years):
            for e, ent in enumerate(entities):
                v = values[e, t]
                if np.isfinite(v):
                    w.writerow([year, ent, repr(float(v))])


def read_metric_csv(path) -> tuple[list[str], tuple[int, ...], np.ndarray]:
    """Inverse of :func:`write_metric_csv`; missing entries are NaN."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["year", "entity", "value"]:
            raise ValueError(f"{path}: expected header year,entity,value")
        rows = [(int(y), e, float(v)) for y, e, v in reader]
    entities = sorted({r[1] for r in rows})
    years = tuple(range(min(r[0] for r in rows), max(r[0] for r in rows) + 1))
    idx = {e: i for i, e in enumerate(entities)}
    out = np.full((len(entities), len(years)), np.nan)
    for y, e, v in rows:
        out[idx[e], y - years[0]] = v
    return entities, years, out
