"""Registries, panel ingestion and synthetic fixtures.

Everything downstream consumes an :class:`ExportPanel` (export value per
country, product and year) and, where logPRODY is involved, a
:class:`GdpPanel`.  Panels are treated as immutable once built.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

__all__ = [
    "PanelError",
    "ParseError",
    "ValidationError",
    "Registry",
    "ExportPanel",
    "GdpPanel",
    "PlaneTrajectories",
    "SynthSpec",
    "load_export_csv",
    "write_export_csv",
    "aggregate_panel",
    "load_gdp_csv",
    "write_gdp_csv",
    "align_gdp",
    "synth_panel",
    "synth_trajectories",
    "load_trajectories_csv",
    "write_trajectories_csv",
    "write_provenance",
    "read_provenance",
    "core_indices",
    "format_number",
    "stairstep",
]


class PanelError(ValueError):
    """Base class for data ingestion problems."""


class ParseError(PanelError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PanelError):
    pass


@dataclass(frozen=True)
class Registry:
    """Ordered set of stable codes with a dense index."""

    codes: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        codes = tuple(str(c) for c in self.codes)
        object.__setattr__(self, "codes", codes)
        index = {c: i for i, c in enumerate(codes)}
        if len(index) != len(codes):
            dupes = sorted({c for c in codes if codes.count(c) > 1})
            raise ValidationError(f"duplicate codes in registry: {dupes}")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)

    def __contains__(self, code) -> bool:
        return str(code) in self._index

    def index(self, code) -> int:
        try:
            return self._index[str(code)]
        except KeyError:
            raise KeyError(f"unknown code {code!r}") from None

    def indices(self, codes: Iterable) -> np.ndarray:
        return np.array([self.index(c) for c in codes], dtype=int)


def _check_years(years: Sequence[int]) -> tuple[int, ...]:
    years = tuple(int(y) for y in years)
    if any(b != a + 1 for a, b in zip(years, years[1:])):
        raise ValidationError(f"years must be strictly increasing and contiguous: {years}")
    return years


@dataclass(frozen=True)
class ExportPanel:
    """Export value ``values[c, p, t]`` with its registries.

    Countries whose total export is zero in a year are kept; use
    :meth:`active_countries` to skip them.
    """

    countries: Registry
    products: Registry
    years: tuple[int, ...]
    values: np.ndarray
    digit_level: int = 4
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "years", _check_years(self.years))
        values = np.array(self.values, dtype=float)
        shape = (len(self.countries), len(self.products), len(self.years))
        if values.shape != shape:
            raise ValidationError(f"values has shape {values.shape}, expected {shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("export values must be finite")
        if np.any(values < 0):
            raise ValidationError("export values must be non-negative")
        if self.digit_level not in (4, 6):
            raise ValidationError(f"digit level must be 4 or 6, got {self.digit_level}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def year_index(self, year: int) -> int:
        try:
            return self.years.index(int(year))
        except ValueError:
            raise KeyError(f"year {year} not in panel {self.years[0]}-{self.years[-1]}") from None

    def matrix(self, year: int) -> np.ndarray:
        """EXM for one year, shape (countries, products)."""
        return self.values[:, :, self.year_index(year)]

    def active_countries(self, year: int) -> np.ndarray:
        return self.matrix(year).sum(axis=1) > 0

    def zero_export_countries(self, year: int) -> list[str]:
        mask = ~self.active_countries(year)
        return [c for c, m in zip(self.countries, mask) if m]


@dataclass(frozen=True)
class GdpPanel:
    """GDP per capita ``values[c, t]``; NaN marks a missing country-year."""

    countries: Registry
    years: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "years", _check_years(self.years))
        values = np.array(self.values, dtype=float)
        if values.shape != (len(self.countries), len(self.years)):
            raise ValidationError("GDP values do not match registry and years")
        present = ~np.isnan(values)
        if np.any(values[present] <= 0) or not np.all(np.isfinite(values[present])):
            raise ValidationError("GDP per capita must be positive and finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def year_index(self, year: int) -> int:
        try:
            return self.years.index(int(year))
        except ValueError:
            raise KeyError(f"year {year} not in GDP panel") from None

    def vector(self, year: int) -> np.ndarray:
        return self.values[:, self.year_index(year)]

    def missing(self, year: int) -> list[str]:
        v = self.vector(year)
        return [c for c, x in zip(self.countries, v) if np.isnan(x)]


@dataclass(frozen=True)
class PlaneTrajectories:
    """Positions ``positions[e, t, :]`` of entities on a two-dimensional plane."""

    entities: tuple[str, ...]
    years: tuple[int, ...]
    positions: np.ndarray
    meta: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(str(e) for e in self.entities))
        object.__setattr__(self, "years", _check_years(self.years))
        pos = np.array(self.positions, dtype=float)
        if pos.shape != (len(self.entities), len(self.years), 2):
            raise ValidationError(f"positions has shape {pos.shape}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)


# --------------------------------------------------------------------------
# CSV ingestion

def format_number(x: float) -> str:
    """Shortest text that round-trips ``x``; integers lose the trailing ``.0``."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def _open_rows(path, expected: Sequence[str]):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(expected):
            raise ParseError(f"expected header {','.join(expected)}, got {header}", 1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not r.strip() for r in row):
                continue
            if len(row) != len(expected):
                raise ParseError(f"expected {len(expected)} fields, got {len(row)}", lineno)
            rows.append((lineno, [r.strip() for r in row]))
    return rows


def _parse_float(text: str, lineno: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not a number", lineno) from None
    if not math.isfinite(value):
        raise ValidationError(f"line {lineno}: {what} must be finite")
    return value


def _parse_year(text: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"year {text!r} is not an integer", lineno) from None


def load_export_csv(path, digit_level: int = 4) -> ExportPanel:
    """Read ``year,country,product,value`` rows into a dense panel.

    Product codes are truncated to ``digit_level`` digits and values that land
    on the same (year, country, product) are summed.  Cells absent from the
    file are zero.
    """
    if digit_level not in (4, 6):
        raise ValidationError(f"digit level must be 4 or 6, got {digit_level}")
    cells: dict[tuple[int, str, str], float] = {}
    for lineno, (y, c, p, v) in _open_rows(path, ("year", "country", "product", "value")):
        year = _parse_year(y, lineno)
        value = _parse_float(v, lineno, "value")
        if value < 0:
            raise ValidationError(f"line {lineno}: negative export value {v}")
        if not p.isdigit():
            raise ParseError(f"product code {p!r} is not numeric", lineno)
        if len(p) < digit_level:
            raise ValidationError(
                f"line {lineno}: product code {p!r} is shorter than {digit_level} digits")
        if not c:
            raise ParseError("empty country code", lineno)
        key = (year, c, p[:digit_level])
        cells[key] = cells.get(key, 0.0) + value
    if not cells:
        raise ValidationError("empty panel")
    years = range(min(k[0] for k in cells), max(k[0] for k in cells) + 1)
    countries = Registry(tuple(sorted({k[1] for k in cells})))
    products = Registry(tuple(sorted({k[2] for k in cells})))
    values = np.zeros((len(countries), len(products), len(years)))
    for (year, c, p), v in cells.items():
        values[countries.index(c), products.index(p), year - years.start] += v
    return ExportPanel(countries, products, tuple(years), values, digit_level,
                       meta={"source": str(path)})


def write_export_csv(panel: ExportPanel, path) -> None:
    """Write the non-zero cells of ``panel``; inverse of :func:`load_export_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "country", "product", "value"])
        for t, year in enumerate(panel.years):
            for c, p in zip(*np.nonzero(panel.values[:, :, t])):
                w.writerow([year, panel.countries.codes[c], panel.products.codes[p],
                            format_number(panel.values[c, p, t])])


def aggregate_panel(panel: ExportPanel, digit_level: int) -> ExportPanel:
    """Sum product codes sharing their first ``digit_level`` digits."""
    if digit_level > panel.digit_level:
        raise ValidationError("cannot disaggregate a panel")
    if digit_level == panel.digit_level:
        return panel
    groups: dict[str, list[int]] = {}
    for i, code in enumerate(panel.products):
        groups.setdefault(code[:digit_level], []).append(i)
    codes = tuple(sorted(groups))
    values = np.stack([panel.values[:, groups[k], :].sum(axis=1) for k in codes], axis=1)
    return ExportPanel(panel.countries, Registry(codes), panel.years, values, digit_level,
                       meta=dict(panel.meta))


def load_gdp_csv(path) -> GdpPanel:
    """Read ``year,country,gdppc`` rows.  Missing country-years become NaN."""
    cells: dict[tuple[int, str], float] = {}
    for lineno, (y, c, g) in _open_rows(path, ("year", "country", "gdppc")):
        year = _parse_year(y, lineno)
        value = _parse_float(g, lineno, "gdppc")
        if value <= 0:
            raise ValidationError(f"line {lineno}: GDP per capita must be positive, got {g}")
        if (year, c) in cells:
            raise ValidationError(f"line {lineno}: duplicate entry for {c} in {year}")
        cells[(year, c)] = value
    if not cells:
        raise ValidationError("empty GDP panel")
    years = range(min(k[0] for k in cells), max(k[0] for k in cells) + 1)
    countries = Registry(tuple(sorted({k[1] for k in cells})))
    values = np.full((len(countries), len(years)), np.nan)
    for (year, c), v in cells.items():
        values[countries.index(c), year - years.start] = v
    return GdpPanel(countries, tuple(years), values)


def write_gdp_csv(gdp: GdpPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "country", "gdppc"])
        for t, year in enumerate(gdp.years):
            for c, code in enumerate(gdp.countries):
                if not np.isnan(gdp.values[c, t]):
                    w.writerow([year, code, format_number(gdp.values[c, t])])


def align_gdp(gdp: GdpPanel, panel: ExportPanel) -> tuple[GdpPanel, dict[int, list[str]]]:
    """Re-index ``gdp`` onto the panel's countries and years.

    Returns the aligned panel and, per year, the exporting countries that
    have no GDP value and must be excluded from GDP-weighted metrics.
    """
    values = np.full((len(panel.countries), len(panel.years)), np.nan)
    for c, code in enumerate(panel.countries):
        if code not in gdp.countries:
            continue
        gc = gdp.countries.index(code)
        for t, year in enumerate(panel.years):
            if year in gdp.years:
                values[c, t] = gdp.values[gc, gdp.year_index(year)]
    aligned = GdpPanel(panel.countries, panel.years, values)
    excluded = {}
    for t, year in enumerate(panel.years):
        exporting = panel.values[:, :, t].sum(axis=1) > 0
        missing = [code for code, e, v in zip(panel.countries, exporting, values[:, t])
                   if e and np.isnan(v)]
        if missing:
            excluded[year] = missing
    return aligned, excluded


def write_provenance(path, meta: Mapping) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_provenance(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# Synthetic fixtures

FILLER_COUNTRY = "ROW"
FILLER_PRODUCT = {4: "9999", 6: "999999"}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic generator.

    ``nested`` and ``flicker`` build export panels whose RCA, on every cell
    except the balancing filler row and column, equals a designed value
    exactly.  ``drift`` builds plane trajectories.
    """

    generator: str
    countries: int = 20
    products: int = 40
    years: int = 20
    start_year: int = 1995
    digit_level: int = 4
    # nested: probability of flipping a cell per year; flicker: probability
    # that one observation lands on the wrong side of RCA = 1
    noise: float = 0.0
    amplitude: float = 1.0
    switch_rate: float = 0.3
    switch_year: int | None = None
    # drift
    entities: int = 50
    drift: str = "sink"
    drift_strength: float = 0.2
    diffusion: float = 0.05

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def stairstep(rows: int, cols: int) -> np.ndarray:
    """Perfectly nested 0/1 matrix, row 0 the most diversified."""
    r = np.arange(rows)[:, None]
    p = np.arange(cols)[None, :]
    return (p < np.ceil(cols * (rows - r) / rows)).astype(np.int8)


def _balanced_exports(rca: np.ndarray) -> np.ndarray:
    """Embed a target RCA matrix into an EXM with a filler row and column.

    The filler country absorbs column margins and the filler product absorbs
    row margins so that ``compute_rca`` of the result equals ``rca`` on the
    core block.
    """
    C, P = rca.shape
    row = rca.sum(axis=1)
    col = rca.sum(axis=0)
    K = 2.0 * row.max() + 2.0 * P
    Kp = 2.0 * col.max() + 2.0 * C
    exm = np.zeros((C + 1, P + 1))
    exm[:C, :P] = rca
    exm[:C, P] = K - row
    exm[C, :P] = Kp - col
    exm[C, P] = K * Kp - C * K - P * Kp + rca.sum()
    return exm


def _gdp_for(n: int, years: int, rng: np.random.Generator) -> np.ndarray:
    # richer countries first, mild common growth
    base = 4.5 - 2.0 * np.arange(n) / max(n - 1, 1) + rng.normal(0, 0.1, n)
    growth = np.linspace(0.0, 0.2, years)
    return 10.0 ** (base[:, None] + growth[None, :] + rng.normal(0, 0.02, (n, years)))


def _nested_levels(spec: SynthSpec, rng) -> tuple[np.ndarray, dict]:
    truth = stairstep(spec.countries, spec.products)
    bits = np.repeat(truth[:, :, None], spec.years, axis=2)
    if spec.noise > 0:
        flips = rng.random(bits.shape) < spec.noise
        bits = np.where(flips, 1 - bits, bits)
    levels = np.where(bits == 1, spec.amplitude, -spec.amplitude)
    return levels, {"truth": bits.astype(int)}


def _flicker_levels(spec: SynthSpec, rng) -> tuple[np.ndarray, dict]:
    C, P, T = spec.countries, spec.products, spec.years
    regime = np.repeat(stairstep(C, P)[:, :, None], T, axis=2).astype(int)
    switching = rng.random((C, P)) < spec.switch_rate
    if spec.switch_year is not None:
        at = np.full((C, P), int(spec.switch_year))
    else:
        at = rng.integers(2, max(T - 2, 3), size=(C, P))
    tt = np.arange(T)[None, None, :]
    flip = switching[:, :, None] & (tt >= at[:, :, None])
    regime = np.where(flip, 1 - regime, regime)
    if spec.noise > 0:
        if not spec.noise < 0.5:
            raise ValueError("flicker noise rate must be below 0.5")
        sd = spec.amplitude / norm.ppf(1.0 - spec.noise)
    else:
        sd = 0.0
    levels = np.where(regime == 1, spec.amplitude, -spec.amplitude)
    levels = levels + rng.normal(0.0, 1.0, levels.shape) * sd
    return levels, {"truth": regime, "noise_sd": sd}


def synth_panel(spec: SynthSpec, seed: int) -> tuple[ExportPanel, GdpPanel]:
    """Deterministic synthetic export and GDP panels.

    ``nested``: stairstep Mcp, each cell-year flipped with probability
    ``spec.noise``.  ``flicker``: stairstep regimes, a fraction
    ``switch_rate`` of cells switching regime once, observed log-RCA equal to
    the regime level (+/- amplitude) plus Gaussian noise sized so that one
    observation crosses RCA = 1 with probability ``spec.noise``.
    """
    if spec.generator == "drift":
        raise ValueError("the drift generator produces trajectories; use synth_trajectories")
    builders = {"nested": _nested_levels, "flicker": _flicker_levels}
    if spec.generator not in builders:
        raise ValueError(f"unknown generator {spec.generator!r}; expected one of "
                         f"{sorted([*builders, 'drift'])}")
    rng = np.random.default_rng(seed)
    levels, extra = builders[spec.generator](spec, rng)
    rca = np.exp(levels)
    C, P, T = rca.shape
    values = np.stack([_balanced_exports(rca[:, :, t]) for t in range(T)], axis=2)
    width = spec.digit_level
    countries = Registry(tuple(f"C{c:03d}" for c in range(C)) + (FILLER_COUNTRY,))
    products = Registry(tuple(str(1000 * 10 ** (width - 4) + p).zfill(width) for p in range(P))
                        + (FILLER_PRODUCT[width],))
    years = tuple(range(spec.start_year, spec.start_year + T))
    meta = {
        "generator": spec.generator,
        "seed": int(seed),
        "spec": spec.to_dict(),
        "fillers": {"country": FILLER_COUNTRY, "product": FILLER_PRODUCT[width]},
    }
    if "noise_sd" in extra:
        meta["noise_sd"] = float(extra["noise_sd"])
    meta["truth"] = extra["truth"]
    panel = ExportPanel(countries, products, years, values, width, meta=meta)
    gdp = GdpPanel(countries, years, _gdp_for(C + 1, T, rng))
    return panel, gdp


def core_indices(panel: ExportPanel) -> tuple[np.ndarray, np.ndarray]:
    """Country and product indices excluding synthetic filler entries."""
    fill = panel.meta.get("fillers", {})
    c = np.array([i for i, code in enumerate(panel.countries) if code != fill.get("country")])
    p = np.array([i for i, code in enumerate(panel.products) if code != fill.get("product")])
    return c, p


def _drift(kind: str, strength: float):
    if kind == "none":
        return lambda z: np.zeros_like(z)
    if kind == "constant":
        return lambda z: np.broadcast_to(np.array([strength, 0.0]), z.shape)
    if kind == "sink":
        # pull toward the centre of the unit box
        return lambda z: -strength * (z - 0.5)
    if kind == "swirl":
        def f(z):
            d = z - 0.5
            return strength * np.stack([-d[..., 1], d[..., 0]], axis=-1) - 0.5 * strength * d
        return f
    raise ValueError(f"unknown drift field {kind!r}")


def synth_trajectories(spec: SynthSpec, seed: int) -> PlaneTrajectories:
    """Brownian motion with a position-dependent drift on the plane.

    ``z[t+1] = z[t] + drift(z[t]) + diffusion * N(0, I)``, started uniformly
    in the unit box.  ``drift='none'`` gives pure Brownian trajectories.
    """
    if spec.generator != "drift":
        raise ValueError(f"synth_trajectories needs the drift generator, got {spec.generator!r}")
    rng = np.random.default_rng(seed)
    field_ = _drift(spec.drift, spec.drift_strength)
    E, T = spec.entities, spec.years
    z = np.empty((E, T, 2))
    z[:, 0] = rng.random((E, 2))
    for t in range(1, T):
        z[:, t] = z[:, t - 1] + field_(z[:, t - 1]) + spec.diffusion * rng.normal(size=(E, 2))
    return PlaneTrajectories(
        tuple(f"E{e:04d}" for e in range(E)),
        tuple(range(spec.start_year, spec.start_year + T)),
        z,
        meta={"generator": "drift", "seed": int(seed), "spec": spec.to_dict()},
    )


def write_trajectories_csv(traj: PlaneTrajectories, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "year", "x", "y"])
        for e, ent in enumerate(traj.entities):
            for t, year in enumerate(traj.years):
                x, y = traj.positions[e, t]
                w.writerow([ent, year, repr(float(x)), repr(float(y))])


def load_trajectories_csv(path) -> PlaneTrajectories:
    rows = _open_rows(path, ("entity", "year", "x", "y"))
    if not rows:
        raise ValidationError("empty trajectory file")
    cells = {}
    for lineno, (e, y, x, yy) in rows:
        cells[(e, _parse_year(y, lineno))] = (_parse_float(x, lineno, "x"),
                                             _parse_float(yy, lineno, "y"))
    entities = sorted({k[0] for k in cells})
    years = range(min(k[1] for k in cells), max(k[1] for k in cells) + 1)
    pos = np.full((len(entities), len(years), 2), np.nan)
    eidx = {e: i for i, e in enumerate(entities)}
    for (e, year), xy in cells.items():
        pos[eidx[e], year - years.start] = xy
    return PlaneTrajectories(tuple(entities), tuple(years), pos)
