"""Analogue forecasting on a plane: bootstrap sampler, kernel regression, backtests.

An analogue is an observed (position, displacement) pair.  Both forecasters
weight analogues with the same Gaussian kernel of the distance to the query,
``exp(-d^2 / (2 sigma^2))``.  The kernel regression takes the weighted mean
directly; the bootstrap forecaster samples ``N`` analogues with those
(normalized) weights, averages each bootstrap, and summarizes the ``B``
bootstrap means.  For large ``B`` the two agree, with the bootstrap standard
deviation shrinking by ``sqrt(N)``.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numba as nb
import numpy as np
from scipy import stats

from ._parallel import pmap

METHODS = ("spsb", "nwkr", "random", "static", "autocorrelation")
BASELINES = ("random", "static", "autocorrelation")
_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}
_LOG_TINY = float(np.log(np.finfo(float).tiny))


# --------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class AnalogueSet:
    """Positions ``(A, 2)``, displacements ``(A, D)``, plus who and when."""

    positions: np.ndarray
    displacements: np.ndarray
    entities: tuple = ()
    times: np.ndarray | None = None

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        disp = np.asarray(self.displacements, dtype=float)
        if disp.ndim == 1:
            disp = disp[:, None]
        if pos.shape[0] != disp.shape[0]:
            raise ValueError("positions and displacements must have the same length")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "displacements", disp)
        if self.times is not None:
            object.__setattr__(self, "times", np.asarray(self.times, dtype=int))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, keep) -> "AnalogueSet":
        keep = np.asarray(keep)
        ents = tuple(np.asarray(self.entities, dtype=object)[keep]) if len(self.entities) else ()
        times = None if self.times is None else self.times[keep]
        return AnalogueSet(self.positions[keep], self.displacements[keep], ents, times)


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel; ``sigma=None`` means 0.1 x the analogues' bounding-box diagonal."""

    sigma: float | None = None
    fraction: float = 0.1

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("kernel bandwidth must be positive")

    def resolve(self, positions: np.ndarray) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        span = np.ptp(positions, axis=0) if len(positions) else np.zeros(2)
        diag = float(np.hypot(*span[:2])) if span.size >= 2 else float(span.sum())
        if not diag > 0:
            raise ValueError("analogue positions are all identical; pass an explicit bandwidth")
        return self.fraction * diag


@dataclass(frozen=True)
class ForecastResult:
    expectation: np.ndarray
    standard_deviation: np.ndarray
    method: str
    parameters: dict = field(default_factory=dict)
    effective_count: float = float("nan")
    fallback: bool = False


@dataclass(frozen=True)
class ConvergenceDiagnostics:
    """SPSb against the NWKR reference over a schedule of bootstrap counts.

    ``mae_e[i, q]`` and ``mae_sigma[i, q]`` are the relative errors for query
    ``q`` at ``schedule[i]``; ``p`` and ``phi`` are the kernel probabilities
    and sampled frequencies of every analogue for the first query at the
    largest ``B``.
    """

    schedule: tuple
    n: int
    mae_e: np.ndarray
    mae_sigma: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    divergence_p: float
    unreachable_sampled: float
    spearman: float
    spearman_p: float

    def table(self) -> list[dict]:
        return [{"B": int(b), "mae_expectation": float(np.mean(self.mae_e[i])),
                 "mae_sigma": float(np.mean(self.mae_sigma[i]))}
                for i, b in enumerate(self.schedule)]


@dataclass
class BacktestReport:
    rows: list = field(default_factory=list)
    skipped: dict = field(default_factory=dict)
    audit: dict = field(default_factory=lambda: {"forecasts": 0, "analogues": 0, "violations": 0})
    params: dict = field(default_factory=dict)

    def mae(self) -> dict:
        """``{(method, metric, dt): MAE}`` over all rows."""
        acc: dict = {}
        for r in self.rows:
            acc.setdefault((r["method"], r["metric"], r["dt"]), []).append(r["error"])
        return {k: float(np.mean(v)) for k, v in sorted(acc.items())}

    def method_mae(self, method: str) -> float:
        errs = [r["error"] for r in self.rows if r["method"] == method]
        return float(np.mean(errs)) if errs else float("nan")


# --------------------------------------------------------------------------
# kernel

def _log_weights(query, positions, sigma: float) -> np.ndarray:
    d2 = np.sum((positions - np.asarray(query, dtype=float)) ** 2, axis=-1)
    return -d2 / (2.0 * sigma * sigma)


def kernel_probabilities(query, analogues: AnalogueSet, kernel: KernelSpec = KernelSpec()) -> tuple[np.ndarray, bool]:
    """Normalized sampling probabilities, and whether the nearest-analogue fallback applied.

    Weights are exponentiated after subtracting the largest log-weight, so
    they never underflow as a whole.  If even the largest raw weight would
    underflow, the query is too far from every analogue for the kernel to
    mean anything and the nearest analogue(s) take all the mass.
    """
    if len(analogues) == 0:
        raise ValueError("need at least one analogue")
    sigma = kernel.resolve(analogues.positions)
    lw = _log_weights(query, analogues.positions, sigma)
    top = lw.max()
    if top < _LOG_TINY:
        warnings.warn("all kernel weights underflow; falling back to the nearest analogue",
                      RuntimeWarning, stacklevel=3)
        p = (lw == top).astype(float)
        return p / p.sum(), True
    w = np.exp(lw - top)
    return w / w.sum(), False


def _kish(p: np.ndarray) -> float:
    return float(1.0 / np.sum(p * p))


def nwkr_predict(query, analogues: AnalogueSet, kernel: KernelSpec = KernelSpec()) -> ForecastResult:
    """Kernel-weighted mean displacement and the weighted second-moment spread."""
    p, fb = kernel_probabilities(query, analogues, kernel)
    y = analogues.displacements
    e = p @ y
    var = np.maximum(p @ (y * y) - e * e, 0.0)
    return ForecastResult(e, np.sqrt(var), "nwkr", {"sigma": kernel.resolve(analogues.positions)},
                          _kish(p), fb)


# --------------------------------------------------------------------------
# bootstrap sampler

@nb.njit(cache=True)
def _alias_table(p):
    # Vose's alias method: one uniform per draw
    A = p.shape[0]
    q = p * A
    prob = np.ones(A)
    alias = np.arange(A)
    small = np.empty(A, np.int64)
    large = np.empty(A, np.int64)
    ns = nl = 0
    for i in range(A):
        if q[i] < 1.0:
            small[ns] = i
            ns += 1
        else:
            large[nl] = i
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        s = small[ns]
        nl -= 1
        g = large[nl]
        prob[s] = q[s]
        alias[s] = g
        q[g] = (q[g] + q[s]) - 1.0
        if q[g] < 1.0:
            small[ns] = g
            ns += 1
        else:
            large[nl] = g
            nl += 1
    return prob, alias


@nb.njit(cache=True)
def _bootstrap_means(prob, alias, y, u, n, out, counts):
    A = prob.shape[0]
    D = y.shape[1]
    for b in range(out.shape[0]):
        for d in range(D):
            out[b, d] = 0.0
        for k in range(n):
            z = u[b * n + k] * A
            j = int(z)
            if j >= A:
                j = A - 1
            i = j if z - j < prob[j] else alias[j]
            counts[i] += 1
            for d in range(D):
                out[b, d] += y[i, d]
        for d in range(D):
            out[b, d] /= n


def _bootstrap(p, y, B: int, N: int, rng: np.random.Generator, chunk_draws: int = 1 << 21):
    prob, alias = _alias_table(np.ascontiguousarray(p, dtype=float))
    y = np.ascontiguousarray(y, dtype=float)
    v = np.empty((B, y.shape[1]))
    counts = np.zeros(len(p), dtype=np.int64)
    step = max(1, chunk_draws // N)
    for s in range(0, B, step):
        b = min(step, B - s)
        _bootstrap_means(prob, alias, y, rng.random(b * N), N, v[s:s + b], counts)
    return v, counts


def spsb_predict(query, analogues: AnalogueSet, kernel: KernelSpec = KernelSpec(),
                 B: int = 1000, N: int = 100, seed=0, return_frequencies: bool = False):
    """Bootstrap forecast: mean and (B-1) standard deviation of B bootstrap means.

    ``seed`` may be an int, a SeedSequence or a Generator.  With
    ``return_frequencies`` the sampled frequency of every analogue is
    returned as a second value.
    """
    if B < 1 or N < 1:
        raise ValueError("B and N must be at least 1")
    p, fb = kernel_probabilities(query, analogues, kernel)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v, counts = _bootstrap(p, analogues.displacements, B, N, rng)
    e = v.mean(axis=0)
    sd = v.std(axis=0, ddof=1) if B > 1 else np.zeros_like(e)
    seed_repr = seed if isinstance(seed, (int, np.integer)) else None
    res = ForecastResult(e, sd, "spsb",
                         {"B": B, "N": N, "sigma": kernel.resolve(analogues.positions), "seed": seed_repr},
                         _kish(p), fb)
    if return_frequencies:
        return res, counts / counts.sum()
    return res


def _relative(a, b) -> float:
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.mean(np.abs((a - b) / b)))


def convergence_scan(queries, analogues: AnalogueSet, kernel: KernelSpec = KernelSpec(),
                     schedule: Sequence[int] = (100, 1000, 10_000, 100_000), N: int = 100,
                     seed: int = 0) -> ConvergenceDiagnostics:
    """Relative error of SPSb expectation and sqrt(N)-scaled deviation against NWKR."""
    schedule = tuple(int(b) for b in schedule)
    if any(b2 <= b1 for b1, b2 in zip(schedule, schedule[1:])):
        raise ValueError("bootstrap schedule must be increasing")
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    Q = len(queries)
    mae_e = np.empty((len(schedule), Q))
    mae_s = np.empty((len(schedule), Q))
    p0 = phi0 = None
    for q, x in enumerate(queries):
        ref = nwkr_predict(x, analogues, kernel)
        for i, B in enumerate(schedule):
            rng = np.random.default_rng([seed, q, B])
            last = q == 0 and i == len(schedule) - 1
            out = spsb_predict(x, analogues, kernel, B, N, rng, return_frequencies=last)
            res = out[0] if last else out
            if last:
                phi0 = out[1]
                p0, _ = kernel_probabilities(x, analogues, kernel)
            mae_e[i, q] = _relative(res.expectation, ref.expectation)
            mae_s[i, q] = _relative(np.sqrt(N) * res.standard_deviation, ref.standard_deviation)
    level, frac = _divergence(p0, phi0, schedule[-1] * N)
    bs = np.repeat(np.array(schedule, dtype=float), Q)
    rho, pval = stats.spearmanr(bs, mae_e.ravel())
    return ConvergenceDiagnostics(schedule, N, mae_e, mae_s, p0, phi0, level, frac,
                                  float(rho), float(pval))


def _divergence(p: np.ndarray, phi: np.ndarray, draws: int) -> tuple[float, float]:
    """Largest probability decade whose analogues are typically mis-sampled by > 50%,
    and the fraction of analogues with p < 1/draws that were sampled at all."""
    level = 0.0
    pos = p > 0
    decades = np.floor(np.log10(p[pos]))
    rel = np.abs(phi[pos] - p[pos]) / p[pos]
    for d in np.unique(decades)[::-1]:
        if np.median(rel[decades == d]) > 0.5:
            level = float(10.0 ** (d + 1))
            break
    rare = p < 1.0 / draws
    frac = float(np.mean(phi[rare] > 0)) if rare.any() else 0.0
    return level, frac


def write_convergence_csv(path, diag: ConvergenceDiagnostics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("B,mae_expectation,mae_sigma\n")
        for r in diag.table():
            fh.write(f"{r['B']},{r['mae_expectation']!r},{r['mae_sigma']!r}\n")


def write_kernel_prob_csv(path, diag: ConvergenceDiagnostics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("analogue,p,phi\n")
        for i, (a, b) in enumerate(zip(diag.p, diag.phi)):
            fh.write(f"{i},{float(a)!r},{float(b)!r}\n")


# --------------------------------------------------------------------------
# baselines and growth rates

def cagr(x_t, x_tdt, dt) -> np.ndarray | float:
    """Compound annual growth rate in percent."""
    a, b = np.asarray(x_t, dtype=float), np.asarray(x_tdt, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0) or np.any(~np.isfinite(a)) or np.any(~np.isfinite(b)):
        raise ValueError("CAGR needs positive values")
    if np.any(np.asarray(dt) < 1):
        raise ValueError("dt must be at least 1")
    out = ((b / a) ** (1.0 / np.asarray(dt, dtype=float)) - 1.0) * 100.0
    return float(out) if np.ndim(out) == 0 else out


def baseline_predict(kind: str, analogues: AnalogueSet | None = None, previous=None,
                     seed=0, dims: int | None = None) -> ForecastResult | None:
    """``static``: zero; ``autocorrelation``: the previous displacement (None without one);
    ``random``: one analogue displacement drawn uniformly."""
    if kind == "static":
        D = dims if dims is not None else (analogues.displacements.shape[1] if analogues is not None else 1)
        return ForecastResult(np.zeros(D), np.zeros(D), "static")
    if kind == "autocorrelation":
        if previous is None or not np.all(np.isfinite(previous)):
            return None
        prev = np.atleast_1d(np.asarray(previous, dtype=float))
        return ForecastResult(prev, np.zeros_like(prev), "autocorrelation")
    if kind == "random":
        if analogues is None or len(analogues) == 0:
            raise ValueError("need at least one analogue")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        i = int(rng.integers(len(analogues)))
        d = analogues.displacements[i]
        return ForecastResult(d.copy(), np.zeros_like(d), "random", {"index": i})
    raise ValueError(f"unknown baseline {kind!r}")


# --------------------------------------------------------------------------
# backtesting

@dataclass(frozen=True)
class BacktestPlane:
    """Trajectories in plane coordinates and how each axis maps back to a metric.

    ``transforms[k]`` is ``log10`` (metric = 10**coord) or ``identity``.
    """

    entities: tuple
    years: tuple
    positions: np.ndarray
    metrics: tuple = ("x", "y")
    transforms: tuple = ("log10", "log10")

    def values(self, coords: np.ndarray) -> np.ndarray:
        out = np.array(coords, dtype=float, copy=True)
        for k, tr in enumerate(self.transforms):
            if tr == "log10":
                out[..., k] = 10.0 ** out[..., k]
            elif tr != "identity":
                raise ValueError(f"unknown axis transform {tr!r}")
        return out


def plane_from_series(series, coords: str = "log") -> BacktestPlane:
    """Products on the (Complexity, logPRODY) plane: x = log10 Complexity, y = logPRODY."""
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(series.complexity > 0, np.log10(series.complexity), np.nan)
    pos = np.stack([x, series.logprody], axis=-1)
    return BacktestPlane(series.products.codes, tuple(series.years), pos,
                         ("complexity", "logprody"), ("log10", "identity"))


def plane_from_trajectories(traj, transforms=("log10", "log10"), metrics=("x", "y")) -> BacktestPlane:
    """Wrap plane trajectories; by default each coordinate is the log10 of a positive metric."""
    return BacktestPlane(tuple(traj.entities), tuple(traj.years), np.asarray(traj.positions, dtype=float),
                         tuple(metrics), tuple(transforms))


def analogues_before(plane: BacktestPlane, t_hat: int, dt: int) -> AnalogueSet:
    """Every displacement over ``dt`` years that is complete by index ``t_hat``."""
    pos = plane.positions
    if t_hat - dt < 0:
        return AnalogueSet(np.empty((0, 2)), np.empty((0, 2)), (), np.empty(0, int))
    start = pos[:, : t_hat - dt + 1]
    end = pos[:, dt: t_hat + 1]
    ok = np.isfinite(start).all(axis=-1) & np.isfinite(end).all(axis=-1)
    e_idx, t_idx = np.nonzero(ok)
    return AnalogueSet(start[ok], (end - start)[ok],
                       tuple(plane.entities[e] for e in e_idx), t_idx)


def _stream(seed: int, entity: str, year: int, dt: int, method: str) -> np.random.Generator:
    key = [int(seed), zlib.crc32(str(entity).encode()), int(year), int(dt), _METHOD_CODE[method]]
    return np.random.default_rng(np.random.SeedSequence(key))


def _backtest_job(args):
    plane, t_hat, dt, methods, kernel, B, N, seed = args
    pos = plane.positions
    year = plane.years[t_hat]
    rows: list = []
    skipped = {"no_analogues": 0, "no_history": 0}
    an = analogues_before(plane, t_hat, dt)
    # construction audit: every analogue must start before t_hat and end by it
    violations = int(np.sum(an.times >= t_hat) + np.sum(an.times + dt > t_hat))
    targets = [e for e in range(len(plane.entities))
               if np.isfinite(pos[e, t_hat]).all() and np.isfinite(pos[e, t_hat + dt]).all()]
    if not targets:
        return rows, skipped, (0, 0, violations)
    if len(an) == 0:
        skipped["no_analogues"] += len(targets)
        return rows, skipped, (0, 0, violations)
    sigma = kernel.resolve(an.positions)
    k = KernelSpec(sigma)
    n_fore = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for e in targets:
            ent = plane.entities[e]
            x0, x1 = pos[e, t_hat], pos[e, t_hat + dt]
            v0, v1 = plane.values(x0), plane.values(x1)
            if np.any(v0 <= 0) or np.any(v1 <= 0):
                skipped["no_history"] += 1
                continue
            observed = cagr(v0, v1, dt)
            for m in methods:
                if m == "nwkr":
                    res = nwkr_predict(x0, an, k)
                elif m == "spsb":
                    res = spsb_predict(x0, an, k, B, N, _stream(seed, ent, year, dt, "spsb"))
                elif m == "random":
                    res = baseline_predict("random", an, seed=_stream(seed, ent, year, dt, "random"))
                elif m == "static":
                    res = baseline_predict("static", dims=2)
                else:
                    prev = pos[e, t_hat] - pos[e, t_hat - dt] if t_hat - dt >= 0 else None
                    res = baseline_predict("autocorrelation", previous=prev)
                    if res is None:
                        skipped["no_history"] += 1
                        continue
                vf = plane.values(x0 + res.expectation)
                if np.any(vf <= 0) or not np.all(np.isfinite(vf)):
                    skipped["no_history"] += 1
                    continue
                fore = cagr(v0, vf, dt)
                for a, metric in enumerate(plane.metrics):
                    rows.append({"entity": ent, "year": int(year), "dt": int(dt), "metric": metric,
                                 "method": m, "forecast": float(fore[a]),
                                 "observed": float(observed[a]),
                                 "error": float(abs(observed[a] - fore[a]))})
                n_fore += 1
    return rows, skipped, (n_fore, n_fore * len(an), violations)


def backtest(plane: BacktestPlane, methods: Sequence[str] = METHODS, dts: Sequence[int] = (3, 4, 5),
             kernel: KernelSpec = KernelSpec(), B: int = 1000, N: int = 100, seed: int = 0,
             workers: int = 1) -> BacktestReport:
    """Forecast every (entity, year, dt) with a strict temporal split.

    Forecasts start at index ``t_hat`` and use only displacements that end
    by ``t_hat``; the target is the CAGR of each metric over ``dt`` years.
    """
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods {sorted(bad)}")
    T = len(plane.years)
    jobs = [(plane, t_hat, dt, tuple(methods), kernel, B, N, seed)
            for dt in dts for t_hat in range(T - dt)]
    rep = BacktestReport(params={"methods": list(methods), "dts": [int(d) for d in dts],
                                 "sigma": kernel.sigma, "B": B, "N": N, "seed": seed})
    for rows, skipped, (nf, na, viol) in pmap(_backtest_job, jobs, workers):
        rep.rows.extend(rows)
        for key, v in skipped.items():
            rep.skipped[key] = rep.skipped.get(key, 0) + v
        rep.audit["forecasts"] += nf
        rep.audit["analogues"] += na
        rep.audit["violations"] += viol
    return rep


def write_backtest(report: BacktestReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("entity,year,dt,metric,method,forecast,observed,error\n")
        for r in report.rows:
            fh.write(f"{r['entity']},{r['year']},{r['dt']},{r['metric']},{r['method']},"
                     f"{r['forecast']!r},{r['observed']!r},{r['error']!r}\n")
    if json_path is not None:
        summary = {
            "mae": [{"method": m, "metric": k, "dt": d, "mae": v}
                    for (m, k, d), v in report.mae().items()],
            "skipped": dict(sorted(report.skipped.items())),
            "audit": report.audit,
        }
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --------------------------------------------------------------------------
# country-level reconstruction

@dataclass(frozen=True)
class GdpInversion:
    log_gdp: np.ndarray
    residual: float
    rank: int
    rank_deficient: bool


def reconstruct_fitness(mcp, complexity) -> np.ndarray:
    """Un-normalized fitness: the sum of the complexities of each country's exports."""
    m = mcp.m if hasattr(mcp, "m") else np.asarray(mcp)
    c = np.asarray(complexity, dtype=float)
    if m.shape[1] != c.shape[0]:
        raise ValueError(f"matrix has {m.shape[1]} products but {c.shape[0]} complexities were given")
    return m.astype(float) @ c


def invert_nrca_gdp(nrca, logprody) -> GdpInversion:
    """Least-squares log10 GDP from ``logprody = nrca^T log_gdp``.

    ``nrca`` is countries x products with unit column sums.  Rank-deficient
    systems get the minimum-norm solution and a flag.
    """
    w = nrca.weights if hasattr(nrca, "weights") else np.asarray(nrca, dtype=float)
    lp = np.asarray(logprody, dtype=float)
    if w.shape[1] != lp.shape[0]:
        raise ValueError(f"nRCA has {w.shape[1]} products but {lp.shape[0]} logPRODY values were given")
    sol, _, rank, _ = np.linalg.lstsq(w.T, lp, rcond=None)
    resid = float(np.linalg.norm(w.T @ sol - lp))
    return GdpInversion(sol, resid, int(rank), int(rank) < w.shape[0])
