"""``ectk`` command line: synth, regularize, metrics, analyze, backtest, converge.

Each subcommand reads the files of an earlier stage and writes CSV/JSON
reports, SVG figures and its resolved ``config.txt`` into one output
directory.  Exit codes: 0 success, 1 computation failure, 2 bad input or
configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, RunConfig
from .data import (
    PanelError,
    PlaneTrajectories,
    Registry,
    SynthSpec,
    align_gdp,
    load_export_csv,
    load_gdp_csv,
    load_trajectories_csv,
    synth_panel,
    synth_trajectories,
    write_export_csv,
    write_gdp_csv,
    write_provenance,
    write_trajectories_csv,
)
from .forecasting import (
    AnalogueSet,
    KernelSpec,
    analogues_before,
    backtest,
    convergence_scan,
    plane_from_series,
    plane_from_trajectories,
    write_backtest,
    write_convergence_csv,
    write_kernel_prob_csv,
)
from .hmm import flip_count, regularize_panel, save_models
from .metrics import (
    BinaryExportMatrix,
    MetricSeries,
    compute_metric_series,
    compute_rca,
    read_metric_csv,
    threshold_mcp,
    write_metric_csv,
)
from .nestedness import nodf, null_ensemble, significance, write_replicates_csv
from .plane import (
    GridSpec,
    PlaneSamples,
    build_h_field,
    build_velocity_field,
    displacement_records,
    fit_gradient_model,
    minima_line,
    plane_from_metrics,
    write_grid_csv,
)

ENV_OUTPUT_ROOT = "ECTK_OUTPUT_ROOT"
COMMANDS = ("synth", "regularize", "metrics", "analyze", "backtest", "converge")


class InputError(Exception):
    """Missing or unreadable input (exit code 2)."""


# --------------------------------------------------------------------------
# small I/O helpers

def _need(path: str, what: str) -> Path:
    if not path:
        raise InputError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {path}")
    return p


def _json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plain(obj):
    """JSON-safe copy: arrays become lists, non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def write_matrices_csv(path, matrices: dict) -> None:
    """Dense ``year,country,product,m`` rows of yearly binary matrices."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "country", "product", "m"])
        for year in sorted(matrices):
            mat = matrices[year]
            for c, cc in enumerate(mat.countries.codes):
                for p, pc in enumerate(mat.products.codes):
                    w.writerow([year, cc, pc, int(mat.m[c, p])])


def read_matrices_csv(path) -> dict:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["year", "country", "product", "m"]:
            raise InputError(f"{path}: expected header year,country,product,m")
        for y, c, p, m in reader:
            rows.append((int(y), c, p, int(m)))
    if not rows:
        raise InputError(f"{path}: no matrix rows")
    countries = Registry(tuple(sorted({r[1] for r in rows})))
    products = Registry(tuple(sorted({r[2] for r in rows})))
    prov = "thresholded"
    meta = Path(path).with_name("matrices.json")
    if meta.exists():
        prov = json.loads(meta.read_text())["provenance"]
    out = {}
    for year in sorted({r[0] for r in rows}):
        out[year] = np.zeros((len(countries), len(products)), dtype=np.int8)
    for y, c, p, m in rows:
        out[y][countries.index(c), products.index(p)] = m
    return {y: BinaryExportMatrix(m, y, prov, countries, products) for y, m in out.items()}


def read_metric_dir(path) -> MetricSeries:
    d = _need(path, "metrics directory")
    series = {}
    for name in ("fitness", "complexity", "logprody", "herfindahl"):
        f = d / f"{name}.csv"
        if f.exists():
            series[name] = read_metric_csv(f)
    if "complexity" not in series:
        raise InputError(f"metrics directory has no complexity.csv: {path}")
    years = sorted({y for _, ys, _ in series.values() for y in ys})
    years = tuple(range(years[0], years[-1] + 1))

    def aligned(name, entities):
        out = np.full((len(entities), len(years)), np.nan)
        if name in series:
            ents, ys, vals = series[name]
            idx = {e: i for i, e in enumerate(entities)}
            for i, e in enumerate(ents):
                out[idx[e], ys[0] - years[0]: ys[0] - years[0] + len(ys)] = vals[i]
        return out

    products = sorted({e for k in ("complexity", "logprody", "herfindahl") if k in series
                       for e in series[k][0]})
    countries = sorted(series["fitness"][0]) if "fitness" in series else []
    return MetricSeries(Registry(tuple(countries)), Registry(tuple(products)), years,
                        aligned("fitness", countries), aligned("complexity", products),
                        aligned("logprody", products), aligned("herfindahl", products))


def _trajectories_or_series(cfg: RunConfig):
    """Plane data from ``metrics`` (a metrics directory) or ``input`` (trajectory CSV)."""
    if cfg.metrics:
        return read_metric_dir(cfg.metrics)
    return load_trajectories_csv(_need(cfg.input, "trajectory file"))


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: RunConfig, out: Path, workers: int) -> None:
    spec = SynthSpec(cfg.generator, countries=cfg.countries, products=cfg.products, years=cfg.years,
                     digit_level=cfg.digit_level, noise=cfg.noise, entities=cfg.entities,
                     drift=cfg.drift, drift_strength=cfg.drift_strength, diffusion=cfg.diffusion)
    if cfg.generator == "drift":
        traj = synth_trajectories(spec, cfg.seed)
        write_trajectories_csv(traj, out / "trajectories.csv")
        write_provenance(out / "provenance.json", _plain(traj.meta))
        return
    panel, gdp = synth_panel(spec, cfg.seed)
    write_export_csv(panel, out / "exports.csv")
    write_gdp_csv(gdp, out / "gdp.csv")
    meta = {k: v for k, v in panel.meta.items() if k != "truth"}
    write_provenance(out / "provenance.json", _plain(meta))


def _regularized(cfg: RunConfig, panel, workers: int):
    if cfg.regularization == "hmm":
        reg = regularize_panel(panel, cfg.hmm_rule, seed=cfg.seed, workers=workers)
        return reg.matrices, reg.models
    return {y: threshold_mcp(compute_rca(panel, y)) for y in panel.years}, None


def cmd_regularize(cfg: RunConfig, out: Path, workers: int) -> None:
    panel = load_export_csv(_need(cfg.input, "export file"), cfg.digit_level)
    mats, models = _regularized(cfg, panel, workers)
    write_matrices_csv(out / "matrices.csv", mats)
    prov = "hmm-regularized" if models is not None else "thresholded"
    _json(out / "matrices.json", {"provenance": prov, "rule": cfg.hmm_rule if models else None})
    raw = flip_count([threshold_mcp(compute_rca(panel, y)) for y in panel.years])
    reg = flip_count([mats[y] for y in panel.years])
    with open(out / "flips.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["country", "product", "flips_threshold", "flips_regularized"])
        for c, cc in enumerate(panel.countries.codes):
            for p, pc in enumerate(panel.products.codes):
                w.writerow([cc, pc, int(raw[c, p]), int(reg[c, p])])
    _json(out / "flips.json", {"mean_flips_threshold": float(raw.mean()),
                               "mean_flips_regularized": float(reg.mean()),
                               "mode": cfg.regularization})
    if models is not None:
        save_models(out / "models.json", models)
    plotting.flips_svg(raw, reg, out / "flips.svg")


def cmd_metrics(cfg: RunConfig, out: Path, workers: int) -> None:
    panel = load_export_csv(_need(cfg.input, "export file"), cfg.digit_level)
    gdp = None
    if cfg.gdp:
        gdp, _ = align_gdp(load_gdp_csv(_need(cfg.gdp, "GDP file")), panel)
    if cfg.matrices:
        mats = read_matrices_csv(_need(cfg.matrices, "matrix directory") / "matrices.csv")
        mats = _reindex(mats, panel)
    elif cfg.regularization == "hmm":
        mats, _ = _regularized(cfg, panel, workers)
    else:
        mats = None
    series = compute_metric_series(panel, gdp, mats)
    write_metric_csv(out / "fitness.csv", panel.years, panel.countries, series.fitness)
    write_metric_csv(out / "complexity.csv", panel.years, panel.products, series.complexity)
    write_metric_csv(out / "herfindahl.csv", panel.years, panel.products, series.herfindahl)
    if gdp is not None:
        write_metric_csv(out / "logprody.csv", panel.years, panel.products, series.logprody)
    with open(out / "rca_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "mean_rca", "median_rca", "fraction_rca_ge_1"])
        for year in panel.years:
            r = compute_rca(panel, year).rca
            w.writerow([year, repr(float(r.mean())), repr(float(np.median(r))),
                        repr(float((r >= 1).mean()))])
    _json(out / "metrics.json", _plain({"notes": series.notes,
                                        "matrices": "given" if cfg.matrices else cfg.regularization}))


def _reindex(mats: dict, panel) -> dict:
    out = {}
    for year in panel.years:
        if year not in mats:
            raise InputError(f"matrix file has no year {year}")
        m = mats[year]
        ci = m.countries.indices(panel.countries.codes)
        pi = m.products.indices(panel.products.codes)
        out[year] = BinaryExportMatrix(m.m[np.ix_(ci, pi)], year, m.provenance,
                                       panel.countries, panel.products)
    return out


def cmd_analyze(cfg: RunConfig, out: Path, workers: int) -> None:
    if not (cfg.metrics or cfg.input or cfg.datasets):
        raise InputError("analyze needs metrics, input (trajectories) or datasets")
    if cfg.metrics or cfg.input:
        _analyze_plane(cfg, out)
    if cfg.datasets:
        _analyze_nestedness(cfg, out, workers)


def _analyze_plane(cfg: RunConfig, out: Path) -> None:
    data = _trajectories_or_series(cfg)
    if isinstance(data, PlaneTrajectories):
        traj, H = data, None
        labels = ("x", "y")
    else:
        traj, H = plane_from_metrics(data, cfg.coords)
        labels = ("Complexity", "logPRODY")
    pos = traj.positions
    if cfg.coords == "tied-rank" and H is not None:
        grid = GridSpec(cfg.grid_nx, cfg.grid_ny, min_count=cfg.grid_min_count)
    else:
        grid = GridSpec.covering(pos, cfg.grid_nx, cfg.grid_ny, cfg.grid_min_count)
    origin, disp = displacement_records(traj)
    v = build_velocity_field((origin, disp), grid)
    report: dict = {"grid": {"nx": grid.nx, "ny": grid.ny, "x": [grid.x0, grid.x1],
                             "y": [grid.y0, grid.y1], "min_count": grid.min_count},
                    "displacements": int(len(origin)), "populated_cells": int((~v.mask).sum())}
    h = None
    lines = []
    if H is not None:
        flat = pos.reshape(-1, 2)
        hv = H.reshape(-1)
        ok = np.isfinite(flat).all(axis=1) & np.isfinite(hv)
        h = build_h_field(flat[ok], hv[ok], grid)
        try:
            fit = fit_gradient_model(v, h)
            report["fit"] = {"k_c": fit.k_c, "k_l": fit.k_l, "r2_c": fit.r2_c, "r2_l": fit.r2_l,
                             "cells": fit.n_cells}
        except ValueError as e:
            report["fit"] = {"error": str(e)}
        samples = PlaneSamples(grid, origin, disp, flat[ok], hv[ok])
        for which, s in (("velocity", cfg.seed), ("h", cfg.seed + 1)):
            lines.append(minima_line(samples, which, cfg.minima_bootstrap, seed=s))
        with open(out / "minima.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["line", "cellX", "x", "raw", "smoothed", "stderr"])
            for ln in lines:
                for i in range(len(ln.x)):
                    w.writerow([ln.which, i, repr(float(ln.x[i])), _num(ln.raw[i]),
                                _num(ln.smoothed[i]), _num(ln.stderr[i])])
        report["minima"] = [{"line": ln.which, "bandwidth": ln.bandwidth,
                             "degenerate": ln.degenerate} for ln in lines]
        plotting.heatmap_svg(h, out / "heatmap.svg", lines, labels=labels)
    write_grid_csv(out / "grid.csv", v, h)
    report["arrows"] = plotting.quiver_svg(v, out / "quiver.svg", labels=labels)
    plotting.density_svg(pos.reshape(-1, 2), grid, out / "density.svg", labels=labels)
    _json(out / "plane.json", _plain(report))


def _num(x) -> str:
    return repr(float(x)) if np.isfinite(x) else ""


def _parse_datasets(spec: str) -> list[tuple[str, Path]]:
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        label, _, path = item.partition("=")
        if not path:
            label, path = Path(item).name, item
        out.append((label, _need(path, "dataset directory")))
    return out


def _analyze_nestedness(cfg: RunConfig, out: Path, workers: int) -> None:
    results, ensembles, by_year = {}, {}, []
    for label, path in _parse_datasets(cfg.datasets):
        mats = read_matrices_csv(path / "matrices.csv")
        years = sorted(mats)
        vals = []
        for y in years:
            r = nodf(mats[y].m)
            vals.append(r.nodf)
            by_year.append((label, y, r.nodf, r.rows, r.cols))
        year = cfg.null_year if cfg.null_year else years[-1]
        if year not in mats:
            raise InputError(f"dataset {label} has no year {year}")
        observed = nodf(mats[year].m)
        nulls, ens_list = {}, []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            for model in cfg.str_list("null_models"):
                ens = null_ensemble(mats[year].m, model, cfg.null_count, seed=cfg.seed, workers=workers)
                ens_list.append(ens)
                nulls[model] = significance(observed, ens)
                nulls[model]["degenerate"] = ens.degenerate
                nulls[model]["marginals_preserved"] = ens.marginals_preserved
        ensembles[label] = ens_list
        results[label] = {"nodf": float(np.mean(vals)), "null_year": year,
                          "nodf_null_year": observed.nodf, "nulls": nulls}
    with open(out / "nodf_by_year.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "year", "nodf", "rows", "cols"])
        for label, y, n, r, c in by_year:
            w.writerow([label, y, repr(float(n)), repr(float(r)), repr(float(c))])
    write_replicates_csv(out / "replicates.csv", ensembles)
    _json(out / "nodf.json", _plain(results))
    plotting.nodf_svg(results, out / "nodf.svg")


def cmd_backtest(cfg: RunConfig, out: Path, workers: int) -> None:
    data = _trajectories_or_series(cfg)
    plane = plane_from_trajectories(data) if isinstance(data, PlaneTrajectories) else plane_from_series(data)
    rep = backtest(plane, cfg.str_list("methods"), cfg.int_list("dts"), KernelSpec(cfg.kernel_sigma),
                   cfg.B, cfg.N, cfg.seed, workers)
    write_backtest(rep, out / "backtest.csv", out / "backtest.json")
    plotting.backtest_svg(rep.mae(), out / "backtest.svg")
    if rep.audit["violations"]:
        raise RuntimeError(f"leakage audit failed: {rep.audit['violations']} analogues from the future")


def _synthetic_analogues(n: int, seed: int) -> AnalogueSet:
    rng = np.random.default_rng(seed)
    pos = rng.random((n, 2))
    disp = 1 + 0.5 * np.sin(2 * np.pi * pos[:, 0]) * np.cos(2 * np.pi * pos[:, 1]) + rng.normal(0, 0.3, n)
    return AnalogueSet(pos, disp)


def cmd_converge(cfg: RunConfig, out: Path, workers: int) -> None:
    if cfg.metrics or cfg.input:
        data = _trajectories_or_series(cfg)
        plane = plane_from_trajectories(data) if isinstance(data, PlaneTrajectories) else plane_from_series(data)
        dt = cfg.int_list("dts")[0]
        an = analogues_before(plane, len(plane.years) - 1, dt)
        if len(an) == 0:
            raise InputError("no complete displacements to use as analogues")
    else:
        an = _synthetic_analogues(cfg.analogues, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    lo, hi = an.positions.min(axis=0), an.positions.max(axis=0)
    queries = lo + (hi - lo) * (0.1 + 0.8 * rng.random((cfg.queries, 2)))
    diag = convergence_scan(queries, an, KernelSpec(cfg.kernel_sigma), cfg.int_list("schedule"),
                            cfg.N, cfg.seed)
    write_convergence_csv(out / "convergence.csv", diag)
    write_kernel_prob_csv(out / "kernel_prob.csv", diag)
    _json(out / "convergence.json", _plain({
        "table": diag.table(), "spearman": diag.spearman, "spearman_p": diag.spearman_p,
        "divergence_p": diag.divergence_p, "rare_sampled_fraction": diag.unreachable_sampled,
        "analogues": len(an), "queries": cfg.queries}))
    plotting.convergence_svg(diag.table(), out / "convergence.svg")
    plotting.kernel_prob_svg(diag.p, diag.phi, out / "kernel_prob.svg")


HANDLERS = {"synth": cmd_synth, "regularize": cmd_regularize, "metrics": cmd_metrics,
            "analyze": cmd_analyze, "backtest": cmd_backtest, "converge": cmd_converge}


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ectk", description="Economic complexity toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        for f in fields(RunConfig):
            if f.name == "command":
                continue
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_text(_need(args.config, "config file").read_text(encoding="utf-8"))
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if f.name != "command" and getattr(args, f.name, None) is not None}
    cfg = cfg.with_strings(overrides).replace(command=args.command)
    if not cfg.output:
        root = os.environ.get(ENV_OUTPUT_ROOT, "ectk-output")
        cfg = cfg.replace(output=str(Path(root) / args.command))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    try:
        cfg = resolve_config(args)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        (out / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")
        HANDLERS[args.command](cfg, out, args.workers)
    except (InputError, ConfigError, PanelError, FileNotFoundError) as e:
        print(f"ectk {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:          # computation failure
        print(f"ectk {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"ectk {args.command}: wrote {cfg.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
