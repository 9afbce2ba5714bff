"""NODF nestedness and its significance against randomized null models.

Null models:

``EE``
    every cell is an independent Bernoulli draw with the observed fill.
``DD``
    cell (i, j) is filled with probability ``(k_i / C + k_j / R) / 2``.
``FF``
    row and column sums are preserved exactly; replicates are produced by
    curveball trades started from the observed matrix.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ._parallel import pmap

__all__ = [
    "NodfResult",
    "NullEnsemble",
    "nodf",
    "null_ensemble",
    "significance",
    "curveball",
    "write_replicates_csv",
    "ensemble_summary",
    "NULL_MODELS",
]

NULL_MODELS = ("EE", "DD", "FF")


@dataclass(frozen=True)
class NodfResult:
    nodf: float
    rows: float
    cols: float


@dataclass
class NullEnsemble:
    model: str
    count: int
    values: np.ndarray
    mean: float
    std: float
    degenerate: bool = False
    marginals_preserved: bool | None = None
    mixing_autocorrelation: float | None = None
    notes: list = field(default_factory=list)
    matrices: list | None = field(default=None, repr=False)


def _paired_sum(m: np.ndarray) -> tuple[float, int]:
    """Sum of paired nestedness over unordered row pairs with different degree."""
    k = m.sum(axis=1)
    n = len(k)
    if n < 2:
        return 0.0, 0
    overlap = m @ m.T
    kmin = np.minimum(k[:, None], k[None, :])
    iu = np.triu_indices(n, 1)
    ov, km = overlap[iu], kmin[iu]
    ok = (k[:, None] != k[None, :])[iu] & (km > 0)
    return float(100.0 * np.sum(ov[ok] / km[ok])), n * (n - 1) // 2


def nodf(matrix) -> NodfResult:
    """NODF of a binary matrix, between 0 and 100.

    For each pair of rows with different degree the paired value is the
    percentage of the lower-degree row's entries shared with the other row;
    equal-degree pairs score zero.  Columns are treated the same way and the
    total is the mean over all row and column pairs.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise ValueError(f"NODF needs at least a 2x2 matrix, got shape {m.shape}")
    rs, rp = _paired_sum(m)
    cs, cp = _paired_sum(m.T)
    return NodfResult((rs + cs) / (rp + cp), rs / rp, cs / cp)


def curveball(m: np.ndarray, trades: int, rng: np.random.Generator) -> np.ndarray:
    """Apply ``trades`` curveball trades; row and column sums are preserved."""
    rows = [set(np.flatnonzero(r)) for r in np.asarray(m)]
    n = len(rows)
    pairs = rng.integers(0, n, size=(trades, 2))
    for a, b in pairs:
        if a == b:
            continue
        ra, rb = rows[a], rows[b]
        only_a = ra - rb
        only_b = rb - ra
        if not only_a or not only_b:
            continue
        pool = np.array(sorted(only_a | only_b))
        rng.shuffle(pool)
        na = len(only_a)
        shared = ra & rb
        rows[a] = shared | set(pool[:na].tolist())
        rows[b] = shared | set(pool[na:].tolist())
    out = np.zeros_like(np.asarray(m), dtype=np.int8)
    for i, r in enumerate(rows):
        out[i, list(r)] = 1
    return out


def _has_checkerboard(m: np.ndarray) -> bool:
    # a 2x2 swappable submatrix exists iff some pair of rows is not nested
    rows = m.astype(bool)
    for i in range(len(rows)):
        a = rows[i]
        b = rows[i + 1:]
        if b.size and np.any((a & ~b).any(axis=1) & (b & ~a).any(axis=1)):
            return True
    return False


def _replicate(args):
    m, model, seed, index, burn_in = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    R, C = m.shape
    if model == "EE":
        p = m.sum() / (R * C)
        rep = (rng.random((R, C)) < p).astype(np.int8)
    elif model == "DD":
        k_row = m.sum(axis=1) / C
        k_col = m.sum(axis=0) / R
        p = (k_row[:, None] + k_col[None, :]) / 2.0
        rep = (rng.random((R, C)) < p).astype(np.int8)
    else:
        rep = curveball(m, burn_in, rng)
    return rep


def _lag1_autocorrelation(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float) - np.mean(x)
    den = np.dot(x, x)
    return float(np.dot(x[:-1], x[1:]) / den) if den > 0 else 0.0


def null_ensemble(matrix, model: str, count: int = 100, seed: int = 0,
                  burn_in: int | None = None, workers: int = 1,
                  mixing_check: bool = False, keep_matrices: bool = False) -> NullEnsemble:
    """Generate ``count`` null replicates of ``matrix`` and their NODF.

    Replicate ``i`` draws from its own stream ``(seed, i)``, so results do
    not depend on ``workers``.  FF replicates each start from the observed
    matrix and run ``burn_in`` curveball trades (default five per filled
    cell).
    """
    if model not in NULL_MODELS:
        raise ValueError(f"unknown null model {model!r}; expected one of {NULL_MODELS}")
    if count < 2:
        raise ValueError("a null ensemble needs at least 2 replicates")
    m = (np.asarray(matrix) > 0).astype(np.int8)
    fill = int(m.sum())
    burn_in = 5 * fill if burn_in is None else int(burn_in)
    notes = []
    degenerate = False
    if model == "FF" and not _has_checkerboard(m):
        degenerate = True
        msg = "matrix has no swappable 2x2 checkerboard; the FF ensemble is a single matrix"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    reps = pmap(_replicate, [(m, model, seed, i, burn_in) for i in range(count)], workers)
    values = np.array([nodf(r).nodf for r in reps])
    preserved = None
    if model == "FF":
        rs, cs = m.sum(axis=1), m.sum(axis=0)
        preserved = all(np.array_equal(r.sum(axis=1), rs) and np.array_equal(r.sum(axis=0), cs)
                        for r in reps)
    mixing = None
    if model == "FF" and mixing_check:
        # one long chain sampled every burn_in trades
        rng = np.random.default_rng(np.random.SeedSequence([seed, count, 1]))
        chain, cur = [], m
        for _ in range(max(count, 10)):
            cur = curveball(cur, max(burn_in, 1), rng)
            chain.append(nodf(cur).nodf)
        mixing = _lag1_autocorrelation(chain)
    return NullEnsemble(model, count, values, float(values.mean()), float(values.std(ddof=1)),
                        degenerate, preserved, mixing, notes, reps if keep_matrices else None)


def significance(observed, ensemble: NullEnsemble) -> dict:
    """Compare an observed NODF with a null ensemble.

    Returns plain numbers only: the observed and null statistics, the ratios
    ``E(null)/obs`` and ``sd(null)/obs`` and their ``/E(null)`` forms, the
    z-score and the empirical quantile of the observation.  With a
    zero-variance ensemble the z-score is ``None``.
    """
    n_obs = float(observed.nodf if isinstance(observed, NodfResult) else observed)
    if ensemble.count < 30:
        raise ValueError("significance needs an ensemble of at least 30 replicates")
    vals = ensemble.values
    mean, sd = float(vals.mean()), float(vals.std(ddof=1))
    report = {
        "model": ensemble.model,
        "count": int(ensemble.count),
        "n_obs": n_obs,
        "null_mean": mean,
        "null_std": sd,
        "null_over_obs": mean / n_obs if n_obs else None,
        "null_std_over_obs": sd / n_obs if n_obs else None,
        "obs_over_null": n_obs / mean if mean else None,
        "null_std_over_null": sd / mean if mean else None,
        "quantile": float(np.mean(vals <= n_obs)),
        "quantile_only": sd == 0,
        "z": None if sd == 0 else (n_obs - mean) / sd,
    }
    return report


def write_replicates_csv(path, ensembles: dict) -> None:
    """``dataset,model,replicate,nodf`` rows for a mapping of label -> [ensembles]."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "model", "replicate", "nodf"])
        for label, ens_list in ensembles.items():
            for ens in ens_list:
                for i, v in enumerate(ens.values):
                    w.writerow([label, ens.model, i, repr(float(v))])


def ensemble_summary(ens: NullEnsemble) -> dict:
    d = asdict(ens)
    d.pop("values")
    d.pop("matrices")
    return d
