"""Hidden Markov regularization of RCA time series.

Each country gets its own 4-state chain.  Hidden states are development
stages with Gaussian emissions on ``log(RCA + delta)``; all product series
of the country are used jointly in Baum-Welch.  Decoding is the pointwise
posterior argmax, and the decoded stages are binarized into Mcp matrices.

Training runs on fixed-size batches of countries so that the arithmetic,
and therefore the output, never depends on how many worker processes are
used.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from ._parallel import pmap
from .data import ExportPanel, Registry
from .metrics import BinaryExportMatrix, rca_from_matrix

__all__ = [
    "N_STAGES",
    "DELTA",
    "HmmModel",
    "StagePath",
    "Regularization",
    "quantize_rca",
    "quartile_edges",
    "panel_rca",
    "train_hmm",
    "train_many",
    "decode_stages",
    "binarize_stages",
    "regularize_panel",
    "flip_count",
    "sample_chain",
    "model_to_dict",
    "model_from_dict",
    "save_models",
    "load_models",
]

N_STAGES = 4
DELTA = 1e-6
VAR_FLOOR = 1e-4
BATCH = 32
_LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class HmmModel:
    country: str
    transition: np.ndarray          # (4, 4) row-stochastic
    initial: np.ndarray             # (4,)
    means: np.ndarray               # emission means of log(RCA + delta), ascending
    variances: np.ndarray
    trained: bool = True
    loglik: list = field(default_factory=list)
    converged: bool = False
    bin_edges: np.ndarray | None = None
    delta: float = DELTA
    restart: int = 0

    @property
    def stage_rca(self) -> np.ndarray:
        """Expected RCA of each stage, the emission mean mapped back from log space."""
        return np.exp(self.means) - self.delta


@dataclass
class StagePath:
    """Decoded stages (1..4) for every product series of one country."""

    country: str
    stages: np.ndarray              # (P, T) int
    posterior: np.ndarray           # (P, T, 4)
    stage_rca: np.ndarray           # (4,)


@dataclass
class Regularization:
    models: list
    paths: list
    matrices: dict                  # year -> BinaryExportMatrix
    rule: str


# --------------------------------------------------------------------------
# quantization

def quartile_edges(values, delta: float = DELTA) -> np.ndarray:
    """The 25/50/75% quantiles of the pooled ``log(RCA + delta)`` values."""
    x = np.log(np.asarray(values, dtype=float).ravel() + delta)
    return np.quantile(x, [0.25, 0.5, 0.75])


def quantize_rca(series, edges=None, pooled=None, delta: float = DELTA) -> tuple[np.ndarray, np.ndarray]:
    """Bin RCA values into stages 1..4.

    Edges are the quartiles of ``pooled`` (typically every series of the
    country) unless given explicitly; a value equal to an edge goes to the
    upper stage.  Returns ``(stages, edges)``.
    """
    if edges is None:
        edges = quartile_edges(series if pooled is None else pooled, delta)
    edges = np.asarray(edges, dtype=float)
    x = np.log(np.asarray(series, dtype=float) + delta)
    return np.searchsorted(edges, x, side="right") + 1, edges


# --------------------------------------------------------------------------
# forward-backward on a batch of independent chains
#
# x: (G, T, S) observations, one block of product series per chain;
# A: (G, K, K); pi, mu, var: (G, K)

@njit(cache=True, error_model="numpy")
def _fb_chain(x, A, pi, mu, var, gamma, xi):
    """Scaled forward-backward over every series of one chain.

    ``x`` is (T, S).  Writes posteriors into ``gamma`` (T, K, S), adds the
    expected transition counts to ``xi`` and returns the log-likelihood.
    Inner loops run over series so they vectorize.
    """
    T, S = x.shape
    K = A.shape[0]
    b = np.empty((T, K, S))
    alpha = np.empty((T, K, S))
    beta = np.empty((T, K, S))
    c = np.empty((T, S))
    m = np.empty(S)
    nb = np.empty((K, S))
    acc = np.zeros((K, K, S))
    ll = 0.0
    for t in range(T):
        m[:] = -np.inf
        for k in range(K):
            lognorm = -0.5 * (np.log(var[k]) + _LOG2PI)
            halfprec = 0.5 / var[k]
            for s in range(S):
                d = x[t, s] - mu[k]
                v = lognorm - d * d * halfprec
                b[t, k, s] = v
                m[s] = max(m[s], v)
        for k in range(K):
            for s in range(S):
                b[t, k, s] = np.exp(b[t, k, s] - m[s])
        for s in range(S):
            ll += m[s]
    # forward
    c[0, :] = 0.0
    for k in range(K):
        for s in range(S):
            alpha[0, k, s] = pi[k] * b[0, k, s]
            c[0, s] += alpha[0, k, s]
    for k in range(K):
        for s in range(S):
            alpha[0, k, s] /= c[0, s]
    for t in range(1, T):
        alpha[t] = 0.0
        for i in range(K):
            for j in range(K):
                a = A[i, j]
                for s in range(S):
                    alpha[t, j, s] += alpha[t - 1, i, s] * a
        c[t, :] = 0.0
        for j in range(K):
            for s in range(S):
                alpha[t, j, s] *= b[t, j, s]
                c[t, s] += alpha[t, j, s]
        for j in range(K):
            for s in range(S):
                alpha[t, j, s] /= c[t, s]
    # backward, accumulating transition counts per series on the way
    beta[T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        for j in range(K):
            for s in range(S):
                nb[j, s] = b[t + 1, j, s] * beta[t + 1, j, s] / c[t + 1, s]
        beta[t] = 0.0
        for i in range(K):
            for j in range(K):
                a = A[i, j]
                for s in range(S):
                    beta[t, i, s] += a * nb[j, s]
                    acc[i, j, s] += alpha[t, i, s] * nb[j, s]
    for i in range(K):
        for j in range(K):
            tot = 0.0
            for s in range(S):
                tot += acc[i, j, s]
            xi[i, j] += tot * A[i, j]
    for t in range(T):
        for s in range(S):
            ll += np.log(c[t, s])
        m[:] = 0.0
        for k in range(K):
            for s in range(S):
                g = alpha[t, k, s] * beta[t, k, s]
                gamma[t, k, s] = g
                m[s] += g
        for k in range(K):
            for s in range(S):
                gamma[t, k, s] /= m[s]
    return ll


@njit(cache=True, error_model="numpy")
def _m_chain(x, gamma, xi, A, pi, mu, var, var_floor):
    """Closed-form EM update of one chain's parameters, in place."""
    T, S = x.shape
    K = A.shape[0]
    for i in range(K):
        row = 0.0
        for j in range(K):
            row += xi[i, j]
        if row > 0:
            for j in range(K):
                A[i, j] = xi[i, j] / row
    for k in range(K):
        acc = 0.0
        for s in range(S):
            acc += gamma[0, k, s]
        pi[k] = acc / S
    for k in range(K):
        w = 0.0
        sx = 0.0
        for t in range(T):
            for s in range(S):
                w += gamma[t, k, s]
                sx += gamma[t, k, s] * x[t, s]
        if w > 1e-10:
            mk = sx / w
            sq = 0.0
            for t in range(T):
                for s in range(S):
                    d = x[t, s] - mk
                    sq += gamma[t, k, s] * d * d
            mu[k] = mk
            var[k] = max(sq / w, var_floor)


@njit(cache=True, error_model="numpy")
def _em_pass(x, A, pi, mu, var, idx, prev, tol, var_floor, ll_out, done):
    """E-step for chains ``idx``, then an M-step unless the gain over
    ``prev`` fell below ``tol`` (NaN in ``prev`` means no previous value)."""
    T, S = x.shape[1], x.shape[2]
    K = A.shape[1]
    gamma = np.empty((T, K, S))
    for n in range(idx.shape[0]):
        g = idx[n]
        xi = np.zeros((K, K))
        ll = _fb_chain(x[g], A[g], pi[g], mu[g], var[g], gamma, xi)
        ll_out[n] = ll
        done[n] = (not np.isnan(prev[g])) and ll - prev[g] < tol
        if not done[n]:
            _m_chain(x[g], gamma, xi, A[g], pi[g], mu[g], var[g], var_floor)


def _forward_backward(x, A, pi, mu, var):
    """Posteriors (G, T, K, S) and log-likelihoods (G,) of a batch of chains."""
    G, T, S = x.shape
    K = A.shape[1]
    gamma = np.empty((G, T, K, S))
    ll = np.empty(G)
    for g in range(G):
        ll[g] = _fb_chain(x[g], A[g], pi[g], mu[g], var[g], gamma[g], np.zeros((K, K)))
    return gamma, ll


def _init_params(x, rng, jitter: bool, var_floor: float):
    """Starting values for chains ``x`` of shape (G, T, S)."""
    G = x.shape[0]
    flat = x.reshape(G, -1)
    mu = np.quantile(flat, [0.125, 0.375, 0.625, 0.875], axis=1).T
    spread = flat.std(axis=1)
    var = np.maximum((spread / N_STAGES) ** 2, var_floor)[:, None] * np.ones((1, N_STAGES))
    if jitter:
        mu = mu + rng.normal(0.0, 0.25, mu.shape) * np.maximum(spread, 1e-3)[:, None]
        mu = np.sort(mu, axis=1)
    A = np.full((G, N_STAGES, N_STAGES), 0.15 / (N_STAGES - 1))
    A[:, np.arange(N_STAGES), np.arange(N_STAGES)] = 0.85
    pi = np.full((G, N_STAGES), 1.0 / N_STAGES)
    return A, pi, mu, var


def _baum_welch(x, A, pi, mu, var, tol, max_iter, var_floor):
    G = x.shape[0]
    active = np.ones(G, dtype=bool)
    converged = np.zeros(G, dtype=bool)
    traces = [[] for _ in range(G)]
    prev = np.full(G, np.nan)
    ll = np.empty(G)
    done = np.zeros(G, dtype=np.bool_)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        _em_pass(x, A, pi, mu, var, idx, prev, float(tol), float(var_floor), ll, done)
        for j, g in enumerate(idx):
            traces[g].append(float(ll[j]))
            prev[g] = ll[j]
            if done[j]:
                converged[g] = True
                active[g] = False
    return A, pi, mu, var, traces, converged


def _relabel(A, pi, mu, var):
    order = np.argsort(mu, kind="stable")
    return A[np.ix_(order, order)], pi[order], mu[order], var[order]


def _country_seed(seed: int, country: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(str(country).encode())])


def _chains(series, delta):
    """(P, T) RCA blocks -> (G, T, P) log observations."""
    x = np.log(np.stack(series).astype(float) + delta)
    return np.ascontiguousarray(np.swapaxes(x, 1, 2))


def _train_batch(args):
    countries, series, seed, restarts, tol, max_iter, delta, var_floor = args
    G, R = len(countries), max(int(restarts), 1)
    x = _chains(series, delta)
    # every restart of every country is one chain of the batch; restart 0
    # starts from the quartile midpoints, later ones from seeded jitter
    A, pi, mu, var = _init_params(x, None, False, var_floor)
    A, pi, mu, var = (np.concatenate([v] * R) for v in (A, pi, mu, var))
    for g, c in enumerate(countries):
        rng = np.random.default_rng(_country_seed(seed, c))
        for r in range(1, R):
            mu[r * G + g] = _init_params(x[g:g + 1], rng, True, var_floor)[2][0]
    xx = np.concatenate([x] * R)
    A, pi, mu, var, traces, conv = _baum_welch(xx, A, pi, mu, var, tol, max_iter, var_floor)
    models = []
    for g, c in enumerate(countries):
        finals = [traces[r * G + g][-1] for r in range(R)]
        r = int(np.argmax(finals))
        k = r * G + g
        A_k, pi_k, mu_k, var_k = _relabel(A[k], pi[k], mu[k], var[k])
        trained = bool(np.any(series[g] > 0))
        models.append(HmmModel(c, A_k, pi_k, mu_k, var_k, trained, traces[k], bool(conv[k]),
                               quartile_edges(series[g], delta), delta, r))
    return models


def train_many(countries: Sequence[str], series: Sequence[np.ndarray], seed: int = 0,
               restarts: int = 3, tol: float = 1e-6, max_iter: int = 500,
               delta: float = DELTA, var_floor: float = VAR_FLOOR, workers: int = 1) -> list:
    """Train one model per country; ``series[i]`` is that country's RCA, shape (P, T).

    All series must share the same shape.  Countries are processed in
    fixed batches; results do not depend on ``workers``.
    """
    series = [np.asarray(s, dtype=float) for s in series]
    if not series:
        return []
    T = series[0].shape[-1]
    if T < 5:
        raise ValueError(f"HMM training needs at least 5 years of data, got {T}")
    if any(s.shape != series[0].shape for s in series):
        raise ValueError("all country series must share one (products, years) shape")
    jobs = [(list(countries[i:i + BATCH]), series[i:i + BATCH], seed, restarts, tol, max_iter,
             delta, var_floor) for i in range(0, len(series), BATCH)]
    out = pmap(_train_batch, jobs, workers)
    return [m for batch in out for m in batch]


def panel_rca(panel: ExportPanel) -> np.ndarray:
    """RCA for every year, shape (countries, products, years)."""
    return np.stack([rca_from_matrix(panel.values[:, :, t]).rca if panel.values[:, :, t].sum() > 0
                     else np.zeros(panel.shape[:2]) for t in range(panel.shape[2])], axis=2)


def train_hmm(country, panel, seed: int = 0, **kwargs) -> HmmModel:
    """Train the stage model of one country.

    ``panel`` is an :class:`ExportPanel` (``country`` a code or index) or
    an RCA array of shape (products, years) for that country.
    """
    if isinstance(panel, ExportPanel):
        i = panel.countries.index(country) if isinstance(country, str) else int(country)
        series = panel_rca(panel)[i]
        country = panel.countries.codes[i]
    else:
        series = np.asarray(panel, dtype=float)
        if series.ndim == 1:
            series = series[None, :]
    return train_many([str(country)], [series], seed=seed, **kwargs)[0]


def em_step(model: HmmModel, series) -> tuple[HmmModel, float, float]:
    """One Baum-Welch update; returns (new model, loglik before, loglik after)."""
    x = _chains([np.asarray(series, dtype=float)], model.delta)
    A, pi, mu, var = (model.transition[None].copy(), model.initial[None].copy(),
                      model.means[None].copy(), model.variances[None].copy())
    ll = np.empty(1)
    _em_pass(x, A, pi, mu, var, np.zeros(1, np.int64), np.full(1, np.nan), 0.0, VAR_FLOOR,
             ll, np.zeros(1, np.bool_))
    ll0 = ll.copy()
    ll1 = _forward_backward(x, A, pi, mu, var)[1]
    new = HmmModel(model.country, A[0], pi[0], mu[0], var[0], True, [], False,
                   model.bin_edges, model.delta)
    return new, float(ll0[0]), float(ll1[0])


# --------------------------------------------------------------------------
# decoding and binarization

def decode_stages(model: HmmModel, series) -> StagePath:
    """Most probable stage at each time step from the posterior marginals."""
    if not model.trained:
        raise ValueError(f"model for {model.country} is untrained (degenerate input)")
    s = np.asarray(series, dtype=float)
    if s.ndim == 1:
        s = s[None, :]
    x = _chains([s], model.delta)
    gamma = _forward_backward(x, model.transition[None], model.initial[None],
                              model.means[None], model.variances[None])[0][0]
    gamma = np.ascontiguousarray(np.transpose(gamma, (2, 0, 1)))
    stages = gamma.argmax(axis=-1) + 1
    return StagePath(model.country, stages.astype(np.int8), gamma, model.stage_rca.copy())


def _stage_on(path: StagePath, rule: str) -> np.ndarray:
    if rule == "expected":
        return path.stage_rca >= 1.0
    if rule == "top2":
        return np.array([False, False, True, True])
    raise ValueError(f"unknown binarization rule {rule!r}; expected 'expected' or 'top2'")


def binarize_stages(paths: Sequence[StagePath], rule: str = "expected", years=None,
                    countries: Registry | None = None, products: Registry | None = None) -> list:
    """One :class:`BinaryExportMatrix` per year from per-country stage paths.

    ``expected``: a stage maps to 1 when its expected RCA is at least 1.
    ``top2``: stages 3 and 4 map to 1.
    """
    bits = np.stack([_stage_on(p, rule)[p.stages - 1] for p in paths])     # (C, P, T)
    T = bits.shape[2]
    years = list(years) if years is not None else [None] * T
    return [BinaryExportMatrix(bits[:, :, t].astype(np.int8), years[t], "hmm-regularized",
                               countries, products) for t in range(T)]


def regularize_panel(panel: ExportPanel, rule: str = "expected", seed: int = 0,
                     workers: int = 1, **kwargs) -> Regularization:
    """Train, decode and binarize every country of ``panel``.

    Countries with no exports at all get an untrained model and an all-zero
    row.
    """
    rca = panel_rca(panel)
    models = train_many(panel.countries.codes, list(rca), seed=seed, workers=workers, **kwargs)
    paths = []
    for model, series in zip(models, rca):
        if model.trained:
            paths.append(decode_stages(model, series))
        else:
            P, T = series.shape
            post = np.zeros((P, T, N_STAGES))
            post[..., 0] = 1.0
            paths.append(StagePath(model.country, np.ones((P, T), np.int8), post,
                                   np.zeros(N_STAGES)))
    mats = binarize_stages(paths, rule, panel.years, panel.countries, panel.products)
    return Regularization(models, paths, dict(zip(panel.years, mats)), rule)


def flip_count(matrices) -> np.ndarray:
    """Number of 0<->1 transitions of every cell across consecutive years.

    Accepts a (C, P, T) array or a sequence of yearly matrices.
    """
    if isinstance(matrices, Mapping):
        matrices = [matrices[k] for k in sorted(matrices)]
    if not isinstance(matrices, np.ndarray):
        matrices = np.stack([getattr(m, "m", m) for m in matrices], axis=-1)
    m = np.asarray(matrices).astype(np.int8)
    return np.abs(np.diff(m, axis=-1)).sum(axis=-1)


def sample_chain(transition, initial, means, variances, n_series: int, length: int,
                 rng: np.random.Generator, delta: float = DELTA) -> tuple[np.ndarray, np.ndarray]:
    """Draw RCA series from a known Gaussian-emission chain; returns (rca, states)."""
    transition = np.asarray(transition, dtype=float)
    cum = np.cumsum(transition, axis=1)
    states = np.empty((n_series, length), dtype=int)
    states[:, 0] = rng.choice(len(initial), size=n_series, p=initial)
    for t in range(1, length):
        u = rng.random(n_series)
        states[:, t] = np.minimum((u[:, None] > cum[states[:, t - 1]]).sum(axis=1),
                                  len(initial) - 1)
    x = np.asarray(means)[states] + np.sqrt(np.asarray(variances))[states] * rng.normal(
        size=states.shape)
    return np.exp(x) - delta, states


# --------------------------------------------------------------------------
# persistence

def model_to_dict(m: HmmModel) -> dict:
    return {
        "country": m.country,
        "transition": m.transition.tolist(),
        "initial": m.initial.tolist(),
        "means": m.means.tolist(),
        "variances": m.variances.tolist(),
        "trained": m.trained,
        "converged": m.converged,
        "iterations": len(m.loglik),
        "loglik": m.loglik[-1] if m.loglik else None,
        "bin_edges": None if m.bin_edges is None else np.asarray(m.bin_edges).tolist(),
        "delta": m.delta,
        "restart": m.restart,
    }


def model_from_dict(d: Mapping) -> HmmModel:
    return HmmModel(
        d["country"], np.array(d["transition"]), np.array(d["initial"]), np.array(d["means"]),
        np.array(d["variances"]), bool(d["trained"]),
        [] if d.get("loglik") is None else [d["loglik"]], bool(d.get("converged", False)),
        None if d.get("bin_edges") is None else np.array(d["bin_edges"]),
        float(d.get("delta", DELTA)), int(d.get("restart", 0)),
    )


def save_models(path, models: Sequence[HmmModel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([model_to_dict(m) for m in models], fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_models(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [model_from_dict(d) for d in json.load(fh)]
