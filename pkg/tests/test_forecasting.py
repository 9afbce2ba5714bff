import json

import numpy as np
import pytest

from ectk.data import SynthSpec, synth_trajectories
from ectk.forecasting import (
    AnalogueSet,
    BacktestPlane,
    KernelSpec,
    analogues_before,
    backtest,
    baseline_predict,
    cagr,
    convergence_scan,
    invert_nrca_gdp,
    kernel_probabilities,
    nwkr_predict,
    plane_from_trajectories,
    reconstruct_fitness,
    spsb_predict,
    write_backtest,
)
from ectk.metrics import compute_nrca, fitness_complexity

from .oracles import nwkr_oracle


def smooth_set(n=500, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.random((n, 2))
    disp = 1 + 0.5 * np.sin(2 * np.pi * pos[:, 0]) * np.cos(2 * np.pi * pos[:, 1]) + rng.normal(0, 0.3, n)
    return AnalogueSet(pos, disp)


# kernel regression ---------------------------------------------------------------

def test_single_analogue():
    r = nwkr_predict([0.3, 0.3], AnalogueSet([[0.1, 0.2]], [0.7]), KernelSpec(0.5))
    assert r.expectation.tolist() == [0.7] and r.standard_deviation.tolist() == [0.0]


def test_two_equidistant_analogues():
    an = AnalogueSet([[0.0, 0.0], [1.0, 0.0]], [[2.0, 1.0], [4.0, -1.0]])
    r = nwkr_predict([0.5, 0.3], an, KernelSpec(0.2))
    assert np.allclose(r.expectation, [3.0, 0.0], atol=1e-15)


def test_matches_weighted_sum_oracle():
    rng = np.random.default_rng(1)
    pos, disp = rng.random((50, 2)), rng.normal(size=(50, 2))
    for _ in range(10):
        q = rng.random(2)
        want = nwkr_oracle(q.tolist(), pos.tolist(), disp.tolist(), 0.15)
        got = nwkr_predict(q, AnalogueSet(pos, disp), KernelSpec(0.15)).expectation
        assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_duplication_invariance_and_convexity():
    an = smooth_set(80, seed=2)
    dup = AnalogueSet(np.vstack([an.positions] * 2), np.vstack([an.displacements] * 2))
    k = KernelSpec(0.1)
    for q in np.random.default_rng(3).random((5, 2)):
        a, b = nwkr_predict(q, an, k), nwkr_predict(q, dup, k)
        assert np.allclose(a.expectation, b.expectation, atol=1e-14)
        assert np.allclose(a.standard_deviation, b.standard_deviation, atol=1e-12)
        assert an.displacements.min() <= a.expectation[0] <= an.displacements.max()


def test_far_query_falls_back_to_nearest():
    an = AnalogueSet([[0.0, 0.0], [1.0, 0.0]], [1.0, 5.0])
    with pytest.warns(RuntimeWarning, match="nearest"):
        r = nwkr_predict([60.0, 0.0], an, KernelSpec(0.01))
    assert r.fallback and r.expectation.tolist() == [5.0]


def test_default_bandwidth_and_validation():
    an = AnalogueSet([[0.0, 0.0], [3.0, 4.0]], [0.0, 0.0])
    assert KernelSpec().resolve(an.positions) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        KernelSpec(0.0)
    with pytest.raises(ValueError, match="at least one"):
        nwkr_predict([0, 0], AnalogueSet(np.empty((0, 2)), np.empty(0)), KernelSpec(1.0))


def test_probabilities_sum_to_one():
    p, _ = kernel_probabilities([0.5, 0.5], smooth_set(), KernelSpec())
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)


# bootstrap ----------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 99])
def test_constant_displacements(seed):
    an = AnalogueSet(np.random.default_rng(0).random((30, 2)), np.full((30, 2), [0.4, -0.1]))
    r = spsb_predict([0.5, 0.5], an, KernelSpec(), 200, 20, seed)
    assert np.allclose(r.expectation, [0.4, -0.1], atol=1e-15)
    assert np.allclose(r.standard_deviation, 0.0, atol=1e-15)


def test_bit_reproducible():
    an = smooth_set(200)
    a = spsb_predict([0.4, 0.6], an, KernelSpec(), 500, 100, 7)
    b = spsb_predict([0.4, 0.6], an, KernelSpec(), 500, 100, 7)
    assert np.array_equal(a.expectation, b.expectation)
    assert np.array_equal(a.standard_deviation, b.standard_deviation)


def test_sampled_frequencies_follow_kernel():
    an = smooth_set(20)
    k = KernelSpec(0.3)
    p, _ = kernel_probabilities([0.5, 0.5], an, k)
    _, phi = spsb_predict([0.5, 0.5], an, k, 2000, 100, 0, return_frequencies=True)
    n = 2000 * 100
    assert abs(phi.sum() - 1) < 1e-12
    assert np.all(np.abs(phi - p) <= 5 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_converges_to_kernel_regression():
    an = smooth_set()
    k = KernelSpec()
    for i, q in enumerate(np.random.default_rng(5).uniform(0.1, 0.9, (3, 2))):
        s = spsb_predict(q, an, k, 100_000, 100, i)
        r = nwkr_predict(q, an, k)
        assert abs(s.expectation[0] - r.expectation[0]) / abs(r.expectation[0]) < 0.005
        assert abs(10 * s.standard_deviation[0] / r.standard_deviation[0] - 1) < 0.05


def test_seed_spread_at_thousand_bootstraps():
    an = smooth_set()
    es = [spsb_predict([0.3, 0.7], an, KernelSpec(), 1000, 100, s).expectation[0] for s in range(10)]
    assert (max(es) - min(es)) / abs(np.mean(es)) <= 0.02


def test_bootstrap_argument_checks():
    with pytest.raises(ValueError, match="at least 1"):
        spsb_predict([0, 0], smooth_set(10), KernelSpec(), 0, 10)


def test_convergence_scan_trend():
    an = smooth_set()
    qs = np.random.default_rng(6).uniform(0.1, 0.9, (30, 2))
    d = convergence_scan(qs, an, KernelSpec(), (100, 1000, 10_000), 100, seed=0)
    assert d.spearman < 0 and d.spearman_p < 0.05
    tab = d.table()
    assert tab[-1]["mae_expectation"] < tab[0]["mae_expectation"]
    assert tab[-1]["mae_sigma"] < tab[0]["mae_sigma"]
    assert abs(d.p.sum() - 1) < 1e-12 and abs(d.phi.sum() - 1) < 1e-12
    with pytest.raises(ValueError, match="increasing"):
        convergence_scan(qs[:1], an, KernelSpec(), (100, 10))


def test_rare_analogues_are_rarely_sampled():
    # each analogue with p < 1/(BN) is sampled with probability 1 - (1 - p)^(BN);
    # the observed fraction must agree with that expectation
    an = smooth_set()
    d = convergence_scan([[0.5, 0.5]], an, KernelSpec(), (1000, 10_000), 100, seed=0)
    draws = 10_000 * 100
    rare = d.p < 1 / draws
    expect = np.mean(1 - (1 - d.p[rare]) ** draws)
    sd = np.sqrt(np.sum((1 - d.p[rare]) ** draws * (1 - (1 - d.p[rare]) ** draws))) / rare.sum()
    assert abs(d.unreachable_sampled - expect) < 4 * sd + 1e-12
    # with a tail reaching far below the threshold (smallest p under 1e-20)
    # almost none of the rare analogues ever shows up
    d = convergence_scan([[0.5, 0.5]], an, KernelSpec(0.07), (1000, 10_000), 100, seed=0)
    assert d.p.min() < 1e-20
    assert d.unreachable_sampled < 0.05
    assert d.divergence_p > 0


# growth rates and baselines ---------------------------------------------------------------

def test_cagr_examples():
    assert cagr(5.0, 5.0, 3) == 0.0
    assert cagr(100.0, 121.0, 2) == pytest.approx(10.0, abs=1e-12)
    half, back = cagr(8.0, 4.0, 1), cagr(4.0, 8.0, 1)
    assert (1 + half / 100) * (1 + back / 100) == pytest.approx(1.0, abs=1e-15)
    assert cagr(8.0, 8.0, 2) == 0.0
    with pytest.raises(ValueError):
        cagr(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        cagr(1.0, 2.0, 0)


def test_baselines():
    an = AnalogueSet([[0.2, 0.2]], [[0.05, -0.01]])
    assert baseline_predict("static", an).expectation.tolist() == [0.0, 0.0]
    assert baseline_predict("autocorrelation", previous=[0.02]).expectation.tolist() == [0.02]
    assert baseline_predict("autocorrelation", previous=None) is None
    assert baseline_predict("random", an, seed=4).expectation.tolist() == [0.05, -0.01]
    with pytest.raises(ValueError):
        baseline_predict("median", an)


# backtesting ------------------------------------------------------------------------------

def persistent_plane(E=20, T=12, seed=0):
    rng = np.random.default_rng(seed)
    start, vel = rng.random((E, 2)), rng.normal(0, 0.01, (E, 2))
    pos = start[:, None, :] + np.arange(T)[None, :, None] * vel[:, None, :]
    return BacktestPlane(tuple(f"P{e}" for e in range(E)), tuple(range(2000, 2000 + T)), pos)


def test_perfect_persistence_autocorrelation_is_exact():
    rep = backtest(persistent_plane(), methods=("autocorrelation", "static"))
    assert rep.method_mae("autocorrelation") < 1e-9
    assert rep.method_mae("static") > 0.1


def test_static_beats_random_on_brownian_motion():
    for s in range(5):
        tr = synth_trajectories(SynthSpec("drift", entities=50, years=15, drift="none", diffusion=0.05), s)
        rep = backtest(plane_from_trajectories(tr), methods=("random", "static"), seed=s)
        assert rep.method_mae("static") < rep.method_mae("random")


def test_kernel_regression_beats_static_on_drift():
    for s in range(5):
        tr = synth_trajectories(SynthSpec("drift", entities=50, years=15, drift="sink",
                                          drift_strength=0.2, diffusion=0.05), s)
        rep = backtest(plane_from_trajectories(tr), methods=("nwkr", "static"), seed=s)
        assert rep.method_mae("nwkr") < rep.method_mae("static")
        assert rep.audit["violations"] == 0 and rep.audit["analogues"] > 0


def test_analogues_stop_at_forecast_time():
    plane = persistent_plane(5, 10)
    for dt in (1, 3):
        for t_hat in range(10):
            an = analogues_before(plane, t_hat, dt)
            assert np.all(an.times < t_hat) and np.all(an.times + dt <= t_hat)
            assert len(an) == 5 * max(0, t_hat - dt + 1)


def test_backtest_is_worker_and_seed_stable():
    tr = synth_trajectories(SynthSpec("drift", entities=15, years=10, drift="sink"), 1)
    plane = plane_from_trajectories(tr)
    kw = dict(dts=(3,), B=50, N=20)
    a = backtest(plane, seed=1, **kw)
    b = backtest(plane, seed=1, workers=2, **kw)
    assert a.rows == b.rows
    c = backtest(plane, seed=2, **kw)
    by = lambda rep, m: [r["forecast"] for r in rep.rows if r["method"] == m]
    for m in ("nwkr", "static", "autocorrelation"):
        assert by(a, m) == by(c, m)
    assert by(a, "spsb") != by(c, "spsb")


def test_report_files(tmp_path):
    tr = synth_trajectories(SynthSpec("drift", entities=10, years=12, drift="none"), 0)
    rep = backtest(plane_from_trajectories(tr), methods=("nwkr", "static"))
    write_backtest(rep, tmp_path / "bt.csv", tmp_path / "bt.json")
    lines = (tmp_path / "bt.csv").read_text().splitlines()
    assert lines[0] == "entity,year,dt,metric,method,forecast,observed,error"
    assert len(lines) == len(rep.rows) + 1
    summary = json.loads((tmp_path / "bt.json").read_text())
    # one MAE row per dt, per method, per metric
    assert len(summary["mae"]) == 3 * 2 * 2
    assert all(r["mae"] >= 0 for r in summary["mae"])


def test_short_history_is_skipped():
    rep = backtest(persistent_plane(4, 4), methods=("nwkr",), dts=(3,))
    assert rep.rows == [] and rep.skipped["no_analogues"] == 4


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown methods"):
        backtest(persistent_plane(), methods=("oracle",))


# country reconstruction -------------------------------------------------------------------

def test_reconstruct_fitness_examples():
    assert reconstruct_fitness(np.ones((3, 4)), np.ones(4)).tolist() == [4.0] * 3
    m = np.eye(3, dtype=int)
    assert reconstruct_fitness(m, [0.5, 2.0, 1.5]).tolist() == [0.5, 2.0, 1.5]
    with pytest.raises(ValueError):
        reconstruct_fitness(m, [1.0, 2.0])


def test_reconstruct_matches_fitness_before_normalization(rng):
    m = (rng.random((10, 15)) < 0.5).astype(int)
    m[:, 0] = 1
    m[0, :] = 1
    fc = fitness_complexity(m)
    rec = reconstruct_fitness(m, fc.complexity)
    ratio = rec / fc.fitness_raw
    assert np.ptp(ratio) / ratio.mean() < 1e-10


def test_invert_square_system():
    rng = np.random.default_rng(3)
    rca = rng.uniform(0.1, 3.0, (6, 6))
    w = compute_nrca(rca)
    log_gdp = rng.uniform(3.0, 5.0, 6)
    inv = invert_nrca_gdp(w, w.weights.T @ log_gdp)
    assert np.allclose(inv.log_gdp, log_gdp, atol=1e-8) and not inv.rank_deficient


def test_invert_identity_like():
    w = np.eye(4)[:, [2, 0, 3, 1]]
    lp = np.array([4.1, 3.2, 5.0, 3.9])
    inv = invert_nrca_gdp(w, lp)
    assert np.allclose(inv.log_gdp[[2, 0, 3, 1]], lp)


def test_invert_residual_shrinks_with_noise():
    rng = np.random.default_rng(4)
    w = compute_nrca(rng.uniform(0.1, 3.0, (5, 30))).weights
    g = rng.uniform(3, 5, 5)
    res = [invert_nrca_gdp(w, w.T @ g + rng.normal(0, s, 30)).residual for s in (1e-1, 1e-3, 1e-6, 0.0)]
    assert res[0] > res[1] > res[2] > res[3] and res[3] < 1e-10


def test_invert_rank_deficient_flag():
    w = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    inv = invert_nrca_gdp(w, np.array([4.0, 4.0, 4.0]))
    assert inv.rank_deficient and np.allclose(inv.log_gdp, [4.0, 4.0])
