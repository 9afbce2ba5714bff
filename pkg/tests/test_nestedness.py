import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ectk.data import stairstep
from ectk.nestedness import (
    NullEnsemble,
    curveball,
    nodf,
    null_ensemble,
    significance,
    write_replicates_csv,
)

from .conftest import random_binary
from .oracles import nodf_oracle


def test_full_matrix_is_zero():
    m = np.ones((6, 9), dtype=int)
    assert nodf(m).nodf == 0.0
    assert nodf_oracle(m.tolist()) == 0.0


@pytest.mark.parametrize("shape", [(3, 3), (10, 10), (30, 30)])
def test_stairstep_is_hundred(shape):
    m = stairstep(*shape)
    assert abs(nodf(m).nodf - 100.0) < 1e-9
    assert abs(nodf_oracle(m.tolist()) - 100.0) < 1e-9


def test_matches_pair_loop_oracle(rng):
    for _ in range(50):
        m = (rng.random((12, 12)) < rng.uniform(0.2, 0.8)).astype(int)
        assert abs(nodf(m).nodf - nodf_oracle(m.tolist())) < 1e-9


def test_row_and_column_parts():
    m = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0], [0, 0, 0]])
    r = nodf(m)
    # row pairs: three 100s out of six pairs, the empty row contributes 0
    assert r.rows == pytest.approx(50.0)
    assert r.cols == pytest.approx(100.0)
    assert r.nodf == pytest.approx((300.0 + 300.0) / 9.0)


def test_too_small():
    with pytest.raises(ValueError, match="2x2"):
        nodf(np.ones((1, 5)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.int8, st.tuples(st.integers(2, 9), st.integers(2, 9)), elements=st.integers(0, 1)))
def test_range_and_permutation_invariance(m):
    v = nodf(m).nodf
    assert 0.0 <= v <= 100.0
    rng = np.random.default_rng(0)
    pr, pc = rng.permutation(m.shape[0]), rng.permutation(m.shape[1])
    assert nodf(m[pr][:, pc]).nodf == pytest.approx(v, abs=1e-9)


def test_filling_corner_holes_never_lowers_nodf():
    # fixtures: a 12x12 staircase with two holes in its top-left 4x4 block
    # (high-fitness countries, ubiquitous products); filling either hole
    # must not lower NODF
    base = stairstep(12, 12).astype(int)
    corner = [(i, j) for i in range(4) for j in range(4)]
    for a, b in itertools.combinations(corner, 2):
        m = base.copy()
        m[a] = m[b] = 0
        before = nodf(m).nodf
        for hole in (a, b):
            filled = m.copy()
            filled[hole] = 1
            assert nodf(filled).nodf >= before


# null models ----------------------------------------------------------------------

def test_curveball_preserves_marginals(rng):
    m = random_binary(rng, (15, 20), 0.4)
    out = curveball(m, 2000, rng)
    assert np.array_equal(out.sum(axis=0), m.sum(axis=0))
    assert np.array_equal(out.sum(axis=1), m.sum(axis=1))
    assert not np.array_equal(out, m)


def test_ff_replicates_preserve_marginals(rng):
    m = random_binary(rng, (12, 16), 0.45)
    ens = null_ensemble(m, "FF", 40, seed=3, keep_matrices=True)
    assert ens.marginals_preserved
    for r in ens.matrices:
        assert np.array_equal(r.sum(axis=0), m.sum(axis=0))
        assert np.array_equal(r.sum(axis=1), m.sum(axis=1))


def test_ee_fill_matches_observed(rng):
    m = random_binary(rng, (20, 25), 0.3)
    ens = null_ensemble(m, "EE", 200, seed=1, keep_matrices=True)
    n, p = m.size, m.sum() / m.size
    fills = np.array([r.sum() for r in ens.matrices])
    sd = np.sqrt(n * p * (1 - p))
    assert abs(fills.mean() - m.sum()) < 3 * sd / np.sqrt(len(fills))


def test_dd_cell_probabilities(rng):
    m = random_binary(rng, (10, 14), 0.4)
    ens = null_ensemble(m, "DD", 3000, seed=2, keep_matrices=True)
    freq = np.mean(ens.matrices, axis=0)
    R, C = m.shape
    p = (m.sum(axis=1)[:, None] / C + m.sum(axis=0)[None, :] / R) / 2
    assert np.abs(freq - p).max() < 4 * np.sqrt(0.25 / 3000)


def test_stairstep_beats_ee_and_dd(stair30):
    obs = nodf(stair30)
    for model in ("EE", "DD"):
        ens = null_ensemble(stair30, model, 100, seed=0)
        assert ens.mean < obs.nodf
        assert significance(obs, ens)["z"] > 3


def test_ff_on_stairstep_is_degenerate(stair30):
    # a perfectly nested matrix is the only 0/1 matrix with its marginals
    with pytest.warns(UserWarning, match="checkerboard"):
        ens = null_ensemble(stair30, "FF", 50, seed=0)
    assert ens.degenerate
    assert np.all(ens.values == 100.0)
    rep = significance(nodf(stair30), ens)
    assert rep["z"] is None and rep["quantile_only"]


def test_ff_on_perturbed_stairstep_has_spread():
    m = stairstep(30, 30).astype(int)
    rng = np.random.default_rng(4)
    for _ in range(6):       # a few off-staircase swaps create checkerboards
        i = rng.integers(5, 25)
        j = int(m[i].sum())
        m[i, j - 1], m[i, j + 1] = 0, 1
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ens = null_ensemble(m, "FF", 100, seed=0)
    assert not ens.degenerate and ens.marginals_preserved
    rep = significance(nodf(m), ens)
    assert rep["null_std"] > 0 and rep["z"] is not None


def test_replicates_do_not_depend_on_workers(rng):
    m = random_binary(rng, (10, 12), 0.5)
    for model in ("EE", "FF"):
        a = null_ensemble(m, model, 30, seed=8)
        b = null_ensemble(m, model, 30, seed=8, workers=2)
        assert np.array_equal(a.values, b.values)


def test_ensemble_errors():
    with pytest.raises(ValueError, match="unknown null model"):
        null_ensemble(np.eye(3), "XX", 10)
    with pytest.raises(ValueError, match="at least 2"):
        null_ensemble(np.eye(3), "EE", 1)


def test_significance_report():
    vals = np.array([40.0, 50.0, 60.0] * 10)
    ens = NullEnsemble("EE", 30, vals, vals.mean(), vals.std(ddof=1))
    rep = significance(50.0, ens)
    assert rep["z"] == 0.0
    assert rep["null_over_obs"] == 1.0
    json.dumps(rep)
    with pytest.raises(ValueError, match="30"):
        significance(50.0, NullEnsemble("EE", 10, vals[:10], 50.0, 1.0))


def test_replicate_csv(tmp_path, rng):
    m = random_binary(rng, (6, 6), 0.5)
    ens = null_ensemble(m, "EE", 5, seed=0)
    path = tmp_path / "reps.csv"
    write_replicates_csv(path, {"raw": [ens]})
    lines = path.read_text().splitlines()
    assert lines[0] == "dataset,model,replicate,nodf"
    assert len(lines) == 6
