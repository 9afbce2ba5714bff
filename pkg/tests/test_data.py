import json

import numpy as np
import pytest

from ectk.data import (
    ExportPanel,
    ParseError,
    Registry,
    SynthSpec,
    ValidationError,
    aggregate_panel,
    align_gdp,
    core_indices,
    load_export_csv,
    load_gdp_csv,
    stairstep,
    synth_panel,
    synth_trajectories,
    write_export_csv,
    write_provenance,
)
from ectk.metrics import compute_rca, threshold_mcp


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_truncation_sums_subheadings(tmp_path):
    f = write(tmp_path, "x.csv", "year,country,product,value\n2000,A,100630,5\n2000,A,100610,7\n")
    panel = load_export_csv(f, 4)
    assert panel.products.codes == ("1006",)
    assert panel.matrix(2000)[panel.countries.index("A"), 0] == 12


def test_empty_file_is_an_error(tmp_path):
    f = write(tmp_path, "x.csv", "year,country,product,value\n")
    with pytest.raises(ValidationError, match="empty panel"):
        load_export_csv(f)


def test_negative_value_rejected(tmp_path):
    f = write(tmp_path, "x.csv", "year,country,product,value\n2000,A,1006,-3\n")
    with pytest.raises(ValidationError):
        load_export_csv(f)


def test_malformed_row_reports_line(tmp_path):
    f = write(tmp_path, "x.csv", "year,country,product,value\n2000,A,1006,1\n2001,A,1006\n")
    with pytest.raises(ParseError, match="line 3"):
        load_export_csv(f)
    f = write(tmp_path, "y.csv", "year,country,product,value\n2000,A,1006,abc\n")
    with pytest.raises(ParseError, match="line 2"):
        load_export_csv(f)


def test_short_product_code_rejected(tmp_path):
    f = write(tmp_path, "x.csv", "year,country,product,value\n2000,A,100630,1\n2000,B,1006,2\n")
    with pytest.raises(ValidationError, match="shorter than 6"):
        load_export_csv(f, 6)


def test_missing_cells_zero_and_years_contiguous(tmp_path):
    f = write(tmp_path, "x.csv",
              "year,country,product,value\n2000,A,1006,1\n2002,B,2204,2\n")
    panel = load_export_csv(f)
    assert panel.years == (2000, 2001, 2002)
    assert panel.values.sum() == 3
    assert panel.zero_export_countries(2001) == ["A", "B"]


def test_round_trip(tmp_path):
    text = ("year,country,product,value\n"
            "2000,A,1006,12\n2000,B,1006,0.25\n2000,B,2204,3\n2001,A,2204,1.5\n")
    f = write(tmp_path, "x.csv", text)
    out = tmp_path / "y.csv"
    write_export_csv(load_export_csv(f), out)
    assert sorted(out.read_text().splitlines()) == sorted(text.splitlines())


def test_aggregation_associative(tmp_path):
    rows = ["year,country,product,value"]
    rng = np.random.default_rng(3)
    for year in (2000, 2001):
        for c in "ABC":
            for p in ("100630", "100610", "220410", "220421", "010121"):
                if rng.random() < 0.7:
                    rows.append(f"{year},{c},{p},{rng.integers(1, 100)}")
    f = write(tmp_path, "x.csv", "\n".join(rows) + "\n")
    six = load_export_csv(f, 6)
    four = load_export_csv(f, 4)
    agg = aggregate_panel(six, 4)
    assert agg.products == four.products
    np.testing.assert_array_equal(agg.values, four.values)


def test_registry_bijection():
    r = Registry(("AAA", "BBB"))
    assert [r.index(c) for c in r] == [0, 1]
    with pytest.raises(ValidationError):
        Registry(("A", "A"))


def test_panel_rejects_non_contiguous_years():
    with pytest.raises(ValidationError):
        ExportPanel(Registry(("A",)), Registry(("1006",)), (2000, 2002), np.ones((1, 1, 2)))


def test_gdp_loader(tmp_path):
    f = write(tmp_path, "g.csv", "year,country,gdppc\n2000,A,1000\n2001,A,1100\n2001,B,50\n")
    gdp = load_gdp_csv(f)
    assert gdp.vector(2000)[gdp.countries.index("A")] == 1000
    assert gdp.missing(2000) == ["B"]
    bad = write(tmp_path, "b.csv", "year,country,gdppc\n2000,A,0\n")
    with pytest.raises(ValidationError):
        load_gdp_csv(bad)


def test_gdp_alignment_reports_missing_exporters(tmp_path):
    e = write(tmp_path, "e.csv", "year,country,product,value\n2000,A,1006,1\n2000,Z,1006,2\n")
    g = write(tmp_path, "g.csv", "year,country,gdppc\n2000,A,1000\n")
    aligned, excluded = align_gdp(load_gdp_csv(g), load_export_csv(e))
    assert excluded == {2000: ["Z"]}
    assert np.isnan(aligned.vector(2000)[1])


def core_mcp(panel, year):
    c, p = core_indices(panel)
    return threshold_mcp(compute_rca(panel, year)).m[np.ix_(c, p)]


def test_nested_generator_without_noise_is_stairstep():
    panel, _ = synth_panel(SynthSpec("nested", countries=3, products=3, years=2), seed=1)
    for year in panel.years:
        np.testing.assert_array_equal(core_mcp(panel, year), [[1, 1, 1], [1, 1, 0], [1, 0, 0]])


def test_generator_rca_matches_design_exactly():
    spec = SynthSpec("flicker", countries=6, products=9, years=7, noise=0.3)
    panel, _ = synth_panel(spec, seed=2)
    c, p = core_indices(panel)
    # regime levels are +/- amplitude plus noise; RCA must reproduce exp(level)
    levels = panel.meta["truth"]
    for t, year in enumerate(panel.years):
        rca = compute_rca(panel, year).rca[np.ix_(c, p)]
        assert np.all(rca > 0)
        agree = (rca >= 1) == (levels[:, :, t] == 1)
        assert 0.3 < agree.mean() < 1.0


def test_flicker_switch_changes_true_regime_once():
    spec = SynthSpec("flicker", countries=4, products=5, years=10, noise=0.2,
                     switch_rate=1.0, switch_year=5)
    panel, _ = synth_panel(spec, seed=3)
    truth = panel.meta["truth"]
    changes = np.abs(np.diff(truth, axis=2)).sum(axis=2)
    assert np.all(changes == 1)
    assert np.all(truth[:, :, 5] != truth[:, :, 4])


def test_generators_are_deterministic():
    spec = SynthSpec("flicker", noise=0.3)
    a, ga = synth_panel(spec, 7)
    b, gb = synth_panel(spec, 7)
    assert a.values.tobytes() == b.values.tobytes()
    assert ga.values.tobytes() == gb.values.tobytes()
    c, _ = synth_panel(spec, 8)
    assert a.values.tobytes() != c.values.tobytes()
    t1 = synth_trajectories(SynthSpec("drift"), 7)
    t2 = synth_trajectories(SynthSpec("drift"), 7)
    assert t1.positions.tobytes() == t2.positions.tobytes()


def test_unknown_generator():
    with pytest.raises(ValueError, match="unknown generator"):
        synth_panel(SynthSpec("bogus"), 0)


def test_provenance_sidecar(tmp_path):
    panel, _ = synth_panel(SynthSpec("nested", countries=3, products=3, years=2), seed=1)
    meta = {k: v for k, v in panel.meta.items() if k != "truth"}
    write_provenance(tmp_path / "p.json", meta)
    back = json.loads((tmp_path / "p.json").read_text())
    assert back["seed"] == 1 and back["spec"]["generator"] == "nested"


def test_stairstep_shape():
    np.testing.assert_array_equal(stairstep(3, 3), [[1, 1, 1], [1, 1, 0], [1, 0, 0]])
    assert stairstep(30, 30).sum() == 465
