import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from logvol import factor_pipeline as fp
from logvol import stats_core as sc
from logvol.dbht import Clustering
from logvol.panel_io import PricePanel, RawSeries, clean_panel
from logvol.synth import SynthSpec, generate_panel

LIGHT = dict(a_grid=(0.0, 0.5, 1.0), n_lambda=20, folds=5, n_perm=None)


def logvol_of(spec):
    panel, truth = generate_panel(spec)
    return fp.log_abs_transform(fp.log_returns(panel), panel.tickers), truth


@pytest.fixture(scope="module")
def planted():
    spec = SynthSpec(30, 1500, (10, 10, 10), market_memory=0.6,
                     cluster_memory=(0.7, 0.7, 0.7), noise=0.7, seed=4)
    lv, truth = logvol_of(spec)
    dec = fp.decompose(lv, "eigen", Clustering(truth.membership), **LIGHT)
    return lv, truth, dec


def dates(n):
    return np.datetime64("2000-01-03") + np.arange(n)


# -- transforms


def test_log_returns_matches_two_line_oracle(rng):
    prices = 50 * np.exp(np.cumsum(rng.normal(0, 0.02, (4, 300)), axis=1))
    panel = PricePanel(list("abcd"), dates(300), prices)
    r = np.diff(np.log(prices), axis=1)
    z = (r - r.mean(axis=1, keepdims=True)) / r.std(axis=1, keepdims=True)
    np.testing.assert_allclose(fp.log_returns(panel), z, atol=1e-12)
    raw = fp.log_returns(PricePanel(["a", "b"], dates(2), [[100, 110], [1, 2]]), standardize=False)
    assert raw[0, 0] == pytest.approx(np.log(1.1))


def test_constant_price_named_in_error():
    panel = PricePanel(["FLAT", "MOVE"], dates(3), [[5, 5, 5], [1, 2, 3]])
    with pytest.raises(fp.TransformError, match="FLAT"):
        fp.log_returns(panel)


def test_log_abs_is_sign_symmetric():
    e = np.e
    lv = fp.log_abs_transform(np.array([[e, -e, e * e, -1.0]]))
    np.testing.assert_allclose(lv.log_mean, [np.mean([1, 1, 2, 0])])
    assert lv.omega[0, 0] == lv.omega[0, 1]


def test_zero_returns_are_clamped(rng):
    r = rng.normal(size=(2, 50))
    r[0, [3, 10, 20]] = 0.0
    lv = fp.log_abs_transform(r)
    assert list(lv.floor_count) == [3, 0]
    assert np.all(np.isfinite(lv.omega))
    low = np.log(np.abs(r[0][r[0] != 0]).min())
    z = (low - lv.log_mean[0]) / lv.log_std[0]
    np.testing.assert_allclose(lv.omega[0, [3, 10, 20]], z)
    with pytest.raises(fp.TransformError):
        fp.log_abs_transform(np.zeros((1, 5)))


def test_dragged_gaps_flow_through_the_pipeline(rng):
    T = 600
    spec = SynthSpec(12, T, (6, 6), seed=1)
    panel, _ = generate_panel(spec)
    series = []
    for t, row in zip(panel.tickers, panel.prices):
        keep = rng.random(T) > 0.05
        keep[0] = True
        series.append(RawSeries(t, panel.dates[keep], row[keep]))
    clean = clean_panel(series)
    r = fp.log_returns(clean)
    dragged = np.diff(clean.prices, axis=1) == 0
    assert dragged.any() and np.all(r[dragged] == 0.0)
    lv = fp.log_abs_transform(r, clean.tickers)
    np.testing.assert_array_equal(lv.floor_count, dragged.sum(axis=1))
    assert np.all(np.isfinite(lv.omega))
    dec = fp.decompose(lv, "equal", Clustering(np.repeat([1, 2], 6)), **LIGHT)
    rep = fp.memory_filtration(dec.stages(lv.omega), dec.clustering.labels)
    assert rep.eta.shape == (12, 4)


# -- modes and market removal


def test_equal_market_mode_is_row_mean(rng):
    lv = fp.log_abs_transform(rng.normal(size=(2, 100)))
    m = fp.market_mode(lv, "equal")
    np.testing.assert_allclose(m.values, lv.omega.mean(axis=0))


def test_identical_rows_give_proportional_mode(rng):
    row = rng.normal(size=200)
    lv = fp.log_abs_transform(np.vstack([row, row, row]))
    for scheme in ("eigen", "equal"):
        m = fp.market_mode(lv, scheme).values
        assert abs(np.corrcoef(m, lv.omega[0])[0, 1]) == pytest.approx(1.0)


def test_eigen_market_mode_recovers_planted_factor():
    lv, truth = logvol_of(SynthSpec(20, 2000, (20,), market_memory=0.5, noise=0.8, seed=0,
                                    cluster_loading=(0.0, 0.0)))
    m = fp.market_mode(lv, "eigen").values
    assert np.corrcoef(m, truth.factors[0])[0, 1] > 0.95


def test_exact_market_loading():
    rng = np.random.default_rng(0)
    base = sc.standardize_rows(rng.normal(size=300))
    mode = fp.ModeSeries("market", base, sc.equal_weights(1), np.arange(1))
    lv = fp.LogVolPanel(["a"], (2 * base)[None, :], np.zeros(1))
    rem = fp.remove_market(lv, mode)
    assert rem.beta[0] == pytest.approx(2.0)
    assert np.max(np.abs(rem.residuals)) < 1e-12
    assert rem.scale[0] == 1.0


def test_market_residuals_are_orthogonal(planted):
    lv, _, dec = planted
    c = [abs(np.corrcoef(r, dec.market.values)[0, 1]) for r in dec.removal.residuals]
    assert np.median(c) < 0.02


def test_leave_one_out_modes(rng):
    rows = rng.normal(size=(4, 50))
    eq = fp.ModeSeries("cluster", rows[[1, 2, 3]].mean(axis=0), sc.equal_weights(3),
                       np.array([1, 2, 3]), 1)
    np.testing.assert_allclose(eq.leave_one_out(rows, 2), rows[[1, 3]].mean(axis=0))
    np.testing.assert_array_equal(eq.leave_one_out(rows, 0), eq.values)
    w = np.array([0.5, 0.3, 0.2])
    ei = fp.ModeSeries("cluster", w @ rows[[1, 2, 3]], sc.WeightVector(w, "eigen"),
                       np.array([1, 2, 3]), 1)
    np.testing.assert_allclose(ei.leave_one_out(rows, 1), 0.3 * rows[2] + 0.2 * rows[3])
    single = fp.ModeSeries("cluster", rows[0], sc.equal_weights(1), np.array([0]), 1)
    assert np.all(single.leave_one_out(rows, 0) == 0)


def test_loo_market_residuals_match_direct_refit(planted):
    lv, _, dec = planted
    i = 5
    rows = fp.loo_market_residuals(lv.omega, dec.market, i)
    m = dec.market.values - dec.market.weights.weights[i] * lv.omega[i]
    for j in (0, 5, 17):
        fit = np.polyfit(m, lv.omega[j], 1)
        res = lv.omega[j] - np.polyval(fit, m)
        np.testing.assert_allclose(rows[j], res / res.std(), atol=1e-9)


def test_cluster_modes_singleton_and_identical_members(rng):
    c = sc.standardize_rows(rng.normal(size=(3, 100)))
    c[1] = c[0]
    modes = fp.cluster_modes(c, Clustering([1, 1, 2]), "equal")
    np.testing.assert_allclose(modes[0].values, c[0])
    np.testing.assert_array_equal(modes[1].values, c[2])
    modes = fp.cluster_modes(c, Clustering([1, 1, 2]), "eigen")
    assert modes[1].weights.weights == pytest.approx([1.0])


def test_cluster_modes_track_planted_factors():
    # market removal leaves about F_k minus the mean of the other cluster
    # factors, so recovery needs enough clusters for that mean to be small
    spec = SynthSpec(80, 2000, (8,) * 10, market_memory=0.6, cluster_memory=(0.7,) * 10,
                     noise=0.5, seed=0)
    lv, truth = logvol_of(spec)
    rem = fp.remove_market(lv, fp.market_mode(lv))
    modes = fp.cluster_modes(rem.standardized, Clustering(truth.membership))
    for k, m in enumerate(modes):
        assert np.corrcoef(m.values, truth.factors[k + 1])[0, 1] > 0.9


def test_eigen_and_equal_cluster_modes_agree(planted):
    _, truth, dec = planted
    c = dec.removal.standardized
    eq = fp.cluster_modes(c, dec.clustering, "equal")
    for a, b in zip(dec.modes, eq):
        assert np.corrcoef(a.values, b.values)[0, 1] > 0.99


# -- per-stock elastic net


def test_own_mode_identity_loading(rng):
    X = rng.normal(size=(500, 3))
    y = sc.standardize_rows(X[:, 1])
    cm, eps, fit = fp.remove_cluster_and_interactions(y, X, 2, a_grid=(0.0, 1.0), folds=5, n_perm=None)
    assert fit.cluster_beta * X[:, 1].std() == pytest.approx(1.0, abs=0.02)
    assert np.all(np.abs(fit.interaction_betas) < 0.02)
    assert np.std(eps) < 0.02


def test_pure_noise_residual_is_left_alone(rng):
    X = rng.normal(size=(800, 3))
    y = sc.standardize_rows(rng.normal(size=800))
    cm, eps, fit = fp.remove_cluster_and_interactions(y, X, 1, a_grid=(0.5, 1.0), folds=5, n_perm=None)
    assert np.all(np.abs(fit.loadings) < 0.1)
    assert np.corrcoef(eps, y)[0, 1] > 0.99


def test_planted_interaction_is_selected():
    for seed in range(5):
        spec = SynthSpec(60, 1500, (10,) * 6, market_memory=0.5, cluster_memory=(0.5,) * 6,
                         interactions=((0, 1, 0.8),), interaction_share=0.5,
                         market_loading=(1.5, 2.0), seed=seed)
        lv, truth = logvol_of(spec)
        dec = fp.decompose(lv, "eigen", Clustering(truth.membership), **LIGHT)
        L = np.array([f.loadings for f in dec.fits])
        carriers = L[:5, 1]
        other = np.ones_like(L, dtype=bool)
        other[np.arange(60), truth.membership - 1] = False
        other[:10, 1] = False
        assert np.all(carriers > 0)
        assert np.median(carriers) > 5 * np.median(np.abs(L[other]))


def test_reconstruction_is_exact(planted):
    lv, _, dec = planted
    for i in (0, 11, 29):
        np.testing.assert_allclose(dec.reconstruct(lv.omega, i), lv.omega[i], atol=1e-9)
    recs = dec.fits[0].to_record("S000")
    assert recs["cluster"] == 1 and len(recs["loadings"]) == 3


def test_singleton_cluster_gets_zero_own_loading():
    lv, truth = logvol_of(SynthSpec(12, 800, (6, 6), seed=3))
    labels = np.repeat([1, 2], 6)
    labels[0] = 3
    labels = np.concatenate(([1], np.repeat([2, 3], [5, 6])))
    dec = fp.decompose(lv, "equal", Clustering(labels), **LIGHT)
    assert dec.fits[0].cluster_beta == 0.0
    np.testing.assert_allclose(dec.reconstruct(lv.omega, 0), lv.omega[0], atol=1e-9)


# -- filtration


def test_no_op_stages_give_unit_ratios(rng):
    kernel = np.ones(20) / 20
    x = np.vstack([np.convolve(rng.normal(size=620), kernel, "valid")[:600] for _ in range(5)])
    rep = fp.memory_filtration([x, x, x, x])
    assert np.all(rep.eta[:, 0] > 0)
    np.testing.assert_allclose(rep.ratios, 1.0)
    np.testing.assert_allclose(rep.fractions, np.tile([0, 0, 0, 1.0], (5, 1)))
    assert not rep.groups["market"].significant.any()


def test_stock_ratios_rules():
    r, f, notes = fp.stock_ratios([2.0, 1.0, 0.5, 0.25])
    np.testing.assert_allclose(r, [0.5, 0.5, 0.5])
    np.testing.assert_allclose(f, [0.5, 0.25, 0.125, 0.125])
    r, f, notes = fp.stock_ratios([2.0, 0.0, -0.1, 0.3])
    assert r[0] == 0.0 and np.isnan(r[1]) and np.isnan(r[2])
    assert len(notes) == 2
    assert f.sum() == pytest.approx(1.0) and np.all(f >= 0)
    r, f, _ = fp.stock_ratios([-1.0, 1.0, 1.0, 1.0])
    assert np.isnan(f).all()


def test_market_only_memory():
    spec = SynthSpec(40, 2000, (10,) * 4, market_memory=0.8, seed=2)
    lv, truth = logvol_of(spec)
    dec = fp.decompose(lv, "eigen", Clustering(truth.membership), **LIGHT)
    rep = fp.memory_filtration(dec.stages(lv.omega), dec.clustering.labels)
    assert rep.groups["market"].fractions[0] > 0.8
    assert rep.groups["market"].significant[0]
    assert not rep.groups["market"].significant[1]
    assert fp.select_cluster_factors(rep) == []


def test_all_noise_selects_nothing(rng):
    x = rng.normal(size=(12, 800))
    labels = np.repeat([1, 2, 3], 4)
    rep = fp.memory_filtration([x, x + 0.1 * rng.normal(size=x.shape), x, x], labels)
    assert fp.select_cluster_factors(rep) == []


def test_filtration_outputs(planted):
    lv, _, dec = planted
    rep = fp.memory_filtration(dec.stages(lv.omega), dec.clustering.labels, lv.tickers)
    assert set(rep.groups) == {"market", 1, 2, 3}
    for g in rep.groups.values():
        assert g.fractions.sum() == pytest.approx(1.0, abs=1e-9)
    ok = np.isfinite(rep.fractions).all(axis=1)
    np.testing.assert_allclose(rep.fractions[ok].sum(axis=1), 1.0, atol=1e-9)
    res = fp.residual_fraction(rep)
    np.testing.assert_allclose(res[ok], np.clip(rep.eta[ok, 3], 0, None) / rep.eta[ok, 0])
    assert rep.stock_records()[0]["ticker"] == lv.tickers[0]
    scatter = fp.memory_scatter(lv, rep)
    assert set(scatter["tests"]) == {"eta_vs_beta", "eta_vs_lcut", "rho_vs_eta", "rho_vs_beta"}
    assert len(scatter["points"]) == 30


def test_filtration_rejects_wrong_stage_count(rng):
    with pytest.raises(ValueError):
        fp.memory_filtration([rng.normal(size=(2, 200))] * 3)


@given(arrays(np.float64, 4, elements=st.floats(-2, 5).map(lambda v: round(v, 6))))
def test_fractions_are_shares(eta_row):
    r, f, _ = fp.stock_ratios(eta_row)
    if eta_row[0] > 0:
        assert np.all(f >= 0) and f.sum() == pytest.approx(1.0, abs=1e-9)
    else:
        assert np.isnan(f).all()
    assert np.all(np.isnan(r) | (r >= 0))


# -- enrichment


def test_fully_enriched_cluster():
    labels = np.repeat([1, 2, 3], [10, 45, 45])
    sectors = ["RARE"] * 10 + ["A", "B", "C"] * 30
    res = fp.sector_enrichment(Clustering(labels), sectors)
    assert res[0].dominant_sector == "RARE" and res[0].significant
    assert res[0].p < 1e-6
    assert res[0].to_record()["overlap"] == 10


def test_modal_sector_tie_goes_alphabetical():
    res = fp.sector_enrichment(Clustering([1, 1, 1, 1, 2, 2]), ["Z", "Z", "B", "B", "Q", "Q"])
    assert res[0].dominant_sector == "B"
    with pytest.raises(ValueError):
        fp.sector_enrichment(Clustering([1, 1]), ["a"])
    assert fp.default_bonferroni(29, 19) == pytest.approx(275.5)
