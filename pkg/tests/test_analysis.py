import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from homtest import analysis as an
from homtest.analysis import DipData, fit_dip, likelihood_ratio_test, visibility_from_fit
from homtest.config import REFERENCE_DELAYS_PS
from homtest.detection import CoincidenceHistogram, normalize_histogram
from homtest.synthetic import DipTruth, synthetic_experiment

from oracles import anova_reference, fit_dip_scipy, power_reference_mc

TAU = np.array(REFERENCE_DELAYS_PS)
WHOLE = (0.283, 1.05, 3.12, 0.0)


def noisy(truth=WHOLE, s=0.02, seed=0, tau=TAU):
    rng = np.random.default_rng(seed)
    sd = np.full(tau.size, s)
    return DipData(tau, an.dip_model(tau, *truth) + sd * rng.standard_normal(tau.size), sd)


def test_dipdata_validation():
    with pytest.raises(ValueError):
        DipData(TAU[:4], np.ones(4), np.ones(4))
    with pytest.raises(ValueError):
        DipData(TAU, np.ones(TAU.size), np.zeros(TAU.size))
    with pytest.raises(ValueError):
        DipData(TAU, np.ones(TAU.size), np.ones(TAU.size - 1))
    with pytest.raises(ValueError):
        DipData.with_covariance(TAU, np.ones(TAU.size), -np.eye(TAU.size))


def test_initial_guess_ties_go_to_smallest_t():
    y = np.ones(TAU.size)
    y[[3, 7]] = 0.7
    g = an.initial_guess(DipData(TAU[::-1], y[::-1], np.ones(TAU.size)))
    assert g[1] == TAU[3] and g[0] == pytest.approx(0.3) and g[2] == 3.0 and g[3] == 0.0


def test_noiseless_recovery():
    data = DipData(TAU, an.dip_model(TAU, *WHOLE), np.full(TAU.size, 0.01))
    fit = fit_dip(data)
    assert np.allclose(fit.params, WHOLE, atol=1e-6)
    assert fit.chi2 < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_fit_matches_scipy_oracle(seed):
    data = noisy(seed=seed)
    fit = fit_dip(data)
    ref, ref_cov, ref_chi2 = fit_dip_scipy(data.t, data.y, data.s, an.initial_guess(data))
    ref[2] = abs(ref[2])
    if ref_chi2 < fit.chi2 - 1e-9:
        pytest.fail(f"scipy found a lower minimum: {ref_chi2} < {fit.chi2}")
    if abs(ref_chi2 - fit.chi2) < 1e-9 * max(1, fit.chi2):
        assert np.allclose(fit.params, ref, rtol=1e-6, atol=1e-7)
        assert np.allclose(fit.covariance, ref_cov, rtol=1e-4, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_translation_invariance(seed, shift):
    data = noisy(seed=seed, s=0.01)
    moved = DipData(data.t + shift, data.y, data.s)
    a, b = fit_dip(data), fit_dip(moved)
    # the cost-change stopping rule fixes t0 only to ~sqrt(rtol) of its scale
    assert b.t0 - a.t0 == pytest.approx(shift, abs=1e-6)
    assert np.allclose(np.delete(a.params, 1), np.delete(b.params, 1), atol=1e-6)


def test_flat_data_is_flagged():
    data = DipData(TAU, np.ones(TAU.size), np.full(TAU.size, 0.01))
    with pytest.raises(an.SingularFitError):
        fit_dip(data)
    rng = np.random.default_rng(3)
    flatish = DipData(TAU, 1 + 0.01 * rng.standard_normal(TAU.size), np.full(TAU.size, 0.01))
    try:
        fit = fit_dip(flatish)
    except an.FitError:
        return
    assert fit.degenerate and visibility_from_fit(fit).indeterminate


def test_iteration_cap_raises():
    with pytest.raises(an.ConvergenceError):
        fit_dip(noisy(seed=1), init=(0.01, 20.0, 30.0, 0.5), max_iter=2)


def test_gls_with_diagonal_covariance_equals_weighted_fit():
    data = noisy(seed=5)
    gls = DipData.with_covariance(data.t, data.y, np.diag(data.s ** 2))
    assert np.allclose(fit_dip(gls).params, fit_dip(data).params, atol=1e-10)


def test_gls_matches_whitened_scipy_fit():
    rng = np.random.default_rng(9)
    n = TAU.size
    cov = 1e-4 * (np.eye(n) + 0.5 * np.ones((n, n)))
    y = an.dip_model(TAU, *WHOLE) + np.linalg.cholesky(cov) @ rng.standard_normal(n)
    fit = fit_dip(DipData.with_covariance(TAU, y, cov))
    L = np.linalg.cholesky(cov)
    from scipy.linalg import solve_triangular
    from scipy.optimize import least_squares
    res = least_squares(lambda q: solve_triangular(L, y - an.dip_model(TAU, *q), lower=True), fit.params * 1.05,
                        method="lm", xtol=1e-15, ftol=1e-15)
    assert np.allclose(fit.params, res.x, rtol=1e-6, atol=1e-8)


def test_visibility_examples():
    cov = np.diag([1e-4, 1e-2, 1e-2, 4e-4])
    fit = an.DipFit(0.25, 1.0, 3.0, 0.0, cov, 1.0, 11, 5)
    v = visibility_from_fit(fit)
    assert v.V == pytest.approx(0.25) and v.std == pytest.approx(math.sqrt(5e-4))
    assert visibility_from_fit(an.DipFit(0.0, 1.0, 3.0, 0.1, cov, 1.0, 11, 5)).V == pytest.approx(0.0)
    with pytest.raises(an.FitError):
        visibility_from_fit(an.DipFit(0.2, 1.0, 3.0, 1.0, cov, 1.0, 11, 5))
    unmod = fit_dip(DipData(TAU, an.dip_model(TAU, 0.299, 1.36, 3.28, 0.0), np.full(TAU.size, 0.01)))
    assert visibility_from_fit(unmod).V == pytest.approx(0.299, abs=1e-6)


@given(st.floats(0.01, 1e4))
def test_visibility_invariant_under_count_rescaling(k):
    rng = np.random.default_rng(1)
    rates = np.outer(an.dip_model(TAU, *WHOLE), np.ones(5)) * (1 + 0.03 * rng.standard_normal((TAU.size, 5)))
    trials = 10**9
    h1 = CoincidenceHistogram("g", TAU, np.rint(rates * 1e5).astype(np.int64), np.full(rates.shape, trials))
    h2 = CoincidenceHistogram("g", TAU, np.rint(rates * 1e5).astype(np.int64), np.full(rates.shape, int(trials * k)))
    v1 = visibility_from_fit(fit_dip(an.histogram_data(normalize_histogram(h1)))).V
    v2 = visibility_from_fit(fit_dip(an.histogram_data(normalize_histogram(h2)))).V
    assert v1 == pytest.approx(v2, abs=1e-9)


def four_groups(seed, s=0.02, truths=(WHOLE,) * 4):
    return [noisy(t, s, seed * 10 + i) for i, t in enumerate(truths)]


def test_lr_identical_groups():
    d = noisy(seed=2)
    r = likelihood_ratio_test([d, d, d, d])
    assert r.df == 12 and abs(r.statistic) < 1e-8 and r.p_value == pytest.approx(1.0)
    assert likelihood_ratio_test([d, d]).df == 4


def test_lr_errors():
    d = noisy(seed=2)
    with pytest.raises(ValueError):
        likelihood_ratio_test([d])
    with pytest.raises(ValueError):
        likelihood_ratio_test([d, d], group_fits=[fit_dip(d)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_lr_nonnegative_for_nested_fits(seed):
    r = likelihood_ratio_test(four_groups(seed))
    assert r.statistic >= -1e-9 and 0 <= r.p_value <= 1


def test_lr_null_p_values_uniform():
    n = 2000
    ps = [likelihood_ratio_test(four_groups(seed, s=0.01)).p_value for seed in range(n)]
    assert stats.kstest(ps, "uniform").statistic < 1.36 / math.sqrt(n)


def test_lr_detects_shifted_group():
    truths = (WHOLE, WHOLE, WHOLE, (0.133, 1.05, 3.12, 0.0))
    assert likelihood_ratio_test(four_groups(1, s=0.01, truths=truths)).p_value < 1e-4


def test_anova_matches_scipy():
    rng = np.random.default_rng(4)
    groups = [rng.normal(m, 1.0, n) for m, n in ((0, 5), (0.3, 6), (1.0, 4), (0.1, 5))]
    r = an.anova_oneway(groups)
    ref = anova_reference(groups)
    assert r.F == pytest.approx(ref.statistic, rel=1e-12) and r.p_value == pytest.approx(ref.pvalue, rel=1e-9)
    assert (r.df_between, r.df_within) == (3, 16) and not r.degenerate


def test_anova_degenerate_and_errors():
    r = an.anova_oneway([[1.0, 1.0], [1.0, 1.0]])
    assert r.degenerate and r.p_value == 1.0
    r = an.anova_oneway([[1.0, 1.0], [2.0, 2.0]])
    assert r.degenerate and r.p_value == 0.0 and math.isinf(r.F)
    with pytest.raises(ValueError):
        an.anova_oneway([[1.0, 2.0], [1.0]])
    with pytest.raises(ValueError):
        an.anova_oneway([[1.0, 2.0]])


def test_anova_null_uniform():
    rng = np.random.default_rng(12)
    ps = [an.anova_oneway([rng.normal(0, 1, 5) for _ in range(4)]).p_value for _ in range(500)]
    assert stats.kstest(ps, "uniform").statistic < 1.36 / math.sqrt(500)


def test_anova_reference_scale_dip_positions():
    rng = np.random.default_rng(13)
    stds = (0.21, 0.40, 0.25, 0.27)
    kept = np.mean([an.anova_oneway([rng.normal(1.05, s, 5) for s in stds]).p_value > 0.05 for _ in range(500)])
    assert kept >= 0.90


def test_power_limits_and_oracle():
    assert an.power_analysis(0.0, 0.02, 0.05) == pytest.approx(0.05)
    assert an.power_analysis(0.0, 0.02, 0.05, "one-sided") == pytest.approx(0.05)
    assert an.power_analysis(10.0, 0.02) == pytest.approx(1.0)
    mc = power_reference_mc(0.05, 0.02, 0.05, 400_000, np.random.default_rng(0))
    assert an.power_analysis(0.05, 0.02) == pytest.approx(mc, abs=4e-3)
    mc1 = power_reference_mc(0.05, 0.02, 0.05, 400_000, np.random.default_rng(1), one_sided=True)
    assert an.power_analysis(0.05, 0.02, alternative="one-sided") == pytest.approx(mc1, abs=4e-3)
    with pytest.raises(ValueError):
        an.power_analysis(0.05, 0.0)
    with pytest.raises(ValueError):
        an.power_analysis(0.05, 0.02, alternative="greater")


@given(st.floats(0, 0.5), st.floats(1e-3, 0.1))
def test_power_monotone(dv, std):
    assert an.power_analysis(dv, std) <= an.power_analysis(dv + 0.01, std) + 1e-15


def test_reference_scale_power():
    assert an.power_analysis(0.05, 0.014, alternative="one-sided") == pytest.approx(0.80, abs=0.05)


@given(st.floats(1e-3, 0.1), st.floats(0.1, 0.95))
def test_detectable_difference_inverts_power(std, power):
    dv = an.detectable_difference(std, 0.05, power)
    assert an.power_analysis(dv, std) == pytest.approx(power, abs=1e-9)


def test_pooled_std():
    rng = np.random.default_rng(0)
    hs = [normalize_histogram(h) for h in synthetic_experiment(rng)]
    s = an.pooled_std(hs)
    assert np.allclose(s ** 2, np.mean([h.s ** 2 for h in hs], axis=0))
    nu = sum(h.n_repeats - 1 for h in hs)
    assert np.allclose(an.pooled_std(hs, unbiased_precision=True) ** 2, s ** 2 * nu / (nu - 2))


def test_normalization_covariance_matches_simulation():
    rng = np.random.default_rng(6)
    n_rep, sims = 5, 40_000
    mean = an.dip_model(TAU, *WHOLE)
    sd = 0.02 * np.ones(TAU.size)
    raw = mean[None, :, None] + sd[None, :, None] * rng.standard_normal((sims, TAU.size, n_rep))
    y = raw.mean(axis=2)
    y = y / y[:, :1]
    emp = np.cov(y[:, 1:], rowvar=False)
    h = an.NormalizedHistogram("g", TAU, mean, sd, np.tile(mean[:, None], (1, n_rep)))
    model = an.normalized_covariance_data(h, sd, -26.0).cov
    assert np.allclose(emp, model, atol=0.03 * np.max(model))


def test_certify_single_group():
    rng = np.random.default_rng(2)
    rep = an.certify(synthetic_experiment(rng, groups=("unmodulated",)))
    assert rep.lr is None and rep.anova is None and rep.verdict == "not rejected" and rep.exit_code == 0
    assert any("single group" in n for n in rep.notes)


def test_certify_null_and_defect():
    rng = np.random.default_rng(3)
    rep = an.certify(synthetic_experiment(rng))
    assert rep.lr.df == 12 and rep.anova.df_between == 3
    assert rep.verdict in ("not rejected", "rejected")
    assert len(rep.as_dict()["table"]) == 5
    bad = an.certify(synthetic_experiment(rng, visibility_defect={"Y1-X0": 0.15}))
    assert bad.verdict == "rejected" and bad.lr.p_value < 0.05 and bad.exit_code == 2


def test_certify_null_mostly_not_rejected():
    rng = np.random.default_rng(4)
    verdicts = [an.certify(synthetic_experiment(rng)).verdict for _ in range(30)]
    assert verdicts.count("not rejected") >= 22


def test_certify_errors_and_indeterminate():
    rng = np.random.default_rng(5)
    hs = synthetic_experiment(rng, groups=("unmodulated", "X1-X0"))
    with pytest.raises(ValueError):
        an.certify([])
    with pytest.raises(ValueError):
        an.certify([hs[0], hs[0]])
    with pytest.raises(ValueError):
        an.certify(hs, alpha=1.5)
    const = np.full((TAU.size, 3), 1000)
    flat = [CoincidenceHistogram(g, TAU, const, np.full(const.shape, 10**6)) for g in ("a", "b", "c")]
    rep = an.certify(flat)
    assert rep.verdict == "indeterminate" and rep.exit_code == 3
