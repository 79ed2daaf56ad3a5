import numpy as np
import pytest

from homtest import synthetic as syn
from homtest.analysis import DipData, fit_dip, histogram_data, visibility_from_fit
from homtest.detection import normalize_histogram


def test_table_rows_are_the_reference_values():
    assert syn.REFERENCE_TABLE["whole"] == syn.TableRow(0.283, 0.014, 1.05, 0.12, 3.12, 0.12)
    assert syn.REFERENCE_TABLE["unmodulated"].V == 0.299
    assert set(syn.GROUPS) | {"whole"} == set(syn.REFERENCE_TABLE)


def test_noise_profile_shape():
    truth = syn.DipTruth()
    p = syn.noise_profile([truth.t0, 1e3], truth, floor=0.25)
    assert p == pytest.approx([1.25, 0.25])


def test_noise_scale_meets_target_at_fisher_level():
    row = syn.REFERENCE_TABLE["Y0-X0"]
    k = syn.reference_noise_scale(row)
    sd = syn.fisher_std(syn.REFERENCE_DELAYS_PS, syn.DipTruth(), k * syn.noise_profile(syn.REFERENCE_DELAYS_PS, syn.DipTruth()), 5)
    assert np.all(sd <= np.array([row.std_V, row.std_t0, row.std_sigma]) * (1 + 1e-12))
    assert np.any(np.isclose(sd, [row.std_V, row.std_t0, row.std_sigma]))


def test_noiseless_histogram_recovers_truth():
    h = syn.synthetic_histogram("g", np.random.default_rng(0), noise=1e-6)
    fit = fit_dip(histogram_data(normalize_histogram(h)))
    assert visibility_from_fit(fit).V == pytest.approx(0.283, abs=1e-5)
    assert fit.t0 == pytest.approx(1.05, abs=1e-4) and fit.sigma == pytest.approx(3.12, abs=1e-4)


def test_histogram_shape_and_metadata():
    h = syn.synthetic_histogram("X1-X0", np.random.default_rng(1), repeats=4)
    assert h.counts.shape == (11, 4) and h.group == "X1-X0" and h.tau_ref_ps == -26.0


def test_calibrated_noise_not_above_fisher_level():
    cal = syn.calibrated_noise()
    for g in syn.GROUPS:
        assert 0 < cal[g] <= syn.reference_noise_scale(syn.REFERENCE_TABLE[g]) * (1 + 1e-12)


def test_defect_lowers_one_group():
    rng = np.random.default_rng(2)
    hs = syn.synthetic_experiment(rng, visibility_defect={"Y1-X0": 0.15})
    q = syn.fitted_quantities(hs)
    assert q["Y1-X0"][0] < q["unmodulated"][0] - 0.05
    assert set(q) == {*syn.GROUPS, "whole"}


def test_common_noise_gives_identical_generators():
    a = syn.synthetic_experiment(np.random.default_rng(3), common_noise=True)
    b = syn.synthetic_experiment(np.random.default_rng(3), common_noise=True)
    assert all(np.array_equal(x.counts, y.counts) for x, y in zip(a, b))
    # identical generator: group spread of the per-point repeat std is sampling noise only
    sd = np.array([(x.counts / x.trials).std(axis=1, ddof=1) for x in a])
    assert np.all(np.ptp(np.log(sd[:, 3:8]), axis=0) < 3.0)
