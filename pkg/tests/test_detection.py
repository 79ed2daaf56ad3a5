import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homtest import detection as det
from homtest.analysis import fit_dip, histogram_data, visibility_from_fit
from homtest.config import DetectorModel, DriftModel, ExperimentConfig, TiaModel
from homtest.optics import phase_averaged_coincidence
from homtest.streams import stream
from homtest.transmitter import Bb84State, LaserModel, encode_bb84

U = Bb84State.UNMODULATED
NO_DRIFT = DriftModel(0.0, 0.0, 0.0)
IDEAL_LASER = LaserModel(timing_jitter_ps=0.0, intensity_variance=0.0, frequency_scatter_ghz=0.0)


def small_config(**kw):
    base = dict(duration_per_point_s=0.01, repeats=3, state_pairs=((U, U), (Bb84State.X1, Bb84State.X0)))
    base.update(kw)
    return ExperimentConfig(**base)


def hist(counts, trials=1000, taus=(-26.0, 0.0, 26.0)):
    counts = np.asarray(counts)
    return det.CoincidenceHistogram("g", np.array(taus), counts, np.full(counts.shape, trials))


def test_histogram_validation():
    with pytest.raises(ValueError):
        hist([[1], [2], [3]])
    with pytest.raises(ValueError):
        hist([[1, -1], [2, 2], [3, 3]])
    with pytest.raises(ValueError):
        hist([[1, 1], [2, 2]])


def test_normalize_constant_histogram():
    n = det.normalize_histogram(hist([[50, 50, 50]] * 3))
    assert np.allclose(n.y, 1.0, rtol=1e-14) and np.all(n.s == 0.0)


def test_normalize_scales_std_with_mean():
    h = hist([[40, 60], [20, 30], [44, 56]])
    n = det.normalize_histogram(h)
    assert n.y[0] == 1.0
    assert np.allclose(n.s, h.std / h.mean[0]) and np.allclose(n.y, h.mean / h.mean[0])
    assert n.sem == pytest.approx(n.s / math.sqrt(2))


def test_normalize_errors():
    with pytest.raises(det.NormalizationError):
        det.normalize_histogram(hist([[0, 0], [2, 2], [3, 3]]))
    with pytest.raises(det.NormalizationError):
        det.normalize_histogram(hist([[1, 1], [2, 2], [3, 3]]), tau_ref_ps=-99.0)


def test_normalization_leaves_fitted_visibility_unchanged():
    t = np.linspace(-26, 26, 27)
    rate = 2e-4 * (1 - 0.3 * np.exp(-(t - 1) ** 2 / (2 * 3.1 ** 2)))
    trials = 10**9
    counts = np.round(np.outer(rate, [1.0, 1.01, 0.99]) * trials).astype(np.int64)
    h = det.CoincidenceHistogram("g", t, counts, np.full(counts.shape, trials))
    n = det.normalize_histogram(h)
    raw_fit = fit_dip(histogram_data(det.NormalizedHistogram("g", t, h.mean, h.std, h.rates)))
    norm_fit = fit_dip(histogram_data(n))
    assert visibility_from_fit(norm_fit).V == pytest.approx(visibility_from_fit(raw_fit).V, abs=1e-8)
    assert visibility_from_fit(norm_fit).V == pytest.approx(0.3, abs=5e-3)


def test_interfere_adjacent_examples():
    cfg = ExperimentConfig(laser=IDEAL_LASER, delay_origin_ps=0.0)
    p1, p2 = encode_bb84(U, 0.5, 0.3), encode_bb84(U, 0.5, 1.1)
    pair = det.interfere_adjacent(p1, p2, 0.0, cfg)
    assert pair.Theta == pytest.approx(0.0, abs=1e-7) and pair.mu_a == pytest.approx(pair.mu_b)
    assert pair.theta == pytest.approx(0.8)
    far = det.interfere_adjacent(p1, p2, -26.0, cfg)
    assert math.cos(far.Theta) ** 2 < 0.1
    x0 = det.interfere_adjacent(encode_bb84(Bb84State.X0, 0.5), encode_bb84(Bb84State.X0, 0.5), 0.0, cfg)
    y0 = det.interfere_adjacent(encode_bb84(Bb84State.X0, 0.5), encode_bb84(Bb84State.Y0, 0.5), 0.0, cfg)
    assert (x0.mu_a, x0.mu_b) == pytest.approx((y0.mu_a, y0.mu_b))


def test_clicks_vacuum_and_saturation():
    dets = (DetectorModel(dark_rate_hz=0.0), DetectorModel(dark_rate_hz=0.0))
    rec = det.sample_clicks((np.zeros(1000), np.zeros(1000)), dets, TiaModel(), stream(1))
    assert not rec.click_c.any() and not rec.click_d.any()
    full = (DetectorModel(efficiency=1.0), DetectorModel(efficiency=1.0))
    rec = det.sample_clicks((np.full(1000, 1e3), np.full(1000, 1e3)), full, TiaModel(), stream(1))
    assert rec.click_c.all() and rec.click_d.all()


def test_click_rate_binomial():
    n = 1_000_000
    dets = (DetectorModel(efficiency=0.63, dark_rate_hz=0.0), DetectorModel(efficiency=0.63, dark_rate_hz=0.0))
    rec = det.sample_clicks((np.full(n, 0.25), np.full(n, 0.25)), dets, TiaModel(), stream(2))
    p = 1 - math.exp(-0.63 * 0.25)
    se = math.sqrt(p * (1 - p) / n)
    assert abs(rec.click_c.mean() - p) < 3 * se
    assert abs(rec.click_d.mean() - p) < 3 * se


def test_recovery_suppresses_close_clicks():
    full = (DetectorModel(efficiency=1.0, recovery_time_ns=10.0), DetectorModel(efficiency=1.0))
    gates = np.arange(100) * 2.0
    rec = det.sample_clicks((np.full(100, 1e3), np.full(100, 1e3)), full, TiaModel(), stream(3), gates)
    assert rec.click_c.sum() == 20 and np.all(np.flatnonzero(rec.click_c) % 5 == 0)


def test_window_acceptance_limits():
    assert det.window_acceptance(1.0, [], 200.0) == pytest.approx(1.0)
    assert det.window_acceptance(100.0, [], 200.0) == pytest.approx(math.erf(1 / math.sqrt(2)), abs=1e-3)


def test_aggregate_probability_matches_closed_form():
    eta = 0.6
    dets = (DetectorModel(efficiency=eta, dark_rate_hz=0.0), DetectorModel(efficiency=eta, dark_rate_hz=0.0))
    tia = TiaModel(coincidence_window_ps=5000.0)
    cfg = ExperimentConfig(laser=IDEAL_LASER, detectors=dets, tia=tia, drift=NO_DRIFT, filter_bandwidth_ghz=1e9)
    mu_arm = cfg.mean_photons_per_pulse / 2 * cfg.interferometer_transmission
    for tau, Theta in ((cfg.delay_origin_ps, 0.0), (-26.0, math.pi / 2)):
        p = det.mean_trial_probability(cfg, (U, U), tau)
        assert p == pytest.approx(phase_averaged_coincidence(eta * mu_arm, eta * mu_arm, Theta), rel=1e-9, abs=1e-15)


def test_trials_agree_with_aggregate_probability():
    cfg = small_config(drift=NO_DRIFT)
    n = 400_000
    for tau in (-26.0, 1.0, 4.0):
        p = det.mean_trial_probability(cfg, (U, U), tau)
        k = det.simulate_trials(cfg, (U, U), tau, n, stream(17, int(tau) + 100))
        assert abs(k - n * p) < 4 * math.sqrt(n * p * (1 - p))


def test_far_detuned_coincidences_are_singles_product():
    dets = (DetectorModel(dark_rate_hz=0.0), DetectorModel(efficiency=0.8, dark_rate_hz=0.0))
    cfg = small_config(laser=IDEAL_LASER, drift=NO_DRIFT, detectors=dets, tia=TiaModel(coincidence_window_ps=5000.0))
    n = 1_000_000
    k = det.simulate_trials(cfg, (U, U), -26.0, n, stream(21))
    # without interference each port sees the mean of the two arms
    mu = cfg.mean_photons_per_pulse / 2 * cfg.interferometer_transmission
    p = (1 - math.exp(-dets[0].efficiency * mu)) * (1 - math.exp(-dets[1].efficiency * mu))
    assert abs(k - n * p) < 3 * math.sqrt(n * p * (1 - p))


def test_determinism_and_worker_invariance():
    cfg = small_config()
    a = det.run_experiment(cfg, seed=7)
    b = det.run_experiment(cfg, seed=7, workers=2)
    c = det.run_experiment(cfg, seed=8)
    for x, y in zip(a, b):
        assert np.array_equal(x.counts, y.counts) and np.array_equal(x.trials, y.trials)
    assert any(not np.array_equal(x.counts, z.counts) for x, z in zip(a, c))


def test_trial_mode_determinism():
    cfg = small_config(duration_per_point_s=0.001, delay_offsets_ps=(-26.0, 0.0, 2.0))
    a = det.run_experiment(cfg, seed=3, mode="trials")
    b = det.run_experiment(cfg, seed=3, mode="trials", workers=2)
    assert all(np.array_equal(x.counts, y.counts) for x, y in zip(a, b))


def test_zero_efficiency_gives_empty_histogram():
    dets = (DetectorModel(efficiency=0.0, dark_rate_hz=0.0), DetectorModel(efficiency=0.0, dark_rate_hz=0.0))
    for mode in ("aggregate", "trials"):
        hs = det.run_experiment(small_config(detectors=dets, duration_per_point_s=0.001), seed=1, mode=mode)
        assert all(h.counts.sum() == 0 for h in hs)


def test_run_experiment_errors():
    with pytest.raises(det.SimulationError):
        det.run_experiment(small_config(), seed=1, mode="bogus")
    with pytest.raises(det.SimulationError):
        det.run_experiment(small_config(duration_per_point_s=1.0), seed=1, mode="trials", max_trials=1000)
    with pytest.raises(det.SimulationError):
        det.run_experiment(small_config(thinning_interval_ns=1.0, duration_per_point_s=1e-6), seed=1)


def test_no_imperfections_gives_half_visibility():
    cfg = ExperimentConfig(laser=IDEAL_LASER, drift=NO_DRIFT, mean_photons_per_pulse=0.01,
                           filter_bandwidth_ghz=1e9, state_pairs=((U, U),), duration_per_point_s=30.0)
    assert det.expected_visibility(cfg, (U, U)) == pytest.approx(0.5, abs=3e-3)
    (h,) = det.run_experiment(cfg, seed=5)
    fit = fit_dip(histogram_data(det.normalize_histogram(h)))
    v = visibility_from_fit(fit)
    assert abs(v.V - det.expected_visibility(cfg, (U, U))) < 4 * v.std + 1e-3
    assert v.V == pytest.approx(0.5, abs=0.02)


def test_visibility_independent_of_state_pair_without_defects():
    cfg = ExperimentConfig()
    vs = [det.expected_visibility(cfg, p) for p in cfg.state_pairs]
    assert max(vs) - min(vs) < 1e-12


def test_default_config_dip_resembles_measurement():
    cfg = ExperimentConfig()
    v = det.expected_visibility(cfg, cfg.state_pairs[0])
    assert 0.25 <= v <= 0.32


def test_visibility_defect_helper():
    cfg = ExperimentConfig()
    base = det.expected_visibility(cfg, (Bb84State.Y1, Bb84State.X0))
    bad = det.with_visibility_defect(cfg, Bb84State.Y1, 0.15)
    assert det.expected_visibility(bad, (Bb84State.Y1, Bb84State.X0)) == pytest.approx(base - 0.15, abs=1e-9)
    assert det.expected_visibility(bad, (U, U)) == pytest.approx(base, abs=1e-12)
    with pytest.raises(ValueError):
        det.with_visibility_defect(cfg, Bb84State.Y1, 0.9)
