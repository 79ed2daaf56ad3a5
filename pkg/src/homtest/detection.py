"""Measurement chain: Michelson delay, splitter, SNSPD clicks, TIA coincidences.

Two simulation modes share the same physical model:

``"trials"``
    Every thinned pulse pair is drawn explicitly (phases, jitter, clicks,
    timestamps, detector recovery). Practical up to ~1e7 trials per point.
``"aggregate"``
    Trials are i.i.d. given the slow drift state of a measurement, so the
    coincidence count is exactly Binomial(N, p) with ``p`` the per-trial
    coincidence probability. ``p`` is computed by averaging the closed-form
    phase-averaged click statistics over the remaining per-pulse randomness
    with Gauss-Hermite quadrature. This is what makes 30 s points at
    1/51.2 ns (~5.9e8 trials) feasible.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .config import DetectorModel, ExperimentConfig, TiaModel, group_label
from .optics import PulsePair
from .special import bessel_i0
from .streams import stream
from .transmitter import (
    Bb84State,
    EmittedPulse,
    _LATE_BIN,
    chirped_mode_overlap,
    filter_transmission,
    spectral_overlap,
)


class SimulationError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CoincidenceHistogram:
    """Raw coincidence counts of one measurement group.

    ``counts`` and ``trials`` have shape (n_delays, n_repeats).
    """

    group: str
    tau_ps: np.ndarray
    counts: np.ndarray
    trials: np.ndarray
    tau_ref_ps: float = -26.0
    run_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tau_ps", _frozen(self.tau_ps, float))
        object.__setattr__(self, "counts", _frozen(self.counts, np.int64))
        object.__setattr__(self, "trials", _frozen(self.trials, np.int64))
        if self.counts.ndim != 2 or self.counts.shape != self.trials.shape:
            raise ValueError("counts and trials must be (n_delays, n_repeats) arrays of equal shape")
        if self.counts.shape[0] != self.tau_ps.size:
            raise ValueError("one row of counts per delay is required")
        if np.any(self.counts < 0) or np.any(self.trials <= 0):
            raise ValueError("counts must be >= 0 and trials > 0")
        if self.counts.shape[1] < 2:
            raise ValueError("at least two repeats are needed for standard deviations")

    @property
    def n_repeats(self) -> int:
        return self.counts.shape[1]

    @property
    def rates(self) -> np.ndarray:
        return self.counts / self.trials

    @property
    def mean(self) -> np.ndarray:
        return self.rates.mean(axis=1)

    @property
    def std(self) -> np.ndarray:
        return self.rates.std(axis=1, ddof=1)


@dataclass(frozen=True)
class NormalizedHistogram:
    group: str
    tau_ps: np.ndarray
    y: np.ndarray
    s: np.ndarray
    repeats: np.ndarray = field(repr=False)
    scale: float = 1.0

    @property
    def n_repeats(self) -> int:
        return self.repeats.shape[1]

    @property
    def sem(self) -> np.ndarray:
        return self.s / math.sqrt(self.n_repeats)


def normalize_histogram(h: CoincidenceHistogram, tau_ref_ps: float | None = None) -> NormalizedHistogram:
    """Scale so the mean at the reference delay is exactly one."""
    ref = h.tau_ref_ps if tau_ref_ps is None else tau_ref_ps
    idx = np.flatnonzero(np.isclose(h.tau_ps, ref))
    if idx.size == 0:
        raise NormalizationError(f"reference delay {ref} ps not in histogram {h.group!r}")
    ref_mean = float(h.mean[idx[0]])
    if ref_mean <= 0:
        raise NormalizationError(f"zero coincidences at reference delay {ref} ps in {h.group!r}")
    rates = h.rates / ref_mean
    y = rates.mean(axis=1)
    y[idx[0]] = 1.0
    return NormalizedHistogram(
        group=h.group,
        tau_ps=np.array(h.tau_ps),
        y=y,
        s=rates.std(axis=1, ddof=1),
        repeats=rates,
        scale=ref_mean,
    )


# ---------------------------------------------------------------------------
# Single pulse pair


def arm_mean_photons(pulse: EmittedPulse, config: ExperimentConfig) -> float:
    """Mean photon number of the Z-selected bin that reaches the splitter."""
    amp = pulse.amplitudes[config.z_bin]
    return abs(amp) ** 2 * config.interferometer_transmission * float(
        filter_transmission(pulse.detuning_ghz, config.laser, config.filter_bandwidth_ghz))


def pair_overlap(pulse1: EmittedPulse, pulse2: EmittedPulse, tau: float, config: ExperimentConfig) -> float:
    """cos^2(Theta) of the two Z-selected bins at nominal delay ``tau``."""
    laser = config.laser
    rel = tau - config.delay_origin_ps + pulse2.emission_offset_ps - pulse1.emission_offset_ps
    x = float(spectral_overlap(pulse1.detuning_ghz, pulse2.detuning_ghz, laser, config.filter_bandwidth_ghz)
              * chirped_mode_overlap(rel, laser.pulse_duration_ps, laser.chirp))
    x *= (1.0 - config.penalty(pulse1.state)) * (1.0 - config.penalty(pulse2.state))
    return min(max(x, 0.0), 1.0)


def interfere_adjacent(pulse1: EmittedPulse, pulse2: EmittedPulse, tau: float,
                       config: ExperimentConfig) -> PulsePair:
    """Pulse pair seen by the Michelson's output splitter inside the Z window."""
    a1 = pulse1.amplitudes[config.z_bin]
    a2 = pulse2.amplitudes[config.z_bin]
    theta = (np.angle(a2) - np.angle(a1)) % (2.0 * math.pi) if abs(a1) and abs(a2) else 0.0
    x = pair_overlap(pulse1, pulse2, tau, config)
    return PulsePair(arm_mean_photons(pulse1, config), arm_mean_photons(pulse2, config),
                     float(theta), math.acos(math.sqrt(x)))


# ---------------------------------------------------------------------------
# Clicks


@dataclass(frozen=True)
class ClickRecord:
    click_c: np.ndarray
    click_d: np.ndarray
    t_c: np.ndarray
    t_d: np.ndarray

    def coincidences(self, window_ps: float) -> np.ndarray:
        return self.click_c & self.click_d & (np.abs(self.t_c - self.t_d) <= 0.5 * window_ps)


def dark_probability(det: DetectorModel, tia: TiaModel) -> float:
    """Dark-click probability inside one gate (gate = coincidence window)."""
    return -math.expm1(-det.dark_rate_hz * tia.coincidence_window_ps * 1e-12)


def _detector_clicks(mu, det: DetectorModel, tia: TiaModel, rng, n):
    p_photon = -np.expm1(-det.efficiency * np.broadcast_to(np.asarray(mu, dtype=float), (n,)))
    photon = rng.random(n) < p_photon
    dark = rng.random(n) < dark_probability(det, tia)
    res = tia.resolution_ps
    t_photon = rng.normal(0.0, det.jitter_ps, n)
    t_dark = rng.uniform(-0.5, 0.5, n) * tia.coincidence_window_ps
    t = np.where(photon, t_photon, t_dark)
    t = t + rng.normal(0.0, tia.jitter_ps, n) + rng.uniform(-0.5, 0.5, n) * res
    return photon | dark, t


def _apply_recovery(click: np.ndarray, gate_times_ns: np.ndarray, recovery_ns: float) -> np.ndarray:
    if recovery_ns <= 0:
        return click
    idx = np.flatnonzero(click)
    if idx.size < 2 or np.min(np.diff(gate_times_ns)) >= recovery_ns:
        return click
    keep = click.copy()
    last = -np.inf
    for i in idx:
        if gate_times_ns[i] - last < recovery_ns:
            keep[i] = False
        else:
            last = gate_times_ns[i]
    return keep


def sample_clicks(port_means, detectors: tuple[DetectorModel, DetectorModel], tia: TiaModel,
                  rng: np.random.Generator, gate_times_ns: np.ndarray | None = None) -> ClickRecord:
    """Draw detector clicks and jittered timestamps for each gate.

    ``port_means`` = (mu_c, mu_d), scalars or arrays (one entry per gate).
    Timestamps are relative to the gate center. A click arriving within the
    recovery time of the previous registered click on the same detector is
    dropped when ``gate_times_ns`` is given.
    """
    mu_c, mu_d = (np.asarray(m, dtype=float) for m in port_means)
    n = int(max(mu_c.size, mu_d.size, 1 if gate_times_ns is None else len(gate_times_ns)))
    click_c, t_c = _detector_clicks(mu_c, detectors[0], tia, rng, n)
    click_d, t_d = _detector_clicks(mu_d, detectors[1], tia, rng, n)
    if gate_times_ns is not None:
        click_c = _apply_recovery(click_c, gate_times_ns, detectors[0].recovery_time_ns)
        click_d = _apply_recovery(click_d, gate_times_ns, detectors[1].recovery_time_ns)
    return ClickRecord(click_c, click_d, t_c, t_d)


# ---------------------------------------------------------------------------
# Coincidence-window acceptance


def _uniform_sum_density(halfwidths: list[float], grid: np.ndarray, step: float) -> np.ndarray:
    dens = np.zeros_like(grid)
    dens[np.argmin(np.abs(grid))] = 1.0 / step
    for hw in halfwidths:
        if hw <= 0:
            continue
        m = max(int(round(hw / step)), 1)
        kernel = np.ones(2 * m + 1)
        kernel /= kernel.sum()
        dens = np.convolve(dens, kernel, mode="same")
    return dens


def window_acceptance(gauss_sigma: float, uniform_halfwidths: list[float], window_ps: float) -> float:
    """P(|G + sum U_k| <= window/2) for G ~ N(0, sigma^2), U_k ~ U(-h_k, h_k)."""
    step = 0.25
    span = 0.5 * window_ps + sum(uniform_halfwidths) + 8.0 * gauss_sigma + 4.0
    grid = np.arange(-span, span + step / 2, step)
    grid -= grid[np.argmin(np.abs(grid))]
    dens = _uniform_sum_density(uniform_halfwidths, grid, step)
    half = 0.5 * window_ps
    if gauss_sigma > 0:
        inside = ndtr((half - grid) / gauss_sigma) - ndtr((-half - grid) / gauss_sigma)
    else:
        inside = (np.abs(grid) <= half).astype(float)
    return float(min(np.sum(dens * inside) * step, 1.0))


@functools.lru_cache(maxsize=64)
def coincidence_acceptances(detectors, tia: TiaModel) -> tuple[float, float, float, float]:
    """Acceptance for photon-photon, photon(c)-dark(d), dark(c)-photon(d), dark-dark pairs."""
    jc, jd = detectors[0].jitter_ps, detectors[1].jitter_ps
    tj, r, g = tia.jitter_ps, 0.5 * tia.resolution_ps, 0.5 * tia.coincidence_window_ps
    w = tia.coincidence_window_ps
    return (
        window_acceptance(math.sqrt(jc ** 2 + jd ** 2 + 2 * tj ** 2), [r, r], w),
        window_acceptance(math.sqrt(jc ** 2 + 2 * tj ** 2), [r, r, g], w),
        window_acceptance(math.sqrt(jd ** 2 + 2 * tj ** 2), [r, r, g], w),
        window_acceptance(math.sqrt(2) * tj, [r, r, g, g], w),
    )


# ---------------------------------------------------------------------------
# Aggregate per-trial coincidence probability


@functools.lru_cache(maxsize=16)
def _hermegauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / w.sum()


def _gh(n: int, std: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes/weights for an expectation over Normal(0, std^2)."""
    if std <= 0 or n <= 1:
        return np.zeros(1), np.ones(1)
    x, w = _hermegauss(n)
    return x * std, w


def coincidence_probability(mu_a, mu_b, cos_Theta, detectors, tia, acceptances=None):
    """Phase-averaged probability of a TIA coincidence for given arm intensities."""
    eta_c, eta_d = detectors[0].efficiency, detectors[1].efficiency
    pc, pd = dark_probability(detectors[0], tia), dark_probability(detectors[1], tia)
    a_pp, a_pd, a_dp, a_dd = acceptances or coincidence_acceptances(detectors, tia)
    half = 0.5 * (np.asarray(mu_a) + np.asarray(mu_b))
    x = np.sqrt(np.asarray(mu_a) * np.asarray(mu_b)) * cos_Theta
    e_c = np.exp(-eta_c * half) * bessel_i0(eta_c * x)
    e_d = np.exp(-eta_d * half) * bessel_i0(eta_d * x)
    e_cd = np.exp(-(eta_c + eta_d) * half) * bessel_i0((eta_c - eta_d) * x)
    p_pp = 1.0 - e_c - e_d + e_cd
    p_pd = (e_d - e_cd) * pd
    p_dp = (e_c - e_cd) * pc
    p_dd = e_cd * pc * pd
    return a_pp * p_pp + a_pd * p_pd + a_dp * p_dp + a_dd * p_dd


@dataclass(frozen=True)
class DriftState:
    overlap_factor: float = 1.0
    delay_shift_ps: float = 0.0
    intensity_factor: float = 1.0


def sample_drift(config: ExperimentConfig, rng: np.random.Generator) -> DriftState:
    d = config.drift
    sig = math.sqrt(math.log1p(d.overlap_rel ** 2))
    return DriftState(
        overlap_factor=math.exp(rng.normal(0.0, sig) - 0.5 * sig * sig) if sig > 0 else 1.0,
        delay_shift_ps=rng.normal(0.0, d.delay_ps) if d.delay_ps > 0 else 0.0,
        intensity_factor=max(1.0 + rng.normal(0.0, d.intensity_rel), 0.0) if d.intensity_rel > 0 else 1.0,
    )


def mean_trial_probability(config: ExperimentConfig, pair: tuple[Bb84State, Bb84State], tau: float,
                           drift: DriftState = DriftState(), nodes: tuple[int, int, int] = (24, 8, 4)) -> float:
    """Per-trial coincidence probability averaged over per-pulse randomness."""
    laser = config.laser
    n_off, n_nu, n_int = nodes
    d_o, w_o = _gh(n_off, math.sqrt(2.0) * laser.timing_jitter_ps)
    nu, w_nu = _gh(n_nu, laser.frequency_scatter_ghz)
    de, w_de = _gh(n_int, math.sqrt(laser.intensity_variance))

    D, N1, N2, E1, E2 = np.meshgrid(d_o, nu, nu, de, de, indexing="ij", sparse=True)
    W = (w_o[:, None, None, None, None] * w_nu[None, :, None, None, None] * w_nu[None, None, :, None, None]
         * w_de[None, None, None, :, None] * w_de[None, None, None, None, :])

    mu0 = (config.mean_photons_per_pulse / 2.0) * config.interferometer_transmission * drift.intensity_factor
    mu_a = mu0 * np.maximum(1.0 + E1, 0.0) * filter_transmission(N1, laser, config.filter_bandwidth_ghz)
    mu_b = mu0 * np.maximum(1.0 + E2, 0.0) * filter_transmission(N2, laser, config.filter_bandwidth_ghz)
    pen = (1.0 - config.penalty(pair[0])) * (1.0 - config.penalty(pair[1]))
    rel = tau - config.delay_origin_ps - drift.delay_shift_ps + D
    x = (drift.overlap_factor * pen
         * spectral_overlap(N1, N2, laser, config.filter_bandwidth_ghz)
         * chirped_mode_overlap(rel, laser.pulse_duration_ps, laser.chirp))
    cos_t = np.sqrt(np.clip(x, 0.0, 1.0))
    acc = coincidence_acceptances(config.detectors, config.tia)
    p = coincidence_probability(mu_a, mu_b, cos_t, config.detectors, config.tia, acc)
    return float(np.sum(np.broadcast_to(W, p.shape) * p))


# ---------------------------------------------------------------------------
# Trial-level simulation


def simulate_trials(config: ExperimentConfig, pair: tuple[Bb84State, Bb84State], tau: float, n: int,
                    rng: np.random.Generator, drift: DriftState = DriftState()) -> int:
    """Count coincidences among ``n`` explicitly simulated pulse pairs."""
    laser = config.laser
    mu = config.mean_photons_per_pulse
    amp = []
    offsets, nus = [], []
    for state in pair:
        phase = rng.uniform(0.0, 2.0 * math.pi, n)
        off = rng.normal(0.0, laser.timing_jitter_ps, n)
        scale = np.maximum(1.0 + rng.normal(0.0, math.sqrt(laser.intensity_variance), n), 0.0)
        nu = rng.normal(0.0, laser.frequency_scatter_ghz, n)
        bin_amp = np.sqrt(mu * scale / 2.0) * np.exp(1j * phase) * (_LATE_BIN[state] if config.z_bin else 1.0)
        trans = config.interferometer_transmission * drift.intensity_factor * filter_transmission(
            nu, laser, config.filter_bandwidth_ghz)
        amp.append(bin_amp * np.sqrt(trans))
        offsets.append(off)
        nus.append(nu)
    mu_a, mu_b = np.abs(amp[0]) ** 2, np.abs(amp[1]) ** 2
    theta = np.angle(amp[1]) - np.angle(amp[0])
    rel = tau - config.delay_origin_ps - drift.delay_shift_ps + offsets[1] - offsets[0]
    pen = (1.0 - config.penalty(pair[0])) * (1.0 - config.penalty(pair[1]))
    x = np.clip(drift.overlap_factor * pen
                * spectral_overlap(nus[0], nus[1], laser, config.filter_bandwidth_ghz)
                * chirped_mode_overlap(rel, laser.pulse_duration_ps, laser.chirp), 0.0, 1.0)
    cross = np.sqrt(mu_a * mu_b) * np.cos(theta) * np.sqrt(x)
    half = 0.5 * (mu_a + mu_b)
    gates = np.arange(n) * config.thinning_interval_ns
    rec = sample_clicks((half + cross, half - cross), config.detectors, config.tia, rng, gates)
    return int(np.count_nonzero(rec.coincidences(config.tia.coincidence_window_ps)))


# ---------------------------------------------------------------------------
# Experiment


def _measure(args) -> tuple[int, int]:
    config, seed, g, k, r, mode, max_trials = args
    pair = config.state_pairs[g]
    tau = config.delay_offsets_ps[k]
    drift_rng = stream(seed, 0, g, k, r)
    drift = sample_drift(config, drift_rng)
    n = config.trials_per_point
    count_rng = stream(seed, 1, g, k, r)
    if mode == "aggregate":
        if config.thinning_interval_ns < max(d.recovery_time_ns for d in config.detectors):
            raise SimulationError("detector recovery overlaps consecutive gates; use mode='trials'")
        p = mean_trial_probability(config, pair, tau, drift)
        return int(count_rng.binomial(n, min(max(p, 0.0), 1.0))), n
    if mode == "trials":
        if n > max_trials:
            raise SimulationError(f"{n} trials per point exceeds trial-mode cap {max_trials}; "
                                  "shorten duration_per_point_s or use mode='aggregate'")
        return simulate_trials(config, pair, tau, n, count_rng, drift), n
    raise SimulationError(f"unknown mode {mode!r}")


def run_experiment(config: ExperimentConfig, seed: int, mode: str = "aggregate", workers: int = 1,
                   run_id: str = "", max_trials: int = 20_000_000) -> list[CoincidenceHistogram]:
    """Simulate every (state pair, delay, repeat) measurement; one histogram per pair.

    Deterministic in (config, seed); independent of ``workers``.
    """
    if not config.delay_offsets_ps:
        raise SimulationError("empty delay list")
    if config.duration_per_point_s <= 0 or config.trials_per_point <= 0:
        raise SimulationError("duration per point must give at least one trial")
    n_g, n_t, n_r = len(config.state_pairs), len(config.delay_offsets_ps), config.repeats
    jobs = [(config, seed, g, k, r, mode, max_trials)
            for g in range(n_g) for k in range(n_t) for r in range(n_r)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_measure, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_measure(j) for j in jobs]
    counts = np.array([c for c, _ in results], dtype=np.int64).reshape(n_g, n_t, n_r)
    trials = np.array([n for _, n in results], dtype=np.int64).reshape(n_g, n_t, n_r)
    return [
        CoincidenceHistogram(group=group_label(pair), tau_ps=np.array(config.delay_offsets_ps),
                             counts=counts[g], trials=trials[g], tau_ref_ps=config.reference_delay_ps,
                             run_id=run_id)
        for g, pair in enumerate(config.state_pairs)
    ]


# ---------------------------------------------------------------------------
# Defect injection


def expected_visibility(config: ExperimentConfig, pair: tuple[Bb84State, Bb84State]) -> float:
    """Drift-free dip depth 1 - P(dip center) / P(reference delay)."""
    p_ref = mean_trial_probability(config, pair, config.reference_delay_ps)
    return 1.0 - mean_trial_probability(config, pair, config.delay_origin_ps) / p_ref


def with_visibility_defect(config: ExperimentConfig, state: Bb84State, delta_v: float) -> ExperimentConfig:
    """Copy of ``config`` whose pairs containing ``state`` lose ``delta_v`` of visibility.

    The defect is an overlap penalty on ``state``; it is solved for with the
    first configured pair that contains ``state``.
    """
    pair = next((p for p in config.state_pairs if state in p), None)
    if pair is None:
        raise ValueError(f"{state.value} does not occur in any configured pair")
    base = expected_visibility(config, pair)
    if not 0 <= delta_v < base:
        raise ValueError(f"visibility drop {delta_v} must lie in [0, {base:.4f})")
    others = tuple((s, p) for s, p in config.overlap_penalty if s is not state)

    def drop(pen):
        cfg = dataclasses.replace(config, overlap_penalty=others + ((state, pen),))
        return base - expected_visibility(cfg, pair), cfg

    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if drop(mid)[0] < delta_v:
            lo = mid
        else:
            hi = mid
    return drop(0.5 * (lo + hi))[1]
