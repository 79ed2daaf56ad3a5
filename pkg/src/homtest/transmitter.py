"""Time-bin BB84 transmitter and gain-switched laser imperfections.

Units: times in ps, frequencies in THz unless a name says otherwise
(``*_ghz``). Pulse durations are intensity FWHM.
"""
from __future__ import annotations

import cmath
import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

LN2 = math.log(2.0)


class Bb84State(enum.Enum):
    X0 = "X0"
    X1 = "X1"
    Y0 = "Y0"
    Y1 = "Y1"
    UNMODULATED = "Unmodulated"

    @classmethod
    def parse(cls, text: str) -> "Bb84State":
        key = text.strip()
        for s in cls:
            if key.lower() in (s.value.lower(), s.name.lower()):
                return s
        raise ValueError(f"unknown BB84 state {text!r}")


# relative amplitude of the late bin
_LATE_BIN = {
    Bb84State.X0: 1.0,
    Bb84State.X1: -1.0,
    Bb84State.Y0: 1j,
    Bb84State.Y1: -1j,
    Bb84State.UNMODULATED: 1.0,
}


@dataclass(frozen=True)
class LaserModel:
    pulse_duration_ps: float = 30.0
    chirp: float = 4.47
    timing_jitter_ps: float = 1.0
    intensity_variance: float = 7e-4
    center_frequency_thz: float = 193.4
    frequency_scatter_ghz: float = 42.0

    def __post_init__(self):
        if self.pulse_duration_ps <= 0:
            raise ValueError("pulse duration must be positive")
        if self.timing_jitter_ps < 0:
            raise ValueError("timing jitter must be non-negative")
        if not 0 <= self.intensity_variance < 1:
            raise ValueError("intensity variance must lie in [0, 1)")
        if self.frequency_scatter_ghz < 0:
            raise ValueError("frequency scatter must be non-negative")


@dataclass(frozen=True)
class EmittedPulse:
    amplitudes: tuple[complex, complex]
    global_phase: float
    emission_offset_ps: float = 0.0
    intensity_scale: float = 1.0
    detuning_ghz: float = 0.0
    state: Bb84State = Bb84State.UNMODULATED

    @property
    def mean_photons(self) -> float:
        return sum(abs(a) ** 2 for a in self.amplitudes)


def encode_bb84(state: Bb84State, mu: float, phi: float = 0.0, intensity_scale: float = 1.0,
                emission_offset_ps: float = 0.0, detuning_ghz: float = 0.0) -> EmittedPulse:
    if mu < 0:
        raise ValueError(f"mean photon number must be >= 0, got {mu}")
    amp = math.sqrt(mu * intensity_scale / 2.0) * cmath.exp(1j * phi)
    return EmittedPulse(
        amplitudes=(amp, amp * _LATE_BIN[state]),
        global_phase=phi,
        emission_offset_ps=emission_offset_ps,
        intensity_scale=intensity_scale,
        detuning_ghz=detuning_ghz,
        state=state,
    )


def sample_pulse(laser: LaserModel, state: Bb84State, mu: float, rng: np.random.Generator) -> EmittedPulse:
    phi = rng.uniform(0.0, 2.0 * math.pi)
    offset = rng.normal(0.0, laser.timing_jitter_ps) if laser.timing_jitter_ps > 0 else 0.0
    scale = 1.0 + rng.normal(0.0, math.sqrt(laser.intensity_variance)) if laser.intensity_variance > 0 else 1.0
    detune = rng.normal(0.0, laser.frequency_scatter_ghz) if laser.frequency_scatter_ghz > 0 else 0.0
    return encode_bb84(state, mu, phi, max(scale, 0.0), offset, detune)


def sample_pulses(laser: LaserModel, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Vectorized draw of per-pulse randomness (phase, offset, intensity, detuning)."""
    return {
        "phase": rng.uniform(0.0, 2.0 * math.pi, n),
        "offset_ps": rng.normal(0.0, laser.timing_jitter_ps, n),
        "scale": np.maximum(1.0 + rng.normal(0.0, math.sqrt(laser.intensity_variance), n), 0.0),
        "detuning_ghz": rng.normal(0.0, laser.frequency_scatter_ghz, n),
    }


# ---------------------------------------------------------------------------
# Timing jitter


def gaussian_sigma(tau_p):
    """Standard deviation of a Gaussian with intensity FWHM ``tau_p``."""
    return tau_p / (2.0 * math.sqrt(2.0 * LN2))


def timing_overlap(d, tau_p):
    """Overlap of two Gaussian pulses whose peaks are ``d`` apart."""
    return erfc(np.abs(d) / (2.0 * math.sqrt(2.0) * gaussian_sigma(tau_p)))


def jitter_factor(tau_p, s):
    """Expected timing overlap when the peak separation is Normal(0, s^2)."""
    s = np.asarray(s, dtype=float)
    sigma = gaussian_sigma(np.asarray(tau_p, dtype=float))
    with np.errstate(divide="ignore"):
        out = np.where(s > 0, 2.0 / math.pi * np.arctan(2.0 * sigma / np.where(s > 0, s, 1.0)), 1.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Intensity fluctuation


def intensity_factor_stats(s_I2: float) -> tuple[float, float]:
    """Leading-order mean and variance of 2 mu_a mu_b / (mu_a + mu_b)^2.

    Both intensities fluctuate as mu0 (1 + delta) with delta ~ Normal(0, s_I2).
    The factor is the weak-pulse visibility at perfect overlap.
    """
    if s_I2 < 0:
        raise ValueError("variance must be non-negative")
    # 2 mu_a mu_b/(mu_a+mu_b)^2 = (1 - u^2)/2 + O(delta^3) with u ~ N(0, s_I2/2)
    return 0.5 * (1.0 - 0.5 * s_I2), s_I2 * s_I2 / 8.0


def intensity_visibility_reduction(s_I2: float) -> float:
    """Relative visibility loss from intensity fluctuation (leading order)."""
    return 0.5 * s_I2


# ---------------------------------------------------------------------------
# Chirp


def tau_a_from_fwhm(tau_p):
    return tau_p / math.sqrt(2.0 * LN2)


def chirped_spectrum(nu, tau_p, a, nu0=0.0):
    """Spectral intensity of a linearly chirped Gaussian pulse (peak 1)."""
    tau_a = tau_a_from_fwhm(tau_p)
    return np.exp(-2.0 * math.pi ** 2 * tau_a ** 2 * (np.asarray(nu) - nu0) ** 2 / (1.0 + a * a))


def spectral_fwhm(tau_p, a):
    """FWHM in THz for ``tau_p`` in ps."""
    return 2.0 * LN2 / math.pi * math.sqrt(1.0 + a * a) / tau_p


def hom_dip_profile(t, tau_p, a, t0=0.0):
    return 1.0 - 0.5 * np.exp(-4.0 * LN2 * (1.0 + a * a) * (np.asarray(t) - t0) ** 2 / tau_p ** 2)


def dip_sigma(tau_p, a):
    """Gaussian width of the dip produced by pulses with duration ``tau_p`` and chirp ``a``."""
    return tau_p / math.sqrt(8.0 * LN2 * (1.0 + a * a))


class ChirpDomainError(ValueError):
    """Dip wider than the transform limit allows; no real chirp parameter."""


def chirp_from_dip(tau_p: float, sigma_dip: float) -> float:
    ratio = tau_p ** 2 / (8.0 * LN2 * sigma_dip ** 2)
    if ratio < 1.0 - 1e-12:
        raise ChirpDomainError(
            f"dip width {sigma_dip} ps exceeds transform limit {dip_sigma(tau_p, 0.0):.4g} ps for tau_p={tau_p} ps")
    return math.sqrt(max(ratio - 1.0, 0.0))


def chirped_mode_overlap(d, tau_p, a):
    """cos^2(Theta) of two identical chirped pulses displaced by ``d`` ps.

    Equals twice the dip depth of :func:`hom_dip_profile` at that delay.
    """
    sig = dip_sigma(tau_p, a)
    return np.exp(-np.asarray(d, dtype=float) ** 2 / (2.0 * sig * sig))


# ---------------------------------------------------------------------------
# Spectral overlap behind a bandpass filter


def _gauss_std_from_fwhm(fwhm):
    return fwhm / (2.0 * math.sqrt(2.0 * LN2))


def filtered_spectral_params(laser: LaserModel, filter_bw_ghz: float | None) -> tuple[float, float]:
    """(pulse spectral std, shrink factor) in GHz after a Gaussian bandpass.

    A pulse detuned by nu from the filter center emerges centered at
    ``shrink * nu`` with std ``w'``; ``filter_bw_ghz=None`` means no filter.
    """
    wp = _gauss_std_from_fwhm(spectral_fwhm(laser.pulse_duration_ps, laser.chirp) * 1e3)
    if filter_bw_ghz is None or math.isinf(filter_bw_ghz):
        return wp, 1.0
    wf = _gauss_std_from_fwhm(filter_bw_ghz)
    shrink = wf * wf / (wp * wp + wf * wf)
    return wp * wf / math.sqrt(wp * wp + wf * wf), shrink


def spectral_overlap(detuning_1, detuning_2, laser: LaserModel, filter_bw_ghz: float | None):
    """|<s1|s2>|^2 of two Gaussian spectra with different centers after filtering."""
    width, shrink = filtered_spectral_params(laser, filter_bw_ghz)
    diff = shrink * (np.asarray(detuning_2, dtype=float) - np.asarray(detuning_1, dtype=float))
    return np.exp(-diff * diff / (4.0 * width * width))


def filter_transmission(detuning, laser: LaserModel, filter_bw_ghz: float | None):
    """Transmitted power relative to a pulse centered on the filter."""
    if filter_bw_ghz is None or math.isinf(filter_bw_ghz):
        return np.ones_like(np.asarray(detuning, dtype=float))
    wp = _gauss_std_from_fwhm(spectral_fwhm(laser.pulse_duration_ps, laser.chirp) * 1e3)
    wf = _gauss_std_from_fwhm(filter_bw_ghz)
    nu = np.asarray(detuning, dtype=float)
    return np.exp(-nu * nu / (2.0 * (wp * wp + wf * wf)))


def effective_overlap(laser: LaserModel, spectral_filter_bw: float | None, rng: np.random.Generator,
                      delay_ps: float = 0.0, size: int | None = None, detuning_offset_ghz: float = 0.0):
    """Sampled cos^2(Theta) for independent pulse pairs at a nominal delay.

    Product of a spectral factor (per-pulse center-frequency scatter seen
    through the filter) and a temporal factor (chirped-pulse overlap at the
    delay plus the emission-time jitter of both pulses). ``detuning_offset_ghz``
    shifts the second pulse's center frequency deterministically.
    """
    n = 1 if size is None else size
    nu1 = rng.normal(0.0, laser.frequency_scatter_ghz, n)
    nu2 = detuning_offset_ghz + rng.normal(0.0, laser.frequency_scatter_ghz, n)
    o1 = rng.normal(0.0, laser.timing_jitter_ps, n)
    o2 = rng.normal(0.0, laser.timing_jitter_ps, n)
    x = spectral_overlap(nu1, nu2, laser, spectral_filter_bw) * chirped_mode_overlap(
        delay_ps + o2 - o1, laser.pulse_duration_ps, laser.chirp)
    x = np.clip(x, 0.0, 1.0)
    return float(x[0]) if size is None else x
