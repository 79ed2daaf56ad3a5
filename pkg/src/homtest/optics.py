"""Closed-form optics of two weak coherent pulses meeting at a balanced splitter.

Each input pulse is split into a component in the shared mode ``s`` and a
component in the orthogonal complement; ``Theta`` is the overlap angle
between them (``Theta = 0``: identical non-encoded modes). ``theta`` is the
relative optical phase, which is uniformly random for phase-randomized
sources, so most observable quantities are phase averages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .special import bessel_i0


class DegenerateInputError(ValueError):
    """Raised when a quantity is undefined for the given inputs (e.g. no light)."""


@dataclass(frozen=True)
class PulsePair:
    mu_a: float
    mu_b: float
    theta: float = 0.0
    Theta: float = 0.0

    def __post_init__(self):
        if self.mu_a < 0 or self.mu_b < 0:
            raise ValueError(f"mean photon numbers must be >= 0, got {self.mu_a}, {self.mu_b}")
        if not (-1e-12 <= self.Theta <= math.pi / 2 + 1e-12):
            raise ValueError(f"overlap angle must lie in [0, pi/2], got {self.Theta}")

    @classmethod
    def from_overlap(cls, mu_a: float, mu_b: float, theta: float, cos2: float) -> "PulsePair":
        """Build from cos^2(Theta) instead of the angle."""
        cos2 = min(max(cos2, 0.0), 1.0)
        return cls(mu_a, mu_b, theta, math.acos(math.sqrt(cos2)))


@dataclass(frozen=True)
class SplitterOutput:
    alpha_c: complex
    alpha_d: complex
    beta_c: complex
    beta_d: complex

    @property
    def mu_c(self) -> float:
        return abs(self.alpha_c) ** 2 + abs(self.beta_c) ** 2

    @property
    def mu_d(self) -> float:
        return abs(self.alpha_d) ** 2 + abs(self.beta_d) ** 2


@dataclass(frozen=True)
class ModeProfile:
    """Relative amplitudes of a pulse over an indexed mode basis."""

    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        norm = float(np.sum(np.abs(amps) ** 2))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"mode profile must be normalized, sum |f|^2 = {norm}")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def normalized(cls, amplitudes) -> "ModeProfile":
        amps = np.asarray(amplitudes, dtype=complex)
        return cls(amps / np.sqrt(np.sum(np.abs(amps) ** 2)))

    def overlap(self, other: "ModeProfile") -> float:
        """cos^2(Theta) between two profiles: |<f|g>|^2."""
        return float(abs(np.vdot(self.amplitudes, other.amplitudes)) ** 2)


def splitter_transform(p: PulsePair) -> SplitterOutput:
    sa = math.sqrt(p.mu_a)
    sb = math.sqrt(p.mu_b) * complex(math.cos(p.theta), math.sin(p.theta))
    c, s = math.cos(p.Theta), math.sin(p.Theta)
    r2 = math.sqrt(2.0)
    return SplitterOutput(
        alpha_c=(sa + sb * c) / r2,
        alpha_d=(sa - sb * c) / r2,
        beta_c=-sb * s / r2,
        beta_d=sb * s / r2,
    )


def mean_output_photons(p: PulsePair) -> tuple[float, float]:
    half = 0.5 * (p.mu_a + p.mu_b)
    cross = math.sqrt(p.mu_a * p.mu_b) * math.cos(p.theta) * math.cos(p.Theta)
    return half + cross, half - cross


def joint_photon_prob(m: int, n: int, p: PulsePair) -> float:
    """Probability of m photons at port c and n at port d."""
    if m < 0 or n < 0:
        raise ValueError("photon counts must be non-negative")
    mu_c, mu_d = mean_output_photons(p)
    log_p = -(mu_c + mu_d) - math.lgamma(m + 1) - math.lgamma(n + 1)
    # 0**0 = 1 for the vacuum terms
    if m:
        if mu_c <= 0:
            return 0.0
        log_p += m * math.log(mu_c)
    if n:
        if mu_d <= 0:
            return 0.0
        log_p += n * math.log(mu_d)
    return math.exp(log_p)


def photon_number_cutoff(mu: float, tail: float = 1e-15) -> int:
    """Smallest N with P(Poisson(mu) > N) < tail."""
    if mu <= 0:
        return 0
    n, term, cdf = 0, math.exp(-mu), math.exp(-mu)
    while 1.0 - cdf >= tail and n < 10_000:
        n += 1
        term *= mu / n
        cdf += term
        if term < tail * 1e-3 and n > mu:
            break
    return n


def coincidence_prob(p: PulsePair) -> float:
    mu_c, mu_d = mean_output_photons(p)
    return 1.0 - math.exp(-mu_c) - math.exp(-mu_d) + math.exp(-(p.mu_a + p.mu_b))


def phase_averaged_coincidence(mu_a, mu_b, Theta):
    """Coincidence probability averaged over a uniform relative phase."""
    mu_a, mu_b = np.asarray(mu_a, dtype=float), np.asarray(mu_b, dtype=float)
    total = mu_a + mu_b
    z = np.sqrt(mu_a * mu_b) * np.cos(Theta)
    out = 1.0 + np.exp(-total) - 2.0 * np.exp(-0.5 * total) * bessel_i0(z)
    return float(out) if np.ndim(out) == 0 else out


def _check_light(mu_a, mu_b):
    if np.any(np.asarray(mu_a) + np.asarray(mu_b) <= 0):
        raise DegenerateInputError("visibility is undefined when both inputs are vacuum")


def hom_visibility_exact(mu_a, mu_b, Theta):
    _check_light(mu_a, mu_b)
    mu_a, mu_b = np.asarray(mu_a, dtype=float), np.asarray(mu_b, dtype=float)
    half = 0.5 * (mu_a + mu_b)
    z = np.sqrt(mu_a * mu_b) * np.cos(Theta)
    i0m1 = bessel_i0(z) - 1.0
    out = 2.0 * np.exp(-half) * i0m1 / (-np.expm1(-half)) ** 2
    return float(out) if np.ndim(out) == 0 else out


def hom_visibility_approx(mu_a, mu_b, cos2Theta):
    """Weak-pulse visibility 2 mu_a mu_b cos^2(Theta) / (mu_a + mu_b)^2 (<= 1/2)."""
    _check_light(mu_a, mu_b)
    cos2 = np.asarray(cos2Theta, dtype=float)
    if np.any((cos2 < 0) | (cos2 > 1)):
        raise ValueError("cos^2(Theta) must lie in [0, 1]")
    mu_a, mu_b = np.asarray(mu_a, dtype=float), np.asarray(mu_b, dtype=float)
    out = 2.0 * mu_a * mu_b * cos2 / (mu_a + mu_b) ** 2
    return float(out) if np.ndim(out) == 0 else out


def swap_outcome_probs_wcp(p: PulsePair, port: str = "c") -> tuple[float, float]:
    """Parity (SWAP-test) outcome probabilities from the photon number at one port.

    At the destructive port ``"d"`` the parity contrast sqrt(P0 - P1) equals
    :func:`wcp_fidelity`; at ``"c"`` it equals the fidelity at theta + pi.
    """
    if port not in ("c", "d"):
        raise ValueError(f"port must be 'c' or 'd', got {port!r}")
    mu = mean_output_photons(p)[0 if port == "c" else 1]
    e = math.exp(-2.0 * mu)
    return 0.5 * (1.0 + e), 0.5 * (1.0 - e)


def wcp_fidelity(p: PulsePair) -> float:
    return math.exp(-0.5 * (p.mu_a + p.mu_b)
                    + math.sqrt(p.mu_a * p.mu_b) * math.cos(p.theta) * math.cos(p.Theta))


def nonvacuum_fidelity_sq(p: PulsePair) -> float:
    """|F~|^2 for one fixed phase: vacuum term removed, normalized by singles."""
    half = 0.5 * (p.mu_a + p.mu_b)
    if half <= 0:
        raise DegenerateInputError("non-vacuum fidelity is undefined for vacuum inputs")
    z = math.sqrt(p.mu_a * p.mu_b) * math.cos(p.Theta)
    w = z * complex(math.cos(p.theta), math.sin(p.theta))
    amp = math.exp(-half) * abs(np.expm1(w))
    return amp * amp / (-math.expm1(-half)) ** 2


def nonvacuum_fidelity_sq_avg(mu_a, mu_b, Theta):
    """Phase average of |F~|^2; close to twice the weak-pulse visibility."""
    _check_light(mu_a, mu_b)
    mu_a, mu_b = np.asarray(mu_a, dtype=float), np.asarray(mu_b, dtype=float)
    total = mu_a + mu_b
    z = 2.0 * np.sqrt(mu_a * mu_b) * np.cos(Theta)
    out = np.exp(-total) * (bessel_i0(z) - 1.0) / (-np.expm1(-0.5 * total)) ** 2
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Phase-averaging oracles


def phase_average(func, n_nodes: int = 64) -> float:
    """Average of ``func(theta)`` over [0, 2 pi) by Gauss-Legendre quadrature."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    theta = math.pi * (x + 1.0)
    vals = np.array([func(t) for t in theta])
    return float(np.sum(w * vals) / 2.0)


def phase_average_mc(func, n_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo phase average; returns (mean, standard error).

    ``func`` must accept an array of phases.
    """
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n_samples)
    vals = np.asarray(func(theta), dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def coincidence_prob_array(mu_a: float, mu_b: float, theta: np.ndarray, cos_Theta: float) -> np.ndarray:
    """Vectorized coincidence probability over an array of relative phases."""
    half = 0.5 * (mu_a + mu_b)
    cross = math.sqrt(mu_a * mu_b) * np.cos(theta) * cos_Theta
    return 1.0 - np.exp(-(half + cross)) - np.exp(-(half - cross)) + math.exp(-(mu_a + mu_b))


# ---------------------------------------------------------------------------
# Mixed overlap: cos^2(Theta) as a random variable


class OverlapDistribution(Protocol):
    """Distribution of x = cos^2(Theta) on [0, 1]."""

    def mean(self) -> float: ...

    def var(self) -> float: ...

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray: ...


@dataclass(frozen=True)
class FixedOverlap:
    cos2: float

    def mean(self) -> float:
        return self.cos2

    def var(self) -> float:
        return 0.0

    def sample(self, rng, size):
        return np.full(size, self.cos2)


@dataclass(frozen=True)
class BetaOverlap:
    """Beta-distributed cos^2(Theta), parameterized by mean and variance."""

    mean_: float
    var_: float

    def __post_init__(self):
        m, v = self.mean_, self.var_
        if not 0 < m < 1 or not 0 < v < m * (1 - m):
            raise ValueError(f"need 0 < mean < 1 and 0 < var < mean(1-mean); got {m}, {v}")

    def _ab(self):
        k = self.mean_ * (1 - self.mean_) / self.var_ - 1.0
        return self.mean_ * k, (1 - self.mean_) * k

    def mean(self):
        return self.mean_

    def var(self):
        return self.var_

    def sample(self, rng, size):
        a, b = self._ab()
        return rng.beta(a, b, size=size)


def mixed_visibility_approx(mu_a: float, mu_b: float, overlap: OverlapDistribution) -> tuple[float, float]:
    """Mean and variance of the weak-pulse visibility for a random cos^2(Theta)."""
    scale = hom_visibility_approx(mu_a, mu_b, 1.0)
    return scale * overlap.mean(), scale * scale * overlap.var()


def mixed_visibility_exact(mu_a, mu_b, overlap: OverlapDistribution, rng, n_samples=200_000) -> float:
    """Visibility of the mixture: phase- and overlap-averaged coincidence vs singles.

    Averages the coincidence probability (not the visibility) over sampled
    overlaps, which is what a detector sees.
    """
    _check_light(mu_a, mu_b)
    x = overlap.sample(rng, n_samples)
    coinc = np.mean(phase_averaged_coincidence(mu_a, mu_b, np.arccos(np.sqrt(np.clip(x, 0, 1)))))
    singles = -math.expm1(-0.5 * (mu_a + mu_b))
    return 1.0 - coinc / singles ** 2
