"""Reference-scale synthetic HOM histograms with a known truth.

Noise is added per (delay, repeat) to the normalized coincidence rate with a
profile that grows inside the dip, where interference drift dominates. The
noise amplitude of each group is set from the Fisher information of the
weighted fit, then shrunk by a Monte-Carlo calibration pass so that the
spread of the fitted V, t0, sigma (per group and for the pooled fit) does not
exceed the reference standard deviations. The calibration is needed because
the fit weights are estimated from a handful of repeats and normalization to
one reference point correlates all points of a group.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .config import REFERENCE_DELAYS_PS
from .detection import CoincidenceHistogram
from .analysis import DipData, dip_jacobian, dip_model, fit_dip_multistart, histogram_data, visibility_from_fit
from .detection import normalize_histogram


@dataclass(frozen=True)
class TableRow:
    V: float
    std_V: float
    t0: float
    std_t0: float
    sigma: float
    std_sigma: float


# reported fit table of the measured histograms
REFERENCE_TABLE = {
    "unmodulated": TableRow(0.299, 0.023, 1.36, 0.21, 3.28, 0.27),
    "X1-X0": TableRow(0.266, 0.042, 0.773, 0.40, 2.83, 0.39),
    "Y0-X0": TableRow(0.266, 0.022, 0.767, 0.25, 3.11, 0.23),
    "Y1-X0": TableRow(0.291, 0.042, 0.943, 0.27, 2.94, 0.28),
    "whole": TableRow(0.283, 0.014, 1.05, 0.12, 3.12, 0.12),
}
GROUPS = ("unmodulated", "X1-X0", "Y0-X0", "Y1-X0")


@dataclass(frozen=True)
class DipTruth:
    A: float = 0.283
    t0: float = 1.05
    sigma: float = 3.12
    B: float = 0.0

    @property
    def params(self) -> tuple[float, float, float, float]:
        return (self.A, self.t0, self.sigma, self.B)


def noise_profile(tau, truth: DipTruth, floor: float = 0.25) -> np.ndarray:
    """Relative per-repeat noise shape: ``floor`` away from the dip, ``1 + floor`` at its center."""
    tau = np.asarray(tau, dtype=float)
    return floor + np.exp(-(tau - truth.t0) ** 2 / (2.0 * truth.sigma ** 2))


def fisher_std(tau, truth: DipTruth, per_repeat_sd, repeats: int) -> np.ndarray:
    """Asymptotic std of (V, t0, sigma) from a fit weighted by the true standard errors."""
    J = dip_jacobian(tau, *truth.params) / (np.asarray(per_repeat_sd) / math.sqrt(repeats))[:, None]
    cov = np.linalg.inv(J.T @ J)
    # V = A / (1 - B); at B = 0 its variance is var(A) + var(B) in the reported convention
    return np.sqrt(np.array([cov[0, 0] + cov[3, 3], cov[1, 1], cov[2, 2]]))


def reference_noise_scale(target: TableRow, tau=REFERENCE_DELAYS_PS, truth: DipTruth = DipTruth(), repeats: int = 5,
                      floor: float = 0.25) -> float:
    """Largest noise amplitude whose Fisher stds stay at or below the target stds."""
    unit = fisher_std(tau, truth, noise_profile(tau, truth, floor), repeats)
    return float(np.min(np.array([target.std_V, target.std_t0, target.std_sigma]) / unit))


def synthetic_histogram(group: str, rng: np.random.Generator, truth: DipTruth = DipTruth(),
                        noise: float | None = None, tau=REFERENCE_DELAYS_PS, repeats: int = 5,
                        floor: float = 0.25, trials: int = 10 ** 12, base_rate: float = 1e-3,
                        tau_ref_ps: float = -26.0) -> CoincidenceHistogram:
    """Raw-count histogram whose normalized shape follows ``truth`` plus reference-scale noise."""
    tau = np.asarray(tau, dtype=float)
    if noise is None:
        noise = reference_noise_scale(REFERENCE_TABLE.get(group, REFERENCE_TABLE["whole"]), tau, truth, repeats, floor)
    sd = noise * noise_profile(tau, truth, floor)
    y = dip_model(tau, *truth.params)[:, None] + sd[:, None] * rng.standard_normal((tau.size, repeats))
    y = np.clip(y, 0.0, None)
    counts = np.rint(y * base_rate * trials).astype(np.int64)
    return CoincidenceHistogram(group=group, tau_ps=tau, counts=counts,
                                trials=np.full(counts.shape, trials, dtype=np.int64), tau_ref_ps=tau_ref_ps)


def fitted_quantities(hists) -> dict[str, tuple[float, float, float]]:
    """(V, t0, sigma) of every group and of the pooled "whole" fit."""
    data = [histogram_data(normalize_histogram(h)) for h in hists]
    out = {}
    for h, d in zip(hists, data):
        f = fit_dip_multistart(d)
        out[h.group] = (visibility_from_fit(f).V, f.t0, f.sigma)
    f = fit_dip_multistart(DipData.concat(data))
    out["whole"] = (visibility_from_fit(f).V, f.t0, f.sigma)
    return out


@functools.lru_cache(maxsize=None)
def calibrated_noise(truth: DipTruth = DipTruth(), repeats: int = 5, n_runs: int = 200,
                     seed: int = 20240601) -> dict[str, float]:
    """Per-group noise amplitudes whose fitted-parameter spread stays within the reference stds."""
    fisher = {g: reference_noise_scale(REFERENCE_TABLE[g], truth=truth, repeats=repeats) for g in GROUPS}
    rng = np.random.default_rng(seed)
    samples: dict[str, list] = {g: [] for g in (*GROUPS, "whole")}
    for _ in range(n_runs):
        hists = [synthetic_histogram(g, rng, truth, noise=fisher[g], repeats=repeats) for g in GROUPS]
        for g, q in fitted_quantities(hists).items():
            samples[g].append(q)

    def excess(g):
        row = REFERENCE_TABLE[g]
        return float(np.max(np.std(samples[g], axis=0) / [row.std_V, row.std_t0, row.std_sigma]))

    k_whole = excess("whole")
    return {g: fisher[g] / max(excess(g), k_whole, 1.0) for g in GROUPS}


def synthetic_experiment(rng: np.random.Generator, truth: DipTruth = DipTruth(), groups=GROUPS,
                         visibility_defect: dict[str, float] | None = None,
                         repeats: int = 5, common_noise: bool = False) -> list[CoincidenceHistogram]:
    """One histogram per group at calibrated reference-scale noise.

    ``visibility_defect`` lowers a group's dip amplitude; noise amplitudes
    stay those of the undisturbed truth, so a defect changes only the mean curve.
    ``common_noise`` gives every group the rms of the calibrated amplitudes,
    so that all groups come from one generator (a strict null).
    """
    noise = calibrated_noise(truth, repeats)
    if common_noise:
        rms = float(np.sqrt(np.mean(np.square(list(noise.values())))))
        noise = {g: rms for g in noise}
    out = []
    for g in groups:
        t = truth
        if visibility_defect and g in visibility_defect:
            t = DipTruth(truth.A - visibility_defect[g], truth.t0, truth.sigma, truth.B)
        out.append(synthetic_histogram(g, rng, t, noise=noise[g], repeats=repeats))
    return out
