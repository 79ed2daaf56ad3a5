"""Dip fitting, visibility, likelihood-ratio test, ANOVA and power analysis.

The dip model is ``y(t) = 1 - A exp(-(t - t0)^2 / (2 sigma^2)) - B`` on
histograms normalized to one at the reference delay.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag, solve_triangular
from scipy.special import ndtr, ndtri

from .detection import CoincidenceHistogram, NormalizedHistogram, normalize_histogram
from .special import chi2_survival, f_survival

PARAM_NAMES = ("A", "t0", "sigma", "B")


class FitError(RuntimeError):
    """The dip fit could not be carried out."""


class ConvergenceError(FitError):
    pass


class SingularFitError(FitError):
    pass


@dataclass(frozen=True)
class DipData:
    """Points (t_i, y_i) with standard errors s_i entering a weighted fit.

    ``cov`` optionally replaces the diagonal weighting by a full covariance
    matrix (generalized least squares); ``s`` is then its diagonal root.
    """

    t: np.ndarray
    y: np.ndarray
    s: np.ndarray
    cov: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        t, y, s = (np.asarray(a, dtype=float).ravel() for a in (self.t, self.y, self.s))
        if not t.size == y.size == s.size:
            raise ValueError("t, y, s must have equal length")
        if t.size < 5:
            raise ValueError(f"at least 5 points are needed, got {t.size}")
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("weights s_i must be finite and positive")
        if np.any(~np.isfinite(y)) or np.any(~np.isfinite(t)):
            raise ValueError("non-finite data")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "s", s)
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if cov.shape != (t.size, t.size) or not np.allclose(cov, cov.T):
                raise ValueError("covariance must be a symmetric n x n matrix")
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError("covariance is not positive definite") from exc
            object.__setattr__(self, "cov", cov)
            object.__setattr__(self, "_chol", chol)

    @classmethod
    def with_covariance(cls, t, y, cov) -> "DipData":
        cov = np.asarray(cov, dtype=float)
        if cov.ndim != 2 or np.any(np.diag(cov) <= 0):
            raise ValueError("covariance needs a positive diagonal")
        return cls(t, y, np.sqrt(np.diag(cov)), cov)

    def whiten(self, v: np.ndarray) -> np.ndarray:
        """Map residuals (or Jacobian columns) to unit-variance independent coordinates."""
        if self.cov is None:
            return v / (self.s if v.ndim == 1 else self.s[:, None])
        return solve_triangular(self._chol, v, lower=True)

    @classmethod
    def concat(cls, parts: Sequence["DipData"]) -> "DipData":
        t = np.concatenate([p.t for p in parts])
        y = np.concatenate([p.y for p in parts])
        if all(p.cov is None for p in parts):
            return cls(t, y, np.concatenate([p.s for p in parts]))
        blocks = [p.cov if p.cov is not None else np.diag(p.s ** 2) for p in parts]
        return cls.with_covariance(t, y, block_diag(*blocks))


def dip_model(t, A, t0, sigma, B):
    t = np.asarray(t, dtype=float)
    return 1.0 - A * np.exp(-(t - t0) ** 2 / (2.0 * sigma * sigma)) - B


def dip_jacobian(t, A, t0, sigma, B) -> np.ndarray:
    """d model / d(A, t0, sigma, B), shape (n, 4)."""
    t = np.asarray(t, dtype=float)
    u = t - t0
    g = np.exp(-u * u / (2.0 * sigma * sigma))
    return np.column_stack([
        -g,
        -A * g * u / sigma ** 2,
        -A * g * u * u / sigma ** 3,
        -np.ones_like(t),
    ])


def weighted_chi2(data: DipData, params) -> float:
    r = data.whiten(data.y - dip_model(data.t, *params))
    return float(r @ r)


@dataclass(frozen=True)
class DipFit:
    A: float
    t0: float
    sigma: float
    B: float
    covariance: np.ndarray = field(repr=False)
    chi2: float
    n_points: int
    n_iter: int

    @property
    def params(self) -> np.ndarray:
        return np.array([self.A, self.t0, self.sigma, self.B])

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def dof(self) -> int:
        return self.n_points - 4

    @property
    def degenerate(self) -> bool:
        """Dip amplitude indistinguishable from zero at two standard deviations."""
        return abs(self.A) <= 2.0 * self.std[0]

    def as_dict(self) -> dict:
        sd = self.std
        return {
            "A": self.A, "t0": self.t0, "sigma": self.sigma, "B": self.B,
            "std_A": sd[0], "std_t0": sd[1], "std_sigma": sd[2], "std_B": sd[3],
            "covariance": self.covariance.tolist(), "chi2": self.chi2, "dof": self.dof,
            "n_iter": self.n_iter, "degenerate": self.degenerate,
        }


def initial_guess(data: DipData) -> np.ndarray:
    # np.argmin returns the first minimum; order by t so ties go to the smallest t
    order = np.argsort(data.t, kind="stable")
    i = order[np.argmin(data.y[order])]
    return np.array([1.0 - data.y[i], data.t[i], 3.0, 0.0])


def _lm(data: DipData, p0: np.ndarray, max_iter: int, rtol: float) -> tuple[np.ndarray, float, int]:
    """Levenberg-Marquardt with Nielsen's gain-ratio damping schedule."""
    p = np.array(p0, dtype=float)
    r = data.whiten(data.y - dip_model(data.t, *p))
    cost = float(r @ r)
    J = data.whiten(dip_jacobian(data.t, *p))
    H, g = J.T @ J, J.T @ r
    lam, nu = 1e-3 * float(np.max(np.diag(H))), 2.0
    for it in range(1, max_iter + 1):
        d = np.diag(H).copy()
        d[d <= 0] = 1.0
        try:
            step = np.linalg.solve(H + lam * np.diag(d), g)
        except np.linalg.LinAlgError:
            step = None
        rho = -1.0
        if step is not None and np.all(np.isfinite(step)) and p[2] + step[2] != 0:
            trial = p + step
            r_new = data.whiten(data.y - dip_model(data.t, *trial))
            new_cost = float(r_new @ r_new)
            predicted = float(2.0 * step @ g - step @ H @ step)
            if predicted > 0:
                rho = (cost - new_cost) / predicted
        if rho > 0:
            rel = (cost - new_cost) / max(cost, 1e-300)
            p, r, cost = trial, r_new, new_cost
            J = data.whiten(dip_jacobian(data.t, *p))
            H, g = J.T @ J, J.T @ r
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if rel < rtol or cost < 1e-28:
                return p, cost, it
        else:
            lam *= nu
            nu *= 2.0
            if not np.isfinite(lam) or lam > 1e16 * max(1.0, float(np.max(np.diag(H)))):
                # no downhill step at machine precision: this is the minimum
                return p, cost, it
    raise ConvergenceError(f"dip fit did not converge in {max_iter} iterations")


def fit_dip(data: DipData, init=None, max_iter: int = 200, rtol: float = 1e-12) -> DipFit:
    """Weighted Levenberg-Marquardt fit of the Gaussian dip model."""
    p0 = initial_guess(data) if init is None else np.asarray(init, dtype=float)
    J0 = data.whiten(dip_jacobian(data.t, *p0))
    if np.linalg.matrix_rank(J0.T @ J0) < 4:
        raise SingularFitError("normal equations are singular at the starting point (flat data?)")
    p, cost, n_iter = _lm(data, p0, max_iter, rtol)
    p[2] = abs(p[2])
    J = data.whiten(dip_jacobian(data.t, *p))
    H = J.T @ J
    if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e14:
        raise SingularFitError("normal equations are singular at the optimum")
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    return DipFit(A=float(p[0]), t0=float(p[1]), sigma=float(p[2]), B=float(p[3]), covariance=cov,
                  chi2=cost, n_points=data.t.size, n_iter=n_iter)


def fit_dip_multistart(data: DipData, starts: Sequence = ()) -> DipFit:
    """Best of the default start and any extra starting points."""
    best, last_exc = None, None
    for init in (None, *starts):
        try:
            fit = fit_dip(data, init=init)
        except FitError as exc:
            last_exc = exc
            continue
        if best is None or fit.chi2 < best.chi2:
            best = fit
    if best is None:
        raise last_exc
    return best


# ---------------------------------------------------------------------------
# Visibility


@dataclass(frozen=True)
class VisibilityEstimate:
    V: float
    std: float
    indeterminate: bool = False

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be non-negative")


def visibility_from_fit(fit: DipFit) -> VisibilityEstimate:
    """V = 1 - (1 - (A + B)) / (1 - B); std from the A and B variances only."""
    if fit.B >= 1.0:
        raise FitError(f"baseline offset B={fit.B} >= 1 leaves no normalization")
    v = 1.0 - (1.0 - (fit.A + fit.B)) / (1.0 - fit.B)
    var = fit.covariance[0, 0] + fit.covariance[3, 3]
    return VisibilityEstimate(V=float(v), std=float(math.sqrt(max(var, 0.0))), indeterminate=fit.degenerate)


# ---------------------------------------------------------------------------
# Likelihood-ratio test


@dataclass(frozen=True)
class LrTestResult:
    statistic: float
    df: int
    p_value: float


def likelihood_ratio_test(groups: Sequence[DipData], group_fits: Sequence[DipFit] | None = None,
                          pooled_fit: DipFit | None = None) -> LrTestResult:
    """Separate dip per group against one common dip.

    LR = sum_j [chi2_j(common) - chi2_j(own)] is chi-square with
    4 (G - 1) degrees of freedom under the common-dip hypothesis.
    """
    if len(groups) < 2:
        raise ValueError("the likelihood-ratio test needs at least two groups")
    if pooled_fit is None:
        pooled_fit = fit_dip_multistart(DipData.concat(groups))
    if group_fits is None:
        group_fits = [fit_dip_multistart(g, starts=[pooled_fit.params]) for g in groups]
    if len(group_fits) != len(groups):
        raise ValueError(f"{len(group_fits)} group fits for {len(groups)} groups")
    lr = 0.0
    for g, f in zip(groups, group_fits):
        lr += weighted_chi2(g, pooled_fit.params) - weighted_chi2(g, f.params)
    df = 4 * (len(groups) - 1)
    return LrTestResult(statistic=float(lr), df=df, p_value=float(chi2_survival(max(lr, 0.0), df)))


# ---------------------------------------------------------------------------
# ANOVA


@dataclass(frozen=True)
class AnovaResult:
    F: float
    p_value: float
    df_between: int
    df_within: int
    degenerate: bool = False


def anova_oneway(groups: Sequence[Sequence[float]]) -> AnovaResult:
    """One-way ANOVA. Zero within-group variance is flagged as degenerate."""
    arrays = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(arrays) < 2:
        raise ValueError("ANOVA needs at least two groups")
    if any(a.size < 2 for a in arrays):
        raise ValueError("every ANOVA group needs at least two samples")
    n = sum(a.size for a in arrays)
    k = len(arrays)
    grand = np.concatenate(arrays).mean()
    ss_between = sum(a.size * (a.mean() - grand) ** 2 for a in arrays)
    ss_within = sum(float(((a - a.mean()) ** 2).sum()) for a in arrays)
    dfb, dfw = k - 1, n - k
    scale = max(1.0, float(np.max(np.abs(np.concatenate(arrays)))))
    if ss_within <= (1e-14 * scale) ** 2 * n:
        between_zero = ss_between <= (1e-14 * scale) ** 2 * n
        return AnovaResult(F=math.nan if between_zero else math.inf, p_value=1.0 if between_zero else 0.0,
                           df_between=dfb, df_within=dfw, degenerate=True)
    F = (ss_between / dfb) / (ss_within / dfw)
    return AnovaResult(F=float(F), p_value=float(f_survival(F, dfb, dfw)), df_between=dfb, df_within=dfw)


# ---------------------------------------------------------------------------
# Power


def power_analysis(delta_v: float, std_v: float, alpha: float = 0.05, alternative: str = "two-sided") -> float:
    """Probability that a Gaussian test at level ``alpha`` flags a visibility difference.

    The two compared visibilities each carry std ``std_v``, so the difference
    has std ``sqrt(2) std_v``.
    """
    if std_v <= 0:
        raise ValueError("std_v must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = abs(delta_v) / (math.sqrt(2.0) * std_v)
    if alternative == "two-sided":
        c = ndtri(1.0 - alpha / 2.0)
        return float(ndtr(z - c) + ndtr(-z - c))
    if alternative == "one-sided":
        return float(ndtr(z - ndtri(1.0 - alpha)))
    raise ValueError(f"unknown alternative {alternative!r}")


def detectable_difference(std_v: float, alpha: float = 0.05, power: float = 0.8,
                          alternative: str = "two-sided") -> float:
    """Smallest visibility difference detected with the given probability."""
    if not alpha < power < 1:
        raise ValueError("power must lie in (alpha, 1)")
    lo, hi = 0.0, 1.0
    while power_analysis(hi, std_v, alpha, alternative) < power:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if power_analysis(mid, std_v, alpha, alternative) < power:
            lo = mid
        else:
            hi = mid
    return hi


# ---------------------------------------------------------------------------
# Certification


def histogram_data(h: NormalizedHistogram, s: np.ndarray | None = None) -> DipData:
    """Mean curve weighted by the standard error of the mean."""
    s = h.s if s is None else s
    return DipData(h.tau_ps, h.y, s / math.sqrt(h.n_repeats))


def pooled_std(hists: Sequence[NormalizedHistogram], unbiased_precision: bool = False) -> np.ndarray:
    """Per-delay repeat std pooled over groups.

    With ``unbiased_precision`` the variance is inflated by nu / (nu - 2), so
    that 1 / s^2 is an unbiased estimate of the inverse variance (nu = pooled
    degrees of freedom). Plain 1 / s^2 weights overstate the precision and
    make chi-square based tests anticonservative.
    """
    taus = hists[0].tau_ps
    for h in hists[1:]:
        if h.tau_ps.shape != taus.shape or not np.allclose(h.tau_ps, taus):
            raise ValueError("groups must share the same delay grid")
    dof = np.array([h.n_repeats - 1 for h in hists], dtype=float)
    nu = dof.sum()
    var = np.sum([d * h.s ** 2 for d, h in zip(dof, hists)], axis=0) / nu
    if unbiased_precision:
        if nu <= 2:
            raise ValueError("unbiased precision needs more than 2 pooled degrees of freedom")
        var = var * nu / (nu - 2.0)
    return np.sqrt(var)


def normalized_covariance_data(h: NormalizedHistogram, s: np.ndarray, tau_ref_ps: float) -> DipData:
    """Normalized means with the covariance that normalization induces.

    Dividing by the mean at the reference delay puts the reference error into
    every point: cov_ij = delta_ij u_i + y_i y_j u_ref with u = s^2 / n. The
    reference point itself is identically one and is left out.
    """
    ref = np.flatnonzero(np.isclose(h.tau_ps, tau_ref_ps))
    if ref.size == 0:
        raise ValueError(f"reference delay {tau_ref_ps} ps not in {h.group!r}")
    u = s ** 2 / h.n_repeats
    keep = np.arange(h.tau_ps.size) != ref[0]
    y = h.y[keep]
    cov = np.diag(u[keep]) + np.outer(y, y) * u[ref[0]]
    return DipData.with_covariance(h.tau_ps[keep], y, cov)


@dataclass(frozen=True)
class GroupResult:
    group: str
    fit: DipFit | None
    visibility: VisibilityEstimate | None
    error: str | None = None

    def row(self) -> dict:
        if self.fit is None:
            return {"group": self.group, "error": self.error}
        sd = self.fit.std
        return {"group": self.group, "V": self.visibility.V, "std_V": self.visibility.std,
                "t0": self.fit.t0, "std_t0": float(sd[1]), "sigma": self.fit.sigma, "std_sigma": float(sd[2]),
                "B": self.fit.B, "indeterminate": self.visibility.indeterminate}


@dataclass(frozen=True)
class CertificationReport:
    alpha: float
    groups: list[GroupResult]
    whole: GroupResult | None
    lr: LrTestResult | None
    anova: AnovaResult | None
    anova_samples: dict[str, list[float]]
    power: float | None
    power_delta_v: float
    detectable_delta_v: float | None
    verdict: str
    notes: list[str]

    @property
    def exit_code(self) -> int:
        return {"not rejected": 0, "rejected": 2}.get(self.verdict, 3)

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "table": [g.row() for g in self.groups] + ([{**self.whole.row(), "group": "whole"}] if self.whole else []),
            "likelihood_ratio": None if self.lr is None else
            {"statistic": self.lr.statistic, "df": self.lr.df, "p_value": self.lr.p_value},
            "anova_t0": None if self.anova is None else
            {"F": self.anova.F, "p_value": self.anova.p_value, "df_between": self.anova.df_between,
             "df_within": self.anova.df_within, "degenerate": self.anova.degenerate},
            "power": {"delta_v": self.power_delta_v, "power": self.power,
                      "detectable_delta_v_at_0.8": self.detectable_delta_v},
            "verdict": self.verdict,
            "notes": list(self.notes),
        }


def _fit_group(name: str, data: DipData, starts=()) -> GroupResult:
    try:
        fit = fit_dip_multistart(data, starts)
        return GroupResult(name, fit, visibility_from_fit(fit))
    except FitError as exc:
        return GroupResult(name, None, None, str(exc))


def repeat_dip_positions(h: NormalizedHistogram, s: np.ndarray, start=None) -> list[float]:
    """t0 fitted to each repeat on its own; failed fits are dropped."""
    out = []
    for r in range(h.n_repeats):
        data = DipData(h.tau_ps, h.repeats[:, r], s)
        try:
            out.append(fit_dip_multistart(data, starts=[] if start is None else [start]).t0)
        except FitError:
            continue
    return out


def certify(histograms: Sequence[CoincidenceHistogram], alpha: float = 0.05, power_delta_v: float = 0.05,
            tau_ref_ps: float | None = None) -> CertificationReport:
    """Normalize, fit every group and the pooled data, then test for group differences."""
    if not histograms:
        raise ValueError("no histograms given")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    names = [h.group for h in histograms]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate group names: {names}")
    norm = [normalize_histogram(h, tau_ref_ps) for h in histograms]
    notes: list[str] = []
    data, groups = {}, []
    for h in norm:
        try:
            data[h.group] = histogram_data(h)
            groups.append(_fit_group(h.group, data[h.group]))
        except ValueError as exc:
            groups.append(GroupResult(h.group, None, None, str(exc)))
    for g in groups:
        if g.fit is None:
            notes.append(f"fit failed for {g.group}: {g.error}")
        elif g.visibility.indeterminate:
            notes.append(f"dip amplitude of {g.group} is within 2 std of zero; visibility indeterminate")

    if len(norm) == 1:
        notes.append("single group: visibility only, likelihood-ratio test and ANOVA skipped")
        g = groups[0]
        verdict = "indeterminate" if g.fit is None or g.visibility.indeterminate else "not rejected"
        return CertificationReport(alpha, groups, None, None, None, {}, None, power_delta_v, None, verdict, notes)

    whole = _fit_group("whole", DipData.concat(list(data.values()))) if data else None

    # Hypothesis tests use per-delay variances pooled over all groups (with
    # unbiased precision) and the full covariance of the normalized means.
    nu = sum(h.n_repeats - 1 for h in norm)
    if nu <= 2:
        notes.append("too few repeats for unbiased precision weights; using plain pooled variances")
    s_pool = pooled_std(norm, unbiased_precision=nu > 2)
    if np.any(s_pool <= 0):
        notes.append("zero repeat variance at some delay; tests skipped")
        return CertificationReport(alpha, groups, whole, None, None, {}, None, power_delta_v, None,
                                   "indeterminate", notes)
    ref = histograms[0].tau_ref_ps if tau_ref_ps is None else tau_ref_ps
    test_data = [normalized_covariance_data(h, s_pool, ref) for h in norm]
    lr = anova = None
    samples: dict[str, list[float]] = {}
    try:
        pooled = fit_dip_multistart(DipData.concat(test_data))
        fits = [fit_dip_multistart(d, starts=[pooled.params]) for d in test_data]
        lr = likelihood_ratio_test(test_data, fits, pooled)
        samples = {h.group: repeat_dip_positions(h, s_pool, pooled.params) for h in norm}
        dropped = sum(h.n_repeats - len(samples[h.group]) for h in norm)
        if dropped:
            notes.append(f"{dropped} single-repeat dip fits failed and were left out of the ANOVA")
        anova = anova_oneway(list(samples.values()))
        if anova.degenerate:
            notes.append("ANOVA degenerate: zero within-group variance of t0")
    except (FitError, ValueError) as exc:
        notes.append(f"hypothesis tests could not be completed: {exc}")

    power = detectable = None
    if whole.fit is not None and whole.visibility.std > 0:
        # modulation can only lower the overlap, so the alternative is one-sided
        power = power_analysis(power_delta_v, whole.visibility.std, alpha, "one-sided")
        detectable = detectable_difference(whole.visibility.std, alpha, 0.8, "one-sided")

    if lr is None or anova is None or anova.degenerate or any(
            g.fit is None or g.visibility.indeterminate for g in groups):
        verdict = "indeterminate"
    elif lr.p_value < alpha or anova.p_value < alpha:
        verdict = "rejected"
    else:
        verdict = "not rejected"
    return CertificationReport(alpha, groups, whole, lr, anova, samples, power, power_delta_v, detectable,
                               verdict, notes)
