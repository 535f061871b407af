"""Empirical density and fluctuation fields, and replica-ensemble estimators.

All functions take occupancy arrays whose last axis runs over the N
positions, so a single configuration (N,) and a whole ensemble slice (R, N)
are handled alike.  Position i (0-based) sits at coordinate (i+1)/N on the
torus.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .meanfield import DensityProfile, ProfileSeries
from .model import INFINITE, RatePolicy
from .sim import Configuration, InitialProfile, ReplicaEnsemble, run_replicas, site_coordinates


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class TestFunction:
    """A 1-periodic function on the torus; ``smooth`` marks C-infinity functions."""

    __test__ = False  # not a pytest class

    evaluator: Callable[[np.ndarray], np.ndarray]
    smooth: bool = True

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(np.asarray(self.evaluator(u), dtype=float), u.shape)

    def check_periodic(self, grid: int = 64, tol: float = 1e-9) -> None:
        u = np.arange(grid) / grid
        if not np.allclose(self(u), self(u + 1.0), atol=tol):
            raise ValueError("test function is not 1-periodic")


def _values(f, N: int) -> np.ndarray:
    # test functions are read at i/N, i = 1..N; for periodic f this is the
    # same as the wrapped site coordinate
    x = np.arange(1, N + 1) / N
    if callable(f):
        return np.broadcast_to(np.asarray(f(x), dtype=float), (N,))
    return np.broadcast_to(np.asarray(f, dtype=float), (N,))


def _counts(config) -> np.ndarray:
    if isinstance(config, Configuration):
        return config.counts
    return np.asarray(config)


@dataclass(frozen=True)
class FieldEstimate:
    value: float
    std_error: float
    replicas: int

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + level / 2)
        return self.value - z * self.std_error, self.value + z * self.std_error


@dataclass(frozen=True)
class SiteEstimates:
    values: np.ndarray
    std_errors: np.ndarray
    replicas: int


def empirical_density(config, k: int, f=1.0):
    """(1/N) sum_i 1{eta(i) = k} f((i+1)/N); vectorized over leading axes."""
    c = _counts(config)
    N = c.shape[-1]
    out = (c == k) @ _values(f, N) / N
    return float(out) if np.ndim(out) == 0 else out


def occupation_probabilities(ensemble: ReplicaEnsemble, t: float, k: int) -> SiteEstimates:
    """Per-position frequency of occupancy k across replicas, with binomial standard errors."""
    ind = ensemble.at(t) == k
    R = ind.shape[0]
    p = ind.mean(axis=0)
    return SiteEstimates(p, np.sqrt(p * (1 - p) / R), R)


def fluctuation_field(config, site_probs, k: int, f=1.0):
    """(1/sqrt(N)) sum_i (1{eta(i) = k} - site_probs[i]) f((i+1)/N)."""
    c = _counts(config)
    N = c.shape[-1]
    probs = np.asarray(site_probs, dtype=float)
    if probs.shape != (N,):
        raise ValueError(f"site_probs has shape {probs.shape}, expected ({N},)")
    out = ((c == k) - probs) @ _values(f, N) / math.sqrt(N)
    return float(out) if np.ndim(out) == 0 else out


def sample_covariance(a, b) -> FieldEstimate:
    """Unbiased sample covariance with a leave-one-out jackknife standard error.

    The standard error needs at least 3 replicas and is nan for 2.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    R = a.size
    if R < 2:
        raise InsufficientData("need at least 2 replicas for a covariance")
    sa, sb, sab = a.sum(), b.sum(), a @ b
    cov = (sab - sa * sb / R) / (R - 1)
    if R == 2:
        return FieldEstimate(float(cov), math.nan, R)
    loo = (sab - a * b - (sa - a) * (sb - b) / (R - 1)) / (R - 2)
    se = math.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2))
    return FieldEstimate(float(cov), se, R)


def covariance_estimate(ensemble: ReplicaEnsemble, t: float, x: int, y: int,
                        k1: int, k2: int) -> FieldEstimate:
    """Cov(1{eta_t(x) = k1}, 1{eta_t(y) = k2}) across replicas."""
    if ensemble.replicas < 2:
        raise InsufficientData("need at least 2 replicas")
    c = ensemble.at(t)
    return sample_covariance(c[:, x] == k1, c[:, y] == k2)


def block_covariance(counts: np.ndarray, A: Sequence[int], B: Sequence[int],
                     k1: int, k2: int) -> FieldEstimate:
    """Average pair covariance over A x B: Cov(mean_A 1{=k1}, mean_B 1{=k2})."""
    a = (counts[:, A] == k1).mean(axis=1)
    b = (counts[:, B] == k2).mean(axis=1)
    return sample_covariance(a, b)


# --- covariance decay ----------------------------------------------------------

@dataclass
class PanelEntry:
    anchor: float
    k1: int
    k2: int
    estimate: FieldEstimate


@dataclass
class CovariancePanel:
    """Block covariances between windows centred at u0 and u0 + offset."""

    N: int
    entries: list[PanelEntry]

    def argmax(self) -> PanelEntry:
        return max(self.entries, key=lambda e: abs(e.estimate.value))

    @property
    def max_abs(self) -> float:
        return abs(self.argmax().estimate.value)

    @property
    def max_std_error(self) -> float:
        return self.argmax().estimate.std_error

    def significant(self, family_level: float = 0.01) -> bool:
        """Any entry nonzero at a Bonferroni-corrected two-sided level."""
        z = stats.norm.ppf(1 - family_level / (2 * len(self.entries)))
        return any(abs(e.estimate.value) > z * e.estimate.std_error for e in self.entries)


def window(N: int, center: float, half_width: float) -> np.ndarray:
    """Positions whose coordinate lies within half_width of center on the torus."""
    x = site_coordinates(N)
    d = np.abs((x - center + 0.5) % 1.0 - 0.5)
    return np.flatnonzero(d < half_width - 1e-12)


def covariance_panel(counts: np.ndarray, levels: Sequence[int], anchors: int = 8,
                     half_width: float = 0.125, offset: float = 0.25) -> CovariancePanel:
    """Panel over anchors u0 = j/anchors and all level pairs (k1, k2).

    Each entry is the covariance between the mean indicators of two windows
    of half-width ``half_width`` whose centres are ``offset`` apart, i.e.
    the average covariance over position pairs about N*offset apart.
    """
    N = counts.shape[-1]
    entries = []
    for j in range(anchors):
        u0 = j / anchors
        A = window(N, u0, half_width)
        B = window(N, (u0 + offset) % 1.0, half_width)
        if A.size == 0 or B.size == 0:
            raise ValueError("window too small for this N")
        for k1 in levels:
            for k2 in levels:
                entries.append(PanelEntry(u0, k1, k2, block_covariance(counts, A, B, k1, k2)))
    return CovariancePanel(N, entries)


@dataclass
class Regression:
    slope: float
    std_error: float
    intercept: float

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + level / 2)
        return self.slope - z * self.std_error, self.slope + z * self.std_error


def loglog_regression(x, y, y_se=None) -> Regression:
    """Fit log y = a + s log x.

    With ``y_se`` the fit is weighted by the delta-method variances
    (y_se/y)^2 and the slope error is inflated by the reduced chi-square
    when that exceeds 1; otherwise ordinary least squares.
    """
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    n = lx.size
    if n < 2:
        raise InsufficientData("need at least two points for a slope")
    if y_se is None:
        w = np.ones(n)
    else:
        w = (np.asarray(y, dtype=float) / np.asarray(y_se, dtype=float)) ** 2
    xm = np.sum(w * lx) / w.sum()
    ym = np.sum(w * ly) / w.sum()
    sxx = np.sum(w * (lx - xm) ** 2)
    slope = np.sum(w * (lx - xm) * (ly - ym)) / sxx
    intercept = ym - slope * xm
    resid = ly - intercept - slope * lx
    if y_se is None:
        se = math.sqrt(np.sum(resid**2) / (n - 2) / sxx) if n > 2 else math.nan
    else:
        se = math.sqrt(1.0 / sxx)
        if n > 2:
            se *= max(1.0, math.sqrt(np.sum(w * resid**2) / (n - 2)))
    return Regression(float(slope), float(se), float(intercept))


@dataclass
class DecayReport:
    t: float
    N_list: list[int]
    max_abs: list[float]
    std_errors: list[float]
    significant: list[bool]
    regression: Regression | None
    degenerate: bool
    panels: list[CovariancePanel] = field(repr=False, default_factory=list)

    def rows(self) -> list[dict]:
        return [{"N": N, "max_abs_cov": v, "std_error": s, "significant": g}
                for N, v, s, g in zip(self.N_list, self.max_abs, self.std_errors, self.significant)]

    def as_dict(self) -> dict:
        out = {"t": self.t, "rows": self.rows(), "degenerate": self.degenerate}
        if self.regression is not None:
            lo, hi = self.regression.ci()
            out.update(slope=self.regression.slope, slope_se=self.regression.std_error,
                       slope_ci=[lo, hi])
        return out


def decay_study(policy: RatePolicy, profile: InitialProfile, t: float, N_list: Sequence[int],
                replicas: int, base_seed: int = 0, *, levels: Sequence[int] | None = None,
                anchors: int = 8, half_width: float = 0.125, offset: float = 0.25,
                workers: int = 1) -> DecayReport:
    """Largest panel covariance per N and its log-log decay slope.

    The study is flagged degenerate, with no slope, when no panel entry is
    significantly nonzero at any N (e.g. frozen or independent dynamics).
    """
    if levels is None:
        levels = range(int(policy.capacity) + 1) if policy.finite else range(4)
    levels = list(levels)
    panels = []
    for i, N in enumerate(N_list):
        ens = run_replicas(profile, policy, N, t, [t], replicas, base_seed + i, workers=workers)
        panels.append(covariance_panel(ens.at(t), levels, anchors, half_width, offset))
    vals = [p.max_abs for p in panels]
    ses = [p.max_std_error for p in panels]
    sig = [p.significant() for p in panels]
    degenerate = not any(sig)
    reg = None
    if not degenerate and len(N_list) >= 2 and all(v > 0 for v in vals):
        reg = loglog_regression(N_list, vals, ses)
    return DecayReport(t, list(N_list), vals, ses, sig, reg, degenerate, panels)


# --- convergence to the mean-field limit ---------------------------------------

@dataclass
class ConvergenceRow:
    N: int
    replicas: int
    error: float  # E[(mu^N - ref)^2] estimate = variance + bias2
    error_se: float
    variance: float
    bias2: float
    mean: float

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + level / 2)
        return self.error - z * self.error_se, self.error + z * self.error_se


@dataclass
class ConvergenceReport:
    t: float
    k: int
    reference: float
    rows: list[ConvergenceRow]
    error_slope: Regression | None
    variance_slope: Regression | None

    @property
    def decreasing(self) -> bool:
        errs = [r.error for r in self.rows]
        return all(b < a for a, b in zip(errs, errs[1:]))

    def as_dict(self) -> dict:
        out = {"t": self.t, "k": self.k, "reference": self.reference,
               "rows": [r.__dict__ | {"ci": list(r.ci())} for r in self.rows],
               "error_decreasing": self.decreasing}
        for name in ("error_slope", "variance_slope"):
            reg = getattr(self, name)
            out[name] = None if reg is None else reg.slope
        return out


def reference_value(meanfield, t: float, k: int, f) -> float:
    """Grid integral of rho_{t,k} f from a profile or a profile series."""
    prof = meanfield.at(t) if isinstance(meanfield, ProfileSeries) else meanfield
    if not isinstance(prof, DensityProfile):
        raise TypeError("meanfield must be a DensityProfile or ProfileSeries")
    if abs(prof.t - t) > 1e-9:
        raise ValueError(f"mean-field profile is at t={prof.t}, not {t}")
    if k > prof.kmax:
        return 0.0
    return prof.integral(k, f)


def convergence_report(ensembles: Sequence[ReplicaEnsemble], meanfield, t: float, k: int,
                       f) -> ConvergenceReport:
    """Mean-square distance between mu^N_{t,k}(f) and its mean-field limit, per N."""
    ref = reference_value(meanfield, t, k, f)
    rows = []
    for ens in sorted(ensembles, key=lambda e: e.N):
        try:
            counts = ens.at(t)
        except KeyError as exc:
            raise ValueError(f"ensemble with N={ens.N} has no observation at t={t}") from exc
        mu = empirical_density(counts, k, f)
        R = mu.size
        sq = (mu - ref) ** 2
        mean = float(mu.mean())
        var = float(mu.var())
        bias2 = (mean - ref) ** 2
        se = float(sq.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan
        rows.append(ConvergenceRow(ens.N, R, var + bias2, se, var, bias2, mean))
    err_slope = var_slope = None
    if len(rows) >= 2:
        Ns = [r.N for r in rows]
        if all(r.error > 0 for r in rows):
            err_slope = loglog_regression(Ns, [r.error for r in rows])
        if all(r.variance > 0 for r in rows):
            var_slope = loglog_regression(Ns, [r.variance for r in rows])
    return ConvergenceReport(t, k, ref, rows, err_slope, var_slope)
