"""Desk-scale studies shared by the command line and the acceptance tests.

Each study returns a plain result object with an ``as_dict`` summary and a
``passed`` verdict against its threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as sp_integrate
from scipy import stats

from . import fields, graphical, meanfield, ou
from .model import INFINITE, RatePolicy
from .sim import InitialProfile, run_replicas, sample_initial, simulate, replica_seed, \
    INIT_STREAM, DYNAMICS_STREAM


# --- conservation -----------------------------------------------------------------

def replay_events(initial: np.ndarray, events: dict, capacity: float) -> tuple[np.ndarray, int, int]:
    """Replay an accepted-jump log from ``initial``.

    Returns (final counts, lowest intermediate count, highest intermediate
    count).  Every event is a unit move, so per-position running sums give
    every intermediate occupancy without a Python loop.
    """
    src = np.asarray(events["src"], dtype=np.int64)
    dst = np.asarray(events["dst"], dtype=np.int64)
    n = src.size
    if np.any(src == dst):
        raise AssertionError("event with identical source and destination")
    if n == 0:
        return initial.copy(), int(initial.min()), int(initial.max())
    site = np.concatenate([src, dst])
    delta = np.concatenate([-np.ones(n, np.int64), np.ones(n, np.int64)])
    order = np.lexsort((np.concatenate([np.arange(n), np.arange(n)]), site))
    site = site[order]
    running = np.cumsum(delta[order])
    starts = np.flatnonzero(np.r_[True, site[1:] != site[:-1]])
    offsets = np.repeat(running[starts] - delta[order][starts], np.diff(np.r_[starts, site.size]))
    levels = initial[site] + running - offsets
    final = initial.copy()
    np.add.at(final, src, -1)
    np.add.at(final, dst, 1)
    return final, int(min(levels.min(), initial.min())), int(max(levels.max(), initial.max()))


@dataclass
class ConservationResult:
    events: int
    replicas: int
    totals_equal: bool
    replay_matches: bool
    bounds_ok: bool
    meanfield: dict

    @property
    def passed(self) -> bool:
        mf = self.meanfield
        return (self.events >= 1_000_000 and self.totals_equal and self.replay_matches
                and self.bounds_ok and mf["normalization_drift"] <= 1e-8
                and mf["normalization_error"] <= 1e-8 and mf["mass_drift"] <= 1e-8)

    def as_dict(self) -> dict:
        return {"events": self.events, "replicas": self.replicas,
                "totals_equal": self.totals_equal, "replay_matches": self.replay_matches,
                "bounds_ok": self.bounds_ok, "meanfield": self.meanfield, "passed": self.passed}


def conservation_check(policy: RatePolicy, profile: InitialProfile, N: int, T: float,
                       min_events: int, seed: int, M: int = 64, dt: float = 1e-3,
                       meanfield_T: float = 1.0, batch: int = 64) -> ConservationResult:
    """Replay simulated jump logs until ``min_events`` accepted jumps are verified,
    then integrate the mean-field system on [0, meanfield_T] and report its drifts."""
    events = 0
    r = 0
    totals_equal = replay_ok = bounds_ok = True
    cap = policy.capacity
    while events < min_events:
        for _ in range(batch):
            config = sample_initial(profile, N, replica_seed(seed, r, INIT_STREAM))
            traj = simulate(config, policy, T, None, replica_seed(seed, r, DYNAMICS_STREAM),
                            record_events=True)
            final, low, high = replay_events(config.counts, traj.events, cap)
            totals = traj.snapshots.sum(axis=1)
            totals_equal &= bool(np.all(totals == config.total)) and int(final.sum()) == config.total
            replay_ok &= bool(np.array_equal(final, traj.snapshots[-1]))
            bounds_ok &= low >= 0 and (cap == INFINITE or high <= cap)
            events += traj.accepted_count
            r += 1
    prof = meanfield.init_profile(profile.psi, cap, M=M)
    series = meanfield.integrate(prof, policy, meanfield_T, dt, record_every=10**9)
    return ConservationResult(events, r, totals_equal, replay_ok, bounds_ok, series.diagnostics)


# --- hydrodynamic convergence -----------------------------------------------------

@dataclass
class HydroResult:
    report: fields.ConvergenceReport
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        rep = self.report
        if len(rep.rows) < 2 or rep.variance_slope is None:
            return False
        return rep.decreasing and rep.variance_slope.slope <= -0.8

    def as_dict(self) -> dict:
        return self.report.as_dict() | {"passed": self.passed} | self.extra


def hydro_study(policy: RatePolicy, profile: InitialProfile, N_list, replicas: int, t: float,
                k: int, f, seed: int, M: int = 256, dt: float = 1e-3,
                workers: int = 1) -> HydroResult:
    prof0 = meanfield.init_profile(profile.psi, policy.capacity, M=M)
    series = meanfield.integrate(prof0, policy, t, dt, record_every=10**9)
    ensembles = [run_replicas(profile, policy, N, t, [0.0, t], replicas, seed + i, workers=workers)
                 for i, N in enumerate(N_list)]
    rep = fields.convergence_report(ensembles, series.at(t), t, k, f)
    return HydroResult(rep, {"meanfield": series.diagnostics})


@dataclass
class InfiniteHydroResult:
    theta_error: float
    tail: dict
    comparisons: list[dict]
    diagnostics: dict

    @property
    def passed(self) -> bool:
        return (self.theta_error <= 1e-4 and self.tail["sup_tails"][0] <= 1e-8
                and all(c["within"] for c in self.comparisons))

    def as_dict(self) -> dict:
        return {"theta_error": self.theta_error, "tail": self.tail,
                "comparisons": self.comparisons, "meanfield": self.diagnostics,
                "passed": self.passed}


def infinite_hydro_study(policy: RatePolicy, profile: InitialProfile, N: int, replicas: int,
                         T: float, levels, f, seed: int, kmax: int, M: int = 64,
                         dt: float = 1e-3, theta_oracle=None, workers: int = 1) -> InfiniteHydroResult:
    """Truncated mean-field run for infinite capacity checked three ways.

    ``theta_oracle(grid, T)`` returns the reference mean occupancy; without
    it the theta error is reported as nan.
    """
    prof0 = meanfield.init_profile(profile.psi, INFINITE, kmax=kmax, M=M)
    series = meanfield.integrate(prof0, policy, T, dt, record_every=10**9)
    final = series.final()
    theta_err = math.nan
    if theta_oracle is not None:
        theta_err = float(np.max(np.abs(meanfield.theta(final) - theta_oracle(final.grid, T))))
    tail = meanfield.tail_check(final).as_dict()
    ens = run_replicas(profile, policy, N, T, [T], replicas, seed, workers=workers)
    counts = ens.at(T)
    comps = []
    for k in levels:
        mu = fields.empirical_density(counts, k, f)
        ref = final.integral(k, f)
        se = float(mu.std(ddof=1) / math.sqrt(mu.size))
        comps.append({"k": int(k), "mean": float(mu.mean()), "reference": ref, "std_error": se,
                      "within": bool(abs(mu.mean() - ref) <= 3 * se)})
    return InfiniteHydroResult(theta_err, tail, comps, series.diagnostics)


def linear_theta_oracle(kernel, psi, M: int, T: float) -> np.ndarray:
    """Mean occupancy for independent walkers, by a general-purpose ODE solver.

    d theta(u)/dt = -theta(u) int phi(u,v) dv + int phi(v,u) theta(v) dv, with
    the integrals as Riemann sums on the same grid.
    """
    u = meanfield.grid_points(M)
    P = np.asarray(kernel(u[:, None], u[None, :]), dtype=float) * np.ones((M, M))
    out_rate = P.sum(axis=1) / M

    def rhs(_t, th):
        return -th * out_rate + P.T @ th / M

    sol = sp_integrate.solve_ivp(rhs, (0.0, T), np.asarray(psi(u), dtype=float),
                                 method="DOP853", rtol=1e-12, atol=1e-14)
    return sol.y[:, -1]


# --- fluctuations -----------------------------------------------------------------

@dataclass
class FluctRow:
    t: float
    predicted: float
    empirical: float
    std_error: float
    closed_form: float | None = None

    @property
    def agrees(self) -> bool:
        if self.closed_form is not None:
            return abs(self.predicted - self.closed_form) <= 1e-6
        tol = max(0.10 * abs(self.predicted), 3 * self.std_error)
        return abs(self.empirical - self.predicted) <= tol


@dataclass
class FluctResult:
    rows: list[FluctRow]
    states: list = field(repr=False, default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.agrees for r in self.rows)

    def as_dict(self) -> dict:
        return {"rows": [r.__dict__ | {"agrees": r.agrees} for r in self.rows],
                "passed": self.passed}


def split_half_second_moment(counts: np.ndarray, k: int, f) -> tuple[float, float]:
    """E[V_k(f)^2] with site probabilities from one half and fields from the other, both ways."""
    R = counts.shape[0]
    half = R // 2
    A, B = counts[:half], counts[half:2 * half]
    sq = []
    for probs_from, field_from in ((A, B), (B, A)):
        p = (probs_from == k).mean(axis=0)
        v = fields.fluctuation_field(field_from, p, k, f)
        sq.append(v**2)
    sq = np.concatenate(sq)
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size))


def initial_variance_closed_form(psi, K: int, k: int, f) -> float:
    """int p_k(u) (1 - p_k(u)) f(u)^2 du by adaptive quadrature."""
    def integrand(u):
        p = stats.binom.pmf(k, K, float(psi(u)) / K)
        return p * (1 - p) * float(f(u)) ** 2

    val, _ = sp_integrate.quad(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def fluct_study(policy: RatePolicy, profile: InitialProfile, N: int, replicas: int, times,
                k: int, f, seed: int, M: int = 128, dt: float = 1e-3,
                workers: int = 1) -> FluctResult:
    K = int(policy.capacity)
    times = sorted(float(t) for t in times)
    T = times[-1]
    prof0 = meanfield.init_profile(profile.psi, K, M=M)
    series = meanfield.integrate(prof0, policy, T, dt)
    states = ou.evolve_covariance(ou.initial_covariance(profile.psi, K, M), series, policy, T, dt,
                                  record_times=times)
    ens = run_replicas(profile, policy, N, T, times, replicas, seed, workers=workers)
    rows = []
    for t, st in zip(times, states):
        pred = ou.project(st, f, f, k, k)
        emp, se = split_half_second_moment(ens.at(t), k, f)
        closed = initial_variance_closed_form(profile.psi, K, k, f) if t == 0 else None
        rows.append(FluctRow(t, pred, emp, se, closed))
    return FluctResult(rows, states)


# --- independence -----------------------------------------------------------------

@dataclass
class OverlapResult:
    estimates: list[graphical.OverlapEstimate]

    @property
    def scaled(self) -> list[float]:
        return [e.N * e.estimate for e in self.estimates]

    @property
    def variation(self) -> float:
        s = self.scaled
        return max(s) / min(s) - 1 if min(s) > 0 else math.inf

    @property
    def passed(self) -> bool:
        return all(e.estimate <= e.bound for e in self.estimates) and self.variation < 0.5

    def as_dict(self) -> dict:
        return {"rows": [e.row() for e in self.estimates], "scaled": self.scaled,
                "variation": self.variation, "passed": self.passed}


def overlap_study(K1, T: float, N_list, replicas: int, seed: int) -> OverlapResult:
    """Overlap of the influence sets of two positions N/2 apart, for each N."""
    ests = [graphical.overlap_probability(N, K1, T, 0, N // 2, replicas, seed + i)
            for i, N in enumerate(N_list)]
    return OverlapResult(ests)


def decay_passed(report: fields.DecayReport) -> bool:
    reg = report.regression
    if reg is None:
        return False
    lo, hi = reg.ci()
    return reg.slope <= -0.8 and not (lo <= -0.5 <= hi)
