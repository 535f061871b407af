"""Mean-field ODE for the occupation densities rho_{t,k}(u) on a uniform torus grid.

For each grid point u_j = (j+1)/M and level k the right-hand side is the
gain/loss balance

    d rho_k = - rho_k (out_k + in_k) + rho_{k-1} in_{k-1} + rho_{k+1} out_{k+1}

with ``out_k(u) = sum_l int phi_{k,l}(u,v) rho_l(v) dv`` (a site at u holding
k particles sends one) and ``in_k(u) = sum_{l>=1} int phi_{l,k}(v,u) rho_l(v) dv``
(it receives one).  Torus integrals are left Riemann sums on the same grid.
For infinite capacity the levels are truncated at ``kmax`` and jumps onto a
site already at ``kmax`` are suppressed, exactly like a capacity bound, so
truncation error shows up in :func:`tail_check` rather than as lost mass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import INFINITE, RatePolicy, rate_table

TAIL_TOLERANCE = 1e-12


class IntegrationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class TruncationError(ValueError):
    pass


def grid_points(M: int) -> np.ndarray:
    return (np.arange(1, M + 1) % M) / M


def default_kmax(psi_max: float) -> int:
    return int(math.ceil(4 * psi_max + 30))


@dataclass
class DensityProfile:
    values: np.ndarray  # (kmax+1, M)
    capacity: float
    t: float = 0.0
    renormalization: float = 0.0  # mass added by renormalizing the truncated initial pmf

    @property
    def M(self) -> int:
        return self.values.shape[1]

    @property
    def kmax(self) -> int:
        return self.values.shape[0] - 1

    @property
    def grid(self) -> np.ndarray:
        return grid_points(self.M)

    def normalization_error(self) -> float:
        return float(np.max(np.abs(self.values.sum(axis=0) - 1.0)))

    def mass(self) -> float:
        """Grid functional (1/M) sum_j sum_k k rho_k(u_j)."""
        return float(np.arange(self.kmax + 1) @ self.values.sum(axis=1) / self.M)

    def integral(self, k: int, f) -> float:
        """Riemann-sum approximation of int rho_k(u) f(u) du."""
        fv = f(self.grid) if callable(f) else f
        fv = np.broadcast_to(np.asarray(fv, dtype=float), (self.M,))
        return float(self.values[k] @ fv / self.M)


def init_profile(psi, capacity: float, kmax: int | None = None, M: int = 64) -> DensityProfile:
    """Binomial(K, psi/K) or Poisson(psi) pmf at every grid point."""
    if M < 8:
        raise ValueError("grid size M must be at least 8")
    u = grid_points(M)
    p = np.broadcast_to(np.asarray(psi(u), dtype=float), (M,))
    if np.any(p <= 0) or (capacity != INFINITE and np.any(p >= capacity)):
        raise ValueError("psi outside the admissible range on the grid")
    if capacity != INFINITE:
        K = int(capacity)
        if kmax is not None and kmax != K:
            raise ValueError("finite capacity tracks exactly K+1 levels")
        lev = np.arange(K + 1)[:, None]
        vals = stats.binom.pmf(lev, K, p[None, :] / K)
        return DensityProfile(vals, capacity)
    if kmax is None:
        kmax = default_kmax(float(p.max()))
    tail = float(stats.poisson.sf(kmax, p.max()))
    if tail >= TAIL_TOLERANCE:
        raise TruncationError(f"Poisson tail beyond kmax={kmax} is {tail:.3g} >= {TAIL_TOLERANCE}")
    lev = np.arange(kmax + 1)[:, None]
    vals = stats.poisson.pmf(lev, p[None, :])
    col = vals.sum(axis=0)
    vals = vals / col
    return DensityProfile(vals, INFINITE, renormalization=float(np.max(1.0 - col)))


class MeanFieldRHS:
    """Right-hand side operator, with the rate kernels pre-evaluated on the grid."""

    def __init__(self, policy: RatePolicy, M: int, kmax: int):
        if policy.finite and kmax != int(policy.capacity):
            raise ValueError("profile levels do not match the policy capacity")
        self.M = M
        self.kmax = kmax
        u = grid_points(M)
        lev = np.arange(kmax + 1)
        keep = np.ones((kmax + 1, kmax + 1))
        keep[0, :] = 0.0
        keep[:, kmax] = 0.0  # finite: phi_{k,K}=0; truncated: no jumps onto level kmax
        self.terms = None
        self.tensor = None
        if policy.terms is not None:
            self.terms = []
            for term in policy.terms:
                G = np.asarray(term.occupancy(lev[:, None], lev[None, :]), dtype=float)
                G = np.broadcast_to(G, keep.shape) * keep
                H = np.asarray(term.kernel(u[:, None], u[None, :]), dtype=float)
                self.terms.append((G, np.broadcast_to(H, (M, M)).copy()))
        else:
            tab = rate_table(policy, kmax, u[:, None], u[None, :])
            self.tensor = tab * keep[:, :, None, None]

    def rates(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(out, in) arrays of shape (kmax+1, M)."""
        M = self.M
        if self.terms is not None:
            out = np.zeros_like(values)
            inn = np.zeros_like(values)
            for G, H in self.terms:
                out += G @ (values @ H.T) / M
                inn += G.T @ (values @ H) / M
            return out, inn
        out = np.einsum("klij,lj->ki", self.tensor, values) / M
        inn = np.einsum("lkji,lj->ki", self.tensor, values) / M
        return out, inn

    def __call__(self, values: np.ndarray) -> np.ndarray:
        out, inn = self.rates(values)
        d = -values * (out + inn)
        d[1:] += values[:-1] * inn[:-1]
        d[:-1] += values[1:] * out[1:]
        return d


def rhs(profile: DensityProfile, policy: RatePolicy) -> np.ndarray:
    """Time derivative of ``profile.values`` under ``policy``."""
    return MeanFieldRHS(policy, profile.M, profile.kmax)(profile.values)


@dataclass
class ProfileSeries:
    times: np.ndarray
    values: np.ndarray  # (n_rec, kmax+1, M)
    capacity: float
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.size

    def profile(self, i: int) -> DensityProfile:
        return DensityProfile(self.values[i], self.capacity, float(self.times[i]))

    def final(self) -> DensityProfile:
        return self.profile(len(self) - 1)

    def at(self, t: float) -> DensityProfile:
        """Linear interpolation in time between recorded profiles."""
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"t={t} outside the integrated range [{times[0]}, {times[-1]}]")
        i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)) \
            if len(times) > 1 else 0
        if len(times) == 1:
            return self.profile(0)
        w = (t - times[i]) / (times[i + 1] - times[i])
        w = min(max(w, 0.0), 1.0)
        vals = (1 - w) * self.values[i] + w * self.values[i + 1]
        return DensityProfile(vals, self.capacity, float(t))


def integrate(profile0: DensityProfile, policy: RatePolicy, T: float, dt: float,
              record_every: int = 1, tolerance: float = 1e-6) -> ProfileSeries:
    """Classical fixed-step RK4 on [0, T].

    The number of steps is ``ceil(T/dt)`` with the step shrunk to fit T
    exactly.  Normalization drift, the most negative density and the mass
    functional are tracked at every step; drift or negativity beyond
    ``tolerance`` raises :class:`IntegrationError`.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = MeanFieldRHS(policy, profile0.M, profile0.kmax)
    y = profile0.values.astype(float).copy()
    out, inn = f.rates(y)
    stiff = dt * float(np.max(out + inn))
    if stiff >= 0.5:
        raise IntegrationError(f"dt * max out-rate = {stiff:.3g} >= 0.5; reduce dt")
    n = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    h = T / n if n else 0.0
    t0 = profile0.t
    norm0 = y.sum(axis=0)
    lev = np.arange(profile0.kmax + 1)
    mass = [float(lev @ y.sum(axis=1) / profile0.M)]
    norm_drift = 0.0
    min_val = float(y.min())
    times = [t0]
    rec = [y.copy()]
    for step in range(1, n + 1):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        drift = float(np.max(np.abs(y.sum(axis=0) - norm0)))
        low = float(y.min())
        norm_drift = max(norm_drift, drift)
        min_val = min(min_val, low)
        mass.append(float(lev @ y.sum(axis=1) / profile0.M))
        if drift > tolerance:
            raise IntegrationError(f"normalization drift {drift:.3g}", step)
        if low < -tolerance:
            raise IntegrationError(f"negative density {low:.3g}", step)
        if step % record_every == 0 or step == n:
            times.append(t0 + step * h)
            rec.append(y.copy())
    mass = np.asarray(mass)
    diagnostics = {
        "steps": n,
        "dt": h,
        "normalization_drift": norm_drift,
        "normalization_error": float(np.max(np.abs(y.sum(axis=0) - 1.0))),
        "min_density": min_val,
        "mass_initial": float(mass[0]),
        "mass_drift": float(np.max(np.abs(mass - mass[0]))),
    }
    return ProfileSeries(np.asarray(times), np.asarray(rec), profile0.capacity, diagnostics)


def step_halving_report(profile0: DensityProfile, policy: RatePolicy, T: float, dt: float) -> dict:
    """Self-convergence of RK4: compare solutions at dt, dt/2 and dt/4."""
    sols = [integrate(profile0, policy, T, dt / 2**i).final().values for i in range(3)]
    e1 = float(np.max(np.abs(sols[0] - sols[1])))
    e2 = float(np.max(np.abs(sols[1] - sols[2])))
    order = math.log2(e1 / e2) if e1 > 0 and e2 > 0 else float("nan")
    return {"dt": dt, "diff_dt_vs_half": e1, "diff_half_vs_quarter": e2, "observed_order": order}


@dataclass
class TailReport:
    t: float
    levels: list[int]
    tails: np.ndarray  # (len(levels), M): sum_{l >= level} l rho_l(u_j)
    log_slope: float
    flagged: bool

    @property
    def sup_tails(self) -> np.ndarray:
        return self.tails.max(axis=1)

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "levels": self.levels,
            "sup_tails": self.sup_tails.tolist(),
            "log_slope": self.log_slope,
            "flagged": self.flagged,
        }


TAIL_FLAG = 1e-8


def tail_check(profile: DensityProfile) -> TailReport:
    """First-moment tails at kmax/2, 3kmax/4 and kmax, with an exponential log-slope fit."""
    if profile.capacity != INFINITE:
        raise ValueError("tail_check applies to infinite capacity profiles")
    kmax = profile.kmax
    levels = sorted({kmax // 2, (3 * kmax) // 4, kmax})
    lev = np.arange(kmax + 1)[:, None]
    weighted = np.clip(lev * profile.values, 0.0, None)
    # reversed cumulative sums: tail[m] = sum_{l >= m}
    cum = np.cumsum(weighted[::-1], axis=0)[::-1]
    tails = cum[levels]
    sup = tails.max(axis=1)
    pos = sup > 0
    if pos.sum() >= 2:
        x = np.asarray(levels, dtype=float)[pos]
        slope = float(np.polyfit(x, np.log(sup[pos]), 1)[0])
    else:
        slope = -math.inf
    return TailReport(profile.t, levels, tails, slope, bool(sup[0] > TAIL_FLAG))


def theta(profile: DensityProfile) -> np.ndarray:
    """Mean occupancy sum_l l rho_l(u_j) on the grid."""
    if profile.capacity != INFINITE:
        raise ValueError("theta is defined for infinite capacity profiles")
    return np.arange(profile.kmax + 1) @ profile.values
