"""Gaussian fluctuation limit for finite capacity, discretized on the mean-field grid.

The K+1 fluctuation fields are stacked into one vector ``v`` of length
(K+1)M, with ``V_k(f) ~ sum_i v[k*M + i] f(u_i)``.  The limit is the linear
SDE ``dv = A_t v dt + dN_t`` with noise covariance ``Q_t dt``, so
``Sigma_t = Cov(v_t)`` solves ``dSigma/dt = A Sigma + Sigma A^T + Q``.

Every drift and noise channel comes from one jump type: a particle leaving
a site with m particles for a site with l particles.  The jump changes the
indicator 1{eta = k} at the source by ``alpha_k(m) = [m = k+1] - [m = k]``
and at the destination by ``beta_k(l) = [l = k-1] - [l = k]``; the tables
of drift operators and noise operators are these coefficients times the
rate-weighted integrals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .meanfield import DensityProfile, ProfileSeries, grid_points
from .model import RatePolicy, rate_table
from .sim import make_rng

PSD_TOLERANCE = 1e-6
NOISE_PSD_TOLERANCE = 1e-9


class OUError(RuntimeError):
    pass


def jump_coefficients(k: int, m: int, l: int) -> tuple[int, int]:
    """Change of 1{eta=k} at the source (alpha) and destination (beta) for an m -> l jump."""
    alpha = int(m == k + 1) - int(m == k)
    beta = int(l == k - 1) - int(l == k)
    return alpha, beta


def _drift_case(k: int, m: int, l: int, r: int):
    """Literal case table of the drift operators: ``(c_u, c_v)`` or None.

    For r=1 the operator is ``f -> int phi_{m,l}(u,v) rho_l(v) (c_u f(u) + c_v f(v)) dv``;
    for r=2 it is ``f -> int phi_{m,l}(v,u) rho_m(v) (c_u f(u) + c_v f(v)) dv``.
    """
    table1 = {
        (k, k - 1): (-1, 1), (k, k): (-1, -1), (k + 1, k): (1, -1), (k + 1, k - 1): (1, 1),
    }
    table2 = {
        (k, k - 1): (1, -1), (k, k): (-1, -1), (k + 1, k): (-1, 1), (k + 1, k - 1): (1, 1),
    }
    table = table1 if r == 1 else table2
    if (m, l) in table:
        return table[(m, l)]
    if m == k:  # l not in {k, k-1}
        return (-1, 0) if r == 1 else (0, -1)
    if m == k + 1:
        return (1, 0) if r == 1 else (0, 1)
    if l == k:  # m not in {k, k+1}
        return (0, -1) if r == 1 else (-1, 0)
    if l == k - 1:
        return (0, 1) if r == 1 else (1, 0)
    return None


def _noise_case(k: int, m: int, l: int):
    """Literal case table of the noise operators: ``(c_u, c_v)`` multiplying f(u), f(v), or None."""
    cases = {
        (k, k - 1): (-1, 1), (k, k): (-1, -1), (k + 1, k): (1, -1), (k + 1, k - 1): (1, 1),
    }
    if (m, l) in cases:
        return cases[(m, l)]
    if m == k:
        return (-1, 0)
    if l == k:
        return (0, -1)
    if l == k - 1:
        return (0, 1)
    if m == k + 1:
        return (1, 0)
    return None


@dataclass
class CovarianceState:
    t: float
    sigma: np.ndarray  # ((K+1)M, (K+1)M)
    K: int
    M: int

    def block(self, k: int, m: int) -> np.ndarray:
        M = self.M
        return self.sigma[k * M:(k + 1) * M, m * M:(m + 1) * M]


@dataclass
class DriftOperator:
    t: float
    A: np.ndarray


@dataclass
class NoiseCovariance:
    t: float
    Q: np.ndarray


def _grid_values(f, M: int) -> np.ndarray:
    if callable(f):
        return np.broadcast_to(np.asarray(f(grid_points(M)), dtype=float), (M,)).copy()
    arr = np.broadcast_to(np.asarray(f, dtype=float), (M,))
    return arr.copy()


def initial_covariance(psi, K: int, M: int) -> CovarianceState:
    """Covariance of independent Binomial(K, psi/K) sites, as a grid functional."""
    u = grid_points(M)
    p_site = np.broadcast_to(np.asarray(psi(u), dtype=float), (M,))
    if np.any(p_site <= 0) or np.any(p_site >= K):
        raise ValueError(f"psi must lie in (0, {K}) on the grid")
    p = stats.binom.pmf(np.arange(K + 1)[:, None], K, p_site[None, :] / K)  # (K+1, M)
    sigma = np.zeros(((K + 1) * M, (K + 1) * M))
    idx = np.arange(M)
    for k in range(K + 1):
        for m in range(K + 1):
            c = p[k] * ((k == m) - p[m])
            sigma[k * M + idx, m * M + idx] = c / M
    return CovarianceState(0.0, sigma, K, M)


def project(sigma: CovarianceState, f, g, k: int, m: int) -> float:
    """Cov(V_k(f), V_m(g)) read off the covariance matrix."""
    fv = _grid_values(f, sigma.M)
    gv = _grid_values(g, sigma.M)
    return float(fv @ sigma.block(k, m) @ gv)


class Assembler:
    """Builds A_t and Q_t from a density profile; rate kernels are evaluated once."""

    def __init__(self, policy: RatePolicy, M: int):
        if not policy.finite:
            raise ValueError("the fluctuation limit is built for finite capacity only")
        self.K = int(policy.capacity)
        self.M = M
        u = grid_points(M)
        self.phi = rate_table(policy, self.K, u[:, None], u[None, :])  # (K+1, K+1, M, M)
        self.channels = [(m, l) for m in range(self.K + 1) for l in range(self.K + 1)
                         if np.any(self.phi[m, l] != 0)]

    def _check(self, rho: np.ndarray):
        if rho.shape != (self.K + 1, self.M):
            raise ValueError(f"profile shape {rho.shape} does not match (K+1, M) = {(self.K + 1, self.M)}")

    def drift(self, rho: np.ndarray) -> np.ndarray:
        self._check(rho)
        K, M = self.K, self.M
        A = np.zeros(((K + 1) * M, (K + 1) * M))
        for m, l in self.channels:
            phi = self.phi[m, l]
            w1 = phi * rho[l][None, :] / M  # phi(u_i, u_j) rho_l(u_j) / M
            w2 = phi.T * rho[m][None, :] / M  # phi(u_j, u_i) rho_m(u_j) / M
            r1 = np.diag(w1.sum(axis=1))
            r2 = np.diag(w2.sum(axis=1))
            for k in {m, m - 1, l, l + 1}:
                if not 0 <= k <= K:
                    continue
                alpha, beta = jump_coefficients(k, m, l)
                if alpha == 0 and beta == 0:
                    continue
                P1 = alpha * r1 + beta * w1
                P2 = alpha * w2 + beta * r2
                A[k * M:(k + 1) * M, m * M:(m + 1) * M] += P1.T
                A[k * M:(k + 1) * M, l * M:(l + 1) * M] += P2.T
        return A

    def noise(self, rho: np.ndarray) -> np.ndarray:
        self._check(rho)
        K, M = self.K, self.M
        Q = np.zeros(((K + 1) * M, (K + 1) * M))
        for m, l in self.channels:
            W = self.phi[m, l] * rho[m][:, None] * rho[l][None, :] / M**2
            rows = np.diag(W.sum(axis=1))
            cols = np.diag(W.sum(axis=0))
            active = [k for k in {m, m - 1, l, l + 1} if 0 <= k <= K]
            coef = {k: jump_coefficients(k, m, l) for k in active}
            for k1 in active:
                a1, b1 = coef[k1]
                for k2 in active:
                    a2, b2 = coef[k2]
                    block = a1 * a2 * rows + a1 * b2 * W + b1 * a2 * W.T + b1 * b2 * cols
                    Q[k1 * M:(k1 + 1) * M, k2 * M:(k2 + 1) * M] += block
        return Q


def build_drift(profile: DensityProfile, policy: RatePolicy) -> DriftOperator:
    return DriftOperator(profile.t, Assembler(policy, profile.M).drift(profile.values))


def build_noise_cov(profile: DensityProfile, policy: RatePolicy) -> NoiseCovariance:
    Q = Assembler(policy, profile.M).noise(profile.values)
    Q = 0.5 * (Q + Q.T)
    scale = max(np.abs(Q).max(), 1e-300)
    lowest = float(np.linalg.eigvalsh(Q)[0])
    if lowest < -NOISE_PSD_TOLERANCE * scale:
        raise OUError(f"noise covariance not PSD: smallest eigenvalue {lowest:.3g}")
    return NoiseCovariance(profile.t, Q)


def lyapunov_rk4(sigma0: np.ndarray, drift, noise, t0: float, T: float, dt: float,
                 record_times=None):
    """RK4 for dS/dt = A(t) S + S A(t)^T + Q(t), symmetrized after every step.

    ``drift(t)`` and ``noise(t)`` return the matrices at time t.  Returns the
    list of (t, S) at ``record_times`` (default: the final time only).
    """
    n = int(np.ceil((T - t0) / dt - 1e-9)) if T > t0 else 0
    h = (T - t0) / n if n else 0.0
    grid = t0 + h * np.arange(n + 1)
    want = [T] if record_times is None else sorted(record_times)
    out = []
    S = np.array(sigma0, dtype=float)

    def f(t, S):
        A = drift(t)
        AS = A @ S
        return AS + AS.T + noise(t)

    w = 0
    for step in range(n + 1):
        t = grid[step] if n else t0
        while w < len(want) and want[w] <= t + 1e-9 * max(1.0, abs(t)):
            if abs(want[w] - t) > 1e-9 * max(1.0, abs(t)):
                raise ValueError(f"record time {want[w]} is not on the step grid")
            out.append((float(want[w]), S.copy()))
            w += 1
        if step == n:
            break
        k1 = f(t, S)
        k2 = f(t + h / 2, S + h / 2 * k1)
        k3 = f(t + h / 2, S + h / 2 * k2)
        k4 = f(t + h, S + h * k3)
        S = S + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        S = 0.5 * (S + S.T)
    if w < len(want):
        raise ValueError(f"record times beyond T={T}")
    return out


def _check_psd(S: np.ndarray, t: float):
    scale = max(np.linalg.norm(S, 2), 1e-300)
    lowest = float(np.linalg.eigvalsh(S)[0])
    if lowest < -PSD_TOLERANCE * scale:
        raise OUError(f"covariance lost positive semidefiniteness at t={t}: eigenvalue {lowest:.3g}")


def evolve_covariance(sigma0: CovarianceState, profiles: ProfileSeries, policy: RatePolicy,
                      T: float, dt: float, record_times=None) -> list[CovarianceState]:
    """Integrate the covariance flow on [sigma0.t, T] with A_t, Q_t rebuilt from interpolated profiles."""
    asm = Assembler(policy, sigma0.M)
    if asm.K != sigma0.K:
        raise ValueError("covariance state and policy capacities differ")
    if profiles.times[0] > sigma0.t + 1e-12 or profiles.times[-1] < T - 1e-12:
        raise ValueError("profiles do not cover the integration interval")
    cache = {}

    def rho(t):
        key = round(t, 12)
        if key not in cache:
            cache.clear()
            cache[key] = profiles.at(min(max(t, profiles.times[0]), profiles.times[-1])).values
        return cache[key]

    recs = lyapunov_rk4(sigma0.sigma, lambda t: asm.drift(rho(t)), lambda t: asm.noise(rho(t)),
                        sigma0.t, T, dt, record_times)
    states = []
    for t, S in recs:
        _check_psd(S, t)
        states.append(CovarianceState(t, S, sigma0.K, sigma0.M))
    return states


@dataclass
class OUPaths:
    times: np.ndarray
    values: np.ndarray  # (n_times, paths, n_projections)
    projections: list

    def covariance(self, i: int) -> np.ndarray:
        return np.atleast_2d(np.cov(self.values[i].T))


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_ou(sigma0: CovarianceState, profiles: ProfileSeries, policy: RatePolicy, T: float,
                dt: float, paths: int, rng_seed=None, projections=((1.0, 1),),
                record_times=None) -> OUPaths:
    """Euler-Maruyama paths of the stacked field, reported through projections.

    ``projections`` lists ``(f, k)`` pairs; the output holds V_k(f) for every
    path at ``record_times`` (default: 0 and T).  Noise increments are
    Gaussian with covariance ``Q_t dt``.
    """
    rng = make_rng(rng_seed)
    asm = Assembler(policy, sigma0.M)
    M, K = sigma0.M, sigma0.K
    D = (K + 1) * M
    proj = np.zeros((len(projections), D))
    for i, (f, k) in enumerate(projections):
        proj[i, k * M:(k + 1) * M] = _grid_values(f, M)
    want = [sigma0.t, T] if record_times is None else sorted(record_times)
    n = int(np.ceil((T - sigma0.t) / dt - 1e-9)) if T > sigma0.t else 0
    h = (T - sigma0.t) / n if n else 0.0
    v = _sqrt_psd(sigma0.sigma) @ rng.standard_normal((D, paths))
    out = []
    w = 0
    for step in range(n + 1):
        t = sigma0.t + step * h
        while w < len(want) and want[w] <= t + 1e-9:
            out.append(proj @ v)
            w += 1
        if step == n:
            break
        rho = profiles.at(min(max(t, profiles.times[0]), profiles.times[-1])).values
        A = asm.drift(rho)
        L = _sqrt_psd(asm.noise(rho) * h)
        v = v + h * (A @ v) + L @ rng.standard_normal((D, paths))
    if w < len(want):
        raise ValueError("record times beyond T")
    values = np.stack([o.T for o in out])
    return OUPaths(np.asarray(want[:len(out)], dtype=float), values, list(projections))
