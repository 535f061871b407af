"""Exact continuous-time simulation by thinning.

Finite capacity: candidate arrows arrive on every ordered pair (i, j) at rate
``K1/N`` where ``K1`` is the envelope from :func:`conserva.model.sup_rate`;
a candidate is accepted with probability ``phi_{eta(i),eta(j)}(u_i, u_j) / K1``.
The candidate stream does not depend on the state, so it is drawn up front
and only the acceptance sweep is sequential.

Infinite capacity: a uniformly chosen particle proposes a move to a uniform
other site at total rate ``C1 * total * (N-1)/N`` and is accepted with
probability ``phi / (C1 * k)``.  Picking a uniform particle is the
occupancy-weighted site draw.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .model import INFINITE, RatePolicy, check_capacity, rate_table, sup_rate

INIT_STREAM = 0
DYNAMICS_STREAM = 1
MAX_CANDIDATES = 500_000_000


class SimulationError(RuntimeError):
    pass


class EnvelopeViolation(SimulationError):
    """An acceptance probability exceeded 1: the envelope is not an upper bound."""


class ResourceLimit(SimulationError):
    pass


def site_coordinates(N: int) -> np.ndarray:
    """Torus coordinates of positions 1..N, i.e. (i+1)/N wrapped into [0, 1)."""
    return (np.arange(1, N + 1) % N) / N


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.default_rng(seed)


def replica_seed(base_seed: int, index: int, stream: int) -> np.random.SeedSequence:
    """Independent stream ``stream`` of replica ``index`` derived from ``base_seed``."""
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(index), int(stream)))


@dataclass(frozen=True)
class Configuration:
    counts: np.ndarray
    total: int = field(init=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("configuration must be a nonempty 1-d count vector")
        if np.any(counts < 0):
            raise ValueError("occupancies must be nonnegative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "total", int(counts.sum()))

    @property
    def N(self) -> int:
        return self.counts.size

    def check_capacity(self, capacity: float) -> None:
        if capacity != INFINITE and np.any(self.counts > capacity):
            raise ValueError(f"configuration exceeds capacity {capacity}")


@dataclass(frozen=True)
class InitialProfile:
    """Smooth positive density ``psi`` on the torus and the model capacity."""

    psi: Callable[[np.ndarray], np.ndarray]
    capacity: float

    def values(self, u) -> np.ndarray:
        cap = check_capacity(self.capacity)
        vals = np.asarray(self.psi(np.asarray(u, dtype=float)), dtype=float)
        vals = np.broadcast_to(vals, np.shape(u))
        if np.any(vals <= 0) or (cap != INFINITE and np.any(vals >= cap)):
            bad = float(vals.min()) if np.any(vals <= 0) else float(vals.max())
            rng = f"(0, {cap})" if cap != INFINITE else "(0, inf)"
            raise ValueError(f"psi must lie in {rng} on the torus; found {bad:.6g}")
        return vals

    def validate(self, grid: int = 64) -> None:
        self.values(np.arange(grid) / grid)


def sample_initial(profile: InitialProfile, N: int, rng_seed=None) -> Configuration:
    """Independent Binomial(K, psi/K) or Poisson(psi) occupancies at (i+1)/N."""
    if N < 1:
        raise ValueError("N must be >= 1")
    psi = profile.values(site_coordinates(N))
    rng = make_rng(rng_seed)
    if profile.capacity == INFINITE:
        counts = rng.poisson(psi)
    else:
        K = int(profile.capacity)
        counts = rng.binomial(K, psi / K)
    return Configuration(counts)


@dataclass
class Trajectory:
    observation_times: np.ndarray
    snapshots: np.ndarray  # (n_obs, N)
    event_count: int
    accepted_count: int
    events: dict | None = None  # time/src/dst arrays of accepted jumps

    def at(self, t: float) -> np.ndarray:
        idx = np.flatnonzero(np.isclose(self.observation_times, t, rtol=0, atol=1e-12))
        if idx.size == 0:
            raise KeyError(f"time {t} was not observed")
        return self.snapshots[idx[0]]


def _check_times(T: float, observation_times) -> np.ndarray:
    if T < 0:
        raise ValueError("horizon must be nonnegative")
    obs = np.asarray([0.0, T] if observation_times is None else observation_times, dtype=float)
    if obs.ndim != 1 or obs.size == 0:
        raise ValueError("observation_times must be a nonempty 1-d sequence")
    if np.any(np.diff(obs) < 0):
        raise ValueError("observation_times must be sorted")
    if obs[0] < 0 or obs[-1] > T:
        raise ValueError("observation_times must lie in [0, T]")
    return obs


@numba.njit(cache=True, nogil=True)
def _accept_sweep(counts, times, src, dst, marks, accept, obs, snaps, ev_t, ev_s, ev_d):
    n = times.shape[0]
    n_obs = obs.shape[0]
    p = 0
    n_acc = 0
    for e in range(n):
        while p < n_obs and obs[p] < times[e]:
            snaps[p, :] = counts
            p += 1
        i = src[e]
        j = dst[e]
        if marks[e] <= accept[e, counts[i], counts[j]]:
            counts[i] -= 1
            counts[j] += 1
            if ev_t.shape[0] > 0:
                ev_t[n_acc] = times[e]
                ev_s[n_acc] = i
                ev_d[n_acc] = j
            n_acc += 1
    while p < n_obs:
        snaps[p, :] = counts
        p += 1
    return n_acc


def _candidate_count(rng, rate: float, T: float) -> int:
    mean = rate * T
    if mean > MAX_CANDIDATES:
        raise ResourceLimit(f"expected {mean:.3g} candidate events exceeds the limit {MAX_CANDIDATES}")
    return int(rng.poisson(mean))


def _simulate_finite(counts, policy, T, obs, rng, envelope, record_events):
    N = counts.size
    K = int(policy.capacity)
    snaps = np.empty((obs.size, N), dtype=np.int64)
    n = _candidate_count(rng, envelope * (N - 1), T) if N > 1 else 0
    times = np.sort(rng.uniform(0.0, T, n))
    src = rng.integers(0, N, n)
    off = rng.integers(0, max(N - 1, 1), n)
    dst = off + (off >= src)
    marks = rng.random(n)
    x = site_coordinates(N)
    rates = rate_table(policy, K, x[src], x[dst])  # (K+1, K+1, n)
    accept = np.ascontiguousarray(np.moveaxis(rates, -1, 0)) / envelope if n else np.zeros((0, K + 1, K + 1))
    if n and accept.max() > 1.0 + 1e-12:
        raise EnvelopeViolation(
            f"acceptance probability {accept.max():.6g} > 1 with envelope {envelope:.6g}"
        )
    size = n if record_events else 0
    ev_t = np.empty(size)
    ev_s = np.empty(size, dtype=np.int64)
    ev_d = np.empty(size, dtype=np.int64)
    n_acc = _accept_sweep(counts, times, src, dst, marks, accept, obs, snaps, ev_t, ev_s, ev_d)
    events = None
    if record_events:
        events = {"time": ev_t[:n_acc], "src": ev_s[:n_acc], "dst": ev_d[:n_acc]}
    return snaps, n, n_acc, events


def _simulate_infinite(counts, policy, T, obs, rng, record_events):
    N = counts.size
    c1 = float(policy.infinite_bound)
    total = int(counts.sum())
    snaps = np.empty((obs.size, N), dtype=np.int64)
    n = _candidate_count(rng, c1 * total * (N - 1) / N, T) if N > 1 and total > 0 else 0
    times = np.sort(rng.uniform(0.0, T, n))
    pick = rng.integers(0, max(total, 1), n)
    off = rng.integers(0, max(N - 1, 1), n)
    marks = rng.random(n)
    x = site_coordinates(N)
    where = np.repeat(np.arange(N), counts)  # site of each particle
    log = ([], [], []) if record_events else None
    p = 0
    n_acc = 0
    for e in range(n):
        t = times[e]
        while p < obs.size and obs[p] < t:
            snaps[p] = counts
            p += 1
        i = int(where[pick[e]])
        j = int(off[e]) + (int(off[e]) >= i)
        k = int(counts[i])
        acc = float(policy.rate(k, int(counts[j]), x[i], x[j])) / (c1 * k)
        if acc > 1.0 + 1e-12:
            raise EnvelopeViolation(f"acceptance probability {acc:.6g} > 1; C_1={c1} is not a bound")
        if marks[e] <= acc:
            counts[i] -= 1
            counts[j] += 1
            where[pick[e]] = j
            n_acc += 1
            if log is not None:
                log[0].append(t)
                log[1].append(i)
                log[2].append(j)
    while p < obs.size:
        snaps[p] = counts
        p += 1
    events = None
    if log is not None:
        events = {
            "time": np.asarray(log[0], dtype=float),
            "src": np.asarray(log[1], dtype=np.int64),
            "dst": np.asarray(log[2], dtype=np.int64),
        }
    return snaps, n, n_acc, events


def simulate(
    config: Configuration,
    policy: RatePolicy,
    T: float,
    observation_times: Sequence[float] | None = None,
    rng_seed=None,
    *,
    envelope: float | None = None,
    record_events: bool = False,
) -> Trajectory:
    """Simulate one trajectory on [0, T], recording states at ``observation_times``.

    The state at an observation time ``s`` includes every jump at times <= s.
    ``envelope`` overrides the finite-capacity thinning rate (default
    ``sup_rate(policy)``); ``record_events`` keeps the accepted-jump log.
    """
    if not isinstance(config, Configuration):
        config = Configuration(config)
    config.check_capacity(policy.capacity)
    obs = _check_times(T, observation_times)
    rng = make_rng(rng_seed)
    counts = config.counts.copy()
    if policy.finite:
        env = sup_rate(policy) if envelope is None else float(envelope)
        if env <= 0:
            snaps = np.tile(counts, (obs.size, 1))
            return Trajectory(obs, snaps, 0, 0, _empty_log() if record_events else None)
        snaps, n, n_acc, events = _simulate_finite(counts, policy, T, obs, rng, env, record_events)
    else:
        snaps, n, n_acc, events = _simulate_infinite(counts, policy, T, obs, rng, record_events)
    return Trajectory(obs, snaps, n, n_acc, events)


def _empty_log() -> dict:
    return {"time": np.empty(0), "src": np.empty(0, np.int64), "dst": np.empty(0, np.int64)}


@dataclass
class ReplicaEnsemble:
    """R independent trajectories sharing N, horizon and observation grid."""

    N: int
    capacity: float
    times: np.ndarray
    counts: np.ndarray  # (R, n_obs, N)
    event_counts: np.ndarray
    accepted_counts: np.ndarray
    base_seed: int
    events: list | None = None

    @property
    def replicas(self) -> int:
        return self.counts.shape[0]

    def time_index(self, t: float) -> int:
        idx = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-12))
        if idx.size == 0:
            raise KeyError(f"time {t} is not an observation time {self.times.tolist()}")
        return int(idx[0])

    def at(self, t: float) -> np.ndarray:
        """Counts at time t, shape (R, N)."""
        return self.counts[:, self.time_index(t), :]

    def subset(self, rows) -> "ReplicaEnsemble":
        rows = np.asarray(rows)
        return ReplicaEnsemble(
            self.N, self.capacity, self.times, self.counts[rows],
            self.event_counts[rows], self.accepted_counts[rows], self.base_seed,
        )

    def summary(self) -> dict:
        totals = self.counts.sum(axis=2)
        return {
            "N": self.N,
            "replicas": self.replicas,
            "capacity": "inf" if self.capacity == INFINITE else int(self.capacity),
            "times": self.times.tolist(),
            "base_seed": int(self.base_seed),
            "candidate_events": int(self.event_counts.sum()),
            "accepted_events": int(self.accepted_counts.sum()),
            "totals_conserved": bool(np.all(totals == totals[:, :1])),
            "mean_total": float(totals[:, 0].mean()),
        }


def run_replica(profile, policy, N, T, observation_times, base_seed, index, *,
                envelope=None, record_events=False) -> Trajectory:
    config = sample_initial(profile, N, replica_seed(base_seed, index, INIT_STREAM))
    return simulate(config, policy, T, observation_times,
                    replica_seed(base_seed, index, DYNAMICS_STREAM),
                    envelope=envelope, record_events=record_events)


def run_replicas(
    profile: InitialProfile,
    policy: RatePolicy,
    N: int,
    T: float,
    observation_times: Sequence[float] | None,
    R: int,
    base_seed: int,
    *,
    workers: int = 1,
    record_events: bool = False,
) -> ReplicaEnsemble:
    """Run R replicas; replica r uses streams ``replica_seed(base_seed, r, .)``.

    Results do not depend on ``workers``: every replica owns its RNG streams
    and lands in its own row.
    """
    if R < 1:
        raise ValueError("need at least one replica")
    if profile.capacity != policy.capacity:
        raise ValueError("profile and policy capacities differ")
    obs = _check_times(T, observation_times)
    envelope = sup_rate(policy) if policy.finite else None
    counts = np.empty((R, obs.size, N), dtype=np.int64)
    n_ev = np.empty(R, dtype=np.int64)
    n_acc = np.empty(R, dtype=np.int64)
    logs = [None] * R if record_events else None

    def one(r):
        traj = run_replica(profile, policy, N, T, obs, base_seed, r,
                           envelope=envelope, record_events=record_events)
        counts[r] = traj.snapshots
        n_ev[r] = traj.event_count
        n_acc[r] = traj.accepted_count
        if logs is not None:
            logs[r] = traj.events

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(R)))
    else:
        for r in range(R):
            one(r)
    return ReplicaEnsemble(N, policy.capacity, obs, counts, n_ev, n_acc, int(base_seed), logs)
