"""Graphical construction: one Poisson arrow stream per ordered pair of positions.

Every ordered pair (x, y), x != y, carries its own Poisson process of rate
``K1/N`` on [0, T] with an independent Uniform[0, 1] mark per arrow.  The
dynamics read the arrows in time order and move a particle from x to y when
the mark is at most ``phi / K1``.  Influence sets follow arrows backwards in
time: y influences x by time t when a chain of arrows with increasing times
connects y to x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .model import RatePolicy, eval_rate, sup_rate
from .sim import Configuration, EnvelopeViolation, Trajectory, _check_times, make_rng, site_coordinates


@dataclass(frozen=True)
class ArrowStream:
    """All arrows of one realization, merged and sorted by time.

    ``src[e] -> dst[e]`` at ``times[e]`` with mark ``marks[e]``.  Ties in time
    (probability zero) are broken by pair index ``src*N + dst``.
    """

    N: int
    K1: float
    T: float
    times: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    marks: np.ndarray

    def __len__(self) -> int:
        return self.times.size

    def pair(self, x: int, y: int) -> tuple[np.ndarray, np.ndarray]:
        """Times and marks of the arrows on the directed pair (x, y)."""
        sel = (self.src == x) & (self.dst == y)
        return self.times[sel], self.marks[sel]

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def sample_arrows(N: int, K1: float, T: float, rng_seed=None) -> ArrowStream:
    """Draw the N(N-1) independent arrow streams on [0, T]."""
    if N < 2:
        raise ValueError("need at least two positions")
    if K1 <= 0 or T < 0:
        raise ValueError("K1 must be positive and T nonnegative")
    rng = make_rng(rng_seed)
    # pair index p enumerates ordered pairs row-major: x = p // (N-1), y skips x
    counts = rng.poisson(K1 * T / N, size=N * (N - 1))
    busy = np.flatnonzero(counts)
    pair = np.repeat(busy, counts[busy])
    src = pair // (N - 1)
    off = pair % (N - 1)
    dst = off + (off >= src)
    times = rng.uniform(0.0, T, src.size) if T > 0 else np.zeros(src.size)
    marks = rng.random(src.size)
    order = np.lexsort((src * N + dst, times))
    return ArrowStream(N, float(K1), float(T), times[order], src[order], dst[order], marks[order])


def evolve_with_arrows(eta0, arrows: ArrowStream, policy: RatePolicy,
                       observation_times=None) -> Trajectory:
    """Run the dynamics driven by ``arrows``, one arrow at a time."""
    if not policy.finite:
        raise ValueError("the graphical construction needs finite capacity")
    config = eta0 if isinstance(eta0, Configuration) else Configuration(eta0)
    if config.N != arrows.N:
        raise ValueError("configuration and arrow stream have different N")
    config.check_capacity(policy.capacity)
    obs = _check_times(arrows.T, observation_times)
    counts = config.counts.copy()
    x = site_coordinates(arrows.N)
    K1 = arrows.K1
    snaps = np.empty((obs.size, arrows.N), dtype=np.int64)
    p = 0
    accepted = 0
    for t, i, j, mark in zip(arrows.times.tolist(), arrows.src.tolist(),
                             arrows.dst.tolist(), arrows.marks.tolist()):
        while p < obs.size and obs[p] < t:
            snaps[p] = counts
            p += 1
        ratio = eval_rate(policy, int(counts[i]), int(counts[j]), x[i], x[j]) / K1
        if ratio > 1.0 + 1e-12:
            raise EnvelopeViolation(f"acceptance ratio {ratio:.6g} > 1 with K1={K1}")
        if mark <= ratio:
            counts[i] -= 1
            counts[j] += 1
            accepted += 1
    while p < obs.size:
        snaps[p] = counts
        p += 1
    return Trajectory(obs, snaps, len(arrows), accepted)


@dataclass(frozen=True)
class InfluenceSet:
    root: int
    t: float
    layers: tuple[frozenset, ...]

    @property
    def members(self) -> frozenset:
        return frozenset().union(*self.layers)

    def __len__(self) -> int:
        return sum(len(layer) for layer in self.layers)

    def __contains__(self, site) -> bool:
        return any(site in layer for layer in self.layers)


def _hop_distances(arrows: ArrowStream, x: int, t: float) -> dict[int, int]:
    # Sweep arrows backwards from t.  dist[z] is the fewest arrows on a chain
    # with increasing times from z to x that only uses arrows later than the
    # current one, so both endpoints read the values from before the update.
    dist = {x: 0}
    stop = int(np.searchsorted(arrows.times, t, side="right"))
    src = arrows.src[:stop].tolist()
    dst = arrows.dst[:stop].tolist()
    for e in range(stop - 1, -1, -1):
        a, b = src[e], dst[e]
        da = dist.get(a)
        db = dist.get(b)
        if db is not None and (da is None or db + 1 < da):
            dist[a] = db + 1
        if da is not None and (db is None or da + 1 < db):
            dist[b] = da + 1
    return dist


def influence_set(arrows: ArrowStream, x: int, t: float) -> InfluenceSet:
    """Positions with an increasing-time arrow chain into ``x`` by time ``t``, layered by chain length."""
    if t > arrows.T + 1e-12:
        raise ValueError(f"t={t} beyond the arrow horizon {arrows.T}")
    dist = _hop_distances(arrows, int(x), t)
    depth = max(dist.values())
    layers = [set() for _ in range(depth + 1)]
    for site, d in dist.items():
        layers[d].add(site)
    return InfluenceSet(int(x), float(t), tuple(frozenset(s) for s in layers))


def overlap_bound(K1: float, T: float, N: int) -> float:
    """C_3 / N with C_3 = 2 exp(4 K1 T) + exp(8 K1 T)."""
    return (2.0 * math.exp(4 * K1 * T) + math.exp(8 * K1 * T)) / N


@dataclass(frozen=True)
class OverlapEstimate:
    N: int
    replicas: int
    hits: int
    K1: float
    T: float

    @property
    def estimate(self) -> float:
        return self.hits / self.replicas

    @property
    def ci(self) -> tuple[float, float]:
        """95% Clopper-Pearson interval."""
        lo, hi = stats.binomtest(self.hits, self.replicas).proportion_ci(0.95, method="exact")
        return float(lo), float(hi)

    @property
    def bound(self) -> float:
        return overlap_bound(self.K1, self.T, self.N)

    def row(self) -> dict:
        lo, hi = self.ci
        return {"N": self.N, "replicas": self.replicas, "estimate": self.estimate,
                "ci_low": lo, "ci_high": hi, "c3_bound": self.bound}


def overlap_probability(N: int, envelope, T: float, x: int, y: int, replicas: int,
                        rng_seed=None) -> OverlapEstimate:
    """Monte Carlo estimate of P(Gamma_{T,x} and Gamma_{T,y} intersect).

    ``envelope`` is either the arrow rate K1 itself or a finite-capacity
    policy, in which case K1 = sup_rate(policy).
    """
    if x == y:
        raise ValueError("x and y must differ")
    K1 = sup_rate(envelope) if isinstance(envelope, RatePolicy) else float(envelope)
    seeds = np.random.SeedSequence(rng_seed).spawn(replicas)
    hits = 0
    for s in seeds:
        arrows = sample_arrows(N, K1, T, s)
        gx = _hop_distances(arrows, x, T)
        gy = _hop_distances(arrows, y, T)
        hits += not gx.keys().isdisjoint(gy.keys())
    return OverlapEstimate(N, replicas, hits, K1, T)
