"""Rate families phi_{k,l}(u, v) for conservative jump systems on the torus.

A rate family gives the (pre 1/N scaling) rate at which a particle moves from a
position at coordinate ``u`` holding ``k`` particles to one at ``v`` holding
``l`` particles.  Rates are closed-form numpy evaluators; validation samples
them on a coordinate grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

INFINITE = math.inf

VALIDATION_GRID = 64
SUP_INFLATION = 1.05


class ModelError(ValueError):
    """Invalid rate family, preset parameters or occupancy values."""


def check_capacity(capacity: float) -> float:
    if capacity == INFINITE:
        return INFINITE
    if isinstance(capacity, (bool, np.bool_)) or int(capacity) != capacity or capacity < 1:
        raise ModelError(f"capacity must be an integer >= 1 or INFINITE, got {capacity!r}")
    return int(capacity)


@dataclass(frozen=True)
class TrigKernel:
    """Spatial kernel ``const + sum_i amp_i * trig_i(2*pi*(p_i*u + q_i*v))``.

    ``terms`` holds tuples ``(amp, "cos" | "sin", p, q)`` with integer
    frequencies, so the kernel is 1-periodic in both arguments.
    """

    const: float = 1.0
    terms: tuple[tuple[float, str, int, int], ...] = ()

    def __post_init__(self):
        for amp, kind, p, q in self.terms:
            if kind not in ("cos", "sin"):
                raise ModelError(f"kernel term kind must be 'cos' or 'sin', got {kind!r}")
            if int(p) != p or int(q) != q:
                raise ModelError("kernel frequencies must be integers")

    def __call__(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.full(np.broadcast_shapes(u.shape, v.shape), float(self.const))
        for amp, kind, p, q in self.terms:
            arg = 2.0 * np.pi * (p * u + q * v)
            out = out + amp * (np.cos(arg) if kind == "cos" else np.sin(arg))
        return out

    def upper_bound(self) -> float:
        return float(self.const) + sum(abs(a) for a, *_ in self.terms)

    @classmethod
    def from_config(cls, value) -> "TrigKernel":
        """Build from a number (constant kernel) or a mapping with ``const``/``terms``."""
        if isinstance(value, TrigKernel):
            return value
        if isinstance(value, (int, float)):
            return cls(const=float(value))
        terms = tuple(
            (float(a), str(kind), int(p), int(q)) for a, kind, p, q in value.get("terms", ())
        )
        return cls(const=float(value.get("const", 0.0)), terms=terms)


@dataclass(frozen=True)
class RateTerm:
    """One separable piece ``occupancy(k, l) * kernel(u, v)`` of a rate family."""

    occupancy: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RatePolicy:
    """A validated rate family.

    ``rate(k, l, u, v)`` is the raw evaluator (broadcasting over numpy
    arrays); use :func:`eval_rate` to get values with the forced zeros
    ``phi_{0,l} = 0`` and ``phi_{k,K} = 0`` applied.  ``terms``, when set,
    is the separable form of ``rate`` and lets the integrators skip building
    a full (k, l, u, v) tensor.
    """

    capacity: float
    rate: Callable
    infinite_bound: float | None = None
    terms: tuple[RateTerm, ...] | None = field(default=None, repr=False)
    name: str = "custom"

    @property
    def finite(self) -> bool:
        return self.capacity != INFINITE


def _as_int_array(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise ModelError("occupancy values must be integers")
        a = a.astype(np.int64)
    return a


def eval_rate(policy: RatePolicy, k, l, u, v):
    """phi_{k,l}(u, v) with the forced zeros honoured; broadcasts over arrays."""
    k = _as_int_array(k)
    l = _as_int_array(l)
    if np.any(k < 0) or np.any(l < 0):
        raise ModelError("occupancy must be nonnegative")
    if policy.finite and (np.any(k > policy.capacity) or np.any(l > policy.capacity)):
        raise ModelError(f"occupancy outside [0, {policy.capacity}]")
    raw = np.asarray(policy.rate(k, l, u, v), dtype=float)
    zero = k == 0
    if policy.finite:
        zero = zero | (l == policy.capacity)
    out = np.where(zero, 0.0, raw)
    return out if out.ndim else float(out)


def _sample_levels(policy: RatePolicy, ceiling: int = VALIDATION_GRID) -> np.ndarray:
    top = ceiling if not policy.finite else min(int(policy.capacity), ceiling)
    return np.arange(top + 1)


def rate_table(policy: RatePolicy, kmax: int, u, v) -> np.ndarray:
    """Rates for every (k, l) in ``0..kmax`` at broadcast points (u, v).

    Returns an array of shape ``(kmax+1, kmax+1) + broadcast(u, v).shape``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    shape = np.broadcast_shapes(u.shape, v.shape)
    lev = np.arange(kmax + 1)
    extra = (1,) * len(shape)
    k = lev.reshape((-1, 1) + extra)
    l = lev.reshape((1, -1) + extra)
    out = eval_rate(policy, k, l, u[None, None], v[None, None])
    return np.broadcast_to(out, (kmax + 1, kmax + 1) + shape).copy()


def validate_policy(policy: RatePolicy, grid: int = VALIDATION_GRID) -> RatePolicy:
    """Check the rate-family invariants on a sampled grid; returns the policy."""
    check_capacity(policy.capacity)
    if not policy.finite and policy.infinite_bound is None:
        raise ModelError("infinite capacity requires infinite_bound C_1")
    g = np.arange(grid) / grid
    u, v = np.meshgrid(g, g, indexing="ij")
    lev = _sample_levels(policy)
    ll = lev[:, None, None]
    for k in lev:
        raw = np.asarray(policy.rate(k, ll, u, v), dtype=float)
        if not np.all(np.isfinite(raw)):
            raise ModelError("rate produced non-finite values")
        vals = eval_rate(policy, k, ll, u, v)
        if np.min(vals) < 0:
            raise ModelError(f"rate is negative at k={k} (min {np.min(vals):.3g})")
        shifted_u = eval_rate(policy, k, ll, u + 1.0, v)
        shifted_v = eval_rate(policy, k, ll, u, v + 1.0)
        if not (np.allclose(shifted_u, vals, atol=1e-9) and np.allclose(shifted_v, vals, atol=1e-9)):
            raise ModelError("rate is not 1-periodic in u and v")
        if not policy.finite:
            bound = policy.infinite_bound * k
            if np.max(vals) > bound + 1e-12 * max(1.0, bound):
                raise ModelError(f"rate exceeds C_1 * k at k={k} on sampled points")
    return policy


def sup_rate(policy: RatePolicy, grid_resolution: int = 256) -> float:
    """Thinning envelope: grid maximum of phi over all admissible (k, l), times 1.05."""
    if not policy.finite:
        raise ModelError("sup_rate needs finite capacity; use the infinite_bound path")
    g = np.arange(grid_resolution) / grid_resolution
    u, v = np.meshgrid(g, g, indexing="ij")
    best = 0.0
    for k in range(1, int(policy.capacity) + 1):
        for l in range(int(policy.capacity)):
            best = max(best, float(np.max(eval_rate(policy, k, l, u, v))))
    return best * SUP_INFLATION


def separable_policy(
    capacity: float,
    terms: Sequence[RateTerm],
    infinite_bound: float | None = None,
    name: str = "custom",
) -> RatePolicy:
    terms = tuple(terms)

    def rate(k, l, u, v):
        return sum(t.occupancy(k, l) * t.kernel(u, v) for t in terms)

    policy = RatePolicy(check_capacity(capacity), rate, infinite_bound, terms, name)
    return validate_policy(policy)


# --- occupancy factors -------------------------------------------------------

def _ones(k, l):
    return np.ones(np.broadcast_shapes(np.shape(k), np.shape(l)))


def _source_linear(k, l):
    return np.asarray(k, dtype=float) + 0.0 * np.asarray(l)


def _source_over_dest(k, l):
    return np.asarray(k, dtype=float) / (1.0 + np.asarray(l, dtype=float))


def _table(values: Sequence[Sequence[float]]):
    tab = np.asarray(values, dtype=float)

    def occ(k, l):
        return tab[np.asarray(k), np.asarray(l)]

    return occ, tab


def _by_source(values: Sequence[float]):
    """g(k) from a list indexed by k; beyond the list the last value is held."""
    vals = np.asarray(values, dtype=float)

    def occ(k, l):
        idx = np.minimum(np.asarray(k), vals.size - 1)
        return vals[idx] + 0.0 * np.asarray(l)

    return occ, vals


OCCUPANCY_FORMS = {
    "constant": _ones,
    "source_linear": _source_linear,
    "source_over_dest": _source_over_dest,
}


def _occupancy(params: dict, capacity: float):
    occ = params.get("occupancy", "constant")
    if isinstance(occ, str):
        if occ not in OCCUPANCY_FORMS:
            raise ModelError(f"unknown occupancy form {occ!r}; choose from {sorted(OCCUPANCY_FORMS)}")
        return OCCUPANCY_FORMS[occ]
    if capacity == INFINITE:
        raise ModelError("tabulated occupancy factors need finite capacity")
    fn, tab = _table(occ)
    if tab.shape != (capacity + 1, capacity + 1):
        raise ModelError(f"occupancy table must be {(capacity + 1, capacity + 1)}, got {tab.shape}")
    return fn


def _kernel(params: dict) -> TrigKernel:
    if "kernel" not in params:
        raise ModelError("preset needs a 'kernel' parameter")
    kernel = TrigKernel.from_config(params["kernel"])
    g = np.arange(VALIDATION_GRID) / VALIDATION_GRID
    u, v = np.meshgrid(g, g, indexing="ij")
    if np.min(kernel(u, v)) < 0:
        raise ModelError("kernel takes negative values")
    return kernel


def _c1_bound(occ, kernel: TrigKernel, ceiling: int = VALIDATION_GRID) -> float:
    lev = np.arange(1, ceiling + 1)
    g = occ(lev[:, None], np.arange(ceiling + 1)[None, :])
    return float(np.max(g / lev[:, None])) * kernel.upper_bound()


def check_misanthrope(policy: RatePolicy, grid: int = 16) -> None:
    """Lint: phi_{k,l} nondecreasing in k and nonincreasing in l on sampled points."""
    g = np.arange(grid) / grid
    u, v = np.meshgrid(g, g, indexing="ij")
    top = int(policy.capacity) if policy.finite else VALIDATION_GRID
    tab = rate_table(policy, top, u, v)
    # forced zeros at k=0 and l=K are part of the monotone structure
    if np.any(np.diff(tab, axis=0) < -1e-12):
        raise ModelError("misanthrope rates must be increasing in the source occupancy k")
    if np.any(np.diff(tab, axis=1) > 1e-12):
        raise ModelError("misanthrope rates must be decreasing in the destination occupancy l")


PRESETS = ("generalized_exclusion", "exclusion", "zero_range", "ehrenfest", "misanthrope")


def make_preset(name: str, **params) -> RatePolicy:
    """Build one of the named special cases.

    Parameters common to all presets: ``kernel`` (number or TrigKernel table).
    ``exclusion`` fixes capacity 1; ``generalized_exclusion`` needs
    ``capacity`` and an optional ``occupancy`` (named form or table);
    ``zero_range`` takes ``rates`` (g(k) list, last value held) and
    ``ehrenfest`` uses ``k * kernel``.  ``misanthrope`` takes ``capacity``
    and ``occupancy``, and is linted for monotonicity.
    """
    if name not in PRESETS:
        raise ModelError(f"unknown preset {name!r}; choose from {PRESETS}")
    kernel = _kernel(params)
    if name == "exclusion":
        if params.get("capacity", 1) != 1:
            raise ModelError("exclusion has capacity 1")
        return separable_policy(1, [RateTerm(_ones, kernel)], name=name)
    if name == "generalized_exclusion":
        if "capacity" not in params or params["capacity"] == INFINITE:
            raise ModelError("generalized_exclusion needs a finite 'capacity'")
        cap = check_capacity(params["capacity"])
        return separable_policy(cap, [RateTerm(_occupancy(params, cap), kernel)], name=name)
    if name == "ehrenfest":
        return separable_policy(
            INFINITE, [RateTerm(_source_linear, kernel)], kernel.upper_bound(), name=name
        )
    if name == "zero_range":
        if "rates" not in params:
            raise ModelError("zero_range needs 'rates' = [g(0), g(1), ...]")
        occ, vals = _by_source(params["rates"])
        if np.any(vals < 0):
            raise ModelError("zero_range rates must be nonnegative")
        c1 = params.get("infinite_bound")
        if c1 is None:
            c1 = _c1_bound(occ, kernel, max(VALIDATION_GRID, vals.size))
        return separable_policy(INFINITE, [RateTerm(occ, kernel)], float(c1), name=name)
    # misanthrope
    if "capacity" not in params:
        raise ModelError("misanthrope needs 'capacity'")
    cap = check_capacity(params["capacity"])
    occ = _occupancy(params, cap)
    c1 = None
    if cap == INFINITE:
        c1 = params.get("infinite_bound")
        if c1 is None:
            c1 = _c1_bound(occ, kernel)
    policy = separable_policy(cap, [RateTerm(occ, kernel)], c1, name=name)
    check_misanthrope(policy)
    return policy


def zero_policy(capacity: float) -> RatePolicy:
    """All rates identically zero (frozen dynamics)."""
    cap = check_capacity(capacity)

    def occ(k, l):
        return np.zeros(np.broadcast_shapes(np.shape(k), np.shape(l)))

    return separable_policy(cap, [RateTerm(occ, TrigKernel(1.0))],
                            0.0 if cap == INFINITE else None, name="zero")


def policy_from_config(table: dict) -> RatePolicy:
    """``{"preset": name, ...params}`` as found in an experiment config."""
    table = dict(table)
    name = table.pop("preset", None)
    if name is None:
        raise ModelError("model section needs 'preset'")
    if name == "zero":
        return zero_policy(_parse_capacity(table.get("capacity", 1)))
    if "capacity" in table:
        table["capacity"] = _parse_capacity(table["capacity"])
    return make_preset(name, **table)


def _parse_capacity(value) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinite", "infinity"):
        return INFINITE
    return value
