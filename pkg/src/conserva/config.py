"""Experiment configuration files (TOML).

A config holds ``seed``, ``workers``, a ``[model]`` table (``preset`` plus
preset parameters), an ``[initial]`` table with the density ``psi`` and one
table per command.  Functions of one torus variable (``psi``, test
functions ``f``) are either a number or
``{const = c, terms = [[amp, "sin" | "cos", freq], ...]}``.
See README.md for the full schema.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .model import INFINITE, ModelError, RatePolicy, TrigKernel, policy_from_config
from .sim import InitialProfile


class ConfigError(ValueError):
    pass


COMMANDS = ("simulate", "meanfield", "hydro", "fluct", "indep")

DEFAULTS = {
    "simulate": {"replicas": 1},
    "meanfield": {"M": 64, "dt": 1e-3, "T": 1.0, "record_every": 1, "step_halving": True},
    "hydro": {"replicas": 200, "t": 1.0, "k": 1, "f": {"const": 0.0, "terms": [[1.0, "cos", 1]]},
              "M": 256, "dt": 1e-3, "levels": [0, 1, 2, 3]},
    "fluct": {"replicas": 10000, "times": [0.0, 0.5, 1.0], "k": 1,
              "f": {"const": 0.0, "terms": [[1.0, "cos", 1]]}, "M": 128, "dt": 1e-3},
    "indep": {},
}


def load(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc


def parse_function(value, name: str = "function"):
    """One-variable trigonometric polynomial from a number or a const/terms table."""
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be a number or a table")
    if isinstance(value, (int, float)):
        value = float(value)
        return lambda u: np.full(np.shape(u), value)
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a number or a table with const/terms")
    try:
        terms = tuple((float(a), str(kind), int(freq), 0) for a, kind, freq in value.get("terms", []))
        kernel = TrigKernel(const=float(value.get("const", 0.0)), terms=terms)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: malformed terms ({exc})") from exc
    return lambda u: kernel(u, 0.0)


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"[{where}] is missing '{key}'")
    return table[key]


def _positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return value


def _positive(value, name: str, allow_zero: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'nonnegative' if allow_zero else 'positive'}, got {value!r}")
    return float(value)


@dataclass
class Experiment:
    """A validated config ready to run one command."""

    command: str
    raw: dict  # resolved config, embedded into every output
    policy: RatePolicy
    profile: InitialProfile
    seed: int
    workers: int

    @property
    def section(self) -> dict:
        return self.raw[self.command]


def resolve(raw: dict, command: str, seed: int | None = None) -> Experiment:
    """Fill defaults and validate everything the command needs, before any run."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = copy.deepcopy(raw)
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    cfg.setdefault("workers", 1)
    s = cfg["seed"]
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {s!r}")
    _positive_int(cfg["workers"], "workers")
    model = cfg.get("model")
    if not isinstance(model, dict):
        raise ConfigError("config needs a [model] table")
    try:
        policy = policy_from_config(model)
    except (ModelError, TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc
    initial = cfg.get("initial")
    if not isinstance(initial, dict):
        raise ConfigError("config needs an [initial] table with 'psi'")
    psi = parse_function(_require(initial, "psi", "initial"), "psi")
    profile = InitialProfile(psi, policy.capacity)
    try:
        profile.validate(grid=256)
    except ValueError as exc:
        raise ConfigError(f"[initial] psi: {exc}") from exc
    section = cfg.setdefault(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{command}] must be a table")
    for key, val in DEFAULTS[command].items():
        section.setdefault(key, copy.deepcopy(val))
    _validate_section(command, section, policy)
    return Experiment(command, cfg, policy, profile, int(s), cfg["workers"])


def _validate_section(command: str, sec: dict, policy: RatePolicy) -> None:
    infinite = policy.capacity == INFINITE
    if command == "simulate":
        _positive_int(_require(sec, "N", command), "N")
        T = _positive(_require(sec, "T", command), "T", allow_zero=True)
        sec.setdefault("observation_times", [0.0, T])
        obs = sec["observation_times"]
        if not obs or any(not 0 <= x <= T for x in obs) or sorted(obs) != list(obs):
            raise ConfigError("observation_times must be sorted values in [0, T]")
        _positive_int(sec["replicas"], "replicas")
    elif command == "meanfield":
        _positive_int(sec["M"], "M")
        _positive(sec["dt"], "dt")
        _positive(sec["T"], "T", allow_zero=True)
        if infinite and "kmax" not in sec:
            raise ConfigError("[meanfield] infinite capacity requires an explicit 'kmax'")
    elif command == "hydro":
        Ns = _require(sec, "N_list", command)
        if not isinstance(Ns, list) or not Ns:
            raise ConfigError("N_list must be a nonempty list")
        for N in Ns:
            _positive_int(N, "N_list entry")
        _positive_int(sec["replicas"], "replicas")
        _positive(sec["t"], "t")
        parse_function(sec["f"], "f")
        if infinite:
            sec.setdefault("M", 64)
            _positive_int(_require(sec, "kmax", command), "kmax")
    elif command == "fluct":
        if infinite:
            raise ConfigError("fluct needs finite capacity")
        _positive_int(_require(sec, "N", command), "N")
        if _positive_int(sec["replicas"], "replicas") < 4:
            raise ConfigError("fluct needs at least 4 replicas for the split-half estimate")
        for t in sec["times"]:
            _positive(t, "times entry", allow_zero=True)
        parse_function(sec["f"], "f")
    elif command == "indep":
        decay = sec.get("decay")
        overlap = sec.get("overlap")
        if decay is None and overlap is None:
            raise ConfigError("[indep] needs a 'decay' and/or 'overlap' table")
        if decay is not None:
            for N in _require(decay, "N_list", "indep.decay"):
                _positive_int(N, "decay N_list entry")
            _positive_int(_require(decay, "replicas", "indep.decay"), "decay replicas")
            _positive(_require(decay, "t", "indep.decay"), "decay t", allow_zero=True)
        if overlap is not None:
            for N in _require(overlap, "N_list", "indep.overlap"):
                _positive_int(N, "overlap N_list entry")
                if N < 2:
                    raise ConfigError("overlap needs N >= 2")
            _positive_int(_require(overlap, "replicas", "indep.overlap"), "overlap replicas")
            _positive(_require(overlap, "T", "indep.overlap"), "overlap T", allow_zero=True)
            K1 = overlap.setdefault("K1", "sup_rate")
            if K1 == "sup_rate":
                if infinite:
                    raise ConfigError("overlap K1 = 'sup_rate' needs finite capacity")
            else:
                _positive(K1, "overlap K1")


def load_experiment(path, command: str, seed: int | None = None) -> Experiment:
    return resolve(load(Path(path)), command, seed)
