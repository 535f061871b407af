"""Simulation and limit theory for conservative particle systems on the discrete torus."""
from .model import INFINITE, RatePolicy, eval_rate, make_preset, sup_rate, validate_policy
from .sim import Configuration, InitialProfile, run_replicas, sample_initial, simulate

__all__ = [
    "INFINITE",
    "RatePolicy",
    "eval_rate",
    "make_preset",
    "sup_rate",
    "validate_policy",
    "Configuration",
    "InitialProfile",
    "run_replicas",
    "sample_initial",
    "simulate",
]
