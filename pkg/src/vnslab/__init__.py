"""Simulation lab for a kinetic particle phase coupled to an incompressible
viscous fluid on the periodic box: pseudo-spectral fluid, particle-in-cell
kinetic phase, decay diagnostics, optimal-transport distances and the
long-time limit profile."""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig, default_config, parse_config
from .coupling import DEFAULT_DELTA, MonitorConfig, SimState, initial_state, run, step
from .diagnostics import DiagnosticsRecord
from .particles import InitialDataSpec, ParticleEnsemble, build_ensemble
from .spectral import FourierField, GridSpec, NumericalError

__all__ = [
    "ConfigError",
    "RunConfig",
    "default_config",
    "parse_config",
    "DEFAULT_DELTA",
    "MonitorConfig",
    "SimState",
    "initial_state",
    "run",
    "step",
    "DiagnosticsRecord",
    "InitialDataSpec",
    "ParticleEnsemble",
    "build_ensemble",
    "FourierField",
    "GridSpec",
    "NumericalError",
]
