"""Monte Carlo simulator of correlated signal-idler superradiance.

Positive-P stochastic Maxwell-Bloch dynamics for a four-level cascade
atomic ensemble: two classical pumps drive the cascade, and the
quantum-correlated signal (telecom, backward) and idler (near-IR,
forward) fields grow from noise.  Trajectories of the c-number Langevin
equations are integrated with a semi-implicit midpoint scheme coupled
to an instantaneous spatial boundary-value solve for the fields, and
normally ordered observables are recovered as plain ensemble averages.
"""

from .units import (
    ConfigError,
    PhysicalConfig,
    GridSpec,
    RunControl,
    ModelParams,
    compute_cooperation_scale,
    dimensionless_params,
    load_config,
    parse_config_text,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "PhysicalConfig",
    "GridSpec",
    "RunControl",
    "ModelParams",
    "compute_cooperation_scale",
    "dimensionless_params",
    "load_config",
    "parse_config_text",
    "__version__",
]
