"""Physical input parameters, cooperation-unit scaling and grid setup.

Everything downstream of this module works in dimensionless cooperation
units: time in units of the cooperation time T_c, length in units of the
cooperation length L_c = c*T_c, and field amplitudes in units of the
characteristic field E_c = (1/T_c)/(d_i/hbar), where d_i is the dipole
moment of the idler transition.  The cooperation time is fixed by the
atomic density n and the idler frequency omega_i through

    1/T_c = sqrt(d_i^2 * n * omega_i / (2 * hbar * eps0))

so denser samples evolve faster: quadrupling the density halves T_c.
The collective noise strength is governed by the cooperation number
N_c = N * L_c / L with N the total atom number in the (cylindrical)
sample.

This module owns the translation between laboratory inputs (SI, with
rates quoted in s^-1 and pump/detuning values quoted in units of the
idler decay rate gamma03) and the dimensionless parameter set consumed
by the dynamics, noise and integrator modules.  It also parses the
line-oriented ``key = value`` run configuration files used by the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.constants import hbar as HBAR, epsilon_0 as EPS0, c as C_LIGHT

__all__ = [
    "ConfigError",
    "PhysicalConfig",
    "CooperationScale",
    "GridSpec",
    "RunControl",
    "ModelParams",
    "compute_cooperation_scale",
    "dimensionless_params",
    "optical_depth_label",
    "dipole_from_decay",
    "parse_config_text",
    "load_config",
    "config_as_dict",
]

# Calibration anchor for the optical-depth label: a sample at
# 1e10 cm^-3 and 3 mm length is labelled opd = 2.18.  The label is linear
# in both density and length; it is reporting metadata only and feeds no
# dynamical quantity.
_OPD_ANCHOR_DENSITY_CM3 = 1.0e10
_OPD_ANCHOR_LENGTH_CM = 0.3
_OPD_ANCHOR_VALUE = 2.18
_OPD_KAPPA_CM2 = _OPD_ANCHOR_VALUE / (_OPD_ANCHOR_DENSITY_CM3 * _OPD_ANCHOR_LENGTH_CM)


class ConfigError(ValueError):
    """Raised for invalid, missing or inconsistent configuration input."""


def dipole_from_decay(gamma_per_s: float, wavelength_m: float) -> float:
    """Dipole moment (C m) implied by a radiative decay rate.

    Inverts the free-space spontaneous-emission formula
    gamma = d^2 omega^3 / (3 pi eps0 hbar c^3) for d.  Handy when a
    transition is specified by its linewidth rather than by a tabulated
    dipole matrix element.
    """
    if gamma_per_s <= 0 or wavelength_m <= 0:
        raise ConfigError("decay rate and wavelength must be positive")
    omega = 2.0 * math.pi * C_LIGHT / wavelength_m
    d_sq = 3.0 * math.pi * EPS0 * HBAR * C_LIGHT**3 * gamma_per_s / omega**3
    return math.sqrt(d_sq)


@dataclass(frozen=True)
class PhysicalConfig:
    """Laboratory description of the sample, pumps and transitions.

    Rates are in s^-1.  Detunings ``delta1``/``delta2`` and pump Rabi
    amplitudes ``omega_a``/``omega_b`` are quoted in units of gamma03
    (the idler decay rate); the Rabi convention is half of the usual
    d*E/hbar, so a two-level atom driven at amplitude Omega nutates at
    the generalized frequency sqrt(Delta^2 + 4*Omega^2).
    """

    density_cm3: float            # atomic number density (cm^-3)
    length_m: float               # sample length L (m)
    radius_m: float               # sample radius (m), cylindrical geometry
    gamma01_per_s: float          # |1> -> |0> population decay (s^-1)
    gamma03_per_s: float          # |3> -> |0> idler-transition decay (s^-1)
    gamma12_per_s: float          # |2> -> |1> decay (s^-1)
    gamma32_per_s: float          # |2> -> |3> signal-transition decay (s^-1)
    delta1: float                 # pump-a one-photon detuning (units of gamma03)
    delta2: float                 # two-photon detuning (units of gamma03)
    omega_a: float                # pump-a peak Rabi amplitude (units of gamma03)
    omega_b: float                # pump-b CW Rabi amplitude (units of gamma03)
    pump_duration_ns: float       # pump-a square-pulse duration (ns)
    lambda_idler_m: float         # idler wavelength (m)
    lambda_signal_m: float        # signal wavelength (m)
    coupling_ratio: float         # g_s / g_i field-coupling ratio
    idler_dipole_cm: float | None = None   # d_i (C m); None -> derive from gamma03
    delta_k_per_m: float = 0.0    # phase mismatch Delta k (m^-1)
    pump_start_ns: float = 0.0    # pump-a turn-on time (ns)
    n_mu: float | None = None     # Dicke enhancement factor N*mu (dimensionless)

    def __post_init__(self) -> None:
        positive = {
            "density_cm3": self.density_cm3,
            "length_m": self.length_m,
            "radius_m": self.radius_m,
            "gamma01_per_s": self.gamma01_per_s,
            "gamma03_per_s": self.gamma03_per_s,
            "gamma12_per_s": self.gamma12_per_s,
            "gamma32_per_s": self.gamma32_per_s,
            "pump_duration_ns": self.pump_duration_ns,
            "lambda_idler_m": self.lambda_idler_m,
            "lambda_signal_m": self.lambda_signal_m,
            "coupling_ratio": self.coupling_ratio,
        }
        for name, value in positive.items():
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
        if self.idler_dipole_cm is not None and self.idler_dipole_cm <= 0:
            raise ConfigError("idler_dipole_cm must be positive (or omitted to derive it)")
        if self.pump_start_ns < 0:
            raise ConfigError("pump_start_ns must be non-negative")
        if self.n_mu is not None and self.n_mu < 0:
            raise ConfigError("n_mu must be non-negative")

    @property
    def dipole_cm(self) -> float:
        """Idler dipole moment in C m (derived from gamma03 if not given)."""
        if self.idler_dipole_cm is not None:
            return self.idler_dipole_cm
        return dipole_from_decay(self.gamma03_per_s, self.lambda_idler_m)

    @property
    def gamma2_per_s(self) -> float:
        """Total decay rate of level |2>: gamma12 + gamma32 (s^-1)."""
        return self.gamma12_per_s + self.gamma32_per_s


@dataclass(frozen=True)
class CooperationScale:
    """Derived cooperation units for a given density and idler transition."""

    t_c_s: float          # cooperation time (s)
    l_c_m: float          # cooperation length c*T_c (m)
    e_c_v_per_m: float    # characteristic field (V/m)
    n_atoms: float        # total atom number in the cylinder
    n_coop: float         # cooperation number N * L_c / L

    @property
    def t_c_ns(self) -> float:
        return self.t_c_s * 1e9

    @property
    def rabi_of_e_c_per_s(self) -> float:
        """(d_i/hbar) * E_c, which equals 1/T_c by construction (s^-1)."""
        return 1.0 / self.t_c_s


def compute_cooperation_scale(cfg: PhysicalConfig) -> CooperationScale:
    """Cooperation time/length/field and cooperation number for ``cfg``.

    The inverse cooperation time is sqrt(d_i^2 n omega_i / (2 hbar eps0)).
    E_c is defined so that (d_i/hbar) E_c = 1/T_c exactly; tests pin this
    identity.  The atom number assumes a cylinder of the configured radius
    and length.
    """
    n_per_m3 = cfg.density_cm3 * 1e6
    omega_i = 2.0 * math.pi * C_LIGHT / cfg.lambda_idler_m
    d_i = cfg.dipole_cm
    inv_tc = math.sqrt(d_i * d_i * n_per_m3 * omega_i / (2.0 * HBAR * EPS0))
    t_c = 1.0 / inv_tc
    l_c = C_LIGHT * t_c
    e_c = inv_tc / (d_i / HBAR)
    n_atoms = n_per_m3 * math.pi * cfg.radius_m**2 * cfg.length_m
    n_coop = n_atoms * l_c / cfg.length_m
    return CooperationScale(t_c_s=t_c, l_c_m=l_c, e_c_v_per_m=e_c,
                            n_atoms=n_atoms, n_coop=n_coop)


def optical_depth_label(cfg: PhysicalConfig) -> float:
    """Reporting label for the sample's optical depth.

    Linear in density and length and calibrated so that 1e10 cm^-3 over
    3 mm maps to 2.18.  Used to tag outputs and sweep tables; nothing in
    the dynamics consumes it.
    """
    return _OPD_KAPPA_CM2 * cfg.density_cm3 * (cfg.length_m * 1e2)


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid, in cooperation units.

    ``m_t`` time nodes spaced ``dt`` (units of T_c) and ``m_z`` spatial
    nodes spanning the sample; the spatial spacing follows from the
    sample length, dz = (L/L_c)/(m_z - 1), so the last node always sits
    at z = L.
    """

    m_t: int
    m_z: int
    dt: float
    pump_edges: str = "smoothed"   # "smoothed": one-step linear ramps; "hard": ideal square

    def __post_init__(self) -> None:
        if self.m_t < 2 or self.m_z < 2:
            raise ConfigError("grid needs at least two nodes in each direction")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ConfigError("dt must be a positive finite number")
        if self.pump_edges not in ("smoothed", "hard"):
            raise ConfigError("pump_edges must be 'smoothed' or 'hard'")


@dataclass(frozen=True)
class RunControl:
    """Knobs for the stochastic run itself (not the physics)."""

    trajectories: int = 0
    seed: int = 1234
    workers: int = 1
    chunk_size: int = 512
    checkpoint_every: int = 0     # trajectories between snapshots; 0 disables
    midpoint_tol: float = 1e-10
    midpoint_max_iter: int = 25
    divergence_guard: float = 1e6

    def __post_init__(self) -> None:
        if self.trajectories < 0:
            raise ConfigError("trajectories must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.midpoint_tol <= 0:
            raise ConfigError("midpoint_tol must be positive")
        if self.midpoint_max_iter < 2:
            raise ConfigError("midpoint_max_iter must be at least 2")
        if self.divergence_guard <= 0:
            raise ConfigError("divergence_guard must be positive")


@dataclass(frozen=True)
class ModelParams:
    """Dimensionless parameter set driving the stochastic equations.

    All rates/frequencies are multiplied by T_c, all lengths divided by
    L_c.  ``omega_a_mid`` tabulates the pump-a envelope at the midpoint
    times used by the semi-implicit stepper; ``omega_a_nodes`` tabulates
    it on the grid nodes for reporting.  ``noise_scale`` and
    ``corr_scale`` are the grid factors 1/sqrt(N_c dt dz) and
    1/(N_c dt dz) applied to Langevin noises and to the Stratonovich
    drift corrections respectively.
    """

    gamma01: float
    gamma03: float
    gamma12: float
    gamma32: float
    gamma2: float
    delta1: float
    delta2: float
    omega_a_peak: float
    omega_b: float
    dk: float                     # phase mismatch, units of 1/L_c
    g_sq: float                   # (g_s/g_i)^2
    di_ds_sq: float               # (d_i/d_s)^2 unit factor for signal intensity
    length: float                 # sample length in units of L_c
    n_coop: float
    dt: float
    dz: float
    m_t: int
    m_z: int
    pump_on: float                # pump-a turn-on, grid-snapped (units of T_c)
    pump_off: float               # pump-a turn-off, grid-snapped (units of T_c)
    pump_edges: str
    z: np.ndarray = field(repr=False)            # (m_z,) spatial nodes
    t: np.ndarray = field(repr=False)            # (m_t,) time nodes
    omega_a_mid: np.ndarray = field(repr=False)  # (m_t-1,) envelope at midpoints
    omega_a_nodes: np.ndarray = field(repr=False)
    noise_scale: float = 0.0
    corr_scale: float = 0.0
    scale: CooperationScale | None = field(default=None, repr=False)
    config: PhysicalConfig | None = field(default=None, repr=False)

    @property
    def t_ns(self) -> np.ndarray:
        """Grid times in laboratory nanoseconds."""
        if self.scale is None:
            raise ValueError("no laboratory scale attached")
        return self.t * self.scale.t_c_ns

    def to_physical(self) -> dict[str, float]:
        """Invert the scaling back to laboratory values (round-trip check)."""
        if self.scale is None:
            raise ValueError("no laboratory scale attached")
        t_c = self.scale.t_c_s
        g03 = self.gamma03 / t_c
        return {
            "gamma01_per_s": self.gamma01 / t_c,
            "gamma03_per_s": g03,
            "gamma12_per_s": self.gamma12 / t_c,
            "gamma32_per_s": self.gamma32 / t_c,
            "delta1": self.delta1 / (self.gamma03 or 1.0),
            "delta2": self.delta2 / (self.gamma03 or 1.0),
            "omega_a": self.omega_a_peak / (self.gamma03 or 1.0),
            "omega_b": self.omega_b / (self.gamma03 or 1.0),
            "length_m": self.length * self.scale.l_c_m,
            "delta_k_per_m": self.dk / self.scale.l_c_m,
        }


def _pump_envelope(t: np.ndarray, on: float, off: float, dt: float, edges: str) -> np.ndarray:
    """Unit-amplitude square envelope, optionally with one-step linear ramps.

    The smoothed variant ramps 0 -> 1 across the grid step after turn-on and
    1 -> 0 across the step before turn-off, which keeps the midpoint stepper
    from straddling a discontinuity.
    """
    t = np.asarray(t, dtype=float)
    if edges == "hard":
        return ((t >= on) & (t < off)).astype(float)
    rise = np.clip((t - on) / dt, 0.0, 1.0)
    fall = np.clip((off - t) / dt, 0.0, 1.0)
    return rise * fall


def dimensionless_params(cfg: PhysicalConfig, grid: GridSpec) -> ModelParams:
    """Convert a validated configuration and grid to cooperation units.

    Raises ConfigError when the grid cannot resolve the pump pulse
    (time step longer than the pulse) or when the pulse does not fit in
    the simulated window.
    """
    scale = compute_cooperation_scale(cfg)
    t_c = scale.t_c_s
    g03 = cfg.gamma03_per_s * t_c

    dur = cfg.pump_duration_ns * 1e-9 / t_c     # pulse duration, units of T_c
    start = cfg.pump_start_ns * 1e-9 / t_c
    if grid.dt > dur:
        raise ConfigError(
            f"time step {grid.dt:g} T_c exceeds the pump duration {dur:g} T_c; "
            "the pulse would be skipped entirely")

    t = np.arange(grid.m_t) * grid.dt
    total = float(t[-1])
    pump_on = round(start / grid.dt) * grid.dt
    pump_off = round((start + dur) / grid.dt) * grid.dt
    if pump_off > total:
        raise ConfigError(
            f"pump pulse ends at {pump_off:g} T_c but the grid only covers {total:g} T_c")

    length = cfg.length_m / scale.l_c_m
    dz = length / (grid.m_z - 1)
    z = np.arange(grid.m_z) * dz

    t_mid = t[:-1] + 0.5 * grid.dt
    env_mid = _pump_envelope(t_mid, pump_on, pump_off, grid.dt, grid.pump_edges)
    env_nodes = _pump_envelope(t, pump_on, pump_off, grid.dt, grid.pump_edges)
    omega_a = cfg.omega_a * g03
    omega_b = cfg.omega_b * g03

    cell = scale.n_coop * grid.dt * dz
    # (d_i/d_s)^2 from the coupling ratio: g is proportional to d*sqrt(omega),
    # so d_i/d_s = sqrt(omega_s/omega_i)/(g_s/g_i) = sqrt(lam_i/lam_s)/(g_s/g_i).
    di_ds = math.sqrt(cfg.lambda_idler_m / cfg.lambda_signal_m) / cfg.coupling_ratio

    return ModelParams(
        gamma01=cfg.gamma01_per_s * t_c,
        gamma03=g03,
        gamma12=cfg.gamma12_per_s * t_c,
        gamma32=cfg.gamma32_per_s * t_c,
        gamma2=cfg.gamma2_per_s * t_c,
        delta1=cfg.delta1 * g03,
        delta2=cfg.delta2 * g03,
        omega_a_peak=omega_a,
        omega_b=omega_b,
        dk=cfg.delta_k_per_m * scale.l_c_m,
        g_sq=cfg.coupling_ratio**2,
        di_ds_sq=di_ds**2,
        length=length,
        n_coop=scale.n_coop,
        dt=grid.dt,
        dz=dz,
        m_t=grid.m_t,
        m_z=grid.m_z,
        pump_on=pump_on,
        pump_off=pump_off,
        pump_edges=grid.pump_edges,
        z=z,
        t=t,
        omega_a_mid=omega_a * env_mid,
        omega_a_nodes=omega_a * env_nodes,
        noise_scale=1.0 / math.sqrt(cell),
        corr_scale=1.0 / cell,
        scale=scale,
        config=cfg,
    )


# --------------------------------------------------------------------------
# Line-oriented configuration files
# --------------------------------------------------------------------------

# key -> (converter, required, default); "auto" on the dipole key defers to
# the decay-rate formula.  Keys map one-to-one onto the dataclasses above.
_PHYS_KEYS: dict[str, tuple] = {
    "density_cm3": (float, True, None),
    "length_m": (float, True, None),
    "radius_m": (float, True, None),
    "gamma01_per_s": (float, True, None),
    "gamma03_per_s": (float, True, None),
    "gamma12_per_s": (float, True, None),
    "gamma32_per_s": (float, True, None),
    "delta1": (float, True, None),
    "delta2": (float, True, None),
    "omega_a": (float, True, None),
    "omega_b": (float, True, None),
    "pump_duration_ns": (float, True, None),
    "pump_start_ns": (float, False, 0.0),
    "lambda_idler_m": (float, True, None),
    "lambda_signal_m": (float, True, None),
    "coupling_ratio": (float, True, None),
    "delta_k_per_m": (float, False, 0.0),
    "idler_dipole_cm": (float, False, None),
    "n_mu": (float, False, None),
}

_GRID_KEYS: dict[str, tuple] = {
    "m_t": (int, True, None),
    "m_z": (int, True, None),
    "dt": (float, True, None),
    "pump_edges": (str, False, "smoothed"),
}

_RUN_KEYS: dict[str, tuple] = {
    "trajectories": (int, False, 0),
    "seed": (int, False, 1234),
    "workers": (int, False, 1),
    "chunk_size": (int, False, 512),
    "checkpoint_every": (int, False, 0),
    "midpoint_tol": (float, False, 1e-10),
    "midpoint_max_iter": (int, False, 25),
    "divergence_guard": (float, False, 1e6),
}


def parse_config_text(text: str) -> tuple[PhysicalConfig, GridSpec, RunControl]:
    """Parse ``key = value`` configuration text.

    Blank lines and ``#`` comments are ignored; a trailing comment after a
    value is allowed.  Unknown keys and duplicate keys are errors, as is a
    missing required key, so silent typos cannot change the physics.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key or not val:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val

    known = {**_PHYS_KEYS, **_GRID_KEYS, **_RUN_KEYS}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")

    def take(table: dict[str, tuple]) -> dict:
        out = {}
        for key, (conv, required, default) in table.items():
            if key in values:
                raw = values[key]
                if key == "idler_dipole_cm" and raw.lower() == "auto":
                    out[key] = None
                    continue
                try:
                    out[key] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"key {key!r}: cannot parse {raw!r}") from exc
            elif required:
                raise ConfigError(f"missing required configuration key {key!r}")
            elif default is not None or key in ("idler_dipole_cm", "n_mu"):
                out[key] = default
        return out

    phys = PhysicalConfig(**take(_PHYS_KEYS))
    grid = GridSpec(**take(_GRID_KEYS))
    run = RunControl(**take(_RUN_KEYS))
    return phys, grid, run


def load_config(path) -> tuple[PhysicalConfig, GridSpec, RunControl]:
    """Read and parse a configuration file from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_as_dict(cfg: PhysicalConfig, grid: GridSpec, run: RunControl) -> dict:
    """Plain-dict echo of the full configuration (for run manifests)."""
    out = {"physical": asdict(cfg), "grid": asdict(grid), "run": asdict(run)}
    out["physical"]["idler_dipole_cm_effective"] = cfg.dipole_cm
    return out
