"""Built-in integrity suites behind the ``check`` subcommand.

Five independent probes guard the pieces of the simulator most likely
to rot silently: the algebraic factorization of the noise correlation
matrix, the statistics of the synthesized Langevin increments, the
exact stability of the vacuum with both pumps off, agreement of the
semi-implicit stepper with a method-of-lines integration of the same
deterministic equations, and the Stratonovich calibration of the
midpoint rule on a multiplicative scalar benchmark.  Every suite
returns a plain record so ``run_suites`` can report all outcomes even
when one of them fails.

The factorization suite accepts an optional perturbation of a single
correlation entry.  It exists for negative-control tests: a corrupted
coefficient must be caught, otherwise the suite proves nothing.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .units import GridSpec, PhysicalConfig, dimensionless_params
from .dynamics import (
    DAGGER,
    E_IM,
    E_IP,
    E_SM,
    E_SP,
    N_VARS,
    P03,
    P11,
    P22,
    P32,
    P33,
    ATOM_ROWS,
    atomic_drift,
    phase_factors,
)
from .noise import NOISE_DIM, diffusion_matrix, noise_matrix, noise_vector
from .integrator import StepControl, gbm_log_endpoints, run_trajectories, solve_fields

__all__ = ["run_suites", "SUITE_NAMES"]

_GAMMA03 = 1.0 / 26e-9

SUITE_NAMES = (
    "noise-factorization",
    "noise-covariance",
    "vacuum-stability",
    "noise-free-oracle",
    "stratonovich-calibration",
)


def _base_config(**overrides) -> PhysicalConfig:
    """Canonical cold-cloud operating point with a short 12 ns pump.

    The short pulse keeps the internal grids small; nothing in the
    invariants under test depends on the pulse length.
    """
    values = dict(
        density_cm3=1e10,
        length_m=3e-3,
        radius_m=0.25e-3,
        gamma01_per_s=_GAMMA03,
        gamma03_per_s=_GAMMA03,
        gamma12_per_s=0.156 * _GAMMA03,
        gamma32_per_s=0.156 * _GAMMA03,
        delta1=1.0,
        delta2=0.0,
        omega_a=0.4,
        omega_b=1.0,
        pump_duration_ns=12.0,
        lambda_idler_m=780e-9,
        lambda_signal_m=1530e-9,
        coupling_ratio=0.775,
        n_mu=7.39,
    )
    values.update(overrides)
    return PhysicalConfig(**values)


def _random_states(rng: np.random.Generator, n: int) -> np.ndarray:
    """Generic complex phase-space points, no hermiticity imposed.

    The factorization identity is algebraic, so it must hold on the
    whole doubled phase space, not just on physical states.
    """
    return 0.4 * (rng.standard_normal((N_VARS, n))
                  + 1j * rng.standard_normal((N_VARS, n)))


def factorization_suite(corrupt: float = 0.0, n_states: int = 400):
    """B B^T must reproduce the correlation matrix at random states."""
    cfg = _base_config()
    p = dimensionless_params(cfg, GridSpec(m_t=21, m_z=12, dt=2.0))
    pm, pp = phase_factors(p)
    pm_s, pp_s = complex(pm[5]), complex(pp[5])
    rng = np.random.default_rng(20260813)

    worst = 0.0
    for omega_a in (0.0, p.omega_a_peak):
        s = _random_states(rng, n_states)
        d = diffusion_matrix(s, omega_a, p, pm_s, pp_s)
        if corrupt:
            d[P11, P11] += corrupt
        b = noise_matrix(s, omega_a, p, pm_s, pp_s)
        bbt = np.einsum("ik...,jk...->ij...", b, b)
        scale = 1.0 + np.abs(d).max()
        worst = max(worst, np.abs(bbt - d).max() / scale)

    passed = bool(worst < 1e-12)
    detail = f"max scaled |B B^T - D| = {worst:.3e} over {2 * n_states} states"
    if corrupt:
        detail += f" (one entry corrupted by {corrupt:g})"
    return passed, detail


def covariance_suite(n_draws: int = 30000):
    """Sampled increments must match the correlation matrix to 5 SE."""
    cfg = _base_config()
    p = dimensionless_params(cfg, GridSpec(m_t=21, m_z=12, dt=2.0))
    pm, pp = phase_factors(p)
    pm_s, pp_s = complex(pm[5]), complex(pp[5])

    rng = np.random.default_rng(996)
    s0 = 0.35 * (rng.standard_normal((N_VARS, 1))
                 + 1j * rng.standard_normal((N_VARS, 1)))
    s = np.broadcast_to(s0, (N_VARS, n_draws)).copy()
    xi = rng.standard_normal((NOISE_DIM, n_draws))
    f = noise_vector(s, p.omega_a_peak, p, pm_s, pp_s, xi)

    target = diffusion_matrix(s0, p.omega_a_peak, p, pm_s, pp_s)[:, :, 0]
    target = target * p.noise_scale**2

    prod = f[:, None, :] * f[None, :, :]
    cov = prod.mean(axis=2)
    se = np.sqrt(np.mean(np.abs(prod - cov[:, :, None]) ** 2, axis=2) / n_draws)
    floor = 1e-30
    cov_ratio = (np.abs(cov - target) / (5.0 * se + floor)).max()

    mean = f.mean(axis=1)
    se_m = np.sqrt(np.mean(np.abs(f - mean[:, None]) ** 2, axis=1) / n_draws)
    mean_ratio = (np.abs(mean) / (5.0 * se_m + floor)).max()

    passed = bool(cov_ratio < 1.0 and mean_ratio < 1.0)
    detail = (f"worst |cov err|/5SE = {cov_ratio:.3f}, "
              f"worst |mean|/5SE = {mean_ratio:.3f}, {n_draws} draws")
    return passed, detail


def vacuum_suite(n_traj: int = 6):
    """With both pumps off the stochastic vacuum must stay exactly zero."""
    cfg = _base_config(omega_a=0.0, omega_b=0.0)
    p = dimensionless_params(cfg, GridSpec(m_t=21, m_z=12, dt=2.0))
    ctrl = StepControl(stochastic=True)
    res = run_trajectories(p, ctrl, seed=77, traj_ids=range(n_traj))

    clean = (res.ok.all()
             and not res.signal_product.any()
             and not res.idler_product.any()
             and not res.populations.any())
    largest = max(np.abs(res.signal_product).max(initial=0.0),
                  np.abs(res.idler_product).max(initial=0.0),
                  np.abs(res.populations).max(initial=0.0))
    detail = f"largest |output| = {largest:.1e} over {n_traj} trajectories"
    return bool(clean), detail


def _seeded_state(p) -> np.ndarray:
    """Smooth hermitian excitation bump that sources both fields."""
    bump = np.sin(np.pi * p.z / p.length) ** 2
    s = np.zeros((N_VARS, 1, p.z.size), dtype=complex)
    s[P33, 0] = 0.05 * bump
    for row in (P03, P32):
        s[row, 0] = 0.02 * bump
        s[DAGGER[row], 0] = 0.02 * bump
    return s


def _pump_value(p, t: float) -> float:
    """Pump-a amplitude at an arbitrary time (same ramps as the grid)."""
    if p.pump_edges == "hard":
        gate = 1.0 if p.pump_on <= t < p.pump_off else 0.0
    else:
        rise = min(max((t - p.pump_on) / p.dt, 0.0), 1.0)
        fall = min(max((p.pump_off - t) / p.dt, 0.0), 1.0)
        gate = rise * fall
    return p.omega_a_peak * gate


def _method_of_lines(p, initial: np.ndarray) -> np.ndarray:
    """Adaptive-in-time reference solution of the deterministic system.

    Integrates the atomic rows with solve_ivp while slaving the fields
    to the instantaneous boundary-value solve, split at the pump
    envelope corners so the error controller never straddles a kink.
    Returns the full (19, m_t, m_z) history on the grid nodes.
    """
    pm, pp = phase_factors(p)
    m_z = p.m_z
    n_atoms = N_VARS - 4

    def unpack(y: np.ndarray) -> np.ndarray:
        a = y[: n_atoms * m_z] + 1j * y[n_atoms * m_z:]
        s = np.zeros((N_VARS, 1, m_z), dtype=complex)
        s[ATOM_ROWS, 0] = a.reshape(n_atoms, m_z)
        s[:4] = solve_fields(s, p, pm, pp)
        return s

    def pack(a: np.ndarray) -> np.ndarray:
        flat = a.reshape(-1)
        return np.concatenate([flat.real, flat.imag])

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        s = unpack(y)
        d = atomic_drift(s, _pump_value(p, t), p, pm, pp)[ATOM_ROWS, 0]
        return pack(d)

    t_end = float(p.t[-1])
    kinks = [p.pump_on, p.pump_on + p.dt, p.pump_off - p.dt, p.pump_off]
    cuts = sorted({0.0, t_end, *(k for k in kinks if 0.0 < k < t_end)})
    tol = 1e-9  # node-vs-kink matching; kinks are grid-snapped up to roundoff

    hist = np.zeros((N_VARS, p.m_t, m_z), dtype=complex)
    y = pack(np.asarray(initial, dtype=complex).reshape(N_VARS, m_z)[ATOM_ROWS])
    hist[:, 0] = unpack(y)[:, 0]
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        sol = solve_ivp(rhs, (lo, hi), y, method="RK45", dense_output=True,
                        rtol=1e-10, atol=1e-12)
        if not sol.success:
            raise RuntimeError(f"reference integration failed: {sol.message}")
        inside = np.nonzero((p.t > lo + tol) & (p.t <= hi + tol))[0]
        for n in inside:
            hist[:, n] = unpack(sol.sol(min(float(p.t[n]), hi)))[:, 0]
        y = sol.y[:, -1]
    return hist


def oracle_suite(tol: float = 5e-3):
    """Noise-free stepper vs method of lines on a refined spatial grid."""
    cfg = _base_config()
    p_c = dimensionless_params(cfg, GridSpec(m_t=41, m_z=16, dt=2.0))
    p_f = dimensionless_params(cfg, GridSpec(m_t=41, m_z=31, dt=2.0))

    res = run_trajectories(p_c, StepControl(stochastic=False), seed=0,
                           traj_ids=[0], initial=_seeded_state(p_c))
    hist = _method_of_lines(p_f, _seeded_state(p_f)[:, 0])

    ref_sig = hist[E_SM, :, 0] * hist[E_SP, :, 0]
    ref_idl = hist[E_IM, :, -1] * hist[E_IP, :, -1]

    def rel(err, ref):
        return np.abs(err).max() / np.abs(ref).max()

    worst = max(rel(res.signal_product[0] - ref_sig, ref_sig),
                rel(res.idler_product[0] - ref_idl, ref_idl))
    for lvl, row in enumerate((P11, P22, P33)):
        worst = max(worst,
                    rel(res.populations[0, lvl, 0] - hist[row, :, 0],
                        hist[row, :, 0]),
                    rel(res.populations[0, lvl, 1] - hist[row, :, -1],
                        hist[row, :, -1]))

    passed = bool(worst < tol)
    detail = f"max relative deviation {worst:.2e} (tolerance {tol:g})"
    return passed, detail


def stratonovich_suite(n_paths: int = 6000, n_steps: int = 64):
    """Midpoint GBM endpoints must average to the Stratonovich value."""
    logs = gbm_log_endpoints(n_paths, n_steps, seed=4242)
    mean = logs.mean()
    se = logs.std(ddof=1) / np.sqrt(n_paths)
    stratonovich_ok = abs(mean) <= 3.0 * se
    ito_rejected = abs(mean + 0.5) > 5.0 * se
    passed = bool(stratonovich_ok and ito_rejected)
    detail = (f"<log x(1)> = {mean:.4f} +- {se:.4f} "
              f"(0 within 3 SE: {stratonovich_ok}, -0.5 beyond 5 SE: {ito_rejected})")
    return passed, detail


def run_suites(corrupt_factorization: float = 0.0) -> list[dict]:
    """Execute every suite, never letting one failure mask the rest."""
    jobs = (
        (SUITE_NAMES[0], lambda: factorization_suite(corrupt_factorization)),
        (SUITE_NAMES[1], covariance_suite),
        (SUITE_NAMES[2], vacuum_suite),
        (SUITE_NAMES[3], oracle_suite),
        (SUITE_NAMES[4], stratonovich_suite),
    )
    results = []
    for name, job in jobs:
        try:
            passed, detail = job()
        except Exception as exc:
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append({"name": name, "passed": bool(passed), "detail": detail})
    return results
