"""Deterministic part of the stochastic Maxwell-Bloch equations.

State layout
------------
A trajectory carries 19 complex variables, indexed along axis 0:

* rows 0..3: slowly varying field envelopes.  ``E_IP``/``E_IM`` are the
  forward-propagating idler field and its formally independent conjugate
  partner; ``E_SP``/``E_SM`` the backward-propagating signal pair.
* rows 4..12: atomic averages in the "plus" sector: optical coherences
  between the cascade levels (``P01``, ``P12``, ``P02``, ``P13``,
  ``P03``, ``P32``) and the populations (``P33``, ``P22``, ``P11``).
* rows 13..18: daggered partners of the six coherences, in reverse
  order, so conjugation maps the layout onto itself (``DAGGER``).

The ground-state population is not stored: the closure
pi00 = 1 - pi11 - pi22 - pi33 eliminates it.  In the doubled phase
space the daggered rows are independent of their partners; only
ensemble means are complex conjugates of each other.

Conventions
-----------
Pump amplitudes are real envelopes in the half-Rabi convention (a
resonantly driven two-level atom nutates at 2*Omega).  Phase mismatch
enters through e^{-i dk z} on one signal sector and e^{+i dk z} on the
other; both factors are precomputed once per run by ``phase_factors``.
Everything here is dimensionless (cooperation units, see units.py).

The Ito -> Stratonovich drift corrections induced by the multiplicative
noise live in ``stratonovich_correction``.  They were obtained by
differentiating the noise correlation table (see noise.py) and collapse
to a handful of terms; a test recomputes them numerically from that
table so a slip in the closed forms cannot survive.
"""

from __future__ import annotations

import numpy as np

from .units import ModelParams

__all__ = [
    "N_VARS",
    "E_IP", "E_IM", "E_SP", "E_SM",
    "P01", "P12", "P02", "P13", "P03", "P32", "P33", "P22", "P11",
    "P32D", "P03D", "P13D", "P02D", "P12D", "P01D",
    "ATOM_ROWS", "FIELD_ROWS", "DAGGER",
    "ground_population", "phase_factors", "atomic_drift",
    "field_integrands", "stratonovich_correction", "dagger_state",
]

N_VARS = 19

# field rows
E_IP, E_IM, E_SP, E_SM = 0, 1, 2, 3
# coherences and populations of the plus sector
P01, P12, P02, P13, P03, P32 = 4, 5, 6, 7, 8, 9
P33, P22, P11 = 10, 11, 12
# daggered coherences
P32D, P03D, P13D, P02D, P12D, P01D = 13, 14, 15, 16, 17, 18

FIELD_ROWS = slice(0, 4)
ATOM_ROWS = slice(P01, N_VARS)

# row k of the daggered state is the conjugate of row DAGGER[k]
DAGGER = np.array([1, 0, 3, 2,
                   18, 17, 16, 15, 14, 13,
                   10, 11, 12,
                   9, 8, 7, 6, 5, 4])


def ground_population(s: np.ndarray) -> np.ndarray:
    """pi00 from the population closure (populations sum to one)."""
    return 1.0 - s[P11] - s[P22] - s[P33]


def phase_factors(p: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Mismatch phases (e^{-i dk z}, e^{+i dk z}) on the spatial grid."""
    pm = np.exp(-1j * p.dk * p.z)
    return pm, np.conj(pm)


def dagger_state(s: np.ndarray) -> np.ndarray:
    """Formal conjugation partner of a state (row swap plus conjugate).

    The equation set is invariant under this map; tests exploit that to
    cross-check every hand-written daggered equation against its partner.
    """
    return np.conj(s[DAGGER])


def atomic_drift(s: np.ndarray, omega_a: float, p: ModelParams,
                 pm: np.ndarray, pp: np.ndarray) -> np.ndarray:
    """Deterministic time derivative of the atomic rows.

    ``s`` has shape (19, ...) with the spatial grid on the last axis;
    ``omega_a`` is the pump-a amplitude at the evaluation time, and
    ``pm``/``pp`` the precomputed mismatch phases.  Field rows of the
    result stay zero: the fields follow from a spatial boundary-value
    solve, not from time integration.
    """
    oa = omega_a
    ob = p.omega_b
    g01, g03, g12, g32, g2 = p.gamma01, p.gamma03, p.gamma12, p.gamma32, p.gamma2
    d1, d2 = p.delta1, p.delta2

    e1 = s[E_IP]
    e2 = s[E_IM]
    e3p = s[E_SP] * pm
    e4q = s[E_SM] * pp
    pop0 = ground_population(s)

    d = np.zeros_like(s)

    d[P01] = ((1j * d1 - 0.5 * g01) * s[P01] + 1j * oa * (pop0 - s[P11])
              + 1j * ob * s[P02] - 1j * s[P13D] * e1)
    d[P12] = ((1j * (d2 - d1) - 0.5 * (g01 + g2)) * s[P12] - 1j * oa * s[P02]
              + 1j * ob * (s[P11] - s[P22]) + 1j * s[P13] * e3p)
    d[P02] = ((1j * d2 - 0.5 * g2) * s[P02] - 1j * oa * s[P12] + 1j * ob * s[P01]
              + 1j * s[P03] * e3p - 1j * s[P32] * e1)
    d[P13] = ((-1j * d1 - 0.5 * (g01 + g03)) * s[P13] - 1j * oa * s[P03]
              - 1j * ob * s[P32D] + 1j * s[P12] * e4q + 1j * s[P01D] * e1)
    d[P03] = (-0.5 * g03 * s[P03] - 1j * oa * s[P13] + 1j * s[P02] * e4q
              + 1j * (pop0 - s[P33]) * e1)
    d[P32] = ((1j * d2 - 0.5 * (g03 + g2)) * s[P32] + 1j * ob * s[P13D]
              - 1j * (s[P22] - s[P33]) * e3p - 1j * s[P02] * e2)
    d[P33] = (-g03 * s[P33] + g32 * s[P22] - 1j * s[P32D] * e3p
              + 1j * s[P32] * e4q + 1j * s[P03D] * e1 - 1j * s[P03] * e2)
    d[P22] = (-g2 * s[P22] + 1j * ob * (s[P12D] - s[P12])
              + 1j * s[P32D] * e3p - 1j * s[P32] * e4q)
    d[P11] = (-g01 * s[P11] + g12 * s[P22] + 1j * oa * (s[P01D] - s[P01])
              - 1j * ob * (s[P12D] - s[P12]))
    d[P32D] = ((-1j * d2 - 0.5 * (g03 + g2)) * s[P32D] - 1j * ob * s[P13]
               + 1j * (s[P22] - s[P33]) * e4q + 1j * s[P02D] * e1)
    d[P03D] = (-0.5 * g03 * s[P03D] + 1j * oa * s[P13D] - 1j * s[P02D] * e3p
               - 1j * (pop0 - s[P33]) * e2)
    d[P13D] = ((1j * d1 - 0.5 * (g01 + g03)) * s[P13D] + 1j * oa * s[P03D]
               + 1j * ob * s[P32] - 1j * s[P12D] * e3p - 1j * s[P01] * e2)
    d[P02D] = ((-1j * d2 - 0.5 * g2) * s[P02D] + 1j * oa * s[P12D]
               - 1j * ob * s[P01D] - 1j * s[P03D] * e4q + 1j * s[P32D] * e2)
    d[P12D] = ((-1j * (d2 - d1) - 0.5 * (g01 + g2)) * s[P12D] + 1j * oa * s[P02D]
               - 1j * ob * (s[P11] - s[P22]) - 1j * s[P13D] * e4q)
    d[P01D] = ((-1j * d1 - 0.5 * g01) * s[P01D] - 1j * oa * (pop0 - s[P11])
               - 1j * ob * s[P02D] + 1j * s[P13] * e2)
    return d


def field_integrands(s: np.ndarray, p: ModelParams,
                     pm: np.ndarray, pp: np.ndarray):
    """Deterministic source densities of the four field envelopes.

    Returns (fwd_ip, fwd_im, bwd_sp, bwd_sm).  The idler pair solves
    dE/dz = source with E(0) = 0, integrated from the entrance face
    forward; the signal pair propagates the other way and accumulates
    from the far face, E(z) = integral_z^L source dz'.  Stochastic
    source terms on the signal pair are added by the caller.
    """
    fwd_ip = 1j * s[P03]
    fwd_im = -1j * s[P03D]
    bwd_sp = 1j * p.g_sq * s[P32] * pp
    bwd_sm = -1j * p.g_sq * s[P32D] * pm
    return fwd_ip, fwd_im, bwd_sp, bwd_sm


def stratonovich_correction(s: np.ndarray, omega_a: float, p: ModelParams,
                            pm: np.ndarray, pp: np.ndarray) -> np.ndarray:
    """Drift correction moving the Ito equations to Stratonovich form.

    The midpoint integrator converges to the Stratonovich solution, so
    the Ito drift must be shifted by -1/2 sum_jk B_jk dB_ij/dx_j.  For
    this noise table the sum telescopes to one term per row, scaled by
    the inverse phase-space cell 1/(N_c dt dz) like the noise variances
    themselves.  At realistic cooperation numbers the shift is tiny; it
    is kept for fidelity, not because it moves any observable.
    """
    c = np.zeros_like(s)
    sc = p.corr_scale
    c[P01] = 0.5j * omega_a * sc
    c[P01D] = -0.5j * omega_a * sc
    c[P12] = 1j * p.omega_b * sc
    c[P12D] = -1j * p.omega_b * sc
    c[P03] = 1j * s[E_IP] * sc
    c[P03D] = -1j * s[E_IM] * sc
    c[P32] = 0.5j * s[E_SP] * pm * sc
    c[P32D] = -0.5j * s[E_SM] * pp * sc
    c[P33] = 0.25 * (-3.0 * p.gamma03 + p.gamma32) * sc
    c[P22] = -0.25 * p.gamma2 * sc
    c[P11] = 0.25 * (-5.0 * p.gamma01 + p.gamma12) * sc
    return c
