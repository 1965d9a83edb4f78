"""Semi-implicit midpoint integration of the stochastic field-atom system.

Time stepping uses the fixed-point midpoint rule: per step the frozen
Gaussian increments are drawn once, the midpoint state is solved by
functional iteration of

    x_bar = x_n + (dt/2) * [A(x_bar) + C(x_bar) + B(x_bar) xi],

and the endpoint is the reflection x_{n+1} = 2 x_bar - x_n.  With
multiplicative noise this scheme converges to the Stratonovich
solution, which together with the correction C (dynamics.py) recovers
the intended Ito process.

The field envelopes are not propagated in time.  In the co-moving frame
they satisfy instantaneous spatial two-point boundary problems driven
by the atomic coherences: the idler pair integrates forward from a dark
entrance face, the signal pair backward from the far face.  Cumulative
trapezoidal quadrature solves both directly; the solve is repeated
inside every midpoint iteration so fields and atoms stay consistent,
and once more at the step end for the reported node values.

Trajectories are processed in batches, but every operation is
elementwise along the batch axis and a trajectory's iteration stops
(its column freezes) independently of its neighbours, so results are
bitwise identical however the ensemble is split into batches.  Each
trajectory owns a counter-based random stream keyed by (seed, index),
making the ensemble reproducible under any worker layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    E_IP, E_IM, E_SP, E_SM, N_VARS, P11, P22, P33,
    atomic_drift, field_integrands, phase_factors, stratonovich_correction,
)
from .noise import NOISE_DIM, noise_vector, trajectory_rng
from .units import ModelParams, RunControl

__all__ = [
    "StepControl", "ChunkResult", "forward_cumtrapz", "backward_cumtrapz",
    "solve_fields", "fixed_point_midpoint", "run_trajectories",
    "gbm_log_endpoints", "STATUS_CONVERGED", "STATUS_STALLED",
    "STATUS_EXHAUSTED",
]


@dataclass(frozen=True)
class StepControl:
    """Numerical knobs of the midpoint iteration."""

    tol: float = 1e-10
    max_iter: int = 25
    guard: float = 1e6
    stochastic: bool = True

    @classmethod
    def from_run(cls, run: RunControl, stochastic: bool = True) -> "StepControl":
        return cls(tol=run.midpoint_tol, max_iter=run.midpoint_max_iter,
                   guard=run.divergence_guard, stochastic=stochastic)


def forward_cumtrapz(y: np.ndarray, dz: float) -> np.ndarray:
    """Trapezoidal cumulative integral from the first grid node.

    out[..., m] approximates the integral of y from node 0 to node m;
    out[..., 0] is exactly zero.
    """
    out = np.zeros_like(y)
    np.cumsum(y[..., :-1] + y[..., 1:], axis=-1, out=out[..., 1:])
    out *= 0.5 * dz
    return out

def backward_cumtrapz(y: np.ndarray, dz: float) -> np.ndarray:
    """Trapezoidal cumulative integral from the last grid node.

    out[..., m] approximates the integral of y from node m to the end;
    out[..., -1] is exactly zero.
    """
    out = np.zeros_like(y)
    np.cumsum((y[..., :-1] + y[..., 1:])[..., ::-1], axis=-1,
              out=out[..., -2::-1])
    out *= 0.5 * dz
    return out


def solve_fields(s: np.ndarray, p: ModelParams, pm: np.ndarray, pp: np.ndarray,
                 field_noise: tuple | None = None) -> np.ndarray:
    """Solve the four instantaneous field boundary-value problems.

    Sources come from the atomic rows of ``s``; ``field_noise``, when
    given, is the pair of stochastic source densities for the signal
    rows (the idler rows carry no noise: the correlation table has no
    entries for them).  Returns the (4, ...) field block.
    """
    fwd_ip, fwd_im, bwd_sp, bwd_sm = field_integrands(s, p, pm, pp)
    if field_noise is not None:
        bwd_sp = bwd_sp + field_noise[0]
        bwd_sm = bwd_sm + field_noise[1]
    e = np.empty((4,) + s.shape[1:], dtype=s.dtype)
    e[E_IP] = forward_cumtrapz(fwd_ip, p.dz)
    e[E_IM] = forward_cumtrapz(fwd_im, p.dz)
    e[E_SP] = backward_cumtrapz(bwd_sp, p.dz)
    e[E_SM] = backward_cumtrapz(bwd_sm, p.dz)
    return e


# Stagnation rule of the midpoint iteration.  The noise factor enters
# through square roots of the diffusion coefficients, which are not
# Lipschitz where those coefficients cross zero.  Columns whose frozen
# increments straddle such a crossing do not contract: their residual
# bounces indefinitely at a floor set by the noise amplitude (measured
# around 1e-5 relative at the reference operating point, far below one
# step's truncation error, while other columns reach 1e-16).  A column
# that stops halving its best residual is therefore parked at its floor
# and counted separately from genuine non-convergence.
STALL_GRACE = 3     # iterations before stagnation may stop a column
STALL_RATIO = 0.85  # progress means residual < ratio * best so far
STALL_STRIKES = 2   # consecutive no-progress iterations that park it

STATUS_CONVERGED = 0
STATUS_STALLED = 1
STATUS_EXHAUSTED = 2


def fixed_point_midpoint(s: np.ndarray, update, tol: float, max_iter: int,
                         frozen: np.ndarray | None = None):
    """Solve x_bar = update(x_bar, cols) columnwise by fixed-point iteration.

    ``s`` has shape (rows, batch, space) and ``update`` receives the
    active subset plus its column indices, so late iterations only pay
    for the columns still moving.  A column stops once its relative
    residual drops below ``tol`` (converged), once the stagnation rule
    above fires (stalled at the noise floor), or never, in which case it
    is reported exhausted.  Stopping decisions depend only on a column's
    own history, which keeps batched execution bitwise identical to
    one-by-one runs.

    Returns (x_bar, iterations per column, status per column).
    """
    sbar = s.copy()
    nbatch = s.shape[1]
    iters = np.zeros(nbatch, dtype=np.int64)
    status = np.full(nbatch, STATUS_EXHAUSTED, dtype=np.int8)
    best = np.full(nbatch, np.inf)
    strikes = np.zeros(nbatch, dtype=np.int64)
    if frozen is None:
        idx = np.arange(nbatch)
    else:
        idx = np.flatnonzero(~frozen)
    for it in range(1, max_iter + 1):
        if idx.size == 0:
            break
        sub = sbar[:, idx, :]
        new = update(sub, idx)
        # max-norm over real and imaginary parts (a float view avoids
        # the complex modulus, which costs a hypot per element)
        diff = np.abs((new - sub).view(np.float64)).max(axis=(0, 2))
        rel = diff / (1.0 + np.abs(new.view(np.float64)).max(axis=(0, 2)))
        sbar[:, idx, :] = new
        iters[idx] = it
        conv = rel < tol
        progressed = rel < STALL_RATIO * best[idx]
        best[idx] = np.minimum(best[idx], rel)
        strikes[idx] = np.where(progressed, 0, strikes[idx] + 1)
        stalled = ~conv & (it > STALL_GRACE) & (strikes[idx] >= STALL_STRIKES)
        status[idx[conv]] = STATUS_CONVERGED
        status[idx[stalled]] = STATUS_STALLED
        idx = idx[~(conv | stalled)]
    return sbar, iters, status


@dataclass
class ChunkResult:
    """Per-trajectory time series and bookkeeping for one batch."""

    traj_ids: np.ndarray                  # (K,)
    ok: np.ndarray                        # (K,) survived the divergence guard
    signal_product: np.ndarray            # (K, m_t) E_s^- E_s^+ at the exit face z=0
    idler_product: np.ndarray             # (K, m_t) E_i^- E_i^+ at the exit face z=L
    populations: np.ndarray               # (K, 3, 2, m_t) pi11/pi22/pi33 at z=0 and z=L
    iteration_counts: np.ndarray          # (max_iter+1,) histogram over all steps
    stalled_steps: int                    # parked at the iteration noise floor
    failed_steps: int                     # exhausted max_iter while still moving
    fields: np.ndarray | None = None      # (K, 4, m_t, m_z) when profiles requested
    pop_profiles: np.ndarray | None = None  # (K, 3, m_t, m_z)


def run_trajectories(p: ModelParams, ctrl: StepControl, seed: int,
                     traj_ids, initial: np.ndarray | None = None,
                     record_profiles: bool = False) -> ChunkResult:
    """Integrate a batch of trajectories over the full time grid.

    ``traj_ids`` selects the random streams; the deterministic skeleton
    (``ctrl.stochastic`` false) ignores them but keeps the batch shape.
    ``initial`` optionally sets the starting atomic state (vacuum
    otherwise); fields are always re-derived from the sources.
    """
    traj_ids = np.asarray(list(traj_ids), dtype=np.int64)
    nbatch = traj_ids.size
    m_t, m_z = p.m_t, p.m_z
    pm, pp = phase_factors(p)

    s = np.zeros((N_VARS, nbatch, m_z), dtype=complex)
    if initial is not None:
        s[...] = np.asarray(initial, dtype=complex).reshape(
            (N_VARS, -1, m_z) if np.ndim(initial) == 3 else (N_VARS, 1, m_z))
    s[:4] = solve_fields(s, p, pm, pp)

    gens = [trajectory_rng(seed, int(t)) for t in traj_ids] if ctrl.stochastic else None

    sig = np.zeros((nbatch, m_t), dtype=complex)
    idl = np.zeros((nbatch, m_t), dtype=complex)
    pops = np.zeros((nbatch, 3, 2, m_t), dtype=complex)
    hist = np.zeros(ctrl.max_iter + 1, dtype=np.int64)
    stalled = 0
    failed = 0
    dead = np.zeros(nbatch, dtype=bool)
    fields_rec = np.zeros((nbatch, 4, m_t, m_z), dtype=complex) if record_profiles else None
    pop_rec = np.zeros((nbatch, 3, m_t, m_z), dtype=complex) if record_profiles else None

    def record(n: int) -> None:
        sig[:, n] = s[E_SM, :, 0] * s[E_SP, :, 0]
        idl[:, n] = s[E_IM, :, -1] * s[E_IP, :, -1]
        for lvl, row in enumerate((P11, P22, P33)):
            pops[:, lvl, 0, n] = s[row, :, 0]
            pops[:, lvl, 1, n] = s[row, :, -1]
        if record_profiles:
            fields_rec[:, :, n] = np.moveaxis(s[:4], 1, 0)
            pop_rec[:, 0, n] = s[P11]
            pop_rec[:, 1, n] = s[P22]
            pop_rec[:, 2, n] = s[P33]

    record(0)
    half_dt = 0.5 * p.dt
    xi_store = np.empty((nbatch, m_z, NOISE_DIM)) if ctrl.stochastic else None
    for n in range(m_t - 1):
        oa = p.omega_a_mid[n]
        if ctrl.stochastic:
            # one block of unit normals per trajectory and step, stored
            # site-major so the sampler sees contiguous per-site rows
            for k, g in enumerate(gens):
                xi_store[k] = g.standard_normal((m_z, NOISE_DIM))

        def update(sub, idx):
            rhs = atomic_drift(sub, oa, p, pm, pp)
            if ctrl.stochastic:
                fvec = noise_vector(sub, oa, p, pm, pp,
                                    xi_store[idx].transpose(2, 0, 1))
                corr = stratonovich_correction(sub, oa, p, pm, pp)
                # the conversion term is the a.e. limit of -1/2 B dB/dx,
                # which is indeterminate at the exactly-zero state where B
                # vanishes identically and the zero path solves the SDE;
                # suppressing it there keeps the vacuum an exact fixed point
                live = (sub != 0).any(axis=(0, 2))
                if not live.all():
                    corr *= live[None, :, None]
                rhs += corr
                rhs[4:] += fvec[4:]
                fnoise = (fvec[E_SP], fvec[E_SM])
            else:
                fnoise = None
            new = np.empty_like(sub)
            new[4:] = s[4:, idx] + half_dt * rhs[4:]
            new[:4] = solve_fields(new, p, pm, pp, fnoise)
            return new

        sbar, iters, status = fixed_point_midpoint(
            s, update, ctrl.tol, ctrl.max_iter, frozen=dead)
        alive = ~dead
        np.add.at(hist, np.minimum(iters[alive], ctrl.max_iter), 1)
        stalled += int(np.count_nonzero(alive & (status == STATUS_STALLED)))
        failed += int(np.count_nonzero(alive & (status == STATUS_EXHAUSTED)))

        s[4:] = 2.0 * sbar[4:] - s[4:]
        if ctrl.stochastic:
            fvec = noise_vector(sbar, oa, p, pm, pp,
                                xi_store.transpose(2, 0, 1))
            s[:4] = solve_fields(s, p, pm, pp, (fvec[E_SP], fvec[E_SM]))
        else:
            s[:4] = solve_fields(s, p, pm, pp)

        with np.errstate(invalid="ignore"):
            peak = np.abs(s).max(axis=(0, 2))
        bad = ~np.isfinite(peak) | (peak > ctrl.guard)
        if bad.any():
            newly = bad & ~dead
            dead |= bad
            s[:, newly, :] = 0.0
        record(n + 1)

    ok = ~dead
    return ChunkResult(
        traj_ids=traj_ids, ok=ok,
        signal_product=sig, idler_product=idl, populations=pops,
        iteration_counts=hist, stalled_steps=stalled, failed_steps=failed,
        fields=fields_rec, pop_profiles=pop_rec,
    )


def gbm_log_endpoints(n_paths: int, n_steps: int, seed: int,
                      tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """log x(1) for dx = x dW paths run through the midpoint machinery.

    A one-variable regression target for the integrator: the midpoint
    scheme solves the Stratonovich interpretation, whose log-endpoint
    mean is exactly zero, while an Ito solver would give -1/2.  Uses
    the same fixed-point kernel and endpoint reflection as the physical
    stepper, on a (1, paths, 1)-shaped state.
    """
    dt = 1.0 / n_steps
    rng = trajectory_rng(seed, 0)
    x = np.ones((1, n_paths, 1), dtype=complex)
    for _ in range(n_steps):
        dw = rng.standard_normal(n_paths)[None, :, None] * np.sqrt(dt)

        def update(xbar, idx):
            return x[:, idx] + 0.5 * xbar * dw[:, idx]

        xbar, _, status = fixed_point_midpoint(x, update, tol, max_iter)
        if np.any(status != STATUS_CONVERGED):
            raise RuntimeError("midpoint iteration failed on scalar benchmark")
        x = 2.0 * xbar - x
    return np.log(x[0, :, 0].real)
