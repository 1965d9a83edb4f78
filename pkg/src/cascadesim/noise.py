"""Noise correlations of the Langevin equations and noise synthesis.

The stochastic terms are specified by a symmetric table D of c-number
correlation coefficients: <F_a(z,t) F_b(z',t')> is D_ab times a delta
in space and time divided by the cooperation number.  Half of the table
follows from the other half by the conjugation map (swap each row with
its daggered partner, conjugate coefficients, flip the mismatch phase),
so only the independent half is written out; the partner entries are
generated programmatically and two entries whose partner is itself part
of the written half double as consistency anchors, checked at import.

Each coefficient is stored as a small term algebra, a sum of
(coefficient, symbols) products, rather than as opaque code.  That one
representation drives everything derived from the table:

* ``diffusion_matrix`` evaluates D at a state (tests, self-checks);
* ``noise_matrix`` builds an explicit factor B with B B^T = D;
* ``noise_vector`` synthesizes the Langevin term directly from unit
  normals without materializing B (production path);
* ``correction_from_table`` differentiates the terms symbolically to
  recompute the Ito -> Stratonovich drift shift, cross-checking the
  closed forms in dynamics.py.

A diagonal entry D_aa contributes one real noise; an off-diagonal pair
D_ab contributes two noises shared between rows a and b with weights
sqrt(D_ab/2) * (1, 1) and sqrt(D_ab/2) * (i, -i), which reproduces
D_ab exactly and adds nothing to the diagonals.  The table has 64
entries, 11 of them diagonal, hence 117 noises per grid point.
"""

from __future__ import annotations

import numpy as np

from .dynamics import (
    DAGGER, N_VARS,
    E_IP, E_IM, E_SP, E_SM,
    P01, P12, P02, P13, P03, P32, P33, P22, P11,
    P32D, P03D, P13D, P02D, P12D, P01D,
)
from .units import ModelParams

__all__ = [
    "N_ENTRIES", "N_DIAG", "NOISE_DIM", "ORDERED_KEYS",
    "diffusion_entries", "diffusion_matrix", "noise_matrix",
    "noise_vector", "correction_from_table", "trajectory_rng",
]

# ---------------------------------------------------------------------------
# term algebra
# ---------------------------------------------------------------------------
# A term is (coeff, symbols); a table entry is a tuple of terms.  Symbols:
#   ("var", k)     state row k
#   ("pump", "a")  pump-a amplitude at the evaluation time (real)
#   ("pump", "b")  CW pump-b amplitude (real)
#   ("phase", -1)  e^{-i dk z};  ("phase", +1)  e^{+i dk z}
#   ("rate", name) decay rate, name in g01/g03/g12/g32/g2
#   ("gsq",)       signal-to-idler coupling conversion (g_s/g_i)^2


def _v(k):
    return ("var", k)


_PA, _PB = ("pump", "a"), ("pump", "b")
_PM, _PP = ("phase", -1), ("phase", +1)
_GSQ = ("gsq",)


def _r(name):
    return ("rate", name)


# Written-out half of the table (the pump-a/pump-b/plus-sector entries
# plus everything whose daggered partner is not written).  Keys are
# unordered row pairs stored as (min, max).
_WRITTEN = {
    # pump-a block
    (P01, P01): ((-2j, (_PA, _v(P01))),),
    (P01, P12): ((1j, (_PA, _v(P12))), (1j, (_v(P32), _v(E_IP)))),
    (P01, P02): ((-1j, (_PA, _v(P02))),),
    (P01, P13): ((1j, (_PA, _v(P13))), (1j, (_v(P33), _v(E_IP))),
                 (-1j, (_v(P11), _v(E_IP)))),
    (P01, P03): ((-1j, (_PA, _v(P03))), (-1j, (_v(P01), _v(E_IP)))),
    (P01, P33): ((-1j, (_v(P13D), _v(E_IP))),),
    (P01, P11): ((1j, (_v(P13D), _v(E_IP))),),
    (P01, P32D): ((-1j, (_v(P12D), _v(E_IP))),),
    (P01, P01D): ((1.0, (_r("g12"), _v(P22))),),
    # pump-b block
    (P12, P12): ((-2j, (_PB, _v(P12))),),
    (P12, P13): ((-1j, (_PB, _v(P13))),),
    (P12, P32): ((-1j, (_PB, _v(P32))),),
    (P12, P11): ((-1j, (_PA, _v(P02))), (1.0, (_r("g01"), _v(P12)))),
    (P12, P13D): ((-1j, (_v(P02), _v(E_IM))), (1.0, (_r("g01"), _v(P32)))),
    (P12, P12D): ((1.0, (_r("g01"), _v(P22))),),
    # two-photon coherence block
    (P02, P13): ((-1j, (_v(P12), _v(E_IP))),),
    (P02, P03): ((-1j, (_v(P02), _v(E_IP))),),
    # upper-coherence block
    (P13, P03): ((-1j, (_v(P13), _v(E_IP))),),
    (P13, P32): ((1j, (_PB, _v(P22))), (-1j, (_PB, _v(P33)))),
    (P13, P33): ((1j, (_PB, _v(P32D))),),
    (P13, P22): ((-1j, (_PB, _v(P32D))),),
    (P13, P11): ((-1j, (_PA, _v(P03))), (1j, (_v(P01D), _v(E_IP))),
                 (1.0, (_r("g01"), _v(P13)))),
    (P13, P13D): ((1j, (_v(P03D), _v(E_IP))), (-1j, (_v(P03), _v(E_IM))),
                  (1.0, (_r("g01"), _v(P33))), (1.0, (_r("g32"), _v(P22)))),
    (P13, P12D): ((1j, (_v(P02D), _v(E_IP))), (1.0, (_r("g01"), _v(P32D)))),
    # idler-transition block
    (P03, P03): ((-2j, (_v(P03), _v(E_IP))),),
    (P03, P32): ((1j, (_v(P32), _v(E_IP))),),
    (P03, P03D): ((1.0, (_r("g32"), _v(P22))),),
    # signal-transition block
    (P32, P32): ((-2j, (_v(P32), _v(E_SP), _PM)),),
    (P32, P33): ((1j, (_PB, _v(P13D))), (-1j, (_v(P02), _v(E_IM))),
                 (1.0, (_r("g03"), _v(P32)))),
    (P32, P11): ((-1j, (_PB, _v(P13D))),),
    (P32, P32D): ((1j, (_PB, _v(P12D))), (-1j, (_PB, _v(P12))),
                  (1.0, (_r("g03"), _v(P22)))),
    (P32, P01D): ((1j, (_v(P12), _v(E_IM))),),
    # population block
    (P33, P33): ((1j, (_v(P32D), _v(E_SP), _PM)), (-1j, (_v(P32), _v(E_SM), _PP)),
                 (1j, (_v(P03D), _v(E_IP))), (-1j, (_v(P03), _v(E_IM))),
                 (1.0, (_r("g32"), _v(P22))), (1.0, (_r("g03"), _v(P33)))),
    (P33, P22): ((1j, (_v(P32), _v(E_SM), _PP)), (-1j, (_v(P32D), _v(E_SP), _PM)),
                 (-1.0, (_r("g32"), _v(P22)))),
    (P22, P22): ((1j, (_PB, _v(P12D))), (-1j, (_PB, _v(P12))),
                 (-1j, (_v(P32), _v(E_SM), _PP)), (1j, (_v(P32D), _v(E_SP), _PM)),
                 (1.0, (_r("g2"), _v(P22)))),
    (P22, P11): ((-1j, (_PB, _v(P12D))), (1j, (_PB, _v(P12))),
                 (-1.0, (_r("g12"), _v(P22)))),
    (P11, P11): ((1j, (_PA, _v(P01D))), (-1j, (_PA, _v(P01))),
                 (1j, (_PB, _v(P12D))), (-1j, (_PB, _v(P12))),
                 (1.0, (_r("g01"), _v(P11))), (1.0, (_r("g12"), _v(P22)))),
    # signal-field block
    (E_SP, P13): ((1j, (_GSQ, _v(P12), _PP)),),
    (E_SP, P03): ((1j, (_GSQ, _v(P02), _PP)),),
}


def _dagger_symbol(sym):
    kind = sym[0]
    if kind == "var":
        return ("var", int(DAGGER[sym[1]]))
    if kind == "phase":
        return ("phase", -sym[1])
    return sym


def _dagger_terms(terms):
    return tuple((np.conj(c), tuple(_dagger_symbol(s) for s in sym))
                 for c, sym in terms)


def _canonical(a, b):
    return (a, b) if a <= b else (b, a)


def _normalize(terms):
    """Collect terms into {sorted symbols: coefficient} for comparison."""
    acc: dict = {}
    for c, syms in terms:
        key = tuple(sorted(syms))
        acc[key] = acc.get(key, 0j) + complex(c)
    return {k: v for k, v in acc.items() if v != 0}


def _build_table():
    table = {_canonical(*k): v for k, v in _WRITTEN.items()}
    if len(table) != len(_WRITTEN):
        raise AssertionError("written noise table has colliding keys")
    anchors = set()
    for key, terms in list(_WRITTEN.items()):
        ikey = _canonical(int(DAGGER[key[0]]), int(DAGGER[key[1]]))
        image = _dagger_terms(terms)
        if ikey in table:
            # either a self-conjugate entry or a pair written out twice;
            # both must agree with the generated image exactly
            if _normalize(table[ikey]) != _normalize(image):
                raise AssertionError(f"noise table entry {ikey} breaks conjugation symmetry")
            if ikey != _canonical(*key):
                anchors.add(frozenset((ikey, _canonical(*key))))
        else:
            table[ikey] = image
    if len(anchors) != 2:
        raise AssertionError(f"expected 2 written anchor pairs, found {len(anchors)}")
    if len(table) != 64:
        raise AssertionError(f"noise table has {len(table)} entries, expected 64")
    diag = sum(1 for a, b in table if a == b)
    if diag != 11:
        raise AssertionError(f"noise table has {diag} diagonal entries, expected 11")
    return table


_TABLE = _build_table()

ORDERED_KEYS: tuple = tuple(sorted(_TABLE))
N_ENTRIES = len(ORDERED_KEYS)
N_DIAG = sum(1 for a, b in ORDERED_KEYS if a == b)
NOISE_DIM = sum(1 if a == b else 2 for a, b in ORDERED_KEYS)
assert NOISE_DIM == 117


def _rate(p: ModelParams, name: str) -> float:
    return {"g01": p.gamma01, "g03": p.gamma03, "g12": p.gamma12,
            "g32": p.gamma32, "g2": p.gamma2}[name]


def _factor(sym, s, omega_a, p, pm, pp):
    kind = sym[0]
    if kind == "var":
        return s[sym[1]]
    if kind == "pump":
        return omega_a if sym[1] == "a" else p.omega_b
    if kind == "phase":
        return pm if sym[1] == -1 else pp
    if kind == "rate":
        return _rate(p, sym[1])
    return p.g_sq


def _eval_terms(terms, s, omega_a, p, pm, pp):
    total = 0j
    for c, syms in terms:
        val = c
        for sym in syms:
            val = val * _factor(sym, s, omega_a, p, pm, pp)
        total = total + val
    if np.ndim(total) == 0:
        return np.broadcast_to(total, s.shape[1:])
    return total


def diffusion_entries(s, omega_a, p, pm, pp):
    """Evaluate every table entry at a state; dict keyed by row pair."""
    return {key: _eval_terms(_TABLE[key], s, omega_a, p, pm, pp)
            for key in ORDERED_KEYS}


def diffusion_matrix(s, omega_a, p, pm, pp):
    """Full symmetric correlation matrix, shape (19, 19) + state tail."""
    d = np.zeros((N_VARS, N_VARS) + s.shape[1:], dtype=complex)
    for (a, b), val in diffusion_entries(s, omega_a, p, pm, pp).items():
        d[a, b] = val
        if a != b:
            d[b, a] = val
    return d


def noise_matrix(s, omega_a, p, pm, pp):
    """Explicit factor B, shape (19, 117) + state tail, with B B^T = D.

    Test and self-check path; the production sampler applies the same
    columns without materializing them.
    """
    b = np.zeros((N_VARS, NOISE_DIM) + s.shape[1:], dtype=complex)
    col = 0
    for key in ORDERED_KEYS:
        a, bb = key
        val = _eval_terms(_TABLE[key], s, omega_a, p, pm, pp)
        if a == bb:
            b[a, col] = np.sqrt(val)
            col += 1
        else:
            root = np.sqrt(0.5 * val)
            b[a, col] = root
            b[bb, col] = root
            b[a, col + 1] = 1j * root
            b[bb, col + 1] = -1j * root
            col += 2
    return b


# Flattened evaluation plan for the production sampler.  Terms are laid
# out contiguously per entry so one reduceat sums them; scalar factors
# (pumps, rates, coupling) index a small per-step vector, variable
# factors gather rows of the state (row 19 of the augmented state is a
# constant one, standing in for absent second factors).
_SCAL_INDEX = {None: 0, ("pump", "a"): 1, ("pump", "b"): 2,
               ("rate", "g01"): 3, ("rate", "g03"): 4, ("rate", "g12"): 5,
               ("rate", "g32"): 6, ("rate", "g2"): 7, ("gsq",): 8}


def _build_plan():
    t_entry, t_coeff, t_v1, t_v2, t_scal, t_phase = [], [], [], [], [], []
    for e, key in enumerate(ORDERED_KEYS):
        for c, syms in _TABLE[key]:
            vars_ = [sym[1] for sym in syms if sym[0] == "var"]
            scals = [sym for sym in syms if sym[0] in ("pump", "rate") or sym == ("gsq",)]
            phases = [sym[1] for sym in syms if sym[0] == "phase"]
            if not 1 <= len(vars_) <= 2 or len(scals) > 1 or len(phases) > 1:
                raise AssertionError(f"unexpected term shape in entry {key}")
            t_entry.append(e)
            t_coeff.append(complex(c))
            t_v1.append(vars_[0])
            t_v2.append(vars_[1] if len(vars_) == 2 else N_VARS)
            t_scal.append(_SCAL_INDEX[scals[0] if scals else None])
            t_phase.append({0: 0, -1: 1, 1: 2}[phases[0] if phases else 0])
    t_entry = np.array(t_entry)
    starts = np.flatnonzero(np.r_[1, np.diff(t_entry)])
    if starts.size != N_ENTRIES:
        raise AssertionError("term layout does not cover every entry")

    row_a, row_b, col1, col2 = [], [], [], []
    warg, wv = [], []
    col = 0
    for a, b in ORDERED_KEYS:
        row_a.append(a)
        row_b.append(b)
        col1.append(col)
        if a == b:
            col2.append(0)
            warg.append(1.0)
            wv.append(0.0)
            col += 1
        else:
            col2.append(col + 1)
            warg.append(0.5)
            wv.append(1.0)
            col += 2
    assert col == NOISE_DIM

    def scatter_plan(rows):
        rows = np.array(rows)
        perm = np.argsort(rows, kind="stable")
        sorted_rows = rows[perm]
        gstart = np.flatnonzero(np.r_[1, np.diff(sorted_rows)])
        return perm, gstart, sorted_rows[gstart]

    return {
        "coeff": np.array(t_coeff),
        "v1": np.array(t_v1, dtype=np.int64),
        "v2": np.array(t_v2, dtype=np.int64),
        "scal": np.array(t_scal), "phase": np.array(t_phase), "starts": starts,
        "starts_ext": np.array(list(starts) + [len(t_coeff)], dtype=np.int64),
        "col1": np.array(col1, dtype=np.int64),
        "col2": np.array(col2, dtype=np.int64),
        "warg": np.array(warg), "wv": np.array(wv),
        "wb": np.array(wv),   # b-side weight: zero for diagonal entries
        "offdiag": np.array([0 if a == b else 1 for a, b in ORDERED_KEYS],
                            dtype=np.int64),
        "row_a": np.array(row_a, dtype=np.int64),
        "row_b": np.array(row_b, dtype=np.int64),
        "scatter_a": scatter_plan(row_a), "scatter_b": scatter_plan(row_b),
    }


_PLAN = _build_plan()


def _entry_values(s, omega_a, p, pm, pp):
    """All 64 coefficients at once, shape (64,) + state tail."""
    tail = s.shape[1:]
    pl = _PLAN
    aug = np.empty((N_VARS + 1,) + tail, dtype=complex)
    aug[:N_VARS] = s
    aug[N_VARS] = 1.0
    scal = np.array([1.0, omega_a, p.omega_b, p.gamma01, p.gamma03,
                     p.gamma12, p.gamma32, p.gamma2, p.g_sq])
    coeff = (pl["coeff"] * scal[pl["scal"]]).reshape((-1,) + (1,) * len(tail))
    pmz = np.asarray(pm, dtype=complex)
    ph = np.stack([np.ones_like(pmz), pmz, np.asarray(pp, dtype=complex)])
    ph = ph[pl["phase"]].reshape(
        (len(pl["phase"]),) + (1,) * (len(tail) - pmz.ndim) + pmz.shape)
    vals = aug[pl["v1"]] * aug[pl["v2"]]
    vals *= coeff
    vals *= ph
    return np.add.reduceat(vals, pl["starts"], axis=0)


def _noise_vector_numpy(s, omega_a, p, pm, pp, xi):
    """Pure-numpy fused sampler; reference for the compiled kernel."""
    pl = _PLAN
    tail = s.shape[1:]
    pad = ((-1,) + (1,) * len(tail))
    dvals = _entry_values(s, omega_a, p, pm, pp)
    roots = np.sqrt(dvals * pl["warg"].reshape(pad))
    u = xi[pl["col1"]]
    v = xi[pl["col2"]] * pl["wv"].reshape(pad)
    plus = roots * (u + 1j * v)
    minus = roots * (u - 1j * v)
    minus *= pl["wb"].reshape(pad)

    f = np.zeros_like(s)
    perm, gstart, urows = pl["scatter_a"]
    f[urows] += np.add.reduceat(plus[perm], gstart, axis=0)
    perm, gstart, urows = pl["scatter_b"]
    f[urows] += np.add.reduceat(minus[perm], gstart, axis=0)
    f *= p.noise_scale
    return f


try:
    import numba as _numba
except ImportError:   # pragma: no cover - numba is an optional speedup
    _numba = None

_KERNEL = None


def _build_kernel():
    """Compile the per-site sampler.  One pass over memory per call.

    The site loop keeps every intermediate in registers; the complex
    square root is expanded into real arithmetic (the stable half-angle
    form) because the libm csqrt call dominates the vectorized path.
    """
    import math

    @_numba.njit(cache=True)
    def kernel(sflat, xit, pref, starts, t_v1, t_v2, col1, col2, offdiag,
               row_a, row_b, warg, scale, out):
        nv, n = sflat.shape
        n_entries = warg.shape[0]
        m_z = pref.shape[1]
        for k in range(n // m_z):
            for z in range(m_z):
                j = k * m_z + z
                for e in range(n_entries):
                    acc = complex(0.0)
                    for t in range(starts[e], starts[e + 1]):
                        x = sflat[t_v1[t], j]
                        v2 = t_v2[t]
                        if v2 < nv:
                            x = x * sflat[v2, j]
                        acc += pref[t, z] * x
                    ar = acc.real * warg[e]
                    ai = acc.imag * warg[e]
                    mag = math.sqrt(ar * ar + ai * ai)
                    if mag == 0.0:
                        rr = 0.0
                        ri = 0.0
                    elif ar >= 0.0:
                        rr = math.sqrt(0.5 * (mag + ar))
                        ri = 0.5 * ai / rr
                    else:
                        ri = math.copysign(math.sqrt(0.5 * (mag - ar)), ai)
                        rr = 0.5 * ai / ri
                    u = xit[j, col1[e]]
                    a = row_a[e]
                    if offdiag[e] == 0:
                        out[a, j] += complex(rr * u * scale, ri * u * scale)
                    else:
                        v = xit[j, col2[e]]
                        b = row_b[e]
                        out[a, j] += complex((rr * u - ri * v) * scale,
                                             (ri * u + rr * v) * scale)
                        out[b, j] += complex((rr * u + ri * v) * scale,
                                             (ri * u - rr * v) * scale)

    return kernel


def _noise_vector_compiled(s, omega_a, p, pm, pp, xi):
    global _KERNEL
    if _KERNEL is None:
        _KERNEL = _build_kernel()
    pl = _PLAN
    tail = s.shape[1:]
    n = int(np.prod(tail, dtype=int))
    pmz = np.atleast_1d(np.asarray(pm, dtype=complex))
    ppz = np.atleast_1d(np.asarray(pp, dtype=complex))
    scal = np.array([1.0, omega_a, p.omega_b, p.gamma01, p.gamma03,
                     p.gamma12, p.gamma32, p.gamma2, p.g_sq])
    coeff = pl["coeff"] * scal[pl["scal"]]
    pref = coeff[:, None] * np.stack([np.ones_like(pmz), pmz, ppz])[pl["phase"]]
    sflat = np.ascontiguousarray(s.reshape(N_VARS, n))
    xit = xi.reshape(NOISE_DIM, n).T
    if not xit.flags.c_contiguous:
        xit = np.ascontiguousarray(xit)
    out = np.zeros_like(sflat)
    _KERNEL(sflat, xit, pref, pl["starts_ext"], pl["v1"], pl["v2"],
            pl["col1"], pl["col2"], pl["offdiag"], pl["row_a"], pl["row_b"],
            pl["warg"], p.noise_scale, out)
    return out.reshape(s.shape)


def noise_vector(s, omega_a, p, pm, pp, xi):
    """Langevin term F = B xi / sqrt(N_c dt dz) for unit normals ``xi``.

    ``xi`` has shape (117,) + state tail and must be drawn once per time
    step; the factor B is re-evaluated at each midpoint iterate while
    the normals stay frozen.  Column k of B consumes xi[k] in the fixed
    ``ORDERED_KEYS`` order, so a trajectory's noise stream is
    reproducible no matter how trajectories are batched.  Dispatches to
    a compiled per-site kernel when numba is importable; tests pin both
    paths against the explicit ``noise_matrix`` product.
    """
    if _numba is not None:
        return _noise_vector_compiled(s, omega_a, p, pm, pp, xi)
    return _noise_vector_numpy(s, omega_a, p, pm, pp, xi)


def _terms_derivative(terms, row):
    """Symbolic d(terms)/d(state row); product rule over occurrences."""
    out = []
    for c, syms in terms:
        for k, sym in enumerate(syms):
            if sym == ("var", row):
                out.append((c, syms[:k] + syms[k + 1:]))
    return tuple(out)


def correction_from_table(s, omega_a, p, pm, pp):
    """Ito -> Stratonovich drift shift recomputed from the noise table.

    For every diagonal entry the row picks up -1/4 d(D_aa)/d(x_a); an
    off-diagonal entry shifts each partner by -1/4 of the derivative
    with respect to the other.  Scaled by the same inverse phase-space
    cell as the noise variance.  This is the oracle against which the
    closed forms in dynamics.stratonovich_correction are tested.
    """
    c = np.zeros_like(s)
    for (a, b), terms in ((k, _TABLE[k]) for k in ORDERED_KEYS):
        if a == b:
            der = _terms_derivative(terms, a)
            if der:
                c[a] -= 0.25 * _eval_terms(der, s, omega_a, p, pm, pp)
        else:
            der_b = _terms_derivative(terms, b)
            if der_b:
                c[a] -= 0.25 * _eval_terms(der_b, s, omega_a, p, pm, pp)
            der_a = _terms_derivative(terms, a)
            if der_a:
                c[b] -= 0.25 * _eval_terms(der_a, s, omega_a, p, pm, pp)
    c *= p.corr_scale
    return c


def trajectory_rng(seed: int, trajectory: int) -> np.random.Generator:
    """Counter-based random stream for one trajectory.

    Keying the Philox generator with (seed, trajectory index) gives
    every trajectory its own reproducible stream, independent of worker
    count and chunking.
    """
    key = np.array([seed, trajectory], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
