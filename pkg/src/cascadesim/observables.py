"""Ensemble averaging and derived quantities.

Per-trajectory products arrive from the integrator as time series; this
module owns their reduction to ensemble means, the causal two-time
signal-idler correlation, exponential-timescale fits, and the artifact
writers.  Averages are kept as per-chunk partial sums so that runs can
be checkpointed, resumed, and distributed over workers while the final
reduction stays bitwise identical: chunk sums are added in sorted chunk
order with compensated summation no matter how the work was scheduled.

All complex means retain their imaginary parts; a positive-P average is
only physical in the ensemble limit and the residual imaginary part is
the standard convergence diagnostic.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

__all__ = [
    "EnsembleAccumulator", "IntensitySeries", "PopulationSeries",
    "CorrelationGrid", "FitResult", "fit_timescale", "timescale_report",
    "dicke_reference", "imaginary_fraction", "modulation_frequency",
    "write_intensities", "write_correlation", "write_fit_report",
]


def _kahan(arrays):
    """Compensated sum of equal-shaped arrays, in the order given."""
    total = np.zeros_like(arrays[0])
    carry = np.zeros_like(arrays[0])
    for a in arrays:
        y = a - carry
        t = total + y
        carry = (t - total) - y
        total = t
    return total


@dataclass
class _ChunkSums:
    """Partial sums over the surviving trajectories of one chunk."""

    n_ok: int
    n_discarded: int
    sig: np.ndarray        # (m_t,) complex
    idl: np.ndarray        # (m_t,) complex
    outer: np.ndarray      # (m_t, m_t) complex, signal time x idler time
    pops: np.ndarray       # (3, 2, m_t) complex, levels x faces
    sq: np.ndarray         # (2, 2, m_t) real: (sig, idl) x (re, im) squares


class EnsembleAccumulator:
    """Mergeable ensemble statistics keyed by chunk id.

    Chunks are disjoint groups of trajectory ids (the unit of scheduling
    and checkpointing).  Two accumulators over disjoint chunk sets merge
    exactly; reduction order is fixed by the chunk ids, never by worker
    timing.
    """

    def __init__(self, t_ns: np.ndarray, di_ds_sq: float):
        self.t_ns = np.asarray(t_ns, dtype=float)
        self.di_ds_sq = float(di_ds_sq)
        self._chunks: dict[int, _ChunkSums] = {}

    @classmethod
    def from_params(cls, p) -> "EnsembleAccumulator":
        return cls(p.t_ns, p.di_ds_sq)

    # -- ingestion ----------------------------------------------------

    def add_chunk(self, chunk_id: int, result) -> None:
        """Fold one integrator batch in; guard-tripped paths are dropped."""
        cid = int(chunk_id)
        if cid in self._chunks:
            raise ValueError(f"chunk {cid} already accumulated")
        ok = result.ok
        sig = result.signal_product[ok]
        idl = result.idler_product[ok]
        pops = result.populations[ok]
        sq = np.stack([
            np.stack([(sig.real ** 2).sum(0), (sig.imag ** 2).sum(0)]),
            np.stack([(idl.real ** 2).sum(0), (idl.imag ** 2).sum(0)]),
        ])
        self._chunks[cid] = _ChunkSums(
            n_ok=int(ok.sum()),
            n_discarded=int((~ok).sum()),
            sig=sig.sum(axis=0),
            idl=idl.sum(axis=0),
            outer=np.einsum("ks,ki->si", sig, idl),
            pops=pops.sum(axis=0),
            sq=sq,
        )

    def merge(self, other: "EnsembleAccumulator") -> "EnsembleAccumulator":
        """Disjoint union of two partial ensembles (exact)."""
        if not np.array_equal(self.t_ns, other.t_ns) or self.di_ds_sq != other.di_ds_sq:
            raise ValueError("accumulators describe different runs")
        overlap = self._chunks.keys() & other._chunks.keys()
        if overlap:
            raise ValueError(f"chunk ids overlap: {sorted(overlap)}")
        out = EnsembleAccumulator(self.t_ns, self.di_ds_sq)
        out._chunks = {**self._chunks, **other._chunks}
        return out

    # -- bookkeeping ---------------------------------------------------

    @property
    def chunk_ids(self) -> list:
        return sorted(self._chunks)

    @property
    def completed(self) -> int:
        return sum(c.n_ok for c in self._chunks.values())

    @property
    def discarded(self) -> int:
        return sum(c.n_discarded for c in self._chunks.values())

    def _total(self, attr: str) -> np.ndarray:
        parts = [getattr(self._chunks[cid], attr) for cid in self.chunk_ids]
        return _kahan(parts)

    # -- derived quantities -------------------------------------------

    def intensities(self) -> "IntensitySeries":
        n = self.completed
        if n < 1:
            raise ValueError("no completed trajectories")
        mean_s = self._total("sig") / n * self.di_ds_sq
        mean_i = self._total("idl") / n
        sq = self._total("sq") / n
        raw = np.stack([self._total("sig"), self._total("idl")]) / n
        var = np.empty((2, 2, self.t_ns.size))
        var[0, 0] = sq[0, 0] - raw[0].real ** 2
        var[0, 1] = sq[0, 1] - raw[0].imag ** 2
        var[1, 0] = sq[1, 0] - raw[1].real ** 2
        var[1, 1] = sq[1, 1] - raw[1].imag ** 2
        se = np.sqrt(np.maximum(var, 0.0) / n)
        se[0] *= self.di_ds_sq
        return IntensitySeries(
            t_ns=self.t_ns, signal=mean_s, idler=mean_i,
            signal_se=(se[0, 0], se[0, 1]), idler_se=(se[1, 0], se[1, 1]),
            trajectories=n)

    def populations(self) -> "PopulationSeries":
        n = self.completed
        if n < 1:
            raise ValueError("no completed trajectories")
        mean = self._total("pops") / n
        return PopulationSeries(t_ns=self.t_ns, front=mean[:, 0], back=mean[:, 1],
                                trajectories=n)

    def correlation(self) -> "CorrelationGrid":
        """Causal two-time correlation and its fitting section.

        The grid is the ensemble mean of (signal product at t_s) times
        (idler product at t_i); entries below the causal diagonal
        t_i >= t_s are never emitted.  The section runs along the idler
        delay from the diagonal maximum.
        """
        n = self.completed
        if n < 1:
            raise ValueError("no completed trajectories")
        grid = self._total("outer") / n * self.di_ds_sq
        grid = np.triu(grid)
        diag = np.real(np.diagonal(grid))
        i_m = int(np.argmax(diag))
        section = grid[i_m, i_m:].copy()
        peak = np.abs(section.real).max()
        normalized = section.real / (peak if peak > 0 else 1.0)
        return CorrelationGrid(
            t_ns=self.t_ns, grid=grid, t_m_index=i_m,
            t_m_ns=float(self.t_ns[i_m]),
            tau_ns=self.t_ns[i_m:] - self.t_ns[i_m],
            section=section, section_normalized=normalized,
            trajectories=n)

    # -- persistence ----------------------------------------------------

    def save(self, path: str) -> None:
        """Atomic snapshot of every chunk's partial sums."""
        ids = self.chunk_ids
        payload = {
            "t_ns": self.t_ns,
            "di_ds_sq": np.float64(self.di_ds_sq),
            "ids": np.asarray(ids, dtype=np.int64),
            "n_ok": np.asarray([self._chunks[i].n_ok for i in ids], dtype=np.int64),
            "n_disc": np.asarray([self._chunks[i].n_discarded for i in ids], dtype=np.int64),
            "sig": np.stack([self._chunks[i].sig for i in ids]) if ids else np.zeros((0, self.t_ns.size), complex),
            "idl": np.stack([self._chunks[i].idl for i in ids]) if ids else np.zeros((0, self.t_ns.size), complex),
            "outer": np.stack([self._chunks[i].outer for i in ids]) if ids else np.zeros((0, self.t_ns.size, self.t_ns.size), complex),
            "pops": np.stack([self._chunks[i].pops for i in ids]) if ids else np.zeros((0, 3, 2, self.t_ns.size), complex),
            "sq": np.stack([self._chunks[i].sq for i in ids]) if ids else np.zeros((0, 2, 2, self.t_ns.size)),
        }
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            np.savez_compressed(fh, **payload)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "EnsembleAccumulator":
        with np.load(path) as data:
            acc = cls(data["t_ns"], float(data["di_ds_sq"]))
            for k, cid in enumerate(data["ids"]):
                acc._chunks[int(cid)] = _ChunkSums(
                    n_ok=int(data["n_ok"][k]),
                    n_discarded=int(data["n_disc"][k]),
                    sig=data["sig"][k], idl=data["idl"][k],
                    outer=data["outer"][k], pops=data["pops"][k],
                    sq=data["sq"][k],
                )
        return acc


@dataclass
class IntensitySeries:
    """Ensemble-mean exit intensities in characteristic-field units."""

    t_ns: np.ndarray
    signal: np.ndarray            # complex mean, (d_i/d_s)^2 factor applied
    idler: np.ndarray
    signal_se: tuple              # (SE of real part, SE of imaginary part)
    idler_se: tuple
    trajectories: int


@dataclass
class PopulationSeries:
    """Level occupations at the entrance and exit faces."""

    t_ns: np.ndarray
    front: np.ndarray             # (3, m_t) at z = 0
    back: np.ndarray              # (3, m_t) at z = L
    trajectories: int


@dataclass
class CorrelationGrid:
    """Causal two-time correlation with its delay section."""

    t_ns: np.ndarray
    grid: np.ndarray              # (m_t, m_t), zero below the diagonal
    t_m_index: int
    t_m_ns: float
    tau_ns: np.ndarray
    section: np.ndarray           # complex values along the delay axis
    section_normalized: np.ndarray
    trajectories: int


@dataclass
class FitResult:
    """Exponential timescale from a log-linear least-squares fit."""

    t_f_ns: float
    ci_ns: tuple                  # 95% confidence interval (lo, hi)
    window_frac: tuple            # (1.0, floor) fraction-of-peak window
    window_ns: tuple              # (start, end) delay of the fitted points
    n_points: int
    flagged: bool                 # window shrunk around non-positive data
    t_m_ns: float = float("nan")


def fit_timescale(tau_ns: np.ndarray, values: np.ndarray,
                  floor_frac: float = 0.05,
                  t_m_ns: float = float("nan")) -> FitResult:
    """Fit exp(-tau/T) to the real part between the peak and a floor.

    The window starts at the maximum of the real part and extends until
    the data first drop below ``floor_frac`` of that peak.  Non-positive
    samples inside the window truncate it (logs would be undefined) and
    flag the result.  The confidence interval comes from the t
    distribution of the fitted slope; noiseless input gives a
    zero-width interval.
    """
    y = np.asarray(values).real
    tau = np.asarray(tau_ns, dtype=float)
    if y.size < 3:
        raise ValueError("need at least three samples to fit")
    start = int(np.argmax(y))
    peak = y[start]
    if peak <= 0:
        raise ValueError("section has no positive peak")
    floor = floor_frac * peak
    stop = start
    flagged = False
    for k in range(start, y.size):
        if y[k] <= 0.0:
            flagged = True
            break
        stop = k
        if y[k] <= floor:
            break
    sel = slice(start, stop + 1)
    n = stop + 1 - start
    if n < 3:
        raise ValueError("fit window shrank below three samples")
    x = tau[sel]
    ly = np.log(y[sel])
    slope, intercept = np.polyfit(x, ly, 1)
    resid = ly - (slope * x + intercept)
    dof = n - 2
    sxx = np.sum((x - x.mean()) ** 2)
    if dof > 0 and resid.any():
        se = np.sqrt(resid @ resid / dof / sxx)
        half = stats.t.ppf(0.975, dof) * se
    else:
        half = 0.0
    if slope >= 0:
        raise ValueError("section does not decay over the fit window")
    t_f = -1.0 / slope
    lo = -1.0 / (slope - half)   # shallower slope bound -> longer time
    hi = -1.0 / (slope + half) if slope + half < 0 else float("inf")
    return FitResult(
        t_f_ns=float(t_f), ci_ns=(float(min(lo, hi)), float(max(lo, hi))),
        window_frac=(1.0, floor_frac), window_ns=(float(x[0]), float(x[-1])),
        n_points=int(n), flagged=flagged, t_m_ns=float(t_m_ns))


def timescale_report(corr: CorrelationGrid) -> dict:
    """Primary 5%-floor fit plus the 25%-floor sensitivity variant.

    The reported error bar is the envelope of the two confidence
    intervals, so it covers both the statistical slope uncertainty and
    the window-choice sensitivity.
    """
    primary = fit_timescale(corr.tau_ns, corr.section, 0.05, corr.t_m_ns)
    shallow = fit_timescale(corr.tau_ns, corr.section, 0.25, corr.t_m_ns)
    bar = (min(primary.ci_ns[0], shallow.ci_ns[0]),
           max(primary.ci_ns[1], shallow.ci_ns[1]))
    return {
        "t_f_ns": primary.t_f_ns,
        "ci_ns": list(primary.ci_ns),
        "window_frac": list(primary.window_frac),
        "window_ns": list(primary.window_ns),
        "n_points": primary.n_points,
        "flagged": primary.flagged,
        "t_m_ns": corr.t_m_ns,
        "sensitivity_t_f_ns": shallow.t_f_ns,
        "sensitivity_ci_ns": list(shallow.ci_ns),
        "error_bar_ns": list(bar),
        "trajectories": corr.trajectories,
    }


def dicke_reference(gamma03_per_s: float, n_mu: float) -> float:
    """Ideal single-pulse superradiance timescale, in ns."""
    if n_mu < 0:
        raise ValueError("enhancement factor must be non-negative")
    return 1e9 / (gamma03_per_s * (n_mu + 1.0))


def imaginary_fraction(series: np.ndarray) -> float:
    """Convergence diagnostic: peak imaginary part over peak real part."""
    series = np.asarray(series)
    denom = np.abs(series.real).max()
    if denom == 0:
        return 0.0
    return float(np.abs(series.imag).max() / denom)


def modulation_frequency(t_ns: np.ndarray, values: np.ndarray,
                         start_ns: float) -> tuple:
    """Dominant oscillation of a decaying series after ``start_ns``.

    Detrends the log of the real part with a quadratic (the decay
    backbone need not be a pure exponential), then reads the peak of
    the residual spectrum.  Returns (angular frequency, spectral bin
    width) in rad/ns.
    """
    t = np.asarray(t_ns, dtype=float)
    y = np.asarray(values).real
    sel = (t >= start_ns) & (y > 0)
    if sel.sum() < 8:
        raise ValueError("too few positive samples after the start time")
    ts, ys = t[sel], np.log(y[sel])
    resid = ys - np.polyval(np.polyfit(ts, ys, 2), ts)
    resid -= resid.mean()
    spec = np.abs(np.fft.rfft(resid))
    dt = ts[1] - ts[0]
    freqs = 2.0 * np.pi * np.fft.rfftfreq(resid.size, dt)
    k = 1 + int(np.argmax(spec[1:]))   # skip the DC bin
    return float(freqs[k]), float(freqs[1])


# ---------------------------------------------------------------------------
# artifact writers


def write_intensities(path: str, series: IntensitySeries) -> None:
    """Delimited text: time and both complex intensities with errors."""
    cols = np.column_stack([
        series.t_ns,
        series.signal.real, series.signal.imag,
        series.idler.real, series.idler.imag,
        series.signal_se[0], series.signal_se[1],
        series.idler_se[0], series.idler_se[1],
    ])
    header = ("ensemble intensities over %d trajectories\n"
              "t_ns re_signal im_signal re_idler im_idler "
              "se_re_signal se_im_signal se_re_idler se_im_idler"
              % series.trajectories)
    np.savetxt(path, cols, header=header)


def write_correlation(out_dir: str, corr: CorrelationGrid,
                      stem: str = "correlation") -> None:
    """Binary grid plus a text header and the delay section."""
    np.save(os.path.join(out_dir, stem + ".npy"), corr.grid)
    dt = corr.t_ns[1] - corr.t_ns[0] if corr.t_ns.size > 1 else 0.0
    with open(os.path.join(out_dir, stem + "_header.txt"), "w") as fh:
        fh.write("rows %d\ncols %d\ndt_ns %.12g\nt0_ns %.12g\n"
                 "t_m_ns %.12g\ntrajectories %d\n"
                 "layout upper-triangular signal-time x idler-time\n"
                 % (corr.grid.shape[0], corr.grid.shape[1], dt,
                    corr.t_ns[0], corr.t_m_ns, corr.trajectories))
    cols = np.column_stack([corr.tau_ns, corr.section.real,
                            corr.section.imag, corr.section_normalized])
    np.savetxt(os.path.join(out_dir, stem + "_section.txt"), cols,
               header="tau_ns re im normalized_re")


def write_fit_report(path: str, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
