"""Command-line front end: run ensembles, verify invariants, sweep density.

Three subcommands.  ``simulate`` integrates a trajectory ensemble for
one configuration and writes every artifact needed to reproduce the
run: a manifest echoing all raw and derived values, the exit-face
intensity series, the two-time correlation grid with its fitting
section, and the superradiant-timescale fit report.  ``check`` runs
the built-in integrity suites and reports machine-readable verdicts.
``sweep`` repeats ``simulate`` over a list of atomic densities,
rescaling the time step with the density-dependent cooperation time,
and collects the fitted timescales into one table.

Reproducibility contract: trajectory ids are split into contiguous
chunks of ``chunk_size`` once, up front, and every chunk owns its
random stream regardless of which worker runs it.  Partial sums are
keyed by chunk id and reduced in sorted order, so the statistics are
bitwise identical for any worker count, and a run resumed from a
checkpoint finishes with exactly the sums of an uninterrupted one.
Exit codes: 0 success, 1 failed check suite or sweep row, 2 bad
configuration, 3 I/O failure, 4 more than 10% of trajectories
discarded by the divergence guard.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import multiprocessing
import os
import sys
import time

import numpy as np

from . import __version__, selfcheck
from .integrator import StepControl, run_trajectories
from .observables import (
    EnsembleAccumulator,
    dicke_reference,
    imaginary_fraction,
    timescale_report,
    write_correlation,
    write_fit_report,
    write_intensities,
)
from .units import (
    ConfigError,
    GridSpec,
    compute_cooperation_scale,
    config_as_dict,
    dimensionless_params,
    load_config,
    optical_depth_label,
)

EXIT_SUITE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DISCARD = 4

CHECKPOINT_NAME = "checkpoint.npz"
STATS_NAME = "stepper_stats.json"
DISCARD_LIMIT = 0.10


# -- ensemble orchestration -------------------------------------------


def chunk_ranges(n_traj: int, chunk_size: int) -> list[tuple[int, int, int]]:
    """Static partition of trajectory ids into contiguous chunks."""
    n_chunks = (n_traj + chunk_size - 1) // chunk_size
    return [(cid, cid * chunk_size, min((cid + 1) * chunk_size, n_traj))
            for cid in range(n_chunks)]


def _chunk_job(args):
    """Worker body: integrate one chunk of trajectories."""
    p, ctrl, seed, cid, lo, hi = args
    result = run_trajectories(p, ctrl, seed, range(lo, hi))
    return cid, (lo, hi), result


def _load_stats(path: str) -> dict:
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _save_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _run_ensemble(p, run, out_dir: str):
    """Integrate all pending chunks, checkpointing as requested.

    Returns (accumulator, per-chunk stepper stats, resumed chunk count).
    A checkpoint left in ``out_dir`` by an interrupted run is picked up
    automatically; mismatched grids or partitions are refused rather
    than silently merged.
    """
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    stats_path = os.path.join(out_dir, STATS_NAME)

    acc = EnsembleAccumulator.from_params(p)
    stats: dict = {}
    resumed = 0
    if os.path.exists(ckpt_path):
        stored = EnsembleAccumulator.load(ckpt_path)
        if (stored.t_ns.shape != acc.t_ns.shape
                or not np.array_equal(stored.t_ns, acc.t_ns)
                or stored.di_ds_sq != acc.di_ds_sq):
            raise ConfigError(
                f"checkpoint {ckpt_path} was written for a different grid "
                "or unit system; move it aside or change --out")
        acc = stored
        stats = _load_stats(stats_path)
        resumed = len(acc.chunk_ids)

    chunks = chunk_ranges(run.trajectories, run.chunk_size)
    spans = {cid: (lo, hi) for cid, lo, hi in chunks}
    for cid in acc.chunk_ids:
        rec = stats.get(str(cid))
        want = spans.get(cid)
        if want is None:
            raise ConfigError(
                f"checkpoint holds chunk {cid} outside the requested "
                f"ensemble of {run.trajectories} trajectories")
        if rec is not None and (rec["lo"], rec["hi"]) != want:
            raise ConfigError(
                f"checkpoint chunk {cid} covers ids {rec['lo']}..{rec['hi']} "
                f"but the current partition expects {want[0]}..{want[1]}; "
                "seed/chunk_size must match the original run")

    have = set(acc.chunk_ids)
    pending = [(cid, lo, hi) for cid, lo, hi in chunks if cid not in have]
    ctrl = StepControl.from_run(run)
    jobs = [(p, ctrl, run.seed, cid, lo, hi) for cid, lo, hi in pending]

    since_snapshot = 0

    def harvest(cid, span, result):
        nonlocal since_snapshot
        acc.add_chunk(cid, result)
        stats[str(cid)] = {
            "lo": span[0], "hi": span[1],
            "iterations": result.iteration_counts.tolist(),
            "stalled": int(result.stalled_steps),
            "failed": int(result.failed_steps),
        }
        since_snapshot += span[1] - span[0]
        if run.checkpoint_every and since_snapshot >= run.checkpoint_every:
            acc.save(ckpt_path)
            _save_json(stats_path, stats)
            since_snapshot = 0

    if run.workers == 1 or len(jobs) <= 1:
        for job in jobs:
            harvest(*_chunk_job(job))
    else:
        with multiprocessing.Pool(processes=run.workers) as pool:
            for cid, span, result in pool.imap_unordered(_chunk_job, jobs):
                harvest(cid, span, result)

    if run.checkpoint_every and (pending or not os.path.exists(ckpt_path)):
        acc.save(ckpt_path)
        _save_json(stats_path, stats)
    return acc, stats, resumed


def _aggregate_stats(stats: dict) -> dict:
    hist = None
    stalled = 0
    failed = 0
    for rec in stats.values():
        arr = np.asarray(rec["iterations"], dtype=np.int64)
        hist = arr if hist is None else hist + arr
        stalled += rec["stalled"]
        failed += rec["failed"]
    return {
        "iteration_histogram": hist.tolist() if hist is not None else [],
        "stalled_steps": stalled,
        "failed_steps": failed,
    }


# -- artifact assembly -------------------------------------------------


def _derived_block(cfg, p) -> dict:
    scale = p.scale
    g03 = cfg.gamma03_per_s
    block = {
        "cooperation_time_ns": scale.t_c_ns,
        "cooperation_length_m": scale.l_c_m,
        "characteristic_field_v_per_m": scale.e_c_v_per_m,
        "atom_number": scale.n_atoms,
        "cooperation_number": scale.n_coop,
        "optical_depth": optical_depth_label(cfg),
        "idler_dipole_cm": cfg.dipole_cm,
        # (d_i/hbar) E_c equals 1/T_c by construction; the half-Rabi
        # convention Omega = d E / (2 hbar) is listed alongside since
        # that is the figure usually quoted for drive strengths
        "rabi_of_e_c_per_s": scale.rabi_of_e_c_per_s,
        "rabi_of_e_c_in_gamma03": scale.rabi_of_e_c_per_s / g03,
        "half_rabi_of_e_c_in_gamma03": 0.5 * scale.rabi_of_e_c_per_s / g03,
        "grid_time_span_ns": float(p.t_ns[-1]),
        "pump_window_tc": [p.pump_on, p.pump_off],
    }
    if cfg.n_mu is not None:
        block["dicke_timescale_ns"] = dicke_reference(g03, cfg.n_mu)
    return block


def _write_run_artifacts(out_dir, cfg, grid, run, p, acc, stats, wall_s,
                         config_label, resumed) -> tuple[int, dict]:
    """Write manifest plus statistics artifacts; returns (exit code, manifest)."""
    manifest = {
        "tool": {"name": "cascadesim", "version": __version__},
        "config_file": config_label,
        "config": config_as_dict(cfg, grid, run),
        "derived": _derived_block(cfg, p),
        "seed": run.seed,
        "trajectories": {
            "requested": run.trajectories,
            "completed": acc.completed,
            "discarded": acc.discarded,
            "resumed_chunks": resumed,
        },
        "stepper": dict(_aggregate_stats(stats), policy={
            "midpoint_tol": run.midpoint_tol,
            "midpoint_max_iter": run.midpoint_max_iter,
            "divergence_guard": run.divergence_guard,
        }),
        "wall_time_s": wall_s,
        "artifacts": {},
    }

    if acc.completed > 0:
        series = acc.intensities()
        intens_path = os.path.join(out_dir, "intensities.txt")
        write_intensities(intens_path, series)
        manifest["artifacts"]["intensities"] = os.path.basename(intens_path)

        corr = acc.correlation()
        write_correlation(out_dir, corr)
        manifest["artifacts"]["correlation"] = [
            "correlation.npy", "correlation_header.txt",
            "correlation_section.txt"]

        try:
            report = timescale_report(corr)
        except ValueError as exc:
            report = {"error": str(exc), "t_m_ns": corr.t_m_ns,
                      "trajectories": corr.trajectories}
        if cfg.n_mu is not None:
            report["dicke_timescale_ns"] = dicke_reference(
                cfg.gamma03_per_s, cfg.n_mu)
        fit_path = os.path.join(out_dir, "fit_report.json")
        write_fit_report(fit_path, report)
        manifest["artifacts"]["fit_report"] = os.path.basename(fit_path)

        manifest["results"] = {
            "t_m_ns": corr.t_m_ns,
            "peak_signal_intensity": float(np.max(series.signal.real)),
            "idler_imaginary_fraction": float(imaginary_fraction(series.idler)),
            "timescale": report,
        }

    total = acc.completed + acc.discarded
    code = 0
    if total and acc.discarded > DISCARD_LIMIT * total:
        manifest["diagnostic"] = (
            f"{acc.discarded} of {total} trajectories hit the divergence "
            f"guard ({acc.discarded / total:.1%} > {DISCARD_LIMIT:.0%}); "
            "statistics are written but should not be trusted. Reduce the "
            "time step or raise divergence_guard only with care.")
        code = EXIT_DISCARD

    _save_json(os.path.join(out_dir, "manifest.json"), manifest)
    return code, manifest


def _simulate_core(cfg, grid, run, out_dir, config_label) -> tuple[int, dict]:
    """Shared body of ``simulate`` and each ``sweep`` density."""
    t0 = time.monotonic()
    p = dimensionless_params(cfg, grid)
    os.makedirs(out_dir, exist_ok=True)
    acc, stats, resumed = _run_ensemble(p, run, out_dir)
    wall = time.monotonic() - t0
    code, manifest = _write_run_artifacts(
        out_dir, cfg, grid, run, p, acc, stats, wall, config_label, resumed)
    if code == EXIT_DISCARD:
        print(manifest["diagnostic"], file=sys.stderr)
    return code, manifest


# -- subcommands --------------------------------------------------------


def _apply_run_overrides(run, ns):
    changes = {}
    for attr, flag in (("trajectories", "trajectories"), ("seed", "seed"),
                       ("workers", "workers"),
                       ("checkpoint_every", "checkpoint_every"),
                       ("chunk_size", "chunk_size")):
        value = getattr(ns, flag, None)
        if value is not None:
            changes[attr] = value
    return dataclasses.replace(run, **changes) if changes else run


def cmd_simulate(ns) -> int:
    cfg, grid, run = load_config(ns.config)
    run = _apply_run_overrides(run, ns)
    code, manifest = _simulate_core(cfg, grid, run, ns.out,
                                    os.path.abspath(ns.config))
    done = manifest["trajectories"]["completed"]
    print(f"completed {done} trajectories "
          f"({manifest['trajectories']['discarded']} discarded) "
          f"in {manifest['wall_time_s']:.1f} s; artifacts in {ns.out}")
    return code


def cmd_check(ns) -> int:
    results = selfcheck.run_suites()
    for record in results:
        print(json.dumps(record, sort_keys=True))
    return 0 if all(r["passed"] for r in results) else EXIT_SUITE


def _parse_float_list(text: str, label: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad {label} list: {exc}") from None
    if not values:
        raise ConfigError(f"{label} list is empty")
    return values


def cmd_sweep(ns) -> int:
    cfg, grid, run = load_config(ns.config)
    run = _apply_run_overrides(run, ns)
    densities = _parse_float_list(ns.densities, "density")
    n_mu_list = None
    if ns.n_mu is not None:
        n_mu_list = _parse_float_list(ns.n_mu, "n_mu")
        if len(n_mu_list) != len(densities):
            raise ConfigError("--n-mu must list one value per density")

    os.makedirs(ns.out, exist_ok=True)
    t_c_ref = compute_cooperation_scale(cfg).t_c_s

    rows = []
    any_failed = False
    for k, rho in enumerate(densities):
        if n_mu_list is not None:
            n_mu = n_mu_list[k]
        elif rho == cfg.density_cm3:
            n_mu = cfg.n_mu
        else:
            n_mu = None
        cfg_k = dataclasses.replace(cfg, density_cm3=rho, n_mu=n_mu)
        opd = optical_depth_label(cfg_k)
        row = {"density_cm3": rho, "optical_depth": opd,
               "t_f_ns": math.nan, "ci_lo_ns": math.nan,
               "ci_hi_ns": math.nan, "t_1_ns": math.nan, "status": "ok"}
        try:
            # hold the grid fixed in cooperation units while the unit of
            # time shrinks with sqrt(density): same node count, same
            # laboratory time span, coarser dimensionless step
            t_c_k = compute_cooperation_scale(cfg_k).t_c_s
            grid_k = GridSpec(m_t=grid.m_t, m_z=grid.m_z,
                              dt=grid.dt * t_c_ref / t_c_k,
                              pump_edges=grid.pump_edges)
            sub = os.path.join(ns.out, f"density_{rho:.4g}")
            code, manifest = _simulate_core(cfg_k, grid_k, run, sub,
                                            os.path.abspath(ns.config))
            report = manifest.get("results", {}).get("timescale", {})
            if code == EXIT_DISCARD:
                row["status"] = "discard-limit"
                any_failed = True
            if "error" in report:
                row["status"] = f"fit-failed: {report['error']}"
                any_failed = True
            else:
                row["t_f_ns"] = report.get("t_f_ns", math.nan)
                bar = report.get("error_bar_ns", [math.nan, math.nan])
                row["ci_lo_ns"], row["ci_hi_ns"] = bar
            if n_mu is not None:
                row["t_1_ns"] = dicke_reference(cfg_k.gamma03_per_s, n_mu)
        except Exception as exc:
            row["status"] = f"failed: {exc}"
            any_failed = True
        rows.append(row)

    table_path = os.path.join(ns.out, "timescales.txt")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("# density_cm3 optical_depth t_f_ns ci_lo_ns ci_hi_ns "
                 "t_1_ns status\n")
        for row in rows:
            fh.write(f"{row['density_cm3']:.6e} {row['optical_depth']:.6g} "
                     f"{row['t_f_ns']:.6g} {row['ci_lo_ns']:.6g} "
                     f"{row['ci_hi_ns']:.6g} {row['t_1_ns']:.6g} "
                     f"{row['status']}\n")
    _save_json(os.path.join(ns.out, "timescales.json"), {"rows": rows})
    for row in rows:
        print(f"density {row['density_cm3']:.3e} cm^-3: opd "
              f"{row['optical_depth']:.3g}, T_f {row['t_f_ns']:.3g} ns "
              f"[{row['status']}]")
    return EXIT_SUITE if any_failed else 0


# -- argument parsing ----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadesim",
        description="Stochastic simulator of correlated signal-idler "
                    "superradiance from a four-level cascade ensemble.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one trajectory ensemble")
    sim.add_argument("config", help="key = value configuration file")
    sim.add_argument("-R", "--trajectories", type=int, default=None,
                     help="override the configured ensemble size")
    sim.add_argument("--seed", type=int, default=None,
                     help="override the configured random seed")
    sim.add_argument("-W", "--workers", type=int, default=None,
                     help="worker processes (statistics are identical "
                          "for any value)")
    sim.add_argument("--out", default="run_output",
                     help="output directory (created if missing)")
    sim.add_argument("--checkpoint-every", dest="checkpoint_every",
                     type=int, default=None,
                     help="trajectories between accumulator snapshots; "
                          "0 disables")
    sim.add_argument("--chunk-size", dest="chunk_size", type=int,
                     default=None,
                     help="trajectories per work unit (fixes the "
                          "reduction order; keep it stable across resumes)")
    sim.set_defaults(func=cmd_simulate)

    chk = sub.add_parser("check", help="run the built-in integrity suites")
    chk.set_defaults(func=cmd_check)

    swp = sub.add_parser("sweep", help="repeat the run over densities")
    swp.add_argument("config", help="key = value configuration file")
    swp.add_argument("--densities", required=True,
                     help="comma-separated densities in cm^-3")
    swp.add_argument("--n-mu", dest="n_mu", default=None,
                     help="comma-separated enhancement factors, one per "
                          "density (enables the reference timescale column)")
    swp.add_argument("-R", "--trajectories", type=int, default=None)
    swp.add_argument("--seed", type=int, default=None)
    swp.add_argument("-W", "--workers", type=int, default=None)
    swp.add_argument("--out", default="sweep_output")
    swp.add_argument("--checkpoint-every", dest="checkpoint_every",
                     type=int, default=None)
    swp.add_argument("--chunk-size", dest="chunk_size", type=int,
                     default=None)
    swp.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
