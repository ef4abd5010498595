"""Run orchestration behind the command line: fresh runs, resumption,
post-hoc transport diagnostics and the asymptotic-profile computation."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import VelocityHistory, profile_image, rho_infinity
from .config import RunConfig, parse_config
from .coupling import SimState, initial_state, run
from .diagnostics import fit_decay_rate
from .particles import ParticleEnsemble, deposit, estimate_Nq, wrap
from .storage import (
    SnapshotStore,
    atomic_write,
    checkpoint,
    emit_series,
    read_series,
    restore,
    series_columns,
    write_charts,
)
from .transport import (
    MAX_EXACT_BINS,
    Histogram,
    jabin_cauchy_bound,
    w1_entropic,
    w1_exact,
)

__all__ = ["run_config", "resume_run", "diag_run", "profile_run", "RunOutcome"]

log = logging.getLogger(__name__)


class RunOutcome:
    """What a run left on disk, plus the in-memory final state and records."""

    def __init__(self, out_dir: Path, state: SimState, records: list, wall: float):
        self.out_dir = out_dir
        self.state = state
        self.records = records
        self.wall = wall

    @property
    def series_path(self) -> Path:
        return self.out_dir / "series.csv"


def _provenance() -> dict:
    import scipy

    return {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
        # Every kernel here is single-threaded numpy; the value is recorded so
        # the determinism contract (config + seed + threads) is checkable.
        "threads": int(os.environ.get("OMP_NUM_THREADS", "1")),
    }


def _want_field_snapshot(cfg: RunConfig, state: SimState, n_final: int) -> bool:
    dense = state.t <= cfg["io.snapshot_dense_until"] + 1e-12
    return dense or state.step % cfg["io.snapshot_every"] == 0 or state.step == n_final


def _drive(cfg: RunConfig, state: SimState, out: Path, ens_meta: dict, prior: list,
           record_initial: bool) -> RunOutcome:
    store = SnapshotStore(out)
    store.truncate(state.step)
    n_final = int(round(cfg["time.t_final"] / cfg["time.dt"]))
    text = cfg.to_text()
    ck_every = cfg["io.checkpoint_every"]

    def on_step(s: SimState) -> None:
        if _want_field_snapshot(cfg, s, n_final):
            store.add_field(s.step, s.t, s.u)
        if s.step % cfg["io.density_every"] == 0 or s.step == n_final:
            store.add_particles(s.step, s.t, s.particles)
        if ck_every and s.step % ck_every == 0 and s.step != n_final:
            checkpoint(s, out / "checkpoints" / f"ckpt_{s.step:08d}.bin", text, ens_meta)

    t0 = time.perf_counter()
    final, records = run(state, cfg["time.t_final"], cfg.monitor, cfg["time.scheme"], cfg["time.cfl"],
                         on_step=on_step, record_initial=record_initial)
    wall = time.perf_counter() - t0
    records = prior + records
    d = cfg["grid.d"]
    emit_series(records, d, out / "series.csv")
    checkpoint(final, out / "checkpoint.bin", text, ens_meta)
    stride = cfg["io.particle_csv_stride"]
    if stride:
        atomic_write(out / "particles_final.csv", final.particles.to_csv(stride))
    if cfg["io.svg"]:
        write_charts(records, out / "charts")
    return RunOutcome(out, final, records, wall)


def run_config(cfg: RunConfig, out_dir=None) -> RunOutcome:
    """Fresh run from a validated configuration.

    Writes ``effective.cfg``, ``meta.json``, ``series.csv``, ``checkpoint.bin``,
    the initial ensemble, snapshots and charts into the output directory.
    """
    out = Path(out_dir or cfg["io.out"])
    out.mkdir(parents=True, exist_ok=True)
    spec, grid = cfg.init, cfg.grid
    state, meta = initial_state(spec, grid, cfg["time.dt"], cfg["particles.per_cell"], cfg["particles.nv"],
                                cfg.vmax)
    ens_meta = {"q": float(spec.q), "seed": int(spec.seed), "vmax": float(meta["vmax"]),
                "discarded_mass": float(meta["discarded_mass"]), "nv": int(meta["nv"]),
                "per_cell": int(meta["per_cell"]), "N": int(state.particles.N)}
    atomic_write(out / "effective.cfg", cfg.to_text())
    checkpoint(state, out / "initial.bin", cfg.to_text(), ens_meta)
    meta_doc = {"ensemble": ens_meta, "N_q_estimate": estimate_Nq(spec), "provenance": _provenance()}
    atomic_write(out / "meta.json", json.dumps(meta_doc, indent=2, sort_keys=True))
    outcome = _drive(cfg, state, out, ens_meta, [], record_initial=True)
    meta_doc["wall_seconds"] = outcome.wall
    meta_doc["steps"] = outcome.state.step
    atomic_write(out / "meta.json", json.dumps(meta_doc, indent=2, sort_keys=True))
    return outcome


def resume_run(checkpoint_path, out_dir=None, t_final: float | None = None) -> RunOutcome:
    """Continue from a checkpoint to the configured (or given) final time.

    Earlier series rows found in the output directory are kept up to the
    checkpoint step, so the file ends up identical to an uninterrupted run.
    """
    checkpoint_path = Path(checkpoint_path)
    state, header = restore(checkpoint_path)
    cfg = parse_config(header["config"])
    if t_final is not None:
        cfg = parse_config(cfg.with_values(time__t_final=float(t_final)).to_text())
    out = Path(out_dir) if out_dir else checkpoint_path.parent
    if out.name == "checkpoints" and not out_dir:
        out = out.parent
    out.mkdir(parents=True, exist_ok=True)
    prior = []
    if (out / "series.csv").exists():
        prior = [r for r in read_series(out / "series.csv") if r.step <= state.step]
    atomic_write(out / "effective.cfg", cfg.to_text())
    return _drive(cfg, state, out, header["ensemble"], prior, record_initial=not prior)


# -- diag -----------------------------------------------------------------------

def _renormalized_hist(p: ParticleEnsemble, t: float, drift, grid) -> Histogram:
    moved = ParticleEnsemble(wrap(p.x - t * np.asarray(drift)), p.v, p.w)
    rho, _ = deposit(moved, grid)
    return Histogram.from_grid(rho)


def _w1(a: Histogram, b: Histogram, eps: float):
    occupied = max(int(np.count_nonzero(a.masses)), int(np.count_nonzero(b.masses)))
    if occupied <= MAX_EXACT_BINS:
        return w1_exact(a, b), "exact", ""
    return w1_entropic(a, b, eps), "entropic", eps


def diag_run(series_path, out_dir=None, eps: float = 1e-3) -> dict:
    """Post-hoc summaries of a finished run.

    Writes ``w1_table.csv`` with columns ``pair, value, method, eps`` comparing
    renormalised densities of successive particle snapshots and of every
    snapshot with the last one, plus ``diag_summary.json`` with decay fit,
    conservation drifts and the integrated bound for each pair.
    """
    series_path = Path(series_path)
    run_dir = series_path.parent
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    records = read_series(series_path)
    cols = series_columns(records)
    summary: dict = {"records": len(records)}
    if records:
        d = len(records[0].mean_u)
        mom = np.array([[r.mean_u[i] + r.mean_j[i] for i in range(d)] for r in records])
        summary["mass_drift"] = float(np.max(np.abs(cols["mass"] - cols["mass"][0])))
        summary["momentum_drift"] = float(np.max(np.linalg.norm(mom - mom[0], axis=1)))
        summary["energy_residual"] = float(np.max(np.abs(cols["E"] + cols["int_D"] - cols["E"][0])))
        summary["min_D_minus_lambda_Emod"] = float(np.min(cols["D"] - cols["lambda_theory"] * cols["Emod"]))
        t_end = float(cols["t"][-1])
        try:
            lam, r2, logc = fit_decay_rate(cols["t"], cols["Emod"], t_burn=min(1.0, t_end / 2))
            summary.update(lambda_fit=lam, r2=r2, log_C=logc)
        except ValueError as exc:
            summary["fit_error"] = str(exc)
        summary["lambda_theory_final"] = float(cols["lambda_theory"][-1])
        summary["strong_ok"] = bool(records[-1].strong_ok)
        summary["bootstrap_ok"] = bool(records[-1].bootstrap_ok)

    rows = []
    cfg_path = run_dir / "effective.cfg"
    store = SnapshotStore(run_dir)
    times, snaps = store.particles() if cfg_path.exists() else (np.array([]), [])
    if len(snaps) >= 2 and records:
        cfg = parse_config(cfg_path.read_text())
        init_state, _ = restore(run_dir / "initial.bin")
        drift = init_state.drift
        hists = [_renormalized_hist(p, t, drift, cfg.grid) for p, t in zip(snaps, times)]
        bound = jabin_cauchy_bound(cols["t"], np.maximum(cols["Emod"], 0.0))
        pairs = [(i, i + 1) for i in range(len(snaps) - 1)]
        pairs += [(i, len(snaps) - 1) for i in range(len(snaps) - 2)]
        pair_bounds = {}
        for i, j in pairs:
            val, method, e = _w1(hists[i], hists[j], eps)
            name = f"t={times[i]:.6g}|t={times[j]:.6g}"
            rows.append((name, val, method, e))
            pair_bounds[name] = bound(float(times[i]), float(times[j]))
        summary["pair_bounds"] = pair_bounds
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "value", "method", "eps"])
    for name, val, method, e in rows:
        w.writerow([name, format(val, ".17g"), method, e])
    atomic_write(out / "w1_table.csv", buf.getvalue())
    atomic_write(out / "diag_summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return summary


# -- profile --------------------------------------------------------------------

def load_history(run_dir, interp: str | None = None) -> tuple[VelocityHistory, SimState, SimState, RunConfig]:
    """Velocity history, initial state and final state of a finished run."""
    run_dir = Path(run_dir)
    cfg = parse_config((run_dir / "effective.cfg").read_text())
    init, _ = restore(run_dir / "initial.bin")
    final, _ = restore(run_dir / "checkpoint.bin")
    times, fields = SnapshotStore(run_dir).fields()
    if times.size == 0:
        raise FileNotFoundError(f"no fluid snapshots under {run_dir}")
    rec = read_series(run_dir / "series.csv")
    tail_ratio = rec[-1].Emod / rec[0].Emod if rec and rec[0].Emod > 0 else None
    history = VelocityHistory(times, fields, drift=init.drift, interp=interp or cfg["profile.interp"],
                              tail_ratio=tail_ratio)
    if history.tail_ok is False:
        log.warning("Emod(t_M)/Emod(0) = %.1e is above the tail threshold; the limit profile "
                    "neglects a non-negligible part of the fluid history", tail_ratio)
    return history, init, final, cfg


def profile_run(run_dir, out_dir=None) -> dict:
    """Limit density of a finished run.

    Writes ``rho_inf.csv`` (grid nodes, the quadrature limit density, the
    deposited image of the discretised datum and the simulated renormalised
    density) and ``profile_meta.json`` (Picard sweeps and residual, Jacobian
    certificates, transport distances, mass).
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    history, init, final, cfg = load_history(run_dir)
    drift = init.drift
    grid = cfg.grid
    tol = cfg["profile.tol"]
    t0 = time.perf_counter()
    prof = rho_infinity(history, drift, cfg.init, grid, nq=cfg["profile.nq"], h=cfg["profile.h"], tol=tol)
    image, sweeps = profile_image(history, drift, init.particles, grid, tol=tol)
    sim = _renormalized_hist(final.particles, final.t, drift, grid)
    H = Histogram.from_grid
    quad = prof.rho_inf * (np.mean(image) / np.mean(prof.rho_inf))
    meta = {
        "picard_iters": prof.picard_iters,
        "picard_residual": prof.residual,
        "image_sweeps": sweeps,
        "mass_quadrature": prof.mass,
        "Dx_sup": prof.Dx_sup,
        "eDv_sup": prof.eDv_sup,
        "Dx_bound_ok": bool(prof.Dx_sup <= 2.0),
        "eDv_bound_ok": bool(prof.eDv_sup <= 4.0),
        "detA_min": float(np.min(prof.detA_field)),
        "detA_vs_detDx_max_diff": float(np.max(np.abs(prof.detA_field - prof.detDx_field))),
        "w1_sim_vs_image": w1_exact(sim, H(image)),
        "w1_image_vs_quadrature": w1_exact(H(image), H(quad)),
        "t_final": final.t,
        "drift": [float(a) for a in drift],
        "gradint_history": history.gradint(),
        "tail_ratio": history.tail_ratio,
        "tail_ok": history.tail_ok,
        "seconds": time.perf_counter() - t0,
    }
    nodes = grid.nodes.reshape(grid.d, -1).T
    buf = io.StringIO()
    header = [f"x{i}" for i in range(grid.d)] + ["rho_inf", "rho_image", "rho_sim"]
    simgrid = sim.masses.reshape(grid.shape) * grid.n**grid.d
    table = np.column_stack([nodes, prof.rho_inf.ravel(), image.ravel(), simgrid.ravel()])
    np.savetxt(buf, table, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    atomic_write(out / "rho_inf.csv", buf.getvalue())
    atomic_write(out / "profile_meta.json", json.dumps(meta, indent=2, sort_keys=True))
    return meta

