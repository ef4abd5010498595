"""The ten acceptance criteria as executable checks.

Each ``criterion_*`` function returns a :class:`CriterionResult`; the command
line ``selftest`` and the test suite both call :func:`run_all`. Expensive runs
are shared through a small cache keyed on their parameters.
"""

from __future__ import annotations

import functools
import math
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .asymptotics import (
    VelocityHistory,
    linear_density,
    moment_bound_check,
    profile_image,
    rho_infinity,
    straightening_map,
)
from .config import default_config
from .coupling import DEFAULT_DELTA, MonitorConfig, SimState, initial_state, run
from .diagnostics import fit_decay_rate, w1_monokinetic_upper
from .particles import InitialDataSpec, ParticleEnsemble, build_ensemble, cic_image, deposit, estimate_Nq, moment, push, wrap
from .spectral import GridSpec
from .storage import read_series, series_columns
from .transport import (
    Histogram,
    dual_certificate,
    kantorovich_potential,
    sqrt_tail_integral,
    w1_entropic,
    w1_exact,
)

__all__ = ["CriterionResult", "CRITERIA", "run_all", "format_result"]


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)


def format_result(r: CriterionResult) -> str:
    return f"criterion {r.number:2d} [{r.name}]: {'PASS' if r.passed else 'FAIL'}  {r.detail}"


def _order(dts, errs) -> float:
    """Least-squares slope of ``log err`` against ``log dt``."""
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


# -- shared runs ----------------------------------------------------------------

# Reference small-data regime: mild fluid, warm particles, nonzero total momentum.
REFERENCE = InitialDataSpec(u0_hdot_half=0.1, sigma_v=0.3, u0_mean=(0.2, 0.0), v0=(0.0, 0.1))
LONG = InitialDataSpec(u0_hdot_half=0.1, sigma_v=0.3, u0_mean=(0.3, 0.0))
GRID = GridSpec(2, 16)
STUDY_DTS = (0.04, 0.02, 0.01, 0.005)


@functools.lru_cache(maxsize=None)
def refinement_study(t_final: float = 1.0):
    """Reference run at four step sizes, records every 0.04 time units."""
    out = {}
    for dt in STUDY_DTS:
        st, _ = initial_state(REFERENCE, GRID, dt, per_cell=1, nv=6)
        _, rec = run(st, t_final, MonitorConfig(report_stride=int(round(0.04 / dt))))
        out[dt] = (st, rec)
    return out


@dataclass
class LongRun:
    init: SimState
    final: SimState
    records: list
    times: list
    fields: list
    particle_snaps: dict


@functools.lru_cache(maxsize=None)
def long_run(T: float = 12.0, dt: float = 0.01) -> LongRun:
    """Compliant run to ``T`` with a fluid snapshot at every step and particle
    snapshots at the final three integer times.

    Every step is kept because linear-in-time interpolation of sparser
    snapshots puts a floor of about 3e-5 under the limit-profile comparison.
    """
    st, _ = initial_state(LONG, GRID, dt, per_cell=1, nv=6)
    times, fields, snaps = [], [], {}
    n_final = int(round(T / dt))
    keep = {n_final - 2 * int(round(1 / dt)), n_final - int(round(1 / dt)), n_final}

    def on_step(s):
        times.append(s.t)
        fields.append(s.u)
        if s.step in keep:
            snaps[s.step] = s.particles

    fin, rec = run(st, T, MonitorConfig(report_stride=10), on_step=on_step)
    return LongRun(st, fin, rec, times, fields, snaps)


# -- criteria -------------------------------------------------------------------

def criterion_1() -> CriterionResult:
    study = refinement_study()
    mass_err, drifts = 0.0, []
    for dt in STUDY_DTS:
        st, rec = study[dt]
        mass_err = max(mass_err, max(abs(r.mass - rec[0].mass) for r in rec))
        final = np.add(rec[-1].mean_u, rec[-1].mean_j)
        drifts.append(float(np.linalg.norm(final - st.conserved)))
    p = _order(STUDY_DTS, drifts)
    ok = mass_err <= 1e-12 and p >= 1.0
    return CriterionResult(1, "conservation", ok,
                           f"mass drift {mass_err:.1e}; momentum drift {drifts[0]:.2e}..{drifts[-1]:.2e}, order {p:.2f}",
                           {"mass_err": mass_err, "drifts": drifts, "order": p})


def criterion_2() -> CriterionResult:
    study = refinement_study()
    res = []
    for dt in STUDY_DTS:
        _, rec = study[dt]
        E0 = rec[0].E
        res.append(max(abs(r.E + r.int_D - E0) for r in rec))
    p = _order(STUDY_DTS, res)
    return CriterionResult(2, "energy identity", p >= 1.0,
                           f"max |E + int D - E0| {res[0]:.2e}..{res[-1]:.2e}, order {p:.2f}",
                           {"residuals": res, "order": p})


def criterion_3() -> CriterionResult:
    study = refinement_study()
    ident_ok, excess = True, []
    worst = 0.0
    for dt in STUDY_DTS:
        st, rec = study[dt]
        c = np.asarray(st.conserved)
        quarter = 0.25 * float(np.dot(c, c))
        for r in rec:
            drift = float(np.linalg.norm(np.add(r.mean_u, r.mean_j) - c))
            gap = abs(r.Emod - r.E + quarter)
            worst = max(worst, gap)
            ident_ok &= gap <= 1e-8 + drift
        Em = np.array([r.Emod for r in rec])
        iD = np.array([r.int_D for r in rec])
        # E(t) + int_s^t D - E(s) over all ordered sample pairs
        pair = Em[None, :] + iD[None, :] - iD[:, None] - Em[:, None]
        excess.append(max(float(np.max(np.triu(pair))), 1e-300))
    p = _order(STUDY_DTS, excess)
    ok = bool(ident_ok) and p >= 1.0
    return CriterionResult(3, "modulated energy", ok,
                           f"max |Emod - E + |c|^2/4| {worst:.2e} (within drift: {bool(ident_ok)}); "
                           f"pair excess {excess[0]:.2e}..{excess[-1]:.2e}, order {p:.2f}",
                           {"identity_gap": worst, "excess": excess, "order": p})


def criterion_4() -> CriterionResult:
    lr = long_run()
    rec = lr.records
    E0 = rec[0].Emod
    margin = min(r.D - r.lambda_theory * r.Emod + 1e-6 * E0 for r in rec)
    T = rec[-1].t
    lam = rec[-1].lambda_theory
    t = np.array([r.t for r in rec])
    scaled = np.array([r.Emod for r in rec]) * np.exp(lam * t) / E0
    fit = (t >= 1.0) & (t <= T / 2)
    C = float(np.max(scaled[fit]))
    late = float(np.max(scaled[t >= T / 2]))
    ok = margin >= 0 and late <= 2 * C
    return CriterionResult(4, "decay lower bound", ok,
                           f"min D - lambda Emod + 1e-6 Emod(0) = {margin:.2e} (lambda {lam:.4f}); "
                           f"C on [1,T/2] {C:.3e}, max on [T/2,T] {late:.3e}",
                           {"margin": margin, "lambda": lam, "C": C, "late": late})


def criterion_5() -> CriterionResult:
    lr = long_run()
    U = lr.init.drift
    worst, worst_t = -np.inf, 0.0
    for r in lr.records:
        lhs = r.w1_upper + r.u_dev
        rhs = math.sqrt(2.0) * math.sqrt(max(r.Emod, 0.0)) + 0.5 * float(np.linalg.norm(np.subtract(r.mean_j, r.mean_u)))
        if lhs - rhs - 1e-10 > worst:
            worst, worst_t = lhs - rhs - 1e-10, r.t
    # Coarse phase-space check against the exact distance, at the start and
    # the end. Nearest-bin assignment moves each measure by at most half a
    # cell diagonal; an odd velocity count centres U in a bin.
    nx, nv = 4, 5
    vlo, vhi = U - 1.0, U + 1.0
    diam = math.sqrt(GRID.d * (1 / nx) ** 2 + GRID.d * ((vhi[0] - vlo[0]) / nv) ** 2)
    coarse_ok, exact = True, []
    for p in (lr.init.particles, lr.final.particles):
        a = Histogram.from_particles(p, nx, nv, vlo, vhi)
        b = Histogram.from_particles(p, nx, nv, vlo, vhi, velocity=U)
        exact.append(w1_exact(a, b))
        coarse_ok &= exact[-1] <= w1_monokinetic_upper(p, U) + diam
    ok = worst <= 0 and coarse_ok
    return CriterionResult(5, "W1 bound", ok,
                           f"max excess of the literal bound {worst:.2e} at t={worst_t:g}; "
                           f"coarse exact W1 {exact[0]:.2e}, {exact[-1]:.2e} within upper bound + binning: {coarse_ok}",
                           {"excess": worst, "coarse_ok": bool(coarse_ok)})


def criterion_6() -> CriterionResult:
    spec = InitialDataSpec(sigma_v=0.3)
    p0, _ = build_ensemble(spec, GRID, per_cell=1, nv=6)
    dt = 0.01
    tol = 2 * math.sqrt(GRID.d) / GRID.n
    worst_w1 = 0.0
    for U in (np.zeros(2), np.array([0.2, -0.1])):
        p = p0
        frozen = lambda x, U=U: np.broadcast_to(U, x.shape)  # noqa: E731
        for k in range(1, 301):
            p = push(p, frozen, dt)
            if k % 100 == 0:
                rho, _ = deposit(p, GRID)
                exact = cic_image(linear_density(spec, GRID, k * dt, U, nq=20))
                worst_w1 = max(worst_w1, w1_exact(Histogram.from_grid(rho), Histogram.from_grid(exact)))
        if not U.any():
            m_err = max(abs(moment(p, a) - math.exp(-a * 3.0) * moment(p0, a)) / moment(p0, a)
                        for a in (2.0, 3.5))
    ok = worst_w1 <= tol and m_err <= 1e-10
    return CriterionResult(6, "linear oracle", ok,
                           f"max W1(deposit, analytic) {worst_w1:.2e} <= {tol:.3f}; moment rel err {m_err:.1e}",
                           {"w1": worst_w1, "moment_err": m_err})


def criterion_7() -> CriterionResult:
    lr = long_run()
    hist = VelocityHistory(lr.times, lr.fields, drift=lr.init.drift)
    rng = np.random.default_rng(7)
    fracs, gis = [], []
    for t in (1.0, 3.0, 6.0):
        x = rng.random((300, 2))
        v = rng.normal(0.0, 0.5, (300, 2))
        res = straightening_map(hist, t, x, v)
        gis.append(res.gradint)
        if res.gradint <= DEFAULT_DELTA:
            fracs.append(float(np.mean(np.abs(res.det) >= math.exp(GRID.d * t) / 2)))
    rec = lr.records
    Nq = estimate_Nq(LONG)
    chk = moment_bound_check([r.t for r in rec], [r.rho_sup for r in rec], [r.j_sup for r in rec],
                             [r.u_linf for r in rec], Nq, LONG.q, GRID.d, tol=1e-12)
    ok = bool(fracs) and min(fracs) >= 0.99 and chk["rho_ok"]
    return CriterionResult(7, "straightening", ok,
                           f"int_0^t |grad u| {max(gis):.2e} <= delta; det certificate at "
                           f"{100 * min(fracs or [0]):.1f}% of samples; rho_sup {max(r.rho_sup for r in rec):.3f} "
                           f"<= {chk['rho_bound']:.2f} (current bound also holds: {chk['j_ok']})",
                           {"fractions": fracs, "rho_ok": chk["rho_ok"], "j_ok": chk["j_ok"]})


def criterion_8() -> CriterionResult:
    """Renormalised density against the limit image, with one constant.

    The drift used for the renormalisation and for the fluid beyond the last
    snapshot is the one the discrete system settles to, ``(<u> + <j>)(T) / 2``;
    the initial ``<u0 + j0> / 2`` differs from it by the O(dt) momentum error
    of the splitting, which would otherwise dominate the comparison. The
    result with the initial drift is reported alongside.
    """
    lr = long_run()
    rec = lr.records
    t = np.array([r.t for r in rec])
    Em = np.array([r.Emod for r in rec])
    lam, _, _ = fit_decay_rate(t, Em, t_burn=1.0)
    fin = lr.final
    drifts = {"discrete": 0.5 * (fin.u.mean() + fin.particles.mean_velocity()), "initial": lr.init.drift}
    tail_ratio = float(Em[-1] / Em[0])
    ratios = {}
    for label, D in drifts.items():
        hist = VelocityHistory(lr.times, lr.fields, drift=D, tail_ratio=tail_ratio)
        img, _ = profile_image(hist, D, lr.init.particles, GRID, tol=1e-12)
        rs = []
        for step in sorted(lr.particle_snaps):
            p = lr.particle_snaps[step]
            T = step * fin.dt
            moved = ParticleEnsemble(wrap(p.x - T * D), p.v, p.w)
            rho, _ = deposit(moved, GRID)
            ET = float(Em[np.argmin(np.abs(t - T))])
            rs.append(w1_exact(Histogram.from_grid(rho), Histogram.from_grid(img)) / sqrt_tail_integral(ET, lam))
        ratios[label] = rs
    C = ratios["discrete"][0]
    single_C = all(r <= 2 * C for r in ratios["discrete"][1:])
    hist = VelocityHistory(lr.times, lr.fields, drift=drifts["discrete"], tail_ratio=tail_ratio)
    prof = rho_infinity(hist, drifts["discrete"], LONG, GRID, nq=3, tol=1e-12)
    zt_ok = prof.Dx_sup <= 2.0 and prof.eDv_sup <= 4.0
    ok = single_C and prof.residual <= 1e-10 and zt_ok and hist.tail_ok
    lit = ratios["initial"]
    return CriterionResult(8, "asymptotic profile", ok,
                           f"W1/tail {', '.join(f'{r:.3f}' for r in ratios['discrete'])} (C={C:.3f}, factor 2); "
                           f"Picard residual {prof.residual:.1e}; |D_xY| {prof.Dx_sup:.3f}, |e^s D_vY| {prof.eDv_sup:.3f}; "
                           f"Emod(T)/Emod(0) {tail_ratio:.1e}; with initial drift: {', '.join(f'{r:.2f}' for r in lit)}",
                           {"ratios": ratios, "residual": prof.residual, "Dx_sup": prof.Dx_sup,
                            "eDv_sup": prof.eDv_sup, "lambda_fit": lam, "tail_ratio": tail_ratio})


def _random_hist(rng, n: int, sparsity: float = 0.0) -> Histogram:
    m = rng.random(n * n)
    if sparsity:
        m[rng.random(n * n) < sparsity] = 0.0
    return Histogram.from_grid((m / m.sum() * n * n).reshape(n, n))


def criterion_9() -> CriterionResult:
    rng = np.random.default_rng(9)
    axioms = 0.0
    cert_gap = -np.inf
    for _ in range(100):
        a, b, c = (_random_hist(rng, 6, 0.3) for _ in range(3))
        ab, ba, bc, ac = w1_exact(a, b), w1_exact(b, a), w1_exact(b, c), w1_exact(a, c)
        aa = w1_exact(a, a)
        axioms = max(axioms, abs(aa), abs(ab - ba), ac - ab - bc, -ab)
        phi = kantorovich_potential(a, b)
        centre = rng.random(2)
        def dist(z, centre=centre):
            dz = np.abs(z - centre)
            return np.linalg.norm(np.minimum(dz, 1 - dz), axis=1)
        cert_gap = max(cert_gap, dual_certificate(a, b, [phi, dist]) - ab)
    rel = 0.0
    for _ in range(3):
        a, b = _random_hist(rng, 16), _random_hist(rng, 16)
        ex = w1_exact(a, b)
        rel = max(rel, abs(w1_entropic(a, b, 1e-3) - ex) / ex)
    ok = axioms <= 1e-10 and cert_gap <= 1e-10 and rel <= 0.02
    return CriterionResult(9, "OT solvers", ok,
                           f"axiom violation {axioms:.1e}; certificate - exact {cert_gap:.1e}; "
                           f"entropic rel err {rel:.2e}",
                           {"axioms": axioms, "cert_gap": cert_gap, "entropic_rel": rel})


def criterion_10() -> CriterionResult:
    from .runner import resume_run, run_config

    cfg = default_config(particles__per_cell=1, particles__nv=4, time__t_final=1.0, io__checkpoint_every=50,
                         io__svg=False)
    tmp = Path(tempfile.mkdtemp(prefix="vns-restart-"))
    try:
        full = run_config(cfg, tmp / "full")
        resumed = resume_run(tmp / "full" / "checkpoints" / "ckpt_00000050.bin", tmp / "resumed")
        shutil.copytree(tmp / "full", tmp / "inplace")
        a = series_columns(read_series(full.series_path))
        b = series_columns(read_series(resumed.series_path))
        steps = set(b["step"])
        sel = np.array([s in steps for s in a["step"]])
        diff = max(float(np.max(np.abs(a[k][sel] - b[k]))) for k in a)
        # A copy of the finished run resumed in place drops rows after the checkpoint and rewrites them.
        resume_run(tmp / "inplace" / "checkpoints" / "ckpt_00000050.bin")
        same_bytes = (tmp / "inplace" / "series.csv").read_bytes() == full.series_path.read_bytes()
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    ok = diff <= 1e-12 and same_bytes
    return CriterionResult(10, "restart", ok,
                           f"max column difference {diff:.1e} over {int(sel.sum())} rows; "
                           f"in-place resume reproduces the series file byte for byte: {same_bytes}",
                           {"diff": diff, "same_bytes": same_bytes})


CRITERIA: dict[int, Callable[[], CriterionResult]] = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10,
}


def run_all(numbers=None, echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    out = []
    for k in numbers or sorted(CRITERIA):
        r = CRITERIA[k]()
        if echo:
            echo(format_result(r))
        out.append(r)
    return out
