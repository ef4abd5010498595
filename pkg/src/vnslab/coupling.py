"""Coupled fluid/particle time loop with the drag (Brinkman) force and the
smallness monitors that certify a run stays in the small-data regime."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .diagnostics import (
    POINCARE_GAP,
    DiagnosticsRecord,
    kinetic_energy,
    lambda_lower_bound,
    modulated_energy,
    w1_monokinetic_upper,
)
from .particles import CICStencil, InitialDataSpec, ParticleEnsemble, build_ensemble, deposit, moment, push
from .spectral import (
    FourierField,
    GridSpec,
    NumericalError,
    SobolevSpec,
    grad_sup_norm,
    leray_project,
    max_stable_dt,
    ns_step,
    sobolev_norm,
)

__all__ = [
    "DEFAULT_DELTA",
    "MonitorConfig",
    "SimState",
    "Observables",
    "straightening_threshold",
    "initial_velocity",
    "initial_state",
    "brinkman_force",
    "observe",
    "step",
    "run",
    "make_record",
    "strong_existence_criterion",
    "bootstrap_monitor",
]

_H_MINUS_HALF = SobolevSpec(-0.5, homogeneous=False)
_H_HALF = SobolevSpec(0.5, homogeneous=False)


def straightening_threshold(tol: float = 1e-15) -> float:
    """Largest ``delta`` with ``delta * exp(delta) < 1/9``, by bisection.

    The lower bracket end is returned so the strict inequality always holds.
    """
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid * math.exp(mid) < 1.0 / 9.0:
            lo = mid
        else:
            hi = mid
    return lo


DEFAULT_DELTA = straightening_threshold()


@dataclass(frozen=True)
class MonitorConfig:
    C_star: float = 1.0
    delta: float = DEFAULT_DELTA
    report_stride: int = 10
    c_P: float = POINCARE_GAP
    alpha: float = 3.5

    def __post_init__(self):
        if self.C_star <= 0:
            raise ValueError("C_star must be positive")
        if not (self.delta > 0 and self.delta * math.exp(self.delta) <= 1.0 / 9.0):
            raise ValueError(f"delta={self.delta} violates delta*exp(delta) <= 1/9")
        if self.report_stride < 1:
            raise ValueError("report_stride must be >= 1")
        if self.c_P <= 0:
            raise ValueError("c_P must be positive")


@dataclass(frozen=True, eq=False)
class Observables:
    """Quantities derived from ``(u, particles)`` at one time level."""

    rho: np.ndarray
    j: np.ndarray
    F: FourierField
    F_norm2: float
    grad_sup: float
    D: float
    stencil: CICStencil | None


@dataclass(frozen=True, eq=False)
class SimState:
    """Immutable snapshot of the coupled system at time ``step * dt``.

    Accumulators are trapezoid integrals over the steps taken so far:
    ``gradint0`` and ``gradint1`` integrate the gradient sup-norm from 0 and from
    1, ``int_F`` the squared ``H^{-1/2}`` force norm, ``int_D`` the dissipation.
    """

    step: int
    dt: float
    u: FourierField
    particles: ParticleEnsemble
    u0_norm: float
    conserved: np.ndarray
    gradint0: float = 0.0
    gradint1: float = 0.0
    int_F: float = 0.0
    int_D: float = 0.0
    rho_sup_max: float = 0.0
    strong_ok: bool = True
    bootstrap_ok: bool = True
    obs: Observables | None = field(default=None, repr=False)

    @property
    def t(self) -> float:
        return self.step * self.dt

    @property
    def grid(self) -> GridSpec:
        return self.u.spec

    @property
    def drift(self) -> np.ndarray:
        """Velocity of the expected final monokinetic state, ``<u0 + j0> / 2``."""
        return 0.5 * np.asarray(self.conserved)

    def observables(self) -> Observables:
        return self.obs if self.obs is not None else observe(self.u, self.particles)


def brinkman_force(rho: np.ndarray, j: np.ndarray, u: FourierField) -> FourierField:
    """Drag force ``j - rho u`` of the particles on the fluid, dealiased, not projected."""
    spec = u.spec
    phys = np.asarray(j) - np.asarray(rho)[None] * u.to_physical()
    c = np.fft.fftn(phys, axes=tuple(range(1, spec.d + 1))) / spec.n**spec.d
    return FourierField(spec, c * spec.dealias_mask)


def observe(u: FourierField, particles: ParticleEnsemble) -> Observables:
    grid = u.spec
    st = CICStencil.build(particles.x, grid.n) if particles.N else None
    rho, j = deposit(particles, grid, st)
    F = brinkman_force(rho, j, u)
    uphys = u.to_physical()
    if particles.N:
        slip = st.gather(uphys) - particles.v
        drag = math.fsum(particles.w * np.sum(slip**2, axis=1))
    else:
        drag = 0.0
    D = drag + sobolev_norm(u, SobolevSpec(1.0)) ** 2
    return Observables(rho, j, F, sobolev_norm(F, _H_MINUS_HALF) ** 2, grad_sup_norm(u), D, st)


# -- initial data --------------------------------------------------------------

def initial_velocity(spec: InitialDataSpec, grid: GridSpec) -> FourierField:
    """Divergence-free ``u0`` with prescribed homogeneous ``H^{1/2}`` norm plus a mean.

    Families: ``zero``, ``shear`` (``sin(2 pi x_2) e_1``), ``taylor_green`` and
    ``random`` (Gaussian amplitudes on ``1 <= |k|_inf <= u0_kmax``, seeded).
    """
    d = grid.d
    X = grid.nodes
    two_pi = 2 * np.pi
    if spec.u0 == "zero":
        return FourierField.constant(grid, spec.u0_mean)
    if spec.u0 == "shear":
        vals = np.zeros((d,) + grid.shape)
        vals[0] = np.sin(two_pi * X[1])
        base = FourierField.from_physical(grid, vals)
    elif spec.u0 == "taylor_green":
        vals = np.zeros((d,) + grid.shape)
        if d == 2:
            vals[0] = np.sin(two_pi * X[0]) * np.cos(two_pi * X[1])
            vals[1] = -np.cos(two_pi * X[0]) * np.sin(two_pi * X[1])
        else:
            vals[0] = np.sin(two_pi * X[0]) * np.cos(two_pi * X[1]) * np.cos(two_pi * X[2])
            vals[1] = -np.cos(two_pi * X[0]) * np.sin(two_pi * X[1]) * np.cos(two_pi * X[2])
        base = FourierField.from_physical(grid, vals)
    elif spec.u0 == "random":
        kmax = min(spec.u0_kmax, grid.cutoff)
        rng = np.random.default_rng(spec.seed)
        k = grid.wavenumbers
        band = (np.max(np.abs(k), axis=0) <= kmax) & (grid.k2 > 0)
        raw = rng.standard_normal((2, d) + grid.shape)
        c = (raw[0] + 1j * raw[1]) * band
        # Hermitian symmetrisation makes the field real.
        flipped = c
        for ax in range(1, d + 1):
            flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
        base = FourierField(grid, 0.5 * (c + np.conj(flipped)))
    else:
        raise ValueError(f"unknown u0 family {spec.u0!r}")
    base = leray_project(base)
    norm = sobolev_norm(base, SobolevSpec(0.5))
    if norm == 0:
        raise ValueError("u0 family produced a zero field on this grid")
    c = base.coeffs * (spec.u0_hdot_half / norm)
    c[(slice(None),) + (0,) * d] = np.asarray(spec.u0_mean, dtype=float)
    return FourierField(grid, c, div_free=True)


def initial_state(spec: InitialDataSpec, grid: GridSpec, dt: float, per_cell: int = 2, nv: int = 8,
                  vmax: float | None = None, particles: ParticleEnsemble | None = None,
                  u0: FourierField | None = None):
    """Build the time-zero state; returns ``(state, ensemble_metadata)``."""
    meta = {}
    if particles is None:
        particles, meta = build_ensemble(spec, grid, per_cell, nv, vmax)
    if u0 is None:
        u0 = initial_velocity(spec, grid)
    conserved = u0.mean() + particles.mean_velocity()
    obs = observe(u0, particles)
    state = SimState(
        step=0,
        dt=dt,
        u=u0,
        particles=particles,
        u0_norm=sobolev_norm(u0, _H_HALF),
        conserved=conserved,
        rho_sup_max=float(np.max(obs.rho)),
        obs=obs,
    )
    return state, meta


# -- time stepping -------------------------------------------------------------

def _trapz_from_one(t0: float, t1: float, g0: float, g1: float) -> float:
    """Trapezoid contribution of ``[t0, t1]`` restricted to ``[1, inf)`` (linear ``g``)."""
    if t1 <= 1.0:
        return 0.0
    if t0 >= 1.0:
        return 0.5 * (t1 - t0) * (g0 + g1)
    g_one = g0 + (g1 - g0) * (1.0 - t0) / (t1 - t0)
    return 0.5 * (t1 - 1.0) * (g_one + g1)


def step(state: SimState, mcfg: MonitorConfig | None = None, scheme: str = "lie",
         cfl: float = 0.5) -> SimState:
    """Advance one step of size ``state.dt``: fluid first, then particles.

    The fluid sees the drag force assembled at the current time level; the
    particles are pushed in the average of the old and new fluid fields.

    Args:
        state: current state.
        mcfg: monitor thresholds (defaults when omitted).
        scheme: fluid splitting, ``lie`` or ``strang``.
        cfl: safety factor of the advective step limit.
    """
    mcfg = mcfg or MonitorConfig()
    dt = state.dt
    obs = state.observables()
    u = state.u
    limit = max_stable_dt(u, cfl)
    if dt > limit:
        raise NumericalError(f"dt={dt} exceeds the advective limit {limit:.3e} at t={state.t}")
    u_new = ns_step(u, obs.F, dt, scheme=scheme)
    avg = 0.5 * (u.to_physical() + u_new.to_physical())
    n = state.grid.n
    particles = push(state.particles, lambda x: CICStencil.build(x, n).gather(avg), dt)
    new = observe(u_new, particles)

    t0, t1 = state.t, (state.step + 1) * dt
    gradint0 = state.gradint0 + 0.5 * dt * (obs.grad_sup + new.grad_sup)
    gradint1 = state.gradint1 + _trapz_from_one(t0, t1, obs.grad_sup, new.grad_sup)
    int_F = state.int_F + 0.5 * dt * (obs.F_norm2 + new.F_norm2)
    int_D = state.int_D + 0.5 * dt * (obs.D + new.D)
    nxt = replace(
        state,
        step=state.step + 1,
        u=u_new,
        particles=particles,
        gradint0=gradint0,
        gradint1=gradint1,
        int_F=int_F,
        int_D=int_D,
        rho_sup_max=max(state.rho_sup_max, float(np.max(new.rho))),
        obs=new,
    )
    _, strong = strong_existence_criterion(nxt, state.u0_norm, mcfg.C_star)
    _, boot = bootstrap_monitor(nxt, mcfg)
    return replace(nxt, strong_ok=state.strong_ok and strong, bootstrap_ok=state.bootstrap_ok and boot)


def strong_existence_criterion(state: SimState, u0_norm: float | None = None, C_star: float = 1.0):
    """Smallness functional ``||u0||_{H^1/2}^2 + C* int_0^t ||F||_{H^-1/2}^2``.

    Returns ``(value, value < 1 / C*^2)``.
    """
    u0_norm = state.u0_norm if u0_norm is None else u0_norm
    value = u0_norm**2 + C_star * state.int_F
    return value, value < 1.0 / C_star**2


def bootstrap_monitor(state: SimState, cfg: MonitorConfig | None = None):
    """``(int_1^t ||grad u||_inf, int < delta)``; the integral is zero before ``t = 1``."""
    cfg = cfg or MonitorConfig()
    return state.gradint1, state.gradint1 < cfg.delta


def make_record(state: SimState, mcfg: MonitorConfig | None = None) -> DiagnosticsRecord:
    mcfg = mcfg or MonitorConfig()
    obs = state.observables()
    u, p = state.u, state.particles
    crit, _ = strong_existence_criterion(state, C_star=mcfg.C_star)
    U = state.drift
    dev = u.coeffs.copy()
    dev[(slice(None),) + (0,) * u.spec.d] -= U
    uphys = u.to_physical()
    return DiagnosticsRecord(
        step=state.step,
        t=state.t,
        E=kinetic_energy(u, p),
        D=obs.D,
        Emod=modulated_energy(u, p),
        mass=math.fsum(obs.rho.ravel()) * state.grid.cellvol,
        mean_u=tuple(float(a) for a in u.mean()),
        mean_j=tuple(float(a) for a in p.mean_velocity()),
        M_alpha=moment(p, mcfg.alpha),
        rho_sup=float(np.max(obs.rho)),
        j_sup=float(np.max(np.sqrt(np.sum(obs.j**2, axis=0)))),
        gradint=state.gradint1,
        criterion_value=crit,
        lambda_theory=lambda_lower_bound(state.rho_sup_max, mcfg.c_P),
        w1_upper=w1_monokinetic_upper(p, U),
        gradint0=state.gradint0,
        grad_sup=obs.grad_sup,
        int_D=state.int_D,
        int_F=state.int_F,
        F_norm2=obs.F_norm2,
        u_linf=float(np.max(np.sqrt(np.sum(uphys**2, axis=0)))),
        u_dev=float(np.sqrt(np.sum(np.abs(dev) ** 2))),
        rho_sup_max=state.rho_sup_max,
        strong_ok=state.strong_ok,
        bootstrap_ok=state.bootstrap_ok,
    )


def run(state: SimState, t_final: float, mcfg: MonitorConfig | None = None, scheme: str = "lie",
        cfl: float = 0.5, on_step: Callable[[SimState], None] | None = None,
        record_initial: bool = True):
    """Advance to ``t_final`` (rounded to a whole number of steps).

    Records are taken every ``mcfg.report_stride`` steps counted from step 0, and
    at the final step. Monitors annotate records; they never stop the run.
    A resumed run passes ``record_initial=False`` to avoid repeating the
    record already written before the checkpoint.

    Returns:
        ``(final_state, records)``.
    """
    mcfg = mcfg or MonitorConfig()
    n_final = int(round(t_final / state.dt))
    records = []
    if record_initial and state.step % mcfg.report_stride == 0:
        records.append(make_record(state, mcfg))
    if on_step is not None and record_initial:
        on_step(state)
    while state.step < n_final:
        state = step(state, mcfg, scheme, cfl)
        if state.step % mcfg.report_stride == 0 or state.step == n_final:
            records.append(make_record(state, mcfg))
        if on_step is not None:
            on_step(state)
    return state, records
