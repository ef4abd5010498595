"""Scalar functionals of a coupled state: energy, dissipation, modulated energy,
momentum identities and decay-rate estimates."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .particles import CICStencil, ParticleEnsemble
from .spectral import FourierField, SobolevSpec, sobolev_norm

__all__ = [
    "DiagnosticsRecord",
    "POINCARE_GAP",
    "kinetic_energy",
    "dissipation",
    "modulated_energy",
    "identity_eqmoy",
    "lambda_lower_bound",
    "fit_decay_rate",
    "w1_monokinetic_upper",
]

# Spectral gap of -Laplacian on the unit torus: ||grad g||^2 >= (2 pi)^2 ||g - <g>||^2.
POINCARE_GAP = (2 * np.pi) ** 2


def _wsum(w: np.ndarray, a: np.ndarray) -> float:
    return math.fsum(w * a)


def _fluid_at(u: FourierField, particles: ParticleEnsemble, stencil: CICStencil | None = None):
    if particles.N == 0:
        return np.zeros((0, u.spec.d))
    st = stencil or CICStencil.build(particles.x, u.spec.n)
    return st.gather(u.to_physical())


def kinetic_energy(u: FourierField, particles: ParticleEnsemble) -> float:
    """``E = 1/2 ||u||^2 + 1/2 sum w |v|^2``."""
    fluid = 0.5 * u.l2_norm() ** 2
    return fluid + 0.5 * _wsum(particles.w, np.sum(particles.v**2, axis=1))


def dissipation(u: FourierField, particles: ParticleEnsemble, stencil: CICStencil | None = None) -> float:
    """Drag plus viscous dissipation, ``sum w |u(x_i) - v_i|^2 + ||grad u||^2``.

    The fluid is evaluated at the particles with the deposition kernel.
    """
    slip = _fluid_at(u, particles, stencil) - particles.v
    drag = _wsum(particles.w, np.sum(slip**2, axis=1))
    return drag + sobolev_norm(u, SobolevSpec(1.0)) ** 2


def modulated_energy(u: FourierField, particles: ParticleEnsemble) -> float:
    """Energy relative to the monokinetic state.

    ``1/2 sum w |v - <j>|^2 + 1/2 ||u - <u>||^2 + 1/4 |<j> - <u>|^2``
    """
    jm = particles.mean_velocity()
    um = u.mean()
    spread = _wsum(particles.w, np.sum((particles.v - jm) ** 2, axis=1))
    c = u.coeffs.copy()
    c[(slice(None),) + (0,) * u.spec.d] = 0.0
    fluctuation = float(np.sum(np.abs(c) ** 2))
    return 0.5 * spread + 0.5 * fluctuation + 0.25 * float(np.sum((jm - um) ** 2))


def identity_eqmoy(mean_j, mean_u, conserved) -> float:
    """Residual of ``1/4 |<j> - <u>|^2 = |<j> - c/2|^2`` where ``c = <u0 + j0>``.

    The two sides agree exactly when ``<u> + <j> = c``.

    Args:
        mean_j: current particle momentum ``sum w v``.
        mean_u: current fluid mean.
        conserved: the initial total momentum ``<u0> + <j0>``.
    """
    mean_j, mean_u, conserved = (np.asarray(a, dtype=float) for a in (mean_j, mean_u, conserved))
    lhs = 0.25 * float(np.sum((mean_j - mean_u) ** 2))
    rhs = float(np.sum((mean_j - 0.5 * conserved) ** 2))
    return lhs - rhs


def lambda_lower_bound(M: float, cP: float = POINCARE_GAP) -> float:
    """Guaranteed ratio ``D / Emod`` when the density stays below ``M``.

    ``alpha = 1 / (cP / (2M) + 1)``, ``lambda = min(1 - alpha, cP / 2)``.

    Args:
        M: running maximum of the particle density.
        cP: spectral-gap constant in ``||grad u||^2 >= cP ||u - <u>||^2``.
    """
    if M < 0:
        raise ValueError("density bound M must be nonnegative")
    if cP <= 0:
        raise ValueError("cP must be positive")
    if M == 0:
        return min(1.0, cP / 2)
    alpha = 1.0 / (cP / (2.0 * M) + 1.0)
    return min(1.0 - alpha, cP / 2)


def fit_decay_rate(t, values, t_burn: float = 1.0, t_end: float | None = None):
    """Least-squares exponential rate of ``values ~ C exp(-lambda t)``.

    Args:
        t: sample times.
        values: positive samples (typically the modulated energy).
        t_burn: samples before this time are ignored.
        t_end: optional upper end of the fit window.

    Returns:
        ``(lambda_fit, r2, log_C)``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(values, dtype=float)
    sel = t >= t_burn
    if t_end is not None:
        sel &= t <= t_end
    t, y = t[sel], y[sel]
    if t.size < 2:
        raise ValueError("fit window holds fewer than two samples")
    if np.any(y <= 0):
        raise ValueError("nonpositive value inside the fit window")
    ly = np.log(y)
    slope, intercept = np.polyfit(t, ly, 1)
    resid = ly - (slope * t + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(-slope), r2, float(intercept)


def w1_monokinetic_upper(particles: ParticleEnsemble, U) -> float:
    """Cost ``sum w |v_i - U|`` of moving every particle's velocity to ``U``.

    This coupling leaves positions in place, so it bounds the phase-space
    W1 distance between the particle measure and ``rho (x) delta_U`` from above.
    """
    dv = particles.v - np.asarray(U, dtype=float)
    return _wsum(particles.w, np.linalg.norm(dv, axis=1))


@dataclass(frozen=True)
class DiagnosticsRecord:
    """One time sample. Vector quantities are stored as tuples.

    ``gradint`` integrates the gradient sup-norm from time 1, ``gradint0`` from
    time 0. ``int_D`` and ``int_F`` are trapezoid integrals of the dissipation
    and of ``||F||^2`` in the inhomogeneous ``H^{-1/2}`` norm.
    """

    step: int
    t: float
    E: float
    D: float
    Emod: float
    mass: float
    mean_u: tuple
    mean_j: tuple
    M_alpha: float
    rho_sup: float
    j_sup: float
    gradint: float
    criterion_value: float
    lambda_theory: float
    w1_upper: float
    gradint0: float = 0.0
    grad_sup: float = 0.0
    int_D: float = 0.0
    int_F: float = 0.0
    F_norm2: float = 0.0
    u_linf: float = 0.0
    u_dev: float = 0.0
    rho_sup_max: float = 0.0
    strong_ok: bool = True
    bootstrap_ok: bool = True

    @classmethod
    def columns(cls, d: int) -> list[str]:
        out = []
        for f in fields(cls):
            if f.name in ("mean_u", "mean_j"):
                out += [f"{f.name}_{i}" for i in range(d)]
            else:
                out.append(f.name)
        return out

    def row(self) -> list:
        out = []
        for k, v in asdict(self).items():
            if k in ("mean_u", "mean_j"):
                out += list(v)
            else:
                out.append(v)
        return out

    @classmethod
    def from_row(cls, header: list[str], values: list[str]) -> "DiagnosticsRecord":
        raw = dict(zip(header, values))
        kw = {}
        for f in fields(cls):
            if f.name in ("mean_u", "mean_j"):
                keys = sorted((k for k in raw if k.startswith(f.name + "_")), key=lambda k: int(k.rsplit("_", 1)[1]))
                kw[f.name] = tuple(float(raw[k]) for k in keys)
            elif f.name == "step":
                kw[f.name] = int(raw[f.name])
            elif f.name in ("strong_ok", "bootstrap_ok"):
                kw[f.name] = raw[f.name] in ("1", "True", "true")
            elif f.name in raw:
                kw[f.name] = float(raw[f.name])
        return cls(**kw)
