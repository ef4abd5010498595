"""Deterministic particle discretisation of the kinetic phase.

Particles carry position ``x`` in ``[0, 1)^d``, velocity ``v`` and a fixed
weight ``w``. Their characteristics obey ``x' = v``, ``v' = u(x) - v``; within
a step the fluid velocity is frozen at a midpoint value and the linear ODE is
solved exactly, so pure friction (``u = 0``) is reproduced to roundoff.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special

from .spectral import FourierField, GridSpec, NumericalError

__all__ = [
    "ParticleEnsemble",
    "InitialDataSpec",
    "CICStencil",
    "build_ensemble",
    "frozen_flow",
    "push",
    "deposit",
    "interpolate",
    "interpolate_grid",
    "moment",
    "estimate_Nq",
    "cic_image",
    "wrap",
]


def wrap(x: np.ndarray) -> np.ndarray:
    """Reduce positions into ``[0, 1)``."""
    y = x - np.floor(x)
    y[y >= 1.0] -= 1.0
    return y


def _ro(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    x: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        x, v, w = _ro(self.x), _ro(self.v), _ro(self.w)
        if x.ndim != 2 or x.shape != v.shape or w.shape != (x.shape[0],):
            raise ValueError("inconsistent particle array shapes")
        if np.any(w < 0):
            raise ValueError("particle weights must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def mass(self) -> float:
        return math.fsum(self.w)

    def mean_velocity(self) -> np.ndarray:
        """``<j_f> = sum w v`` (not divided by the mass)."""
        return np.array([math.fsum(self.w * self.v[:, i]) for i in range(self.d)])

    def replace(self, x=None, v=None) -> "ParticleEnsemble":
        return ParticleEnsemble(self.x if x is None else x, self.v if v is None else v, self.w)

    def to_csv(self, stride: int = 1) -> str:
        d = self.d
        header = ",".join([f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)] + ["w"])
        rows = np.column_stack([self.x, self.v, self.w])[::stride]
        lines = [header] + [",".join(f"{a:.17g}" for a in r) for r in rows]
        return "\n".join(lines) + "\n"


# -- initial data --------------------------------------------------------------

_VELOCITY_FAMILIES = ("gaussian", "tail", "ball", "monokinetic", "none")
_SPATIAL_FAMILIES = ("uniform", "cosine")


@dataclass(frozen=True)
class InitialDataSpec:
    """Closed-form initial data ``f0(x, v) = sigma(x) g(v)`` plus the fluid ``u0``.

    ``sigma(x) = 1 + rho_amp cos(2 pi rho_k.x)`` has unit mean and ``g`` unit
    mass, so ``f0`` is normalised. Velocity families: ``gaussian`` (width
    ``sigma_v``), ``tail`` (``c / (1 + |v - v0|^tail_p)``), ``ball`` (top-hat of
    radius ``radius``), ``monokinetic`` (Dirac at ``v0``) and ``none`` (no
    particles).
    """

    d: int = 2
    spatial: str = "cosine"
    rho_amp: float = 0.2
    rho_k: tuple = (1, 0)
    velocity: str = "gaussian"
    v0: tuple = (0.0, 0.0)
    sigma_v: float = 0.1
    tail_p: float = 6.0
    radius: float = 0.5
    q: float = 5.0
    alpha: float = 3.5
    u0: str = "random"
    u0_hdot_half: float = 0.05
    u0_kmax: int = 2
    u0_mean: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.spatial not in _SPATIAL_FAMILIES:
            raise ValueError(f"unknown spatial family {self.spatial!r}")
        if self.velocity not in _VELOCITY_FAMILIES:
            raise ValueError(f"unknown velocity family {self.velocity!r}")
        if self.q <= 4:
            raise ValueError(f"decay order q must exceed 4 (got {self.q})")
        if self.alpha <= 3:
            raise ValueError(f"moment order alpha must exceed 3 (got {self.alpha})")
        if abs(self.rho_amp) >= 1:
            raise ValueError("|rho_amp| < 1 is required for a positive density")
        for name in ("v0", "rho_k", "u0_mean"):
            if len(getattr(self, name)) != self.d:
                raise ValueError(f"{name} must have {self.d} entries")
        if self.velocity == "tail":
            if self.tail_p <= self.d + self.alpha:
                raise ValueError("tail exponent must exceed d + alpha for a finite moment")
            if self.q > self.tail_p:
                raise ValueError("N_q is infinite when q exceeds the tail exponent")

    # spatial profile
    def sigma(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.spatial == "uniform" or self.rho_amp == 0:
            return np.ones(x.shape[0])
        phase = 2 * np.pi * (x @ np.asarray(self.rho_k, dtype=float))
        return 1.0 + self.rho_amp * np.cos(phase)

    def sigma_sup(self) -> float:
        if self.spatial == "uniform" or not any(self.rho_k):
            return 1.0 if self.spatial == "uniform" else 1.0 + self.rho_amp
        return 1.0 + abs(self.rho_amp)

    # velocity profile, as a function of the distance r = |v - v0|
    def g_radial(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        d = self.d
        if self.velocity == "gaussian":
            s2 = self.sigma_v**2
            return (2 * np.pi * s2) ** (-d / 2) * np.exp(-(r**2) / (2 * s2))
        if self.velocity == "tail":
            return _tail_constant(d, self.tail_p) / (1.0 + r**self.tail_p)
        if self.velocity == "ball":
            return np.where(r <= self.radius, 1.0 / _ball_volume(d, self.radius), 0.0)
        if self.velocity == "none":
            return np.zeros_like(r)
        raise ValueError(f"velocity family {self.velocity!r} has no density")

    def g(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        return self.g_radial(np.linalg.norm(v - np.asarray(self.v0), axis=-1))

    def f0(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Phase-space density; ``x``, ``v`` broadcast as ``(..., d)`` arrays."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        shape = np.broadcast_shapes(x.shape, v.shape)[:-1]
        xb = np.broadcast_to(x, shape + (self.d,)).reshape(-1, self.d)
        vb = np.broadcast_to(v, shape + (self.d,)).reshape(-1, self.d)
        return (self.sigma(xb) * self.g(vb)).reshape(shape)

    def tail_mass(self, vmax: float) -> float:
        """Mass of ``g`` outside the box ``|v_i - v0_i| <= vmax`` (bound for ``tail``)."""
        d = self.d
        if self.velocity == "gaussian":
            inside = 1.0 - special.erfc(vmax / (self.sigma_v * math.sqrt(2)))
            return float(-math.expm1(d * math.log(inside))) if inside > 0 else 1.0
        if self.velocity == "tail":
            # Outside the box implies outside the inscribed ball.
            p = self.tail_p
            surf = _sphere_area(d)
            # r -> 1/s maps [vmax, inf) onto the finite interval [0, 1/vmax].
            integral = _integrate(lambda t: t ** (p - d - 1) / (1 + t**p), 0.0, 1.0 / vmax)
            return float(_tail_constant(d, p) * surf * integral)
        if self.velocity == "ball":
            return 0.0 if vmax >= self.radius else 1.0
        return 0.0

    def auto_vmax(self, tol: float = 1e-8) -> float:
        if self.velocity == "gaussian":
            return float(self.sigma_v * math.sqrt(2) * special.erfcinv(tol / self.d))
        if self.velocity == "ball":
            return float(self.radius)
        if self.velocity == "tail":
            return float(optimize.brentq(lambda R: self.tail_mass(R) - tol, 1e-3, 1e12, xtol=1e-10))
        return 0.0


def _ball_volume(d: int, R: float) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * R**d


def _sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def _integrate(fun, a, b) -> float:
    from scipy import integrate

    val, _ = integrate.quad(fun, a, b, epsabs=0, epsrel=1e-12, limit=200)
    return val


def _tail_constant(d: int, p: float) -> float:
    # int_0^inf r^{d-1} / (1 + r^p) dr = (pi / p) / sin(pi d / p)
    radial = (math.pi / p) / math.sin(math.pi * d / p)
    return 1.0 / (_sphere_area(d) * radial)


def estimate_Nq(spec: InitialDataSpec, q: float | None = None) -> float:
    """``N_q(f0) = sup (1 + |v|^q) f0(x, v)``.

    The spatial factor separates. For the velocity factor, at fixed ``|v| = r``
    the density is largest on the ray through ``v0``, reducing the search to
    one variable; the ball and pure-tail cases are closed form.
    """
    q = spec.q if q is None else q
    if spec.velocity == "none":
        return 0.0
    if spec.velocity == "monokinetic":
        raise ValueError("N_q is undefined for a monokinetic (Dirac) velocity profile")
    s = spec.sigma_sup()
    c0 = float(np.linalg.norm(spec.v0))
    if spec.velocity == "ball":
        return s * float(spec.g_radial(0.0)) * (1.0 + (c0 + spec.radius) ** q)
    if spec.velocity == "tail" and c0 == 0.0 and q == spec.tail_p:
        return s * _tail_constant(spec.d, spec.tail_p)

    def h(r):
        return (1.0 + r**q) * spec.g_radial(np.abs(r - c0))

    scale = c0 + (spec.sigma_v if spec.velocity == "gaussian" else 1.0)
    grid = np.concatenate([np.linspace(0, 20 * scale, 20001), np.geomspace(20 * scale, 1e8 * scale, 2001)])
    vals = h(grid)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    best = vals[i]
    if hi > lo:
        res = optimize.minimize_scalar(lambda r: -h(r), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-14 * max(1.0, hi)})
        best = max(best, -res.fun)
    if spec.velocity == "tail" and q == spec.tail_p:
        best = max(best, _tail_constant(spec.d, spec.tail_p))  # limit r -> inf
    return s * float(best)


def build_ensemble(spec: InitialDataSpec, grid: GridSpec, per_cell: int = 2, nv: int = 8,
                   vmax: float | None = None, tail_tol: float = 1e-8):
    """Quadrature-lattice particles for ``f0``.

    Positions sit at the centres of a ``per_cell``-refined lattice of the
    fluid grid; velocities at midpoints of an ``nv``-per-axis lattice on the box
    ``v0 + [-vmax, vmax]^d``. Weights are ``f0 * dx^d * dv^d`` renormalised to
    unit total mass. Returns ``(ensemble, metadata)``.
    """
    d = grid.d
    if spec.d != d:
        raise ValueError("initial data and grid dimensions differ")
    m = grid.n * per_cell
    x1 = (np.arange(m) + 0.5) / m
    xs = np.stack(np.meshgrid(*([x1] * d), indexing="ij"), -1).reshape(-1, d)
    meta = {"vmax": 0.0, "discarded_mass": 0.0, "nv": nv, "per_cell": per_cell}
    if spec.velocity == "none":
        empty = np.zeros((0, d))
        return ParticleEnsemble(empty, empty, np.zeros(0)), meta
    sig = spec.sigma(xs)
    if spec.velocity == "monokinetic":
        vs = np.asarray(spec.v0, dtype=float)[None, :]
        gw = np.ones(1)
    else:
        if vmax is None:
            vmax = spec.auto_vmax(tail_tol)
        meta["vmax"] = float(vmax)
        meta["discarded_mass"] = spec.tail_mass(vmax)
        v1 = -vmax + (np.arange(nv) + 0.5) * (2 * vmax / nv)
        vs = np.stack(np.meshgrid(*([v1] * d), indexing="ij"), -1).reshape(-1, d) + np.asarray(spec.v0)
        gw = spec.g(vs)
        keep = gw > 0
        vs, gw = vs[keep], gw[keep]
    w = (sig[:, None] * gw[None, :]).ravel()
    x = np.repeat(xs, vs.shape[0], axis=0)
    v = np.tile(vs, (xs.shape[0], 1))
    return ParticleEnsemble(x, v, _normalise(w)), meta


def _normalise(w: np.ndarray) -> np.ndarray:
    """Scale to unit mass, then absorb the rounding residual into the largest
    weight so that ``math.fsum(w) == 1.0`` exactly."""
    w = w / math.fsum(w)
    big = int(np.argmax(w))
    for _ in range(4):
        r = 1.0 - math.fsum(w)
        if r == 0.0:
            break
        w[big] += r
    return w


# -- transport -----------------------------------------------------------------

def frozen_flow(x: np.ndarray, v: np.ndarray, ustar: np.ndarray, dt: float):
    """Exact flow over time ``dt`` (any sign) of ``x' = v, v' = ustar - v``."""
    a = -math.expm1(-dt)  # 1 - e^{-dt}
    dv = v - ustar
    return x + a * dv + dt * ustar, ustar + (1.0 - a) * dv


def push(particles: ParticleEnsemble, u_eval: Callable[[np.ndarray], np.ndarray],
         dt: float) -> ParticleEnsemble:
    """One exponential-integrator step.

    ``u_eval`` maps positions ``(N, d)`` to fluid velocities ``(N, d)``; it is
    evaluated once at the friction-only half-step position.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if particles.N == 0:
        return particles
    x, v = particles.x, particles.v
    xmid = wrap(x + (-math.expm1(-dt / 2)) * v)
    ustar = np.asarray(u_eval(xmid), dtype=float)
    xn, vn = frozen_flow(x, v, ustar, dt)
    if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(vn))):
        raise NumericalError("non-finite particle state")
    return particles.replace(x=wrap(xn), v=vn)


# -- grid transfer -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CICStencil:
    """Cloud-in-cell (multilinear) node indices and weights of a point set."""

    n: int
    d: int
    index: np.ndarray = field(repr=False)  # (2^d, N) flat node index
    weight: np.ndarray = field(repr=False)  # (2^d, N)

    @classmethod
    def build(cls, positions: np.ndarray, n: int) -> "CICStencil":
        positions = np.atleast_2d(positions)
        N, d = positions.shape
        s = positions * n
        base = np.floor(s).astype(np.int64)
        frac = s - base
        base %= n
        corners = 1 << d
        index = np.zeros((corners, N), dtype=np.int64)
        weight = np.ones((corners, N))
        for c in range(corners):
            for ax in range(d):
                bit = (c >> (d - 1 - ax)) & 1
                idx = (base[:, ax] + bit) % n
                index[c] = index[c] * n + idx
                weight[c] *= frac[:, ax] if bit else 1.0 - frac[:, ax]
        return cls(n, d, index, weight)

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` (shape ``(N,)``) onto nodes, corner by corner in fixed order."""
        size = self.n**self.d
        out = np.zeros(size)
        for c in range(self.index.shape[0]):
            out += np.bincount(self.index[c], weights=self.weight[c] * values, minlength=size)
        return out.reshape((self.n,) * self.d)

    def gather(self, grid_values: np.ndarray) -> np.ndarray:
        """Interpolate node values ``(C, n, ..)`` (or ``(n, ..)``) to the points."""
        g = np.asarray(grid_values)
        scalar = g.ndim == self.d
        flat = g.reshape(1 if scalar else g.shape[0], -1)
        out = np.zeros((self.index.shape[1], flat.shape[0]))
        for c in range(self.index.shape[0]):
            out += self.weight[c][:, None] * flat[:, self.index[c]].T
        return out[:, 0] if scalar else out


def deposit(particles: ParticleEnsemble, grid: GridSpec, stencil: CICStencil | None = None):
    """Cloud-in-cell density ``rho`` (shape ``(n,)*d``) and current ``j`` (``(d, n, ..)``)."""
    if particles.N == 0:
        return np.zeros(grid.shape), np.zeros((grid.d,) + grid.shape)
    st = stencil or CICStencil.build(particles.x, grid.n)
    inv = 1.0 / grid.cellvol
    rho = st.scatter(particles.w) * inv
    j = np.array([st.scatter(particles.w * particles.v[:, i]) for i in range(grid.d)]) * inv
    return rho, j


def interpolate_grid(values: np.ndarray, positions: np.ndarray, n: int) -> np.ndarray:
    return CICStencil.build(positions, n).gather(values)


def interpolate(u: FourierField, positions: np.ndarray) -> np.ndarray:
    """Fluid velocity at ``positions`` by the deposition kernel (adjoint of :func:`deposit`)."""
    positions = np.atleast_2d(positions)
    if positions.shape[0] == 0:
        return np.zeros((0, u.spec.d))
    return interpolate_grid(u.to_physical(), positions, u.spec.n)


def cic_image(density: np.ndarray) -> np.ndarray:
    """Node values a deposition would produce from a smooth periodic density.

    CIC deposition samples the density convolved with the hat kernel, whose
    Fourier multiplier is ``prod_i sinc^2(k_i / n)``; exact for band-limited input.
    """
    density = np.asarray(density, dtype=float)
    n = density.shape[0]
    d = density.ndim
    k1 = np.fft.fftfreq(n, d=1.0 / n)
    mult = np.ones(density.shape)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = n
        mult = mult * (np.sinc(k1 / n) ** 2).reshape(shape)
    return np.fft.ifftn(np.fft.fftn(density) * mult).real


def moment(particles: ParticleEnsemble, alpha: float) -> float:
    """``M_alpha = sum w |v|^alpha`` with compensated summation."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    speed = np.linalg.norm(particles.v, axis=1)
    return math.fsum(particles.w * speed**alpha)


# -- checkpoint ----------------------------------------------------------------

_ENS_MAGIC = b"VNSP"
_ENS_VERSION = 1
_ENS_HEAD = "<HQBddq"


def ensemble_to_bytes(p: ParticleEnsemble, q: float = 0.0, vmax: float = 0.0, seed: int = 0) -> bytes:
    """``VNSP`` magic, little-endian header (u16 version, u64 N, u8 d, f64 q,
    f64 v_max, i64 seed), then packed float64 arrays x, v, w."""
    head = _ENS_MAGIC + struct.pack(_ENS_HEAD, _ENS_VERSION, p.N, p.d, q, vmax, seed)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (p.x, p.v, p.w))
    return head + body


def ensemble_from_bytes(buf: bytes):
    """Inverse of :func:`ensemble_to_bytes`; returns ``(ensemble, header_dict)``."""
    if buf[:4] != _ENS_MAGIC:
        raise ValueError("not a particle blob")
    hsize = struct.calcsize(_ENS_HEAD)
    version, N, d, q, vmax, seed = struct.unpack(_ENS_HEAD, buf[4:4 + hsize])
    if version != _ENS_VERSION:
        raise ValueError(f"particle format version {version} unsupported (expected {_ENS_VERSION})")
    off = 4 + hsize
    arrs = []
    for count in (N * d, N * d, N):
        arrs.append(np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(float))
        off += 8 * count
    ens = ParticleEnsemble(arrs[0].reshape(N, d), arrs[1].reshape(N, d), arrs[2])
    return ens, {"N": N, "d": d, "q": q, "vmax": vmax, "seed": seed, "nbytes": off}
