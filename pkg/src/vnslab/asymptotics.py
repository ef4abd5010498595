"""Long-time behaviour of the kinetic phase.

Closed-form solutions of the kinetic equation in a frozen fluid, the
backward velocity map along characteristics with its Jacobian, and the
infinite-horizon characteristics ``Y^s`` that describe where the particle
density settles once the fluid has relaxed to a uniform drift.

Infinite-horizon characteristics solve, for ``z = (x, v)``,

    Y^s = x - e^{-s} v + D (e^{-s} + s)
          - int_0^inf K(s, tau) (u(tau, Y^tau) - D) dtau,

with ``K = e^{tau - s}`` for ``tau <= s`` and ``K = 1`` for ``tau >= s``. Here
``v`` is the initial velocity, ``x`` the final position in the frame moving
with the drift ``D``, and ``Y^s`` the actual position at time ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, ndimage

from .particles import CICStencil, InitialDataSpec, ParticleEnsemble, deposit, frozen_flow, wrap
from .spectral import FourierField, GridSpec, gradient_physical, grad_sup_norm

__all__ = [
    "TAIL_THRESHOLD",
    "VelocityHistory",
    "PicardResult",
    "JacobianResult",
    "ProfileResult",
    "ConvergenceFailure",
    "linear_solution",
    "linear_density",
    "linear_asymptotic_profile",
    "velocity_quadrature",
    "straightening_map",
    "moment_integral",
    "moment_bound_check",
    "picard_Y_infinity",
    "jacobian_A",
    "rho_infinity",
    "limit_positions",
    "profile_image",
]


class ConvergenceFailure(RuntimeError):
    pass


# -- velocity history ----------------------------------------------------------

TAIL_THRESHOLD = 1e-10


class VelocityHistory:
    """Fluid snapshots ``u(t_m)`` with evaluation at arbitrary points.

    Beyond the last snapshot the fluid is modelled as the uniform drift
    (gradient zero). Between snapshots, physical grids are interpolated
    linearly in time. Spatial interpolation is ``cic`` (the particle kernel,
    bilinear on the simulation grid) or ``spline`` (periodic cubic spline on a
    ``refine``-times finer grid).

    Args:
        times: strictly increasing snapshot times, starting at 0.
        fields: one :class:`FourierField` per time.
        drift: tail velocity used after the last snapshot.
        interp: ``cic`` or ``spline``.
        refine: grid refinement used by ``spline``.
        tail_ratio: optional ``Emod(t_M) / Emod(0)``; the uniform-drift tail is
            trusted only when it is below :data:`TAIL_THRESHOLD`.
    """

    def __init__(self, times: Sequence[float], fields: Sequence[FourierField], drift=None,
                 interp: str = "cic", refine: int = 2, tail_ratio: float | None = None):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or times.size != len(fields) or times.size < 1:
            raise ValueError("need one field per snapshot time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        if interp not in ("cic", "spline"):
            raise ValueError(f"unknown interpolation {interp!r}")
        self.times = times
        self.fields = list(fields)
        self.spec: GridSpec = fields[0].spec
        d = self.spec.d
        self.drift = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)
        self.interp = interp
        self.tail_ratio = tail_ratio
        r = refine if interp == "spline" else 1
        self._m = r * self.spec.n
        self._u = np.array([_physical_samples(f, r) for f in fields])  # (M, d, m..)
        self._g = np.array([gradient_physical(f, r) for f in fields])  # (M, d, d, m..)
        if interp == "spline":
            self._u = np.array([[ndimage.spline_filter(c, 3, mode="grid-wrap") for c in s] for s in self._u])
            self._g = np.array([[[ndimage.spline_filter(c, 3, mode="grid-wrap") for c in row] for row in s]
                                for s in self._g])
        self._grad_sup = np.array([grad_sup_norm(f) for f in fields])

    @classmethod
    def constant(cls, spec: GridSpec, U, times: Sequence[float] = (0.0, 1.0), **kw) -> "VelocityHistory":
        f = FourierField.constant(spec, U)
        return cls(times, [f] * len(times), drift=U, **kw)

    @property
    def tail_ok(self) -> bool | None:
        """Whether the recorded decay justifies the drift tail (None if unrecorded)."""
        if self.tail_ratio is None:
            return None
        return bool(self.tail_ratio < TAIL_THRESHOLD)

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    @property
    def grad_sup(self) -> np.ndarray:
        return self._grad_sup

    def gradint(self, t: float | None = None) -> float:
        """Trapezoid ``int_0^t ||grad u||_inf`` (the tail contributes nothing)."""
        if self.times.size == 1:
            return 0.0
        if t is None or t >= self.t_final:
            return float(integrate.trapezoid(self._grad_sup, self.times))
        tt = np.concatenate([self.times[self.times < t], [t]])
        gg = np.interp(tt, self.times, self._grad_sup)
        return float(integrate.trapezoid(gg, tt))

    def _eval(self, grids: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Evaluate stacked periodic grids ``(C, m..)`` at ``pts`` (P, d) -> (P, C)."""
        pts = wrap(np.asarray(pts, dtype=float))
        if self.interp == "cic":
            return CICStencil.build(pts, self._m).gather(grids)
        coords = (pts * self._m).T
        out = np.empty((pts.shape[0], grids.shape[0]))
        for c in range(grids.shape[0]):
            out[:, c] = ndimage.map_coordinates(grids[c], coords, order=3, mode="grid-wrap", prefilter=False)
        return out

    def velocity_at(self, m: int, pts: np.ndarray) -> np.ndarray:
        """Fluid velocity of snapshot ``m`` at points ``(P, d)``."""
        return self._eval(self._u[m], pts)

    def gradient_at(self, m: int, pts: np.ndarray) -> np.ndarray:
        """``du_i/dx_j`` of snapshot ``m`` at points, shape ``(P, d, d)``."""
        d = self.spec.d
        g = self._g[m].reshape((d * d,) + self._g.shape[3:])
        return self._eval(g, pts).reshape(-1, d, d)

    def _bracket(self, t: float):
        if t < self.times[0]:
            raise ValueError(f"time {t} precedes the first snapshot")
        if t >= self.t_final:
            return None
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        lam = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return i, lam

    def velocity(self, t: float, pts: np.ndarray) -> np.ndarray:
        """Velocity at any time; past the last snapshot, the drift."""
        pts = np.atleast_2d(pts)
        br = self._bracket(t)
        if br is None:
            if t == self.t_final:
                return self.velocity_at(len(self.times) - 1, pts)
            return np.broadcast_to(self.drift, pts.shape).copy()
        i, lam = br
        a = self.velocity_at(i, pts)
        return a if lam == 0 else (1 - lam) * a + lam * self.velocity_at(i + 1, pts)

    def gradient(self, t: float, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        d = self.spec.d
        br = self._bracket(t)
        if br is None:
            if t == self.t_final:
                return self.gradient_at(len(self.times) - 1, pts)
            return np.zeros((pts.shape[0], d, d))
        i, lam = br
        a = self.gradient_at(i, pts)
        return a if lam == 0 else (1 - lam) * a + lam * self.gradient_at(i + 1, pts)


def _physical_samples(u: FourierField, refine: int = 1) -> np.ndarray:
    """Samples of ``u`` on a ``refine``-times finer grid (trigonometric interpolation)."""
    if refine == 1:
        return u.to_physical()
    spec = u.spec
    m = refine * spec.n
    out = np.zeros((spec.d,) + (m,) * spec.d, dtype=complex)
    k1 = np.fft.fftfreq(spec.n, d=1.0 / spec.n).astype(int) % m
    out[(Ellipsis,) + np.ix_(*([k1] * spec.d))] = u.coeffs
    return np.fft.ifftn(out * m**spec.d, axes=tuple(range(1, spec.d + 1))).real


# -- closed-form oracles -------------------------------------------------------

def linear_solution(spec: InitialDataSpec, t: float, x, v, U=None) -> np.ndarray:
    """Exact density at time ``t`` for the kinetic equation in the fluid ``u = U``.

    Characteristics are traced back to time 0 and the phase-volume factor
    ``e^{d t}`` applied: ``e^{dt} f0(x - (e^t - 1)(v - U) - t U, U + e^t (v - U))``.
    """
    if spec.velocity in ("monokinetic", "none"):
        raise ValueError(f"no pointwise density for the {spec.velocity!r} family")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    U = np.zeros(spec.d) if U is None else np.asarray(U, dtype=float)
    x0, v0 = frozen_flow(x, v, U, -t)
    return math.exp(spec.d * t) * spec.f0(wrap(x0), v0)


def velocity_quadrature(spec: InitialDataSpec, nq: int = 16, vmax: float | None = None):
    """Nodes and weights with ``sum_q w_q h(v_q) ~ int h(v) g(v) dv``.

    Gaussian profiles use tensor Gauss-Hermite rules; radial profiles (ball,
    tail) use Gauss-Legendre in the radius times a uniform angular rule. For
    tails the radial rule is split at ``|v| = 1`` and the outer part is taken
    in ``1/|v|``, which doubles the radial node count.
    """
    d = spec.d
    v0 = np.asarray(spec.v0, dtype=float)
    if spec.velocity == "monokinetic":
        return v0[None, :], np.ones(1)
    if spec.velocity == "none":
        return np.zeros((0, d)), np.zeros(0)
    if spec.velocity == "gaussian":
        z, wz = np.polynomial.hermite_e.hermegauss(nq)
        wz = wz / math.sqrt(2 * math.pi)
        grids = np.meshgrid(*([z] * d), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], -1) * spec.sigma_v + v0
        weights = np.prod(np.stack(np.meshgrid(*([wz] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
        return nodes, weights
    R = spec.radius if spec.velocity == "ball" else (vmax if vmax is not None else spec.auto_vmax())
    z, wz = np.polynomial.legendre.leggauss(nq)
    if spec.velocity == "ball" or R <= 1.0:
        r, wr = 0.5 * R * (z + 1), 0.5 * R * wz
    else:
        # algebraic tails: Legendre on [0, 1], then s = 1/r on [1/R, 1] where the integrand is smooth
        r_in, w_in = 0.5 * (z + 1), 0.5 * wz
        a = 1.0 / R
        s = a + 0.5 * (1 - a) * (z + 1)
        r = np.concatenate([r_in, 1.0 / s])
        wr = np.concatenate([w_in, 0.5 * (1 - a) * wz / s**2])
    if d == 2:
        na = 2 * nq
        th = 2 * np.pi * np.arange(na) / na
        rr, tt = np.meshgrid(r, th, indexing="ij")
        nodes = np.stack([rr * np.cos(tt), rr * np.sin(tt)], -1).reshape(-1, 2)
        weights = (wr[:, None] * r[:, None] * (2 * np.pi / na) * np.ones((1, na))).ravel()
    else:
        c, wc = np.polynomial.legendre.leggauss(nq)
        na = 2 * nq
        ph = 2 * np.pi * np.arange(na) / na
        rr, cc, pp = np.meshgrid(r, c, ph, indexing="ij")
        s = np.sqrt(1 - cc**2)
        nodes = np.stack([rr * s * np.cos(pp), rr * s * np.sin(pp), rr * cc], -1).reshape(-1, 3)
        weights = (wr[:, None, None] * r[:, None, None] ** 2 * wc[None, :, None] * (2 * np.pi / na)
                   * np.ones((1, 1, na))).ravel()
    weights = weights * spec.g_radial(np.linalg.norm(nodes, axis=1))
    return nodes + v0, weights


def linear_density(spec: InitialDataSpec, grid: GridSpec, t: float, U=None, nq: int = 16) -> np.ndarray:
    """Density at time ``t`` for the fluid frozen at ``U``, on the grid nodes.

    Integrating over the initial velocity removes the phase-volume factor:
    ``rho(t, x) = int sigma(x - (1 - e^{-t})(w - U) - t U) g(w) dw``.
    """
    U = np.zeros(grid.d) if U is None else np.asarray(U, dtype=float)
    nodes, weights = velocity_quadrature(spec, nq)
    X = grid.nodes.reshape(grid.d, -1).T
    c = -math.expm1(-t)
    out = np.zeros(X.shape[0])
    for wq, mass in zip(nodes, weights):
        out += mass * spec.sigma(wrap(X - c * (wq - U) - t * U))
    return out.reshape(grid.shape)


def linear_asymptotic_profile(spec: InitialDataSpec, grid: GridSpec, U=None, nq: int = 16) -> np.ndarray:
    """Limit density in the frame moving with ``U`` for the fluid frozen at ``U``.

    ``rho(x) = int f0(x - v + U, v) dv``, on the grid nodes.
    """
    U = np.zeros(grid.d) if U is None else np.asarray(U, dtype=float)
    nodes, weights = velocity_quadrature(spec, nq)
    X = grid.nodes.reshape(grid.d, -1).T
    out = np.zeros(X.shape[0])
    for vq, wq in zip(nodes, weights):
        out += wq * spec.sigma(wrap(X - vq + U))
    return out.reshape(grid.shape)


# -- straightening map ---------------------------------------------------------

@dataclass
class StraighteningResult:
    V0: np.ndarray  # (P, d) initial velocity
    X0: np.ndarray  # (P, d) initial position (unwrapped)
    jac: np.ndarray  # (P, d, d) D_v V(0)
    det: np.ndarray  # (P,)
    gradint: float  # int_0^t ||grad u||_inf
    certified: bool  # det >= e^{dt}/2 - tol wherever the smallness condition holds


def _backward(history: VelocityHistory, t: float, x: np.ndarray, v: np.ndarray, nsteps: int,
              tangents: bool = False):
    """Trace characteristics from time ``t`` back to 0 with the exponential integrator.

    Each step mirrors :func:`push`: the fluid is frozen at the time-midpoint
    value, evaluated at the friction-only half-step position.
    """
    h = t / nsteps
    d = x.shape[1]
    P = x.shape[0]
    if tangents:
        Jx = np.zeros((P, d, d))
        Jv = np.broadcast_to(np.eye(d), (P, d, d)).copy()
    c_half = math.expm1(h / 2)  # e^{h/2} - 1
    a = -math.expm1(h)  # 1 - e^{h}, the frozen-flow factor for a step of -h
    for k in range(nsteps, 0, -1):
        s_mid = (k - 0.5) * h
        xm = x - c_half * v
        ustar = history.velocity(s_mid, xm)
        if tangents:
            G = history.gradient(s_mid, xm)
            dxm = Jx - c_half * Jv
            du = G @ dxm
            Jx, Jv = Jx + a * (Jv - du) - h * du, du + (1 - a) * (Jv - du)
        x, v = frozen_flow(x, v, ustar, -h)
    if tangents:
        return x, v, Jv
    return x, v, None


def straightening_map(history: VelocityHistory, t: float, x, v, method: str = "variational",
                      h: float = 1e-4, dt: float = 0.01, delta: float | None = None, tol: float = 1e-6):
    """Initial velocity ``V(0; t, x, v)`` and its Jacobian in ``v``.

    Args:
        history: fluid snapshots covering ``[0, t]``.
        t: final time of the characteristics.
        x, v: points ``(P, d)`` at time ``t``.
        method: ``variational`` (tangent propagation through the discrete map)
            or ``fd`` (central differences with step ``h``).
        dt: maximal backward step.
        delta: smallness threshold under which the certificate is asserted.
        tol: slack of the certificate.
    """
    if t > history.t_final + 1e-12:
        raise ValueError(f"history ends at {history.t_final}, before t={t}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    d = x.shape[1]
    nsteps = max(1, int(math.ceil(t / dt - 1e-12)))
    if t == 0:
        X0, V0, J = x.copy(), v.copy(), np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy()
    elif method == "variational":
        X0, V0, J = _backward(history, t, x, v, nsteps, tangents=True)
    elif method == "fd":
        X0, V0, _ = _backward(history, t, x, v, nsteps)
        J = np.empty((x.shape[0], d, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            _, vp, _ = _backward(history, t, x, v + e, nsteps)
            _, vm, _ = _backward(history, t, x, v - e, nsteps)
            J[:, :, k] = (vp - vm) / (2 * h)
    else:
        raise ValueError(f"unknown Jacobian method {method!r}")
    det = np.linalg.det(J)
    gi = history.gradint(t)
    if delta is None:
        from .coupling import DEFAULT_DELTA
        delta = DEFAULT_DELTA
    certified = True
    if gi <= delta:
        certified = bool(np.all(np.abs(det) >= math.exp(d * t) / 2 - tol))
    return StraighteningResult(V0, X0, J, det, gi, certified)


# -- velocity moment bounds ----------------------------------------------------

def moment_integral(q: float, d: int) -> float:
    """``I_q = int_{R^d} (1 + |v|) / (1 + |v|^q) dv`` by adaptive radial quadrature."""
    if q <= d + 1:
        raise ValueError(f"I_q diverges for q={q} <= d+1={d + 1}")
    surf = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    f = lambda r: r ** (d - 1) * (1 + r) / (1 + r**q)  # noqa: E731
    a, _ = integrate.quad(f, 0, 1, epsabs=0, epsrel=1e-13, limit=200)
    # r -> 1/s on [1, inf) gives a finite interval.
    g = lambda s: s ** (q - d - 2) * (s + 1) / (s**q + 1)  # noqa: E731
    b, _ = integrate.quad(g, 0, 1, epsabs=0, epsrel=1e-13, limit=200)
    return surf * (a + b)


def moment_bound_check(t, rho_sup, j_sup, u_linf, Nq: float, q: float, d: int, tol: float = 0.0) -> dict:
    """Compare measured density/current maxima with the straightened-variable bounds.

    ``rho <= 2 I_q N_q`` and
    ``|j| <= 2 I_q e^{-t} (int_0^t e^s ||u(s)||_inf ds + 1) N_q``; the integral
    uses the trapezoid rule on the recorded ``||u||_inf`` series.

    Returns:
        dict with ``I_q``, the bound arrays, margins and pass flags.
    """
    t = np.asarray(t, dtype=float)
    rho_sup, j_sup, u_linf = (np.asarray(a, dtype=float) for a in (rho_sup, j_sup, u_linf))
    Iq = moment_integral(q, d)
    rho_bound = 2 * Iq * Nq
    growth = np.concatenate([[0.0], integrate.cumulative_trapezoid(np.exp(t) * u_linf, t)])
    j_bound = 2 * Iq * np.exp(-t) * (growth + 1) * Nq
    return {
        "I_q": Iq,
        "rho_bound": rho_bound,
        "j_bound": j_bound,
        "rho_margin": rho_bound - rho_sup,
        "j_margin": j_bound - j_sup,
        "rho_ok": bool(np.all(rho_sup <= rho_bound + tol)),
        "j_ok": bool(np.all(j_sup <= j_bound + tol)),
    }


# -- infinite-horizon characteristics ------------------------------------------

@dataclass
class PicardResult:
    s: np.ndarray  # (M,) snapshot times
    Y: np.ndarray  # (M, P, d) positions, not reduced mod 1
    iters: int
    residual: float
    contraction: float  # 2 int ||grad u||_inf


def _seed(s: np.ndarray, x: np.ndarray, v: np.ndarray, drift: np.ndarray) -> np.ndarray:
    es = np.exp(-s)[:, None, None]
    return x[None] - es * v[None] + (es + s[:, None, None]) * drift[None, None, :]


def _kernel_integral(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Trapezoid ``int K(s_m, tau) g(tau) dtau`` on the nodes, tail beyond ``s[-1]`` zero.

    ``g`` has shape ``(M, P, d)``. The ``e^{tau - s}`` part is accumulated as
    ``e^{-s} int_0^s e^tau g`` with the exponent shifted for overflow safety.
    """
    ds = np.diff(s)[:, None, None]
    # e^{tau - s_m} = e^{tau - s_M} e^{s_M - s_m}; with scale e^{-s_M} the
    # cumulative sum stays bounded.
    scale = np.exp(s - s[-1])[:, None, None]
    eg = scale * g
    c1 = np.concatenate([np.zeros_like(g[:1]), np.cumsum(0.5 * ds * (eg[1:] + eg[:-1]), axis=0)])
    c2 = np.concatenate([np.zeros_like(g[:1]), np.cumsum(0.5 * ds * (g[1:] + g[:-1]), axis=0)])
    return c1 / scale + (c2[-1][None] - c2)


def _picard_map(history: VelocityHistory, seed: np.ndarray, Y: np.ndarray, drift: np.ndarray) -> np.ndarray:
    s = history.times
    g = np.empty_like(Y)
    for m in range(s.size):
        g[m] = history.velocity_at(m, Y[m]) - drift
    return seed - _kernel_integral(s, g)


def picard_Y_infinity(history: VelocityHistory, drift, x, v, tol: float = 1e-10, max_iter: int = 200,
                      Y_init: np.ndarray | None = None, check_contraction: bool = True) -> PicardResult:
    """Fixed point of the infinite-horizon characteristic equation on the snapshot times.

    Args:
        history: fluid snapshots; the tail after the last one is the drift.
        drift: ``<u0 + j0> / 2``.
        x: final positions in the drifting frame, ``(P, d)``.
        v: initial velocities, ``(P, d)``.
        tol: stop when the sup-norm update falls below ``tol``.
        max_iter: iteration cap.
        Y_init: optional warm start ``(M, P, d)``.
        check_contraction: refuse to iterate when ``2 int ||grad u||_inf >= 1``.

    Raises:
        ConvergenceFailure: contraction check failed or no convergence.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    drift = np.asarray(drift, dtype=float)
    q = 2 * history.gradint()
    if check_contraction and q >= 1:
        raise ConvergenceFailure(f"contraction check failed: 2*int|grad u| = {q:.3f} >= 1")
    seed = _seed(history.times, x, v, drift)
    Y = seed.copy() if Y_init is None else Y_init.copy()
    for it in range(1, max_iter + 1):
        Yn = _picard_map(history, seed, Y, drift)
        change = float(np.max(np.abs(Yn - Y), initial=0.0))
        Y = Yn
        if change < tol:
            res = float(np.max(np.abs(_picard_map(history, seed, Y, drift) - Y), initial=0.0))
            return PicardResult(history.times, Y, it, res, q)
    raise ConvergenceFailure(f"Picard iteration stalled at update {change:.2e} after {max_iter} sweeps")


@dataclass
class JacobianResult:
    A: np.ndarray  # (P, d, d)
    detA: np.ndarray  # (P,)
    DxY0: np.ndarray  # (P, d, d) derivative of the time-0 position in x
    Dx_sup: float  # max over s and points of |D_x Y^s|
    eDv_sup: float  # max over s and points of |e^s D_v Y^s|
    Y: PicardResult


def _solve_points(history, drift, x, v, tol, Y_init=None):
    return picard_Y_infinity(history, drift, x, v, tol=tol, Y_init=Y_init)


def jacobian_A(history: VelocityHistory, drift, x, v, h: float = 1e-4, tol: float = 1e-12) -> JacobianResult:
    """Jacobian factor of the limit density, by central differences of re-solved fixed points.

    ``A = I + int e^tau grad u(tau, Y^tau) D_v Y^tau dtau``; the operator
    norms of ``D_x Y^s`` and ``e^s D_v Y^s`` along the path are returned too.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    P, d = x.shape
    base = _solve_points(history, drift, x, v, tol)
    s = history.times
    M = s.size
    DvY = np.empty((M, P, d, d))
    DxY = np.empty((M, P, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        vp = _solve_points(history, drift, x, v + e, tol, base.Y)
        vm = _solve_points(history, drift, x, v - e, tol, base.Y)
        DvY[..., k] = (vp.Y - vm.Y) / (2 * h)
        xp = _solve_points(history, drift, x + e, v, tol, base.Y)
        xm = _solve_points(history, drift, x - e, v, tol, base.Y)
        DxY[..., k] = (xp.Y - xm.Y) / (2 * h)
    integrand = np.empty((M, P, d, d))
    for m in range(M):
        integrand[m] = math.exp(s[m]) * (history.gradient_at(m, base.Y[m]) @ DvY[m])
    A = np.eye(d)[None] + (integrate.trapezoid(integrand, s, axis=0) if M > 1 else 0.0)
    Dx_sup = float(np.max(np.linalg.norm(DxY, ord=2, axis=(-2, -1))))
    eDv = np.exp(s)[:, None, None, None] * DvY
    eDv_sup = float(np.max(np.linalg.norm(eDv, ord=2, axis=(-2, -1))))
    return JacobianResult(A, np.linalg.det(A), DxY[0], Dx_sup, eDv_sup, base)


@dataclass
class ProfileResult:
    rho_inf: np.ndarray
    detA_field: np.ndarray  # (n^d, Q) |det A| at grid node x velocity node
    picard_iters: int
    residual: float
    mass: float
    detDx_field: np.ndarray | None = None
    Dx_sup: float = 0.0
    eDv_sup: float = 0.0


def rho_infinity(history: VelocityHistory, drift, spec: InitialDataSpec, grid: GridSpec | None = None,
                 nq: int = 8, h: float = 1e-4, tol: float = 1e-12, chunk: int = 2048) -> ProfileResult:
    """Limit density ``rho_inf(x) = int f0(Y^0, v) |det A| dv`` on the grid nodes.

    The velocity integral uses :func:`velocity_quadrature`; the spatial factor
    of ``f0`` is evaluated at the time-0 foot point ``Y^0``.
    """
    grid = grid or history.spec
    nodes, weights = velocity_quadrature(spec, nq)
    X = grid.nodes.reshape(grid.d, -1).T
    Q = nodes.shape[0]
    xs = np.repeat(X, Q, axis=0)
    vs = np.tile(nodes, (X.shape[0], 1))
    ws = np.tile(weights, X.shape[0])
    dens = np.empty(xs.shape[0])
    detA = np.empty(xs.shape[0])
    detDx = np.empty(xs.shape[0])
    iters, res, dx_sup, dv_sup = 0, 0.0, 0.0, 0.0
    for a in range(0, xs.shape[0], chunk):
        sl = slice(a, a + chunk)
        jr = jacobian_A(history, drift, xs[sl], vs[sl], h=h, tol=tol)
        y0 = wrap(jr.Y.Y[0])
        detA[sl] = np.abs(jr.detA)
        detDx[sl] = np.abs(np.linalg.det(jr.DxY0))
        dens[sl] = spec.sigma(y0) * detA[sl]
        iters = max(iters, jr.Y.iters)
        res = max(res, jr.Y.residual)
        dx_sup, dv_sup = max(dx_sup, jr.Dx_sup), max(dv_sup, jr.eDv_sup)
    rho = np.sum((ws * dens).reshape(X.shape[0], Q), axis=1).reshape(grid.shape)
    return ProfileResult(
        rho_inf=rho,
        detA_field=detA.reshape(X.shape[0], Q),
        picard_iters=iters,
        residual=res,
        mass=float(np.mean(rho)),
        detDx_field=detDx.reshape(X.shape[0], Q),
        Dx_sup=dx_sup,
        eDv_sup=dv_sup,
    )


def limit_positions(history: VelocityHistory, drift, x0, v0, tol: float = 1e-10, max_iter: int = 200,
                    chunk: int = 4096) -> tuple[np.ndarray, int]:
    """Final drifting-frame positions of particles starting at ``(x0, v0)``.

    Solves ``Y^0_{x, v0} = x0`` for ``x``. Since ``Y^0 = x - v0 + D - I(x)`` with
    ``I`` the kernel integral at ``s = 0``, the update ``x <- x0 + v0 - D + I(x)``
    is iterated jointly with the Picard sweep for ``Y``.

    Returns:
        ``(x_inf mod 1, sweeps)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    drift = np.asarray(drift, dtype=float)
    out = np.empty_like(x0)
    sweeps = 0
    s = history.times
    for a in range(0, x0.shape[0], chunk):
        sl = slice(a, a + chunk)
        xa, va = x0[sl], v0[sl]
        x = xa + va - drift
        Y = _seed(s, x, va, drift)
        for it in range(1, max_iter + 1):
            g = np.empty_like(Y)
            for m in range(s.size):
                g[m] = history.velocity_at(m, Y[m]) - drift
            I = _kernel_integral(s, g)
            x_new = xa + va - drift + I[0]
            Y_new = _seed(s, x_new, va, drift) - I
            change = max(float(np.max(np.abs(x_new - x), initial=0.0)),
                         float(np.max(np.abs(Y_new - Y), initial=0.0)))
            x, Y = x_new, Y_new
            if change < tol:
                break
        else:
            raise ConvergenceFailure(f"limit-position iteration stalled at {change:.2e}")
        sweeps = max(sweeps, it)
        out[sl] = x
    return wrap(out), sweeps


def profile_image(history: VelocityHistory, drift, particles: ParticleEnsemble, grid: GridSpec,
                  tol: float = 1e-10) -> tuple[np.ndarray, int]:
    """Deposited image of the limit density for a discretised initial datum.

    Every initial particle is moved to its limit position in the drifting
    frame and deposited with its weight. This is the push-forward form of the
    limit density, equivalent to the Jacobian form because
    ``|det A| = |det D_x Y^0|``.
    """
    xinf, sweeps = limit_positions(history, drift, particles.x, particles.v, tol=tol)
    moved = ParticleEnsemble(xinf, particles.v, particles.w)
    rho, _ = deposit(moved, grid)
    return rho, sweeps
