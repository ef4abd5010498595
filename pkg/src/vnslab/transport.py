"""Wasserstein-1 distances between histograms on the torus (and on torus x
velocity boxes), with dual certificates and an entropic solver."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .particles import ParticleEnsemble

for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    # POT otherwise probes every installed array backend at import time.
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

__all__ = [
    "Histogram",
    "ConvergenceError",
    "ground_cost",
    "w1_exact",
    "w1_entropic",
    "dual_certificate",
    "kantorovich_potential",
    "renormalized_density",
    "jabin_cauchy_bound",
    "sqrt_tail_integral",
]

MAX_EXACT_BINS = 4096


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Histogram:
    """Point masses at bin centres.

    ``periodic[i]`` marks coordinate ``i`` as living on the unit circle; other
    coordinates use the plain distance.
    """

    points: np.ndarray
    masses: np.ndarray
    periodic: tuple

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        m = np.asarray(self.masses, dtype=float).ravel()
        if pts.shape[0] != m.size or len(self.periodic) != pts.shape[1]:
            raise ValueError("points, masses and periodic flags disagree in size")
        if np.any(m < 0):
            raise ValueError("histogram masses must be nonnegative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))

    @property
    def total(self) -> float:
        return float(np.sum(self.masses))

    @property
    def size(self) -> int:
        return self.masses.size

    @classmethod
    def from_grid(cls, density: np.ndarray) -> "Histogram":
        """Masses ``density * cellvol`` at the nodes ``j/n`` of a periodic grid."""
        density = np.asarray(density, dtype=float)
        n, d = density.shape[0], density.ndim
        x1 = np.arange(n) / n
        pts = np.stack(np.meshgrid(*([x1] * d), indexing="ij"), -1).reshape(-1, d)
        return cls(pts, density.ravel() / n**d, (True,) * d)

    @classmethod
    def phase_space(cls, x: np.ndarray, v: np.ndarray, w: np.ndarray, nx: int, nv: int,
                    vlo: Sequence[float], vhi: Sequence[float]) -> "Histogram":
        """Nearest-bin histogram on ``nx^d`` spatial by ``nv^d`` velocity cells.

        Velocities outside the box are clamped to the edge cells.
        """
        x, v, w = np.atleast_2d(x), np.atleast_2d(v), np.asarray(w, dtype=float)
        d = x.shape[1]
        vlo, vhi = np.asarray(vlo, dtype=float), np.asarray(vhi, dtype=float)
        ix = np.floor(x * nx).astype(np.int64) % nx
        iv = np.clip(np.floor((v - vlo) / (vhi - vlo) * nv).astype(np.int64), 0, nv - 1)
        idx = np.zeros(x.shape[0], dtype=np.int64)
        for a in range(d):
            idx = idx * nx + ix[:, a]
        for a in range(d):
            idx = idx * nv + iv[:, a]
        mass = np.bincount(idx, weights=w, minlength=(nx * nv) ** d)
        xc = (np.arange(nx) + 0.5) / nx
        vc = [vlo[a] + (np.arange(nv) + 0.5) * (vhi[a] - vlo[a]) / nv for a in range(d)]
        axes = [xc] * d + vc
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2 * d)
        return cls(pts, mass, (True,) * d + (False,) * d)

    @classmethod
    def from_particles(cls, particles: ParticleEnsemble, nx: int, nv: int, vlo, vhi,
                       velocity=None) -> "Histogram":
        """Phase-space histogram of an ensemble; ``velocity`` replaces every ``v`` if given."""
        v = particles.v if velocity is None else np.broadcast_to(np.asarray(velocity, float), particles.v.shape)
        return cls.phase_space(particles.x, v, particles.w, nx, nv, vlo, vhi)

    def support(self) -> "Histogram":
        keep = self.masses > 0
        return Histogram(self.points[keep], self.masses[keep], self.periodic)


def ground_cost(p: np.ndarray, q: np.ndarray, periodic: tuple) -> np.ndarray:
    """Pairwise Euclidean distances, with periodic wrap on flagged axes."""
    diff = np.abs(p[:, None, :] - q[None, :, :])
    per = np.asarray(periodic, dtype=bool)
    if per.any():
        wrapped = diff[..., per] % 1.0
        diff[..., per] = np.minimum(wrapped, 1.0 - wrapped)
    return np.sqrt(np.sum(diff**2, axis=-1))


def _check_pair(a: Histogram, b: Histogram, tol: float = 1e-12):
    if a.periodic != b.periodic:
        raise ValueError("histograms live on different spaces")
    if abs(a.total - b.total) > tol * max(1.0, a.total):
        raise ValueError(f"mass mismatch {a.total!r} vs {b.total!r}")


def w1_exact(a: Histogram, b: Histogram, max_bins: int = MAX_EXACT_BINS) -> float:
    """Exact discrete W1 by network simplex (POT ``emd2``) on the nonempty bins."""
    _check_pair(a, b)
    a, b = a.support(), b.support()
    if max(a.size, b.size) > max_bins:
        raise ValueError(f"{max(a.size, b.size)} occupied bins exceed the exact-solver limit {max_bins}")
    if a.size == 0 or b.size == 0:
        return 0.0
    C = ground_cost(a.points, b.points, a.periodic)
    mb = b.masses * (a.total / b.total)
    return float(ot.emd2(a.masses, mb, C, numItermax=10_000_000))


def kantorovich_potential(a: Histogram, b: Histogram, points: np.ndarray | None = None) -> np.ndarray:
    """A 1-Lipschitz potential attaining ``W1(a, b)``, evaluated at ``points``.

    Built as the c-transform ``phi(z) = min_j (|z - y_j| - g_j)`` of the optimal
    dual variables ``g`` of the exact problem; a minimum of 1-Lipschitz
    functions is 1-Lipschitz.
    """
    _check_pair(a, b)
    sa, sb = a.support(), b.support()
    C = ground_cost(sa.points, sb.points, a.periodic)
    _, log = ot.emd(sa.masses, sb.masses * (sa.total / sb.total), C, numItermax=10_000_000, log=True)
    g = np.asarray(log["v"])
    pts = a.points if points is None else np.atleast_2d(points)
    return np.min(ground_cost(pts, sb.points, a.periodic) - g[None, :], axis=1)


def _lipschitz_excess(points: np.ndarray, phi: np.ndarray, periodic: tuple, chunk: int = 512) -> float:
    worst = -np.inf
    for s in range(0, points.shape[0], chunk):
        dist = ground_cost(points[s:s + chunk], points, periodic)
        jump = np.abs(phi[s:s + chunk, None] - phi[None, :])
        worst = max(worst, float(np.max(jump - (1 + 1e-9) * dist)))
    return worst


def dual_certificate(a: Histogram, b: Histogram, phis: Sequence[np.ndarray | Callable]) -> float:
    """Best lower bound ``max_phi (sum phi da - sum phi db)`` on W1.

    Both histograms must share bin positions. Each ``phi`` is either an array of
    values at the bins or a callable on the bin positions; every one is checked
    to be 1-Lipschitz over all bin pairs.
    """
    _check_pair(a, b)
    if a.points.shape != b.points.shape or not np.array_equal(a.points, b.points):
        raise ValueError("dual certificate needs histograms on common bins")
    best = -np.inf
    for phi in phis:
        vals = np.asarray(phi(a.points) if callable(phi) else phi, dtype=float).ravel()
        if vals.size != a.size:
            raise ValueError("test function size does not match the bins")
        if _lipschitz_excess(a.points, vals, a.periodic) > 0:
            raise ValueError("test function is not 1-Lipschitz on the bins")
        best = max(best, float(np.dot(vals, a.masses) - np.dot(vals, b.masses)))
    return best


def w1_entropic(a: Histogram, b: Histogram, eps: float, max_iter: int = 100_000, tol: float = 1e-8,
                return_info: bool = False):
    """Entropic transport cost ``<P, C>`` of the Sinkhorn plan at temperature ``eps``.

    Scaling iterations on a kernel stabilised by absorbing large scalings into
    dual potentials, with geometric eps-scaling from the cost diameter down to
    ``eps``; each stage warm-starts from the previous potentials.

    Args:
        a, b: histograms of equal mass.
        eps: target regularisation, in distance units.
        max_iter: iteration budget of the final stage.
        tol: l1 error of the row marginal at convergence.
        return_info: also return a dict with iterations and marginal error.

    Raises:
        ConvergenceError: marginal error still above ``tol`` after ``max_iter``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _check_pair(a, b)
    sa, sb = a.support(), b.support()
    if sa.size == 0:
        return (0.0, {"iters": 0, "err": 0.0, "eps": eps}) if return_info else 0.0
    mass = sa.total
    pa, pb = sa.masses / mass, sb.masses / sb.total
    C = ground_cost(sa.points, sb.points, a.periodic)
    f = np.zeros(sa.size)
    g = np.zeros(sb.size)
    stages = [eps]
    e = float(C.max()) if C.max() > 0 else eps
    while e > eps:
        stages.insert(-1, e)
        e /= 4.0
    total_iters = 0
    err = np.inf
    for k, e in enumerate(stages):
        budget = max_iter if k == len(stages) - 1 else 2000
        K = np.exp((f[:, None] + g[None, :] - C) / e)
        alpha, beta = np.ones(sa.size), np.ones(sb.size)
        for it in range(budget):
            with np.errstate(divide="ignore"):
                alpha = pa / (K @ beta)
                beta = pb / (K.T @ alpha)
            if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
                raise ConvergenceError(f"Sinkhorn kernel underflow at eps={e}")
            if max(np.abs(np.log(alpha)).max(), np.abs(np.log(beta)).max()) > 30:
                f += e * np.log(alpha)
                g += e * np.log(beta)
                K = np.exp((f[:, None] + g[None, :] - C) / e)
                alpha[:], beta[:] = 1.0, 1.0
            if it % 10 == 9 or it == budget - 1:
                err = float(np.sum(np.abs(alpha * (K @ beta) - pa)))
                if err < tol:
                    break
        f += e * np.log(alpha)
        g += e * np.log(beta)
        total_iters += it + 1
    if err >= tol:
        raise ConvergenceError(f"Sinkhorn marginal error {err:.2e} after {max_iter} iterations at eps={eps}")
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    value = mass * float(np.sum(P * C))
    return (value, {"iters": total_iters, "err": err, "eps": eps}) if return_info else value


def renormalized_density(rho: np.ndarray, t: float, drift) -> np.ndarray:
    """Density seen in the frame moving with ``drift``: ``x -> rho(x + t * drift)``.

    Implemented as a Fourier phase shift, exact for band-limited grid data.
    """
    rho = np.asarray(rho, dtype=float)
    n, d = rho.shape[0], rho.ndim
    shift = t * np.asarray(drift, dtype=float)
    if shift.shape != (d,):
        raise ValueError("drift dimension does not match the grid")
    k1 = np.fft.fftfreq(n, d=1.0 / n)
    phase = np.zeros(rho.shape)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = n
        phase = phase + (k1 * shift[ax]).reshape(shape)
    return np.fft.ifftn(np.fft.fftn(rho) * np.exp(2j * np.pi * phase)).real


def jabin_cauchy_bound(t, Emod) -> Callable[[float, float], float]:
    """Return ``(s, t) -> int_s^t sqrt(Emod)`` for piecewise-linear ``sqrt(Emod)``."""
    t = np.asarray(t, dtype=float)
    E = np.asarray(Emod, dtype=float)
    if np.any(E < 0):
        raise ValueError("modulated energy must be nonnegative")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    r = np.sqrt(E)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (r[1:] + r[:-1]))])

    def primitive(x: float) -> float:
        if not t[0] <= x <= t[-1]:
            raise ValueError(f"time {x} outside the sampled window [{t[0]}, {t[-1]}]")
        i = min(int(np.searchsorted(t, x, side="right")) - 1, t.size - 2)
        h = x - t[i]
        slope = (r[i + 1] - r[i]) / (t[i + 1] - t[i])
        return float(cum[i] + h * r[i] + 0.5 * slope * h * h)

    def bound(s: float, u: float) -> float:
        return primitive(u) - primitive(s)

    return bound


def sqrt_tail_integral(E_T: float, rate: float) -> float:
    """``int_T^inf sqrt(E)`` for ``E(t) = E_T exp(-rate (t - T))``."""
    if rate <= 0:
        raise ValueError("decay rate must be positive")
    return 2.0 * np.sqrt(E_T) / rate
