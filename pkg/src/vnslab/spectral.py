"""Fourier pseudo-spectral fields on the unit torus and an incompressible
Navier-Stokes stepper.

Fields are stored as the coefficients ``c_k`` of ``u(x) = sum_k c_k exp(2i pi k.x)``
on ``[0, 1)^d``. With that normalisation Parseval reads ``||u||_2^2 = sum |c_k|^2``
and the Laplacian multiplier is ``-(2 pi |k|)^2``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "GridSpec",
    "FourierField",
    "SobolevSpec",
    "NumericalError",
    "leray_project",
    "sobolev_norm",
    "heat_semigroup",
    "advection_term",
    "ns_step",
    "max_stable_dt",
    "grad_sup_norm",
    "gradient_physical",
    "field_to_bytes",
    "field_from_bytes",
    "field_to_csv",
]


class NumericalError(RuntimeError):
    """Raised when a state becomes non-finite (blow-up or a too large step)."""


@dataclass(frozen=True)
class GridSpec:
    """Spatial resolution: ``n`` nodes per axis of the ``d``-dimensional unit torus."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if self.n < 8 or self.n % 2:
            raise ValueError(f"n must be even and >= 8, got {self.n}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def cutoff(self) -> int:
        # Largest K with 3K < n: quadratic products of retained modes never alias
        # back onto retained modes.
        return (self.n - 1) // 3

    @property
    def cellvol(self) -> float:
        return float(self.n) ** (-self.d)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavevectors, shape ``(d, n, ..., n)`` in FFT ordering."""
        k1 = np.fft.fftfreq(self.n, d=1.0 / self.n)
        return np.array(np.meshgrid(*([k1] * self.d), indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        """``|k|^2`` (integer wavenumbers)."""
        return np.sum(self.wavenumbers**2, axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        return np.all(np.abs(self.wavenumbers) <= self.cutoff, axis=0)

    @cached_property
    def nodes(self) -> np.ndarray:
        """Physical grid nodes ``j/n``, shape ``(d, n, ..., n)``."""
        x1 = np.arange(self.n) / self.n
        return np.array(np.meshgrid(*([x1] * self.d), indexing="ij"))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FourierField:
    """Real vector field on the torus held by its Fourier coefficients.

    ``coeffs`` has shape ``(d, n, ..., n)``; component ``i`` at FFT index ``k``
    is ``c_k^i``. Instances are immutable.
    """

    spec: GridSpec
    coeffs: np.ndarray
    div_free: bool = False

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        expected = (self.spec.d,) + self.spec.shape
        if c.shape != expected:
            raise ValueError(f"coefficient array has shape {c.shape}, expected {expected}")
        object.__setattr__(self, "coeffs", _readonly(c))
        if self.div_free and not self.is_div_free():
            raise ValueError("field flagged div_free but k.c_k != 0")

    @classmethod
    def from_physical(cls, spec: GridSpec, values, div_free: bool = False) -> "FourierField":
        """Build from real samples on the grid nodes, shape ``(d, n, ..., n)``."""
        values = np.asarray(values, dtype=float)
        axes = tuple(range(1, spec.d + 1))
        c = np.fft.fftn(values, axes=axes) / spec.n**spec.d
        # Nyquist planes carry no Hermitian partner; drop them.
        for ax in range(spec.d):
            idx = [slice(None)] * (spec.d + 1)
            idx[ax + 1] = spec.n // 2
            c[tuple(idx)] = 0.0
        return cls(spec, c, div_free=div_free)

    @classmethod
    def zeros(cls, spec: GridSpec) -> "FourierField":
        return cls(spec, np.zeros((spec.d,) + spec.shape, dtype=complex), div_free=True)

    @classmethod
    def constant(cls, spec: GridSpec, value) -> "FourierField":
        c = np.zeros((spec.d,) + spec.shape, dtype=complex)
        c[(slice(None),) + (0,) * spec.d] = np.asarray(value, dtype=float)
        return cls(spec, c, div_free=True)

    def to_physical(self) -> np.ndarray:
        axes = tuple(range(1, self.spec.d + 1))
        return np.fft.ifftn(self.coeffs * self.spec.n**self.spec.d, axes=axes).real

    def mean(self) -> np.ndarray:
        """Spatial average, i.e. the ``k = 0`` coefficient."""
        return self.coeffs[(slice(None),) + (0,) * self.spec.d].real.copy()

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    def with_coeffs(self, coeffs, div_free: bool | None = None) -> "FourierField":
        return FourierField(self.spec, coeffs, self.div_free if div_free is None else div_free)

    def is_div_free(self, rtol: float = 1e-12) -> bool:
        k = self.spec.wavenumbers
        kc = np.sum(k * self.coeffs, axis=0)
        scale = np.max(np.sqrt(self.spec.k2) * np.sqrt(np.sum(np.abs(self.coeffs) ** 2, axis=0)))
        return bool(np.max(np.abs(kc)) <= rtol * max(scale, 1e-300))

    def is_hermitian(self, atol: float = 1e-13) -> bool:
        flipped = self.coeffs
        for ax in range(1, self.spec.d + 1):
            flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
        return bool(np.max(np.abs(flipped - np.conj(self.coeffs)), initial=0.0) <= atol)


@dataclass(frozen=True)
class SobolevSpec:
    """Sobolev order ``s``; homogeneous uses ``(2 pi |k|)^s`` and drops the mean."""

    s: float
    homogeneous: bool = True

    def multiplier(self, spec: GridSpec) -> np.ndarray:
        xi2 = (2 * np.pi) ** 2 * spec.k2
        if self.homogeneous:
            m = np.zeros_like(xi2, dtype=float)
            nz = spec.k2 > 0
            m[nz] = xi2[nz] ** (self.s / 2)
            return m
        return (1.0 + xi2) ** (self.s / 2)


def leray_project(field: FourierField) -> FourierField:
    """Orthogonal projection onto divergence-free fields; the mean is kept."""
    spec = field.spec
    k = spec.wavenumbers
    k2 = spec.k2.astype(float)
    k2[(0,) * spec.d] = 1.0
    kc = np.sum(k * field.coeffs, axis=0)
    # Divergence-free by construction; the flag is set without re-checking
    # because a projected pure gradient leaves only roundoff, whose relative
    # divergence is O(1).
    out = FourierField(spec, field.coeffs - k * (kc / k2))
    object.__setattr__(out, "div_free", True)
    return out


def sobolev_norm(field: FourierField, sob: SobolevSpec) -> float:
    m = sob.multiplier(field.spec)
    return float(np.sqrt(np.sum(m**2 * np.abs(field.coeffs) ** 2)))


def heat_semigroup(field: FourierField, t: float) -> FourierField:
    """Exact solution operator of ``d_t u = Laplacian u`` over time ``t``."""
    if t < 0:
        raise ValueError("heat semigroup needs t >= 0")
    factor = np.exp(-((2 * np.pi) ** 2) * field.spec.k2 * t)
    return field.with_coeffs(field.coeffs * factor)


def _spectral_derivative(spec: GridSpec, coeffs: np.ndarray, axis: int) -> np.ndarray:
    return 2j * np.pi * spec.wavenumbers[axis] * coeffs


def _to_phys(spec: GridSpec, c: np.ndarray) -> np.ndarray:
    axes = tuple(range(c.ndim - spec.d, c.ndim))
    return np.fft.ifftn(c * spec.n**spec.d, axes=axes).real


def _to_coeffs(spec: GridSpec, v: np.ndarray) -> np.ndarray:
    axes = tuple(range(v.ndim - spec.d, v.ndim))
    return np.fft.fftn(v, axes=axes) / spec.n**spec.d


def advection_term(u: FourierField) -> np.ndarray:
    """Dealiased coefficients of ``omega x u``.

    ``(u.grad)u = omega x u + grad(|u|^2/2)``; the gradient part is removed by
    the Leray projection, so only the rotational term is needed. Its
    L2 product with ``u`` vanishes identically.
    """
    spec = u.spec
    mask = spec.dealias_mask
    c = u.coeffs * mask
    up = _to_phys(spec, c)
    if spec.d == 2:
        w = _to_phys(spec, _spectral_derivative(spec, c[1], 0) - _spectral_derivative(spec, c[0], 1))
        prod = np.array([-w * up[1], w * up[0]])
    else:
        dc = lambda i, j: _spectral_derivative(spec, c[i], j)  # noqa: E731
        w = _to_phys(spec, np.array([dc(2, 1) - dc(1, 2), dc(0, 2) - dc(2, 0), dc(1, 0) - dc(0, 1)]))
        prod = np.cross(w, up, axis=0)
    return _to_coeffs(spec, prod) * mask


def _explicit_rhs(u: FourierField, force: np.ndarray) -> np.ndarray:
    g = FourierField(u.spec, force - advection_term(u))
    return leray_project(g).coeffs


def ns_step(u: FourierField, F: FourierField, dt: float, scheme: str = "lie",
            dt_max: float | None = None) -> FourierField:
    """Advance ``d_t u + (u.grad)u - Laplacian u + grad p = F``, ``div u = 0`` by ``dt``.

    ``lie``: explicit Euler on advection and force at time level n, then the
    exact heat factor. ``strang``: half heat, explicit midpoint, half heat.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt_max is not None and dt > dt_max:
        raise ValueError(f"dt={dt} exceeds dt_max={dt_max}")
    spec = u.spec
    force = F.coeffs * spec.dealias_mask
    if scheme == "lie":
        c = u.coeffs + dt * _explicit_rhs(u, force)
        out = heat_semigroup(FourierField(spec, c), dt)
    elif scheme == "strang":
        h = heat_semigroup(u, dt / 2)
        half = h.with_coeffs(h.coeffs + 0.5 * dt * _explicit_rhs(h, force), div_free=False)
        c = h.coeffs + dt * _explicit_rhs(half, force)
        out = heat_semigroup(FourierField(spec, c), dt / 2)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if not np.all(np.isfinite(out.coeffs)):
        raise NumericalError("non-finite fluid coefficients; dt too large or blow-up")
    # The projection already removed k.c_k; re-projecting only cleans roundoff.
    return leray_project(out)


def max_stable_dt(u: FourierField, safety: float = 0.5) -> float:
    """CFL-like bound ``safety / (2 pi K * max|u|)`` with ``K`` the dealias cutoff."""
    umax = float(np.max(np.sqrt(np.sum(u.to_physical() ** 2, axis=0))))
    if umax == 0.0:
        return np.inf
    return safety / (2 * np.pi * u.spec.cutoff * umax)


def _zero_pad(spec: GridSpec, c: np.ndarray, m: int) -> np.ndarray:
    """Embed coefficients of an n-grid into an m-grid (m >= n)."""
    lead = c.shape[: c.ndim - spec.d]
    out = np.zeros(lead + (m,) * spec.d, dtype=complex)
    k1 = np.fft.fftfreq(spec.n, d=1.0 / spec.n).astype(int) % m
    out[(Ellipsis,) + np.ix_(*([k1] * spec.d))] = c
    return out


def gradient_physical(u: FourierField, refine: int = 1) -> np.ndarray:
    """``du_i/dx_j`` sampled on a ``refine``-times finer grid, shape ``(d, d, m, ..)``."""
    spec = u.spec
    m = refine * spec.n
    grads = np.array([[_spectral_derivative(spec, u.coeffs[i], j) for j in range(spec.d)]
                      for i in range(spec.d)])
    padded = _zero_pad(spec, grads, m)
    axes = tuple(range(2, 2 + spec.d))
    return np.fft.ifftn(padded * m**spec.d, axes=axes).real


def grad_sup_norm(u: FourierField, refine: int = 2) -> float:
    """Max over a refined grid of the operator 2-norm of the velocity gradient."""
    g = gradient_physical(u, refine)
    d = u.spec.d
    mats = np.moveaxis(g.reshape(d, d, -1), -1, 0)
    if d == 2:
        # Closed-form largest singular value of a 2x2 matrix.
        a, b, c, e = mats[:, 0, 0], mats[:, 0, 1], mats[:, 1, 0], mats[:, 1, 1]
        s = a * a + b * b + c * c + e * e
        det = a * e - b * c
        sig = np.sqrt(0.5 * (s + np.sqrt(np.maximum(s * s - 4 * det * det, 0.0))))
    else:
        sig = np.linalg.norm(mats, ord=2, axis=(1, 2))
    return float(np.max(sig))


# -- serialisation -------------------------------------------------------------

_FIELD_MAGIC = b"VNSF"
_FIELD_VERSION = 1


def field_to_bytes(field: FourierField, byteorder: str = "<") -> bytes:
    """Binary layout: ``VNSF`` magic, u16 version, endianness tag byte
    (``<``/``>``), u8 d, u32 n, u8 div_free, then for each k in row-major
    order the d complex coefficients as interleaved (re, im) float64."""
    spec = field.spec
    head = _FIELD_MAGIC + byteorder.encode() + struct.pack(
        byteorder + "HBIB", _FIELD_VERSION, spec.d, spec.n, int(field.div_free))
    body = np.moveaxis(field.coeffs, 0, -1).astype(np.dtype(byteorder + "c16"))
    return head + np.ascontiguousarray(body).tobytes()


def field_from_bytes(buf: bytes) -> FourierField:
    if buf[:4] != _FIELD_MAGIC:
        raise ValueError("not a field blob")
    order = buf[4:5].decode()
    if order not in "<>":
        raise ValueError(f"bad endianness tag {order!r}")
    version, d, n, div_free = struct.unpack(order + "HBIB", buf[5:13])
    if version != _FIELD_VERSION:
        raise ValueError(f"field format version {version} unsupported (expected {_FIELD_VERSION})")
    spec = GridSpec(d, n)
    count = d * n**d
    arr = np.frombuffer(buf, dtype=np.dtype(order + "c16"), count=count, offset=13)
    coeffs = np.moveaxis(arr.reshape(spec.shape + (d,)), -1, 0)
    return FourierField(spec, coeffs.astype(np.complex128), div_free=bool(div_free))


def field_blob_size(d: int, n: int) -> int:
    return 13 + 16 * d * n**d


def field_to_csv(field: FourierField, refine: int = 1) -> str:
    """Physical samples ``x_0..x_{d-1}, u_0..u_{d-1}`` on a (refined) grid."""
    spec = field.spec
    m = refine * spec.n
    vals = np.fft.ifftn(_zero_pad(spec, field.coeffs, m) * m**spec.d,
                        axes=tuple(range(1, spec.d + 1))).real
    x1 = np.arange(m) / m
    xs = np.meshgrid(*([x1] * spec.d), indexing="ij")
    cols = [x.ravel() for x in xs] + [v.ravel() for v in vals]
    header = ",".join([f"x{i}" for i in range(spec.d)] + [f"u{i}" for i in range(spec.d)])
    out = io.StringIO()
    np.savetxt(out, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")
    return out.getvalue()
