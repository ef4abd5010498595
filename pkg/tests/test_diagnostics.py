import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnslab.diagnostics import (
    POINCARE_GAP,
    DiagnosticsRecord,
    dissipation,
    fit_decay_rate,
    identity_eqmoy,
    kinetic_energy,
    lambda_lower_bound,
    modulated_energy,
    w1_monokinetic_upper,
)
from vnslab.particles import ParticleEnsemble
from vnslab.spectral import FourierField, GridSpec, leray_project

G = GridSpec(2, 16)


def random_state(seed, mean=(0.0, 0.0)):
    rng = np.random.default_rng(seed)
    raw = FourierField.from_physical(G, 0.3 * rng.standard_normal((2,) + G.shape))
    c = leray_project(raw).coeffs.copy()
    c[:, 0, 0] = mean
    w = rng.random(120)
    p = ParticleEnsemble(rng.random((120, 2)), rng.normal(0.2, 0.5, size=(120, 2)), w / w.sum())
    return FourierField(G, c), p


def bilinear_loop(values, x, n):
    """Plain per-particle bilinear interpolation on a periodic grid."""
    out = []
    for px, py in x:
        sx, sy = px * n, py * n
        i, k = int(math.floor(sx)), int(math.floor(sy))
        fx, fy = sx - i, sy - k
        i0, i1, k0, k1 = i % n, (i + 1) % n, k % n, (k + 1) % n
        out.append((1 - fx) * (1 - fy) * values[..., i0, k0] + fx * (1 - fy) * values[..., i1, k0]
                   + (1 - fx) * fy * values[..., i0, k1] + fx * fy * values[..., i1, k1])
    return np.array(out)


def still(N=1):
    return ParticleEnsemble(np.zeros((N, 2)), np.zeros((N, 2)), np.full(N, 1.0 / N))


class TestEnergy:
    def test_zero(self):
        assert kinetic_energy(FourierField.zeros(G), still()) == 0.0

    def test_two_particles(self):
        p = ParticleEnsemble(np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0.5, 0.5]))
        assert kinetic_energy(FourierField.zeros(G), p) == 1.25

    def test_single_mode(self):
        a = 0.8
        vals = np.zeros((2,) + G.shape)
        vals[1] = a * np.sin(2 * np.pi * G.nodes[0])
        u = FourierField.from_physical(G, vals)
        assert kinetic_energy(u, still()) == pytest.approx(0.5 * a**2 / 2, rel=1e-14)


class TestDissipation:
    def test_equilibrium(self):
        U = [0.3, -0.1]
        p = ParticleEnsemble(np.random.default_rng(1).random((10, 2)), np.tile(U, (10, 1)), np.full(10, 0.1))
        assert dissipation(FourierField.constant(G, U), p) == pytest.approx(0.0, abs=1e-30)

    def test_fluid_at_rest(self):
        _, p = random_state(2)
        D = dissipation(FourierField.zeros(G), p)
        assert D == pytest.approx(2 * kinetic_energy(FourierField.zeros(G), p), rel=1e-14)

    def test_against_particle_loop(self):
        u, p = random_state(3)
        up = bilinear_loop(u.to_physical(), p.x, G.n)
        drag = sum(w * float(np.sum((a - b) ** 2)) for w, a, b in zip(p.w, up, p.v))
        # viscous part by finite sums over modes: sum (2 pi |k|)^2 |c_k|^2
        visc = float(np.sum((2 * np.pi) ** 2 * G.k2 * np.abs(u.coeffs) ** 2))
        assert dissipation(u, p) == pytest.approx(drag + visc, rel=1e-13)


class TestModulatedEnergy:
    def test_equilibrium(self):
        U = np.array([0.4, 0.2])
        p = ParticleEnsemble(np.random.default_rng(4).random((6, 2)), np.tile(U, (6, 1)), np.full(6, 1 / 6))
        assert modulated_energy(FourierField.constant(G, U), p) == pytest.approx(0.0, abs=1e-16)

    def test_symmetric_particles(self):
        v = np.array([[0.3, 0.7], [-0.3, -0.7]])
        p = ParticleEnsemble(np.zeros((2, 2)), v, np.array([0.5, 0.5]))
        assert modulated_energy(FourierField.zeros(G), p) == pytest.approx(0.5 * 0.58, rel=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-1, 1), st.floats(-1, 1))
    def test_offset_from_energy(self, seed, m0, m1):
        u, p = random_state(seed, mean=(m0, m1))
        total = u.mean() + p.mean_velocity()
        gap = modulated_energy(u, p) - kinetic_energy(u, p)
        assert gap == pytest.approx(-0.25 * float(np.sum(total**2)), abs=1e-12)
        assert modulated_energy(u, p) <= kinetic_energy(u, p) + 1e-15


class TestIdentity:
    def test_exact_conservation(self):
        j, u = np.array([0.3, 0.1]), np.array([-0.1, 0.4])
        assert identity_eqmoy(j, u, j + u) == pytest.approx(0.0, abs=1e-16)

    @pytest.mark.parametrize("eps", [1e-2, 1e-4, 1e-6])
    def test_first_order_in_perturbation(self, eps):
        j, c = np.array([0.3, 0.1]), np.array([0.2, 0.5])
        e = np.array([0.8, 0.6])  # e.(j - c/2) = 0.07, so the linear term is present
        # expanding 1/4|2j - c - eps e|^2 - |j - c/2|^2
        expected = -eps * float(e @ (j - c / 2)) + eps**2 / 4
        got = identity_eqmoy(j, c - j + eps * e, c)
        assert got == pytest.approx(expected, rel=1e-6, abs=1e-16)
        assert abs(got) == pytest.approx(0.07 * eps, rel=eps * 10)


class TestLambda:
    def test_unit_density(self):
        assert POINCARE_GAP == pytest.approx(39.478417604, rel=1e-10)
        assert lambda_lower_bound(1.0) == pytest.approx(0.951782, abs=1e-6)

    def test_vanishing_density(self):
        assert lambda_lower_bound(0.0) == 1.0
        assert lambda_lower_bound(1e-12) == pytest.approx(1.0, abs=1e-12)
        assert lambda_lower_bound(0.0, cP=1.0) == 0.5

    def test_monotone(self):
        vals = [lambda_lower_bound(M) for M in np.linspace(0, 50, 201)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            lambda_lower_bound(-1.0)


class TestFit:
    def test_exact_exponential(self):
        t = np.linspace(0, 5, 51)
        lam, r2, logC = fit_decay_rate(t, 3 * np.exp(-2 * t))
        assert lam == pytest.approx(2.0, abs=1e-6) and r2 == pytest.approx(1.0, abs=1e-12)
        assert logC == pytest.approx(math.log(3), abs=1e-9)

    def test_noisy(self):
        t = np.linspace(0, 5, 51)
        for seed in range(20):
            noise = 1 + 0.01 * np.random.default_rng(seed).standard_normal(t.size)
            lam, _, _ = fit_decay_rate(t, 3 * np.exp(-2 * t) * noise)
            assert lam == pytest.approx(2.0, abs=0.05)

    def test_constant(self):
        lam, r2, _ = fit_decay_rate(np.linspace(0, 3, 10), np.full(10, 0.5))
        assert lam == pytest.approx(0.0, abs=1e-12) and r2 == 1.0

    def test_window_errors(self):
        t = np.linspace(0, 3, 10)
        with pytest.raises(ValueError):
            fit_decay_rate(t, np.where(t > 2, 0.0, 1.0))
        with pytest.raises(ValueError):
            fit_decay_rate(t, np.ones(10), t_burn=2.9)

    def test_window_bounds(self):
        t = np.linspace(0, 6, 61)
        E = np.where(t < 3, np.exp(-t), np.exp(-3) * np.exp(-4 * (t - 3)))
        assert fit_decay_rate(t, E, t_burn=0.0, t_end=2.9)[0] == pytest.approx(1.0, abs=1e-9)
        assert fit_decay_rate(t, E, t_burn=3.0)[0] == pytest.approx(4.0, abs=1e-9)


class TestW1Upper:
    def test_monokinetic(self):
        U = [0.1, 0.2]
        p = ParticleEnsemble(np.zeros((3, 2)), np.tile(U, (3, 1)), np.full(3, 1 / 3))
        assert w1_monokinetic_upper(p, U) == 0.0

    def test_two_particles(self):
        U = np.array([0.0, 1.0])
        v = np.array([[3.0, 1.0], [0.0, -1.0]])
        p = ParticleEnsemble(np.zeros((2, 2)), v, np.array([0.5, 0.5]))
        assert w1_monokinetic_upper(p, U) == pytest.approx(3 / 2 + 2 / 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-2, 2), st.floats(-2, 2))
    def test_cauchy_schwarz(self, seed, U0, U1):
        _, p = random_state(seed)
        U = np.array([U0, U1])
        jm = p.mean_velocity()
        spread = math.sqrt(math.fsum(p.w * np.sum((p.v - jm) ** 2, axis=1)))
        assert w1_monokinetic_upper(p, U) <= spread + float(np.linalg.norm(jm - U)) + 1e-12


class TestRecord:
    def test_row_round_trip(self):
        rec = DiagnosticsRecord(step=3, t=0.03, E=1.0, D=2.0, Emod=0.5, mass=1.0, mean_u=(0.1, 0.2),
                                mean_j=(0.3, 0.4), M_alpha=1.5, rho_sup=1.2, j_sup=0.3, gradint=0.0,
                                criterion_value=0.1, lambda_theory=0.9, w1_upper=0.2, strong_ok=False)
        header = DiagnosticsRecord.columns(2)
        back = DiagnosticsRecord.from_row(header, [str(int(v)) if isinstance(v, bool) else repr(v)
                                                   for v in rec.row()])
        assert back == rec
        assert header[:5] == ["step", "t", "E", "D", "Emod"] and "mean_u_1" in header
