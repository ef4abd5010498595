import dataclasses
import math
import time

import numpy as np
import pytest
from scipy import integrate, optimize

from vnslab.coupling import (
    DEFAULT_DELTA,
    MonitorConfig,
    _trapz_from_one,
    bootstrap_monitor,
    brinkman_force,
    initial_state,
    initial_velocity,
    run,
    step,
    strong_existence_criterion,
    straightening_threshold,
)
from vnslab.particles import InitialDataSpec
from vnslab.spectral import FourierField, GridSpec, NumericalError, SobolevSpec, sobolev_norm

G = GridSpec(2, 16)


def low_mode_vector(spec, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = spec.nodes
    a = rng.normal(size=4)
    return np.array([a[0] * np.sin(2 * np.pi * x2) + a[1], a[2] * np.cos(2 * np.pi * x1) + a[3]])


class TestBrinkman:
    def test_lock_in_vanishes(self):
        u = FourierField.from_physical(G, low_mode_vector(G, 1))
        rho = np.full(G.shape, 1.3)
        F = brinkman_force(rho, rho[None] * u.to_physical(), u)
        assert np.max(np.abs(F.coeffs)) < 1e-15

    def test_zero_fluid_returns_current(self):
        j = low_mode_vector(G, 2)
        F = brinkman_force(np.ones(G.shape), j, FourierField.zeros(G))
        assert np.max(np.abs(F.to_physical() - j)) < 1e-14

    def test_single_cell_density(self):
        rho = np.zeros(G.shape)
        rho[4, 9] = 256.0  # unit mass in one cell
        U = np.array([0.5, -1.0])
        F = brinkman_force(rho, np.zeros((2,) + G.shape), FourierField.constant(G, U))
        # the mean mode survives dealiasing and carries -mass * U
        assert np.allclose(F.mean(), -U, atol=1e-15)
        assert not F.is_div_free()


class TestThreshold:
    def test_default_delta(self):
        root = optimize.brentq(lambda d: d * math.exp(d) - 1 / 9, 0.0, 1.0, xtol=1e-15)
        assert DEFAULT_DELTA == pytest.approx(0.1004884, abs=1e-7)
        assert DEFAULT_DELTA == pytest.approx(root, abs=1e-12)
        assert DEFAULT_DELTA * math.exp(DEFAULT_DELTA) < 1 / 9
        assert straightening_threshold(1e-6) <= DEFAULT_DELTA + 1e-6

    def test_misquoted_root_rejected(self):
        with pytest.raises(ValueError):
            MonitorConfig(delta=0.100683)

    def test_config_validation(self):
        for kw in ({"C_star": 0}, {"report_stride": 0}, {"c_P": -1}, {"delta": 0}):
            with pytest.raises(ValueError):
                MonitorConfig(**kw)


class TestMonitors:
    def _state(self, **kw):
        st, _ = initial_state(InitialDataSpec(velocity="none", u0="zero"), G, 0.01)
        return dataclasses.replace(st, **kw)

    def test_strong_existence_examples(self):
        value, ok = strong_existence_criterion(self._state(u0_norm=0.5))
        assert value == 0.25 and ok
        value, ok = strong_existence_criterion(self._state(u0_norm=0.0, int_F=2.0))
        assert value == 2.0 and not ok
        value, ok = strong_existence_criterion(self._state(u0_norm=0.2, int_F=0.1), C_star=2.0)
        assert value == pytest.approx(0.24) and ok

    def test_bootstrap_constant_rate(self):
        c, dt = 0.7, 0.03
        total, t = 0.0, 0.0
        for _ in range(100):
            total += _trapz_from_one(t, t + dt, c, c)
            t += dt
        assert total == pytest.approx(c * (t - 1.0), rel=1e-12)
        assert _trapz_from_one(0.0, 0.5, c, c) == 0.0
        # straddling step keeps only the part after t = 1, with g linear
        assert _trapz_from_one(0.9, 1.1, 0.0, 2.0) == pytest.approx(0.5 * 0.1 * (1.0 + 2.0))

    def test_zero_fluid_never_trips(self):
        st, _ = initial_state(InitialDataSpec(velocity="none", u0="zero"), G, 0.05)
        fin, rec = run(st, 2.0, MonitorConfig(report_stride=5))
        assert fin.gradint1 == 0.0 and all(r.bootstrap_ok for r in rec)
        assert bootstrap_monitor(fin) == (0.0, True)


class TestInitialVelocity:
    @pytest.mark.parametrize("family", ["shear", "taylor_green", "random"])
    def test_prescribed_norm_and_mean(self, family):
        spec = InitialDataSpec(u0=family, u0_hdot_half=0.2, u0_mean=(0.1, -0.3))
        u = initial_velocity(spec, G)
        assert u.div_free and u.is_hermitian()
        assert sobolev_norm(u, SobolevSpec(0.5)) == pytest.approx(0.2, rel=1e-13)
        assert np.allclose(u.mean(), [0.1, -0.3])

    def test_seeded(self):
        a = initial_velocity(InitialDataSpec(seed=3), G)
        b = initial_velocity(InitialDataSpec(seed=3), G)
        c = initial_velocity(InitialDataSpec(seed=4), G)
        assert np.array_equal(a.coeffs, b.coeffs) and not np.array_equal(a.coeffs, c.coeffs)


class TestStep:
    def test_equilibrium_is_steady(self):
        spec = InitialDataSpec(velocity="monokinetic", u0="zero", spatial="uniform")
        st, _ = initial_state(spec, G, 0.02, per_cell=1)
        fin, rec = run(st, 0.4, MonitorConfig(report_stride=5))
        assert np.max(np.abs(fin.u.coeffs)) < 1e-12
        assert np.max(np.abs(fin.particles.v)) < 1e-12
        assert np.max(np.abs(fin.particles.x - st.particles.x)) < 1e-12
        assert all(r.E < 1e-24 and r.D < 1e-24 for r in rec)

    def test_pure_fluid_decay(self):
        spec = InitialDataSpec(velocity="none", u0="taylor_green", u0_hdot_half=0.3)
        st, _ = initial_state(spec, G, 0.005)
        _, rec = run(st, 0.2, MonitorConfig(report_stride=4))
        E = [r.E for r in rec]
        assert all(b < a for a, b in zip(E, E[1:]))
        # Taylor-Green is a Stokes eigenmode with |k|^2 = 2: exact exponential decay
        assert E[-1] / E[0] == pytest.approx(math.exp(-2 * (2 * np.pi) ** 2 * 2 * 0.2), rel=1e-10)

    def test_momentum_exchange_converges(self):
        spec = InitialDataSpec(velocity="monokinetic", v0=(0.5, 0.0), u0="zero")
        drifts = []
        dts = [0.04, 0.02, 0.01]
        for dt in dts:
            st, _ = initial_state(spec, G, dt, per_cell=1)
            fin, rec = run(st, 0.4, MonitorConfig(report_stride=1000))
            total = np.add(rec[-1].mean_u, rec[-1].mean_j)
            drifts.append(np.linalg.norm(total - st.conserved))
            assert rec[-1].mean_u[0] > 0.1  # the fluid picked up momentum
        assert drifts[-1] < drifts[0]
        assert np.polyfit(np.log(dts), np.log(drifts), 1)[0] >= 0.9

    def test_force_integral_is_trapezoid_of_series(self):
        st, _ = initial_state(InitialDataSpec(sigma_v=0.3), G, 0.02, per_cell=1, nv=4)
        fin, rec = run(st, 0.4, MonitorConfig(report_stride=1))
        t = np.array([r.t for r in rec])
        Fn = np.array([r.F_norm2 for r in rec])
        assert fin.int_F == pytest.approx(float(integrate.trapezoid(Fn, t)), rel=1e-12)
        assert rec[-1].int_F == fin.int_F

    def test_dt_limit(self):
        st, _ = initial_state(InitialDataSpec(u0_hdot_half=2.0), G, 0.5, per_cell=1, nv=2)
        with pytest.raises(NumericalError, match="advective limit"):
            step(st)

    def test_flags_monotone(self):
        spec = InitialDataSpec(sigma_v=0.5, u0_hdot_half=0.2, v0=(0.5, 0.0))
        st, _ = initial_state(spec, G, 0.02, per_cell=1, nv=4)
        # small enough tolerance that the strong-existence flag trips during the run
        mcfg = MonitorConfig(C_star=2.5, report_stride=1)
        _, rec = run(st, 1.0, mcfg)
        flags = [r.strong_ok for r in rec]
        assert flags[0] and not flags[-1]
        first_false = flags.index(False)
        assert not any(flags[first_false:])
        vals = [r.criterion_value for r in rec]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestRun:
    def test_smoke_benchmark(self):
        spec = InitialDataSpec(sigma_v=0.3)
        st, _ = initial_state(spec, G, 0.01, per_cell=2, nv=3)
        assert 9000 <= st.particles.N <= 11000
        t0 = time.perf_counter()
        fin, rec = run(st, 1.0, MonitorConfig(report_stride=10))
        assert time.perf_counter() - t0 < 60.0
        assert len(rec) >= 10 and fin.t == pytest.approx(1.0)
        assert all(abs(r.mass - 1.0) <= 1e-12 for r in rec)
        assert all(r.Emod <= r.E for r in rec)

    def test_deterministic(self):
        spec = InitialDataSpec(sigma_v=0.3)
        out = []
        for _ in range(2):
            st, _ = initial_state(spec, G, 0.02, per_cell=1, nv=4)
            _, rec = run(st, 0.3, MonitorConfig(report_stride=3))
            out.append([r.row() for r in rec])
        assert out[0] == out[1]

    def test_records_on_stride_and_final_step(self):
        st, _ = initial_state(InitialDataSpec(velocity="none"), G, 0.05)
        _, rec = run(st, 0.35, MonitorConfig(report_stride=3))
        assert [r.step for r in rec] == [0, 3, 6, 7]
