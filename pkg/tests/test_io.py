import json
import shutil
import struct
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from vnslab import cli
from vnslab.config import SCHEMA, ConfigError, default_config, parse_config
from vnslab.coupling import initial_state
from vnslab.diagnostics import DiagnosticsRecord
from vnslab.particles import InitialDataSpec
from vnslab.runner import resume_run, run_config
from vnslab.spectral import GridSpec
from vnslab.storage import (
    CHECKPOINT_VERSION,
    CheckpointError,
    SnapshotStore,
    checkpoint,
    emit_series,
    parse_series,
    restore,
    svg_line_chart,
)

SMALL = """\
grid.n = 16
particles.per_cell = 1
particles.nv = 3
init.sigma_v = 0.3
time.dt = 0.02
time.t_final = 0.4
io.stride = 2
io.checkpoint_every = 10
io.density_every = 5
io.svg = false
"""


def small_cfg(**kw):
    return parse_config(SMALL).with_values(**kw) if kw else parse_config(SMALL)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_config(small_cfg(), out)
    return out


class TestConfig:
    def test_minimal_materialises_everything(self):
        cfg = parse_config("# nothing but defaults\n")
        assert set(cfg.values) == set(SCHEMA)
        assert cfg["init.v0"] == (0.0, 0.0) and cfg["init.rho_k"] == (1, 0)

    def test_three_dimensional_defaults(self):
        cfg = parse_config("grid.d = 3\n")
        assert cfg["init.v0"] == (0.0, 0.0, 0.0) and cfg.grid.d == 3

    def test_low_moment_rejected(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("particles.q = 3\n")
        assert any("q must exceed 4" in p for p in exc.value.problems)

    def test_duplicate_names_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("time.dt = 0.01\n\ntime.dt = 0.02\n")
        assert exc.value.problems == ["line 3: duplicate key 'time.dt' (first set on line 1)"]

    def test_all_violations_reported(self):
        text = "grid.d = 4\nfoo = 1\ntime.dt = abc\nmonitor.delta = 0.2\n"
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        joined = " | ".join(exc.value.problems)
        for fragment in ("grid.d must be 2 or 3", "unknown key 'foo'", "time.dt: cannot parse", "delta*exp(delta)"):
            assert fragment in joined

    def test_fractional_step_count(self):
        with pytest.raises(ConfigError, match="whole number"):
            parse_config("time.dt = 0.03\ntime.t_final = 1.0\n")

    def test_effective_round_trip(self):
        cfg = default_config(init__sigma_v=0.123, time__scheme="strang")
        again = parse_config(cfg.to_text())
        assert again == cfg and again.to_text() == cfg.to_text()


class TestSeries:
    def test_header_only(self):
        text = emit_series([], 2)
        assert text == ",".join(DiagnosticsRecord.columns(2)) + "\n"
        assert parse_series(text) == []

    def test_round_trip_is_exact(self, finished_run):
        text = (finished_run / "series.csv").read_text()
        assert emit_series(parse_series(text), 2) == text


class TestCheckpoint:
    def _state(self):
        st, _ = initial_state(InitialDataSpec(sigma_v=0.3, seed=5), GridSpec(2, 16), 0.01, per_cell=1, nv=3)
        return st

    def test_bit_exact_round_trip(self):
        st = self._state()
        blob = checkpoint(st, config_text="grid.n = 16\n", ensemble_meta={"q": 5.0, "seed": 5})
        back, header = restore(blob)
        assert np.array_equal(back.u.coeffs, st.u.coeffs)
        assert np.array_equal(back.particles.x, st.particles.x)
        assert np.array_equal(back.particles.v, st.particles.v)
        assert np.array_equal(back.conserved, st.conserved)
        assert header["config"] == "grid.n = 16\n" and header["ensemble"]["q"] == 5.0
        assert checkpoint(back, config_text="grid.n = 16\n", ensemble_meta={"q": 5.0, "seed": 5}) == blob

    def test_version_mismatch(self):
        blob = bytearray(checkpoint(self._state()))
        struct.pack_into("<H", blob, 4, CHECKPOINT_VERSION + 1)
        with pytest.raises(CheckpointError, match="migrate"):
            restore(bytes(blob))

    def test_garbage(self):
        with pytest.raises(CheckpointError):
            restore(b"not a checkpoint")
        blob = checkpoint(self._state())
        with pytest.raises(CheckpointError):
            restore(blob[: len(blob) // 2])

    def test_atomic_file(self, tmp_path):
        path = tmp_path / "c.bin"
        blob = checkpoint(self._state(), path)
        assert path.read_bytes() == blob
        assert not list(tmp_path.glob("*.tmp"))


class TestRuns:
    def test_outputs(self, finished_run):
        names = {p.name for p in finished_run.iterdir()}
        assert {"effective.cfg", "meta.json", "series.csv", "checkpoint.bin", "initial.bin", "snapshots"} <= names
        meta = json.loads((finished_run / "meta.json").read_text())
        assert meta["steps"] == 20 and meta["provenance"]["threads"] >= 1
        # the run is reproducible from the output directory alone
        assert parse_config((finished_run / "effective.cfg").read_text()) == small_cfg()

    def test_deterministic_bytes(self, finished_run, tmp_path):
        run_config(small_cfg(), tmp_path)
        assert (tmp_path / "series.csv").read_bytes() == (finished_run / "series.csv").read_bytes()

    def test_resume_matches_continuous(self, finished_run, tmp_path):
        copy = tmp_path / "copy"
        shutil.copytree(finished_run, copy)
        resume_run(copy / "checkpoints" / "ckpt_00000010.bin")
        assert (copy / "series.csv").read_bytes() == (finished_run / "series.csv").read_bytes()
        assert (copy / "snapshots" / "index.csv").read_text() == (finished_run / "snapshots" / "index.csv").read_text()

    def test_resume_extends(self, finished_run, tmp_path):
        copy = tmp_path / "copy"
        shutil.copytree(finished_run, copy)
        out = resume_run(copy / "checkpoint.bin", t_final=0.5)
        steps = [r.step for r in out.records]
        assert steps[-1] == 25 and len(steps) == len(set(steps))

    def test_snapshot_store(self, finished_run):
        store = SnapshotStore(finished_run)
        t, fields = store.fields()
        assert t[0] == 0.0 and t[-1] == pytest.approx(0.4) and np.all(np.diff(t) > 0)
        tp, parts = store.particles()
        assert list(np.round(tp, 12)) == [0.0, 0.1, 0.2, 0.3, 0.4]
        assert parts[0].N == 256 * 9


class TestCharts:
    def test_valid_svg(self):
        t = np.linspace(0, 1, 20)
        svg = svg_line_chart({"a": (t, np.exp(-t)), "b <&>": (t, np.exp(-2 * t))}, "x & y", logy=True)
        root = ET.fromstring(svg)
        assert len(root.findall(".//{http://www.w3.org/2000/svg}polyline")) == 2

    def test_no_data(self):
        svg = svg_line_chart({"a": ([0, 1], [0.0, -1.0])}, logy=True)
        assert "no data" in svg
        ET.fromstring(svg)


class TestCli:
    def test_run_diag_profile(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(SMALL.replace("io.svg = false", "io.svg = true"))
        out = tmp_path / "out"
        assert cli.main(["run", str(cfg), "--out", str(out)]) == cli.EXIT_OK
        assert (out / "charts" / "energy.svg").exists()
        assert cli.main(["diag", str(out / "series.csv")]) == cli.EXIT_OK
        summary = json.loads((out / "diag_summary.json").read_text())
        assert summary["mass_drift"] < 1e-12
        assert (out / "w1_table.csv").read_text().startswith("pair,value,method,eps\n")
        assert cli.main(["profile", str(out)]) == cli.EXIT_OK
        meta = json.loads((out / "profile_meta.json").read_text())
        assert meta["picard_residual"] <= 1e-10 and meta["Dx_bound_ok"] and meta["eDv_bound_ok"]
        # a 0.4 time-unit run has not decayed far enough to trust the tail
        assert meta["tail_ok"] is False
        capsys.readouterr()

    def test_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("particles.q = 3\nfoo = 1\n")
        assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "q must exceed 4" in err and "unknown key" in err

    def test_numerical_failure(self, tmp_path, capsys):
        cfg = tmp_path / "fast.cfg"
        cfg.write_text("init.u0_hdot_half = 2.0\ntime.dt = 0.5\ntime.t_final = 1.0\n"
                       "particles.per_cell = 1\nparticles.nv = 2\n")
        assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERICAL
        assert "advective limit" in capsys.readouterr().err

    def test_io_error(self, tmp_path, capsys):
        assert cli.main(["resume", str(tmp_path / "missing.bin")]) == cli.EXIT_IO
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"junk")
        assert cli.main(["resume", str(bad)]) == cli.EXIT_IO
        capsys.readouterr()

    def test_selftest_failure_code(self, monkeypatch, tmp_path, capsys):
        from vnslab import acceptance

        fake = [acceptance.CriterionResult(1, "demo", True, "ok"), acceptance.CriterionResult(2, "demo", False, "no")]
        monkeypatch.setattr(acceptance, "run_all", lambda numbers=None: fake)
        assert cli.main(["selftest", "--out", str(tmp_path)]) == cli.EXIT_CRITERION
        assert "failing: [2]" in capsys.readouterr().out
        assert (tmp_path / "selftest.csv").read_text().splitlines()[2].startswith("2,demo,FAIL")
