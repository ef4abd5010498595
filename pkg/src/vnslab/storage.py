"""On-disk formats: diagnostics series CSV, versioned checkpoints, fluid and
particle snapshots, and static SVG line charts."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .coupling import SimState, observe
from .diagnostics import DiagnosticsRecord
from .particles import ParticleEnsemble, ensemble_from_bytes, ensemble_to_bytes
from .spectral import FourierField, field_blob_size, field_from_bytes, field_to_bytes

__all__ = [
    "CHECKPOINT_VERSION",
    "CheckpointError",
    "atomic_write",
    "emit_series",
    "read_series",
    "parse_series",
    "checkpoint",
    "restore",
    "SnapshotStore",
    "svg_line_chart",
]

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"VNSC"
_CKPT_HEAD = "<HI"  # format version, JSON header length


class CheckpointError(IOError):
    """Unreadable, truncated or wrong-version checkpoint."""


def atomic_write(path, data: bytes | str) -> None:
    """Write to a sibling temporary file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# -- series ---------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    # 17 significant digits round-trip every double exactly.
    return format(float(value), ".17g")


def emit_series(records: Sequence[DiagnosticsRecord], d: int, path=None) -> str:
    """CSV with one header row naming every record column and one row per record.

    A series without records is a header-only file. When ``path`` is given the
    text is also written there atomically.
    """
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(DiagnosticsRecord.columns(d))
    for rec in records:
        writer.writerow([_cell(v) for v in rec.row()])
    text = out.getvalue()
    if path is not None:
        atomic_write(path, text)
    return text


def parse_series(text: str) -> list[DiagnosticsRecord]:
    """Records from series CSV text."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty series file")
    header = rows[0]
    return [DiagnosticsRecord.from_row(header, r) for r in rows[1:] if r]


def read_series(path) -> list[DiagnosticsRecord]:
    return parse_series(Path(path).read_text())


def series_columns(records: Sequence[DiagnosticsRecord]) -> dict[str, np.ndarray]:
    """Column arrays keyed by CSV column name."""
    if not records:
        return {}
    d = len(records[0].mean_u)
    names = DiagnosticsRecord.columns(d)
    table = np.array([[float(v) for v in r.row()] for r in records])
    return {name: table[:, i] for i, name in enumerate(names)}


# -- checkpoints ----------------------------------------------------------------

def _hex(x: float) -> str:
    return float(x).hex()


def checkpoint(state: SimState, path=None, config_text: str = "", ensemble_meta: dict | None = None) -> bytes:
    """Serialise ``state`` with its run configuration.

    Layout: ``VNSC`` magic, little-endian u16 format version and u32 header
    length, a JSON header (floats as hex strings so they survive exactly), then
    the fluid blob and the particle blob. Cached observables are not stored;
    :func:`restore` recomputes them from ``(u, particles)`` deterministically.

    Args:
        state: state to save.
        path: optional destination, replaced atomically.
        config_text: effective configuration the run was started from.
        ensemble_meta: provenance such as ``q``, ``vmax`` and ``seed``.
    """
    meta = dict(ensemble_meta or {})
    header = {
        "step": state.step,
        "dt": _hex(state.dt),
        "u0_norm": _hex(state.u0_norm),
        "conserved": [_hex(c) for c in np.asarray(state.conserved)],
        "gradint0": _hex(state.gradint0),
        "gradint1": _hex(state.gradint1),
        "int_F": _hex(state.int_F),
        "int_D": _hex(state.int_D),
        "rho_sup_max": _hex(state.rho_sup_max),
        "strong_ok": bool(state.strong_ok),
        "bootstrap_ok": bool(state.bootstrap_ok),
        "config": config_text,
        "ensemble": {k: (_hex(v) if isinstance(v, float) else v) for k, v in meta.items()},
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    blob = (_CKPT_MAGIC + struct.pack(_CKPT_HEAD, CHECKPOINT_VERSION, len(hjson)) + hjson
            + field_to_bytes(state.u)
            + ensemble_to_bytes(state.particles, float(meta.get("q", 0.0)), float(meta.get("vmax", 0.0)),
                                int(meta.get("seed", 0))))
    if path is not None:
        atomic_write(path, blob)
    return blob


def restore(source) -> tuple[SimState, dict]:
    """Inverse of :func:`checkpoint`; accepts a path or the raw bytes.

    Returns:
        ``(state, header)``; ``header["config"]`` holds the configuration text.

    Raises:
        CheckpointError: wrong magic, unsupported version or truncated data.
    """
    buf = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    hs = struct.calcsize(_CKPT_HEAD)
    version, hlen = struct.unpack(_CKPT_HEAD, buf[4:4 + hs])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}; this build reads "
                              f"version {CHECKPOINT_VERSION} only, migrate the file explicitly")
    try:
        off = 4 + hs
        header = json.loads(buf[off:off + hlen].decode())
        off += hlen
        d, n = struct.unpack("<BI", buf[off + 7:off + 12])
        fsize = field_blob_size(d, n)
        u = field_from_bytes(bytes(buf[off:off + fsize]))
        particles, _ = ensemble_from_bytes(bytes(buf[off + fsize:]))
    except (ValueError, KeyError, struct.error) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    fl = float.fromhex
    state = SimState(
        step=int(header["step"]),
        dt=fl(header["dt"]),
        u=u,
        particles=particles,
        u0_norm=fl(header["u0_norm"]),
        conserved=np.array([fl(c) for c in header["conserved"]]),
        gradint0=fl(header["gradint0"]),
        gradint1=fl(header["gradint1"]),
        int_F=fl(header["int_F"]),
        int_D=fl(header["int_D"]),
        rho_sup_max=fl(header["rho_sup_max"]),
        strong_ok=bool(header["strong_ok"]),
        bootstrap_ok=bool(header["bootstrap_ok"]),
        obs=observe(u, particles),
    )
    header["ensemble"] = {k: (fl(v) if isinstance(v, str) else v) for k, v in header["ensemble"].items()}
    return state, header


# -- snapshots ------------------------------------------------------------------

class SnapshotStore:
    """Fluid snapshots (for the asymptotic profile) and particle snapshots
    (for transport diagnostics) under ``<run>/snapshots``.

    ``index.csv`` lists ``kind,step,t,file``. Truncating at a step drops later
    entries so a resumed run rewrites them identically.
    """

    def __init__(self, run_dir):
        self.root = Path(run_dir) / "snapshots"
        self.index_path = self.root / "index.csv"
        self.entries: list[tuple[str, int, float, str]] = []
        if self.index_path.exists():
            with open(self.index_path) as fh:
                for row in csv.DictReader(fh):
                    self.entries.append((row["kind"], int(row["step"]), float(row["t"]), row["file"]))

    def truncate(self, step: int) -> None:
        self.entries = [e for e in self.entries if e[1] <= step]
        self._flush()

    def _flush(self) -> None:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["kind", "step", "t", "file"])
        for e in self.entries:
            w.writerow([e[0], e[1], _cell(e[2]), e[3]])
        atomic_write(self.index_path, out.getvalue())

    def _add(self, kind: str, step: int, t: float, name: str, blob: bytes) -> None:
        atomic_write(self.root / name, blob)
        self.entries = [e for e in self.entries if not (e[0] == kind and e[1] == step)]
        self.entries.append((kind, step, t, name))
        self.entries.sort(key=lambda e: (e[0], e[1]))
        self._flush()

    def add_field(self, step: int, t: float, u: FourierField) -> None:
        self._add("field", step, t, f"u_{step:08d}.bin", field_to_bytes(u))

    def add_particles(self, step: int, t: float, p: ParticleEnsemble) -> None:
        self._add("particles", step, t, f"p_{step:08d}.bin", ensemble_to_bytes(p))

    def _load(self, kind: str):
        return [e for e in self.entries if e[0] == kind]

    def fields(self) -> tuple[np.ndarray, list[FourierField]]:
        sel = self._load("field")
        return (np.array([e[2] for e in sel]),
                [field_from_bytes((self.root / e[3]).read_bytes()) for e in sel])

    def particles(self) -> tuple[np.ndarray, list[ParticleEnsemble]]:
        sel = self._load("particles")
        return (np.array([e[2] for e in sel]),
                [ensemble_from_bytes((self.root / e[3]).read_bytes())[0] for e in sel])


# -- charts ---------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_chart(series: dict[str, tuple[Iterable[float], Iterable[float]]], title: str = "",
                   logy: bool = False, width: int = 640, height: int = 400, xlabel: str = "t") -> str:
    """Self-contained SVG with one polyline per named ``(x, y)`` series.

    On a log axis nonpositive values are dropped.
    """
    pad_l, pad_r, pad_t, pad_b = 70, 150, 30, 40
    clean = {}
    for name, (xs, ys) in series.items():
        x, y = np.asarray(list(xs), float), np.asarray(list(ys), float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logy:
            ok &= y > 0
        if ok.any():
            clean[name] = (x[ok], np.log10(y[ok]) if logy else y[ok])
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>']
    if not clean:
        parts.append(f'<text x="{width / 2}" y="{height / 2}" text-anchor="middle">no data</text></svg>')
        return "\n".join(parts)
    xmin = min(v[0].min() for v in clean.values())
    xmax = max(v[0].max() for v in clean.values())
    ymin = min(v[1].min() for v in clean.values())
    ymax = max(v[1].max() for v in clean.values())
    if xmax == xmin:
        xmax = xmin + 1.0
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - xmin) / (xmax - xmin) * pw

    def sy(y):
        return pad_t + (1 - (y - ymin) / (ymax - ymin)) * ph

    parts.append(f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
    for i in range(5):
        fx = xmin + (xmax - xmin) * i / 4
        fy = ymin + (ymax - ymin) * i / 4
        label = f"1e{fy:.1f}" if logy else f"{fy:.3g}"
        parts.append(f'<text x="{sx(fx):.1f}" y="{pad_t + ph + 15}" text-anchor="middle">{fx:.3g}</text>')
        parts.append(f'<text x="{pad_l - 5}" y="{sy(fy) + 4:.1f}" text-anchor="end">{label}</text>')
    parts.append(f'<text x="{pad_l + pw / 2}" y="{height - 5}" text-anchor="middle">{_esc(xlabel)}</text>')
    for i, (name, (x, y)) in enumerate(clean.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = pad_t + 15 * i + 10
        parts.append(f'<line x1="{width - pad_r + 10}" y1="{ly}" x2="{width - pad_r + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad_r + 35}" y="{ly + 4}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_charts(records: Sequence[DiagnosticsRecord], out_dir) -> list[Path]:
    """Energy, dissipation, modulated energy (log scale) and conservation drift charts."""
    cols = series_columns(records)
    out_dir = Path(out_dir)
    if not cols:
        return []
    t = cols["t"]
    d = len(records[0].mean_u)
    mom = np.array([[r.mean_u[i] + r.mean_j[i] for i in range(d)] for r in records])
    drift = np.linalg.norm(mom - mom[0], axis=1)
    charts = {
        "energy.svg": svg_line_chart({"E": (t, cols["E"]), "E + int D": (t, cols["E"] + cols["int_D"])},
                                     "Energy"),
        "dissipation.svg": svg_line_chart({"D": (t, cols["D"]), "lambda Emod": (t, cols["lambda_theory"] * cols["Emod"])},
                                          "Dissipation"),
        "modulated_energy.svg": svg_line_chart({"Emod": (t, cols["Emod"])}, "Modulated energy", logy=True),
        "conservation.svg": svg_line_chart({"|mass - 1|": (t, np.abs(cols["mass"] - 1.0)),
                                            "|<u+j> drift|": (t, drift)},
                                           "Conservation drift", logy=True),
    }
    paths = []
    for name, svg in charts.items():
        atomic_write(out_dir / name, svg)
        paths.append(out_dir / name)
    return paths
