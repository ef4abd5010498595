"""Flat ``key = value`` run configuration with full validation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

from .coupling import DEFAULT_DELTA, MonitorConfig
from .diagnostics import POINCARE_GAP
from .particles import InitialDataSpec
from .spectral import GridSpec

__all__ = ["ConfigError", "RunConfig", "parse_config", "SCHEMA"]


class ConfigError(ValueError):
    """Carries every violation found, not only the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _vec(kind=float):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty vector")
        return tuple(kind(p) for p in parts)
    return parse


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _float_or_auto(text: str):
    return "auto" if text.strip() == "auto" else float(text)


def _zeros(d):
    return tuple(0.0 for _ in range(d))


def _first_mode(d):
    return (1,) + (0,) * (d - 1)


# key -> (parser, default or callable(d) giving the default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "grid.d": (int, 2),
    "grid.n": (int, 16),
    "particles.per_cell": (int, 2),
    "particles.nv": (int, 8),
    "particles.vmax": (_float_or_auto, "auto"),
    "particles.q": (float, 5.0),
    "particles.alpha": (float, 3.5),
    "init.spatial": (_choice("uniform", "cosine"), "cosine"),
    "init.rho_amp": (float, 0.2),
    "init.rho_k": (_vec(int), _first_mode),
    "init.velocity": (_choice("gaussian", "tail", "ball", "monokinetic", "none"), "gaussian"),
    "init.v0": (_vec(float), _zeros),
    "init.sigma_v": (float, 0.3),
    "init.tail_p": (float, 6.0),
    "init.radius": (float, 0.5),
    "init.u0": (_choice("zero", "random", "shear", "taylor_green"), "random"),
    "init.u0_hdot_half": (float, 0.1),
    "init.u0_kmax": (int, 2),
    "init.u0_mean": (_vec(float), _zeros),
    "init.seed": (int, 0),
    "time.dt": (float, 0.01),
    "time.t_final": (float, 1.0),
    "time.scheme": (_choice("lie", "strang"), "lie"),
    "time.cfl": (float, 0.5),
    "monitor.C_star": (float, 1.0),
    "monitor.delta": (float, DEFAULT_DELTA),
    "monitor.c_P": (float, POINCARE_GAP),
    "io.stride": (int, 10),
    "io.out": (str, "run_out"),
    "io.checkpoint_every": (int, 0),
    "io.snapshot_every": (int, 5),
    "io.snapshot_dense_until": (float, 0.5),
    "io.density_every": (int, 100),
    "io.particle_csv_stride": (int, 0),
    "io.svg": (_bool, True),
    "profile.interp": (_choice("cic", "spline"), "cic"),
    "profile.nq": (int, 8),
    "profile.tol": (float, 1e-10),
    "profile.h": (float, 1e-4),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully materialised configuration (``values`` maps every schema key)."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self["grid.d"], self["grid.n"])

    @property
    def init(self) -> InitialDataSpec:
        v = self.values
        return InitialDataSpec(
            d=v["grid.d"], spatial=v["init.spatial"], rho_amp=v["init.rho_amp"], rho_k=v["init.rho_k"],
            velocity=v["init.velocity"], v0=v["init.v0"], sigma_v=v["init.sigma_v"], tail_p=v["init.tail_p"],
            radius=v["init.radius"], q=v["particles.q"], alpha=v["particles.alpha"], u0=v["init.u0"],
            u0_hdot_half=v["init.u0_hdot_half"], u0_kmax=v["init.u0_kmax"], u0_mean=v["init.u0_mean"],
            seed=v["init.seed"],
        )

    @property
    def monitor(self) -> MonitorConfig:
        v = self.values
        return MonitorConfig(C_star=v["monitor.C_star"], delta=v["monitor.delta"],
                             report_stride=v["io.stride"], c_P=v["monitor.c_P"],
                             alpha=v["particles.alpha"])

    @property
    def vmax(self) -> float | None:
        return None if self["particles.vmax"] == "auto" else self["particles.vmax"]

    def to_text(self) -> str:
        """Effective configuration; parsing it back reproduces this object."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)

    def with_values(self, **updates) -> "RunConfig":
        """Copy with ``section__key=value`` overrides (double underscore for the dot)."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError([f"unknown key {key!r}"])
            vals[key] = v
        return RunConfig(vals)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a :class:`RunConfig`.

    Raises:
        ConfigError: listing unknown keys, duplicates (with line numbers), type
            mismatches and violated constraints.
    """
    problems: list[str] = []
    raw: dict[str, str] = {}
    where: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in raw:
            problems.append(f"line {lineno}: duplicate key {key!r} (first set on line {where[key]})")
            continue
        raw[key] = value
        where[key] = lineno

    vals: dict[str, Any] = {}
    for key, (parse, _) in SCHEMA.items():
        if key in raw:
            try:
                vals[key] = parse(raw[key])
            except (TypeError, ValueError) as exc:
                problems.append(f"line {where[key]}: {key}: cannot parse {raw[key]!r} ({exc})")
    d = vals.get("grid.d", SCHEMA["grid.d"][1])
    if d not in (2, 3):
        problems.append(f"grid.d must be 2 or 3 (got {d})")
        d = 2
    for key, (_, default) in SCHEMA.items():
        if key not in vals:
            vals[key] = default(d) if callable(default) else default
    problems += _constraints(vals, d)
    if problems:
        raise ConfigError(problems)
    return RunConfig(vals)


def _constraints(v: dict, d: int) -> list[str]:
    out = []
    n = v["grid.n"]
    if n < 8 or n % 2:
        out.append(f"grid.n must be even and >= 8 (got {n})")
    for key in ("init.rho_k", "init.v0", "init.u0_mean"):
        if len(v[key]) != d:
            out.append(f"{key} needs {d} components (got {len(v[key])})")
    if v["particles.q"] <= 4:
        out.append(f"particles.q must exceed 4: the pointwise decay hypothesis needs N_q finite "
                   f"for some q > 4 (got {v['particles.q']})")
    if v["particles.alpha"] <= 3:
        out.append(f"particles.alpha must exceed 3 (got {v['particles.alpha']})")
    delta = v["monitor.delta"]
    if not delta > 0 or delta * math.exp(delta) > 1.0 / 9.0:
        out.append(f"monitor.delta must satisfy delta*exp(delta) <= 1/9 (got {delta})")
    for key in ("time.dt", "time.cfl", "monitor.C_star", "monitor.c_P", "init.sigma_v", "init.radius"):
        if not v[key] > 0:
            out.append(f"{key} must be positive (got {v[key]})")
    if v["time.t_final"] < 0:
        out.append("time.t_final must be nonnegative")
    for key in ("particles.per_cell", "particles.nv", "io.stride", "io.snapshot_every",
                "io.density_every", "profile.nq"):
        if v[key] < 1:
            out.append(f"{key} must be >= 1 (got {v[key]})")
    for key in ("io.checkpoint_every", "io.particle_csv_stride", "init.u0_kmax"):
        if v[key] < 0:
            out.append(f"{key} must be >= 0 (got {v[key]})")
    if v["particles.vmax"] != "auto" and not v["particles.vmax"] > 0:
        out.append("particles.vmax must be positive or 'auto'")
    if not out:
        # Remaining family-level rules live with the initial-data type.
        try:
            RunConfig(v).init
        except ValueError as exc:
            out.append(f"init: {exc}")
        steps = v["time.t_final"] / v["time.dt"]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            out.append("time.t_final must be a whole number of time steps")
    return out


def default_config(**overrides) -> RunConfig:
    """Defaults, with optional ``section__key`` overrides, validated."""
    cfg = parse_config("")
    if overrides:
        cfg = parse_config(cfg.with_values(**overrides).to_text())
    return cfg

