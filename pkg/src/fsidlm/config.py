"""
Simulation configuration: scenario presets, TOML parsing with overrides and
validation, and round-trip serialization.

A TOML file groups the flat :class:`SimConfig` fields into sections::

    [scenario]  name = "annulus"
    [fluid]     nx, ny, box
    [solid]     nx, ny, kind, rect, r_in, r_out, initial_map, stretch
    [physics]   rho, nu, law, kappa, gamma, eta, exp_form, bar_force, ...
    [time]      dt, T
    [solver]    coupling, precon, gmres_tol, ..., threads, clamp_tol
    [output]    out_dir, snapshot_stride, vtk, raw_fields, ...
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError

SCENARIOS = ("annulus", "bar", "custom")
SOLID_CONSTRAINTS = ("x0_normal", "y0_normal", "x0_clamped")


@dataclass(frozen=True)
class SimConfig:
    scenario: str = "annulus"
    # fluid
    fluid_nx: int = 64
    fluid_ny: int = 64
    box: tuple = (0.0, 1.0, 0.0, 1.0)
    # solid
    solid_nx: int = 96
    solid_ny: int = 48
    solid_kind: str = "annulus"
    solid_rect: tuple = (0.0, 0.4, 0.45, 0.55)
    r_in: float = 0.3
    r_out: float = 0.5
    initial_map: str = "stretch"
    stretch: float = 1.4
    # physics
    rho: float = 1.0
    nu: float = 0.1
    law: str = "linear"
    kappa: float = 10.0
    gamma: float = 1.333
    eta: float = 9.242
    exp_form: str = "shifted"
    bar_force: float = 2.0
    force_point: tuple = (0.4, 0.5)
    force_t_end: float = 1.0
    dirichlet: tuple = ("top", "right", "left_normal", "bottom_normal")
    solid_constraints: tuple = ("x0_normal", "y0_normal")
    stress_free_reference: bool = True
    # time
    dt: float = 0.01
    T: float = 2.0
    # solver
    coupling: str = "VertexRule"
    intersection_rule: str = "collapsed_gauss"
    precon: str = "BlockTri"
    gmres_tol: float = 1e-8
    gmres_restart: int = 200
    gmres_max_it: int = 2000
    newton_tol: float = 1e-8
    newton_max_nit: int = 20
    threads: int | None = None
    clamp_tol: float = 1e-12
    abort_on_inversion: bool = True
    # output
    out_dir: str = "fsidlm_out"
    snapshot_stride: int = 10
    vtk: bool = False
    raw_fields: bool = False
    csv: bool = True

    @property
    def n_steps(self) -> int:
        return 0 if self.T == 0 else int(round(self.T / self.dt))

    def replace(self, **kw) -> "SimConfig":
        return parse_overrides(self, kw)


PRESETS = {
    "annulus": {},
    "bar": dict(scenario="bar", fluid_nx=80, fluid_ny=80, solid_nx=120, solid_ny=30, solid_kind="rect",
                initial_map="identity", nu=0.2, law="exponential", dirichlet=("boundary",),
                solid_constraints=("x0_clamped",), dt=0.005,
                T=2.0),
    "custom": dict(scenario="custom"),
}

SECTIONS = {
    "scenario": {"name": "scenario"},
    "fluid": {"nx": "fluid_nx", "ny": "fluid_ny", "box": "box"},
    "solid": {"nx": "solid_nx", "ny": "solid_ny", "kind": "solid_kind", "rect": "solid_rect",
              "r_in": "r_in", "r_out": "r_out", "initial_map": "initial_map", "stretch": "stretch"},
    "physics": {k: k for k in ("rho", "nu", "law", "kappa", "gamma", "eta", "exp_form", "bar_force",
                               "force_point", "force_t_end", "dirichlet", "solid_constraints",
                               "stress_free_reference")},
    "time": {"dt": "dt", "T": "T"},
    "solver": {k: k for k in ("coupling", "intersection_rule", "precon", "gmres_tol", "gmres_restart", "gmres_max_it",
                              "newton_tol", "newton_max_nit", "threads", "clamp_tol",
                              "abort_on_inversion")},
    "output": {k: k for k in ("out_dir", "snapshot_stride", "vtk", "raw_fields", "csv")},
}
_FIELD_TO_PATH = {f: f"{sec}.{key}" for sec, keys in SECTIONS.items() for key, f in keys.items()}
_FIELDS = {f.name: f for f in fields(SimConfig)}


def preset(name: str) -> SimConfig:
    if name not in PRESETS:
        raise ConfigError([("scenario.name", f"unknown scenario {name!r}")])
    return SimConfig(**PRESETS[name])


def _coerce(name, value, errors):
    default = getattr(SimConfig(), name)
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                value = value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            items = list(value)
            if default and isinstance(default[0], float):
                items = [float(v) for v in items]
            else:
                items = [str(v) for v in items]
            return tuple(items)
        if name == "threads":
            return None if value in (None, "", "none") else int(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        errors.append((_FIELD_TO_PATH.get(name, name), f"invalid value {value!r}: {exc}"))
        return default


def validate(cfg: SimConfig) -> list[tuple[str, str]]:
    """All validation problems as ``(path, reason)`` pairs."""
    err = []

    def bad(name, reason):
        err.append((_FIELD_TO_PATH.get(name, name), reason))

    if cfg.scenario not in SCENARIOS:
        bad("scenario", f"must be one of {', '.join(SCENARIOS)}")
    for name in ("fluid_nx", "fluid_ny", "solid_nx", "solid_ny", "gmres_restart", "gmres_max_it",
                 "newton_max_nit", "snapshot_stride"):
        if getattr(cfg, name) <= 0:
            bad(name, f"{name} must be positive")
    for name in ("rho", "nu", "kappa", "gamma", "eta", "gmres_tol", "newton_tol", "stretch"):
        v = getattr(cfg, name)
        if not (math.isfinite(v) and v > 0):
            bad(name, f"{name} must be positive")
    if not (math.isfinite(cfg.dt) and cfg.dt > 0):
        bad("dt", "dt must be positive")
    if not (math.isfinite(cfg.T) and cfg.T >= 0):
        bad("T", "T must be non-negative")
    elif cfg.dt > 0 and cfg.T > 0:
        if cfg.dt > cfg.T:
            bad("dt", "dt must not exceed T")
        elif abs(round(cfg.T / cfg.dt) * cfg.dt - cfg.T) > 1e-9 * cfg.T:
            bad("dt", "T must be an integer multiple of dt")
    if cfg.clamp_tol < 0:
        bad("clamp_tol", "clamp_tol must be non-negative")
    if cfg.threads is not None and cfg.threads <= 0:
        bad("threads", "threads must be positive")
    if len(cfg.box) != 4 or not (cfg.box[0] < cfg.box[1] and cfg.box[2] < cfg.box[3]):
        bad("box", "box must be (x_min, x_max, y_min, y_max) with positive extent")
    if cfg.solid_kind not in ("annulus", "rect"):
        bad("solid_kind", "solid kind must be 'annulus' or 'rect'")
    if cfg.solid_kind == "rect":
        r = cfg.solid_rect
        if len(r) != 4 or not (r[0] < r[1] and r[2] < r[3]):
            bad("solid_rect", "rect must be (x0, x1, y0, y1) with positive extent")
    if not 0 < cfg.r_in < cfg.r_out:
        bad("r_in", "need 0 < r_in < r_out")
    if cfg.initial_map not in ("identity", "stretch"):
        bad("initial_map", "initial map must be 'identity' or 'stretch'")
    if cfg.law not in ("linear", "exponential"):
        bad("law", "law must be 'linear' or 'exponential'")
    if cfg.exp_form not in ("shifted", "literal"):
        bad("exp_form", "exp_form must be 'shifted' or 'literal'")
    if cfg.coupling not in ("VertexRule", "Intersection"):
        bad("coupling", "coupling must be 'VertexRule' or 'Intersection'")
    if cfg.intersection_rule not in ("collapsed_gauss", "four_point"):
        bad("intersection_rule", "intersection_rule must be 'collapsed_gauss' or 'four_point'")
    if cfg.precon not in ("BlockDiag", "BlockTri"):
        bad("precon", "precon must be 'BlockDiag' or 'BlockTri'")
    unknown = set(cfg.solid_constraints) - set(SOLID_CONSTRAINTS)
    if unknown:
        bad("solid_constraints", f"unknown solid constraints {sorted(unknown)}")
    if len(cfg.force_point) != 2:
        bad("force_point", "force point needs two coordinates")
    if cfg.force_t_end < 0:
        bad("force_t_end", "force_t_end must be non-negative")
    return err


def parse_overrides(base: SimConfig, values: dict) -> SimConfig:
    """Apply flat ``field -> value`` overrides to ``base`` and validate."""
    errors = []
    kw = {}
    for name, value in values.items():
        if name not in _FIELDS:
            errors.append((name, "unknown setting"))
            continue
        kw[name] = _coerce(name, value, errors)
    cfg = dataclasses.replace(base, **kw)
    errors += validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def _flatten(doc: dict, errors) -> dict:
    flat = {}
    for sec, body in doc.items():
        if sec not in SECTIONS or not isinstance(body, dict):
            errors.append((sec, "unknown section"))
            continue
        for key, value in body.items():
            if key not in SECTIONS[sec]:
                errors.append((f"{sec}.{key}", "unknown setting"))
                continue
            flat[SECTIONS[sec][key]] = value
    return flat


def parse_config(source=None, overrides: dict | None = None, scenario: str | None = None) -> SimConfig:
    """Build a validated configuration.

    ``source`` is a TOML path, TOML text or ``None``.  The scenario preset is
    chosen by ``scenario``, else by ``[scenario] name`` in the file, else
    ``"annulus"``; file values override the preset and ``overrides`` (flat
    field names) override the file.  ``FSIDLM_THREADS`` supplies ``threads``
    when neither file nor overrides set it.
    """
    errors = []
    flat = {}
    if source is not None:
        text = Path(source).read_text() if _looks_like_path(source) else str(source)
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([("<file>", f"invalid TOML: {exc}")]) from None
        flat = _flatten(doc, errors)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    name = scenario or overrides.get("scenario") or flat.get("scenario") or "annulus"
    if name not in PRESETS:
        raise ConfigError(errors + [("scenario.name", f"unknown scenario {name!r}")])
    merged = {**flat, **overrides}
    if "threads" not in merged and os.environ.get("FSIDLM_THREADS"):
        merged["threads"] = os.environ["FSIDLM_THREADS"]
    try:
        cfg = parse_overrides(preset(name), merged)
    except ConfigError as exc:
        raise ConfigError(errors + exc.errors) from None
    if errors:
        raise ConfigError(errors)
    return cfg


def _looks_like_path(source) -> bool:
    if isinstance(source, Path):
        return True
    s = str(source)
    return "\n" not in s and "=" not in s and len(s) < 4096


def to_toml(cfg: SimConfig) -> str:
    doc = {}
    for sec, keys in SECTIONS.items():
        body = {}
        for key, name in keys.items():
            v = getattr(cfg, name)
            if v is None:
                continue
            body[key] = list(v) if isinstance(v, tuple) else v
        doc[sec] = body
    return tomli_w.dumps(doc)


def write_config(cfg: SimConfig, path) -> None:
    Path(path).write_text(to_toml(cfg))
