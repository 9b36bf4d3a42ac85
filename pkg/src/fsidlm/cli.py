"""Command-line interface: ``fsidlm run``, ``fsidlm study`` and ``fsidlm dump-system``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .assembly import write_matrix_market
from .config import SimConfig, parse_config, write_config
from .diagnostics import DiagnosticsSink
from .errors import ConfigError, FsiError
from .integrator import Simulation, run_simulation
from .studies import STUDY_KINDS, published_reference, run_study

log = logging.getLogger("fsidlm")

# flag -> config field; every flag defaults to None so only given flags override
_FLAGS = {
    "--fluid-nx": ("fluid_nx", int), "--fluid-ny": ("fluid_ny", int),
    "--solid-nx": ("solid_nx", int), "--solid-ny": ("solid_ny", int),
    "--dt": ("dt", float), "--T": ("T", float),
    "--nu": ("nu", float), "--rho": ("rho", float), "--kappa": ("kappa", float),
    "--gamma": ("gamma", float), "--eta": ("eta", float), "--law": ("law", str),
    "--bar-force": ("bar_force", float),
    "--coupling": ("coupling", str), "--precon": ("precon", str),
    "--gmres-tol": ("gmres_tol", float), "--gmres-restart": ("gmres_restart", int),
    "--gmres-max-it": ("gmres_max_it", int), "--newton-tol": ("newton_tol", float),
    "--newton-max-nit": ("newton_max_nit", int), "--threads": ("threads", int),
    "--clamp-tol": ("clamp_tol", float),
    "--out-dir": ("out_dir", str), "--snapshot-stride": ("snapshot_stride", int),
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--scenario", choices=("annulus", "bar", "custom"), help="preset to start from")
    for flag, (name, typ) in _FLAGS.items():
        p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--vtk", dest="vtk", action="store_true", default=None, help="write VTK snapshots")
    p.add_argument("--raw-fields", dest="raw_fields", action="store_true", default=None,
                   help="also dump full nodal fields (.npz) with each snapshot")
    p.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                   help="override any config field by name, e.g. --set stress_free_reference=false")


def _config_from(args) -> SimConfig:
    overrides = {name: getattr(args, name) for name, _ in _FLAGS.values()}
    overrides["vtk"] = args.vtk
    overrides["raw_fields"] = args.raw_fields
    for item in args.set:
        if "=" not in item:
            raise ConfigError([(item, "expected FIELD=VALUE")])
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return parse_config(args.config, overrides, args.scenario)


def _summary(reports, cfg, dofs: int, path: Path) -> str:
    """Per-run summary with published values alongside when the configuration matches one."""
    ok = [r for r in reports if not r.failed]
    ref = published_reference(cfg, "dofs", dofs)
    lines = ["quantity,published,measured", f"dofs,,{dofs}"]
    if ok:
        nit = sum(r.nit for r in ok)
        its_ref = ref.get(f"ref_its_{cfg.precon}")
        lines += [f"steps,,{len(ok)}",
                  f"vol_loss_pct,{ref.get('ref_vol_loss', '')},{ok[-1].vol_loss_pct:.6g}",
                  f"mean_nit,,{nit / len(ok):.4g}",
                  f"mean_its,{'' if its_ref is None else its_ref},{sum(r.its * r.nit for r in ok) / max(nit, 1):.4g}",
                  f"mean_t_coup_s,,{sum(r.t_coup for r in ok) / len(ok):.4g}",
                  f"mean_t_sol_s,,{sum(r.t_sol for r in ok) / len(ok):.4g}"]
    if len(ok) < len(reports):
        lines.append(f"failed,,\"{reports[-1].message}\"")
    text = "\n".join(lines) + "\n"
    path.write_text(text)
    return text


def cmd_run(args) -> int:
    cfg = _config_from(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.toml")
    with DiagnosticsSink(out, cfg.snapshot_stride, cfg.vtk, cfg.raw_fields, cfg.csv) as sink:
        res = run_simulation(cfg, sink)
    print(_summary(res.reports, cfg, res.sim.system.n, out / "summary.csv"), end="")
    return 1 if res.failed else 0


def _parse_sweep(kind, values):
    if kind == "dt_refine":
        return [float(v) for v in values]
    return [int(v) for v in values]


def cmd_study(args) -> int:
    cfg = _config_from(args)
    sweep = _parse_sweep(args.kind, args.sweep or [])
    table = run_study(args.kind, cfg, sweep, n_steps=args.steps, out_dir=cfg.out_dir)
    print(table.to_text())
    return table.n_failed


def cmd_dump_system(args) -> int:
    cfg = _config_from(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulation(cfg)
    for _ in range(args.step):
        sim.step()
    sim.couple(sim.X)
    sim.system.set_rhs(*sim._rhs((sim.step_index + 1) * cfg.dt))
    path = out / f"system_step{args.step:06d}.mtx"
    write_matrix_market(path, sim.system.to_sparse(), comment=f"block order u,p,X,lam sizes {sim.system.sizes}")
    write_matrix_market(out / f"rhs_step{args.step:06d}.mtx", sim.system.rhs.reshape(-1, 1))
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsidlm", description="Fictitious-domain FSI solver with a Lagrange multiplier")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one simulation")
    _add_config_args(r)
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("study", help="run a parameter sweep and print a summary table")
    _add_config_args(s)
    s.add_argument("--kind", required=True, choices=STUDY_KINDS)
    s.add_argument("--sweep", nargs="*", help="fluid mesh sizes, time steps or thread counts")
    s.add_argument("--steps", type=int, default=None, help="limit every run to this many steps")
    s.set_defaults(func=cmd_study)
    d = sub.add_parser("dump-system", help="write the assembled block system at a step in Matrix Market format")
    _add_config_args(d)
    d.add_argument("--step", type=int, default=0)
    d.set_defaults(func=cmd_dump_system)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for path, reason in exc.errors:
            print(f"config error: {path}: {reason}", file=sys.stderr)
        return 2
    except FsiError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
