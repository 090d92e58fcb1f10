"""Command-line driver: ``stvf --config run.cfg [--set key=value ...] [--out DIR]``.

The config is flat ``key = value`` text with ``#`` comments. Results go to
CSV files in the output directory together with ``manifest.txt``, which is
itself a valid config reproducing the run.

Exit status: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .experiment import (
    EnsembleSpec,
    cauchy_study,
    data_stability_study,
    delta_study,
    estimate_energy_bound,
    write_convergence_csv,
    write_energy_csv,
    write_energy_summary_csv,
)
from .fem import FeSpace, SolverError, tv_sum
from .fields import parse_field
from .mesh import Domain, MeshError, read_mesh, refine, structured_triangle_mesh, uniform_interval_mesh
from .noise import sample_path
from .scheme import NewtonError, ProblemData, SchemeParams, run_trajectory, write_snapshots

__all__ = ["RunConfig", "ConfigError", "parse_config", "build_mesh", "run", "main"]

COMMANDS = ("simulate", "energy-bound", "cauchy", "delta-study", "data-stability")
REQUIRED = ("command", "domain", "N", "T", "eps", "n_paths", "seed")
# written to the manifest for information, ignored when read back
META_KEYS = ("library_version", "wall_clock_seconds", "tau")


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if isinstance(line, str):
            where.append(line)
        elif line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    command: str
    domain: str
    N: int
    T: float
    eps: float
    n_paths: int
    seed: int
    mesh_file: str = ""
    n_cells: int = 16
    n_x: int = 16
    n_y: int = 16
    refinements: int = 0
    delta: float = 0.0
    lam: float = 0.0
    newton_abs_tol: float = 1e-10
    newton_max_iter: int = 50
    linear_rel_tol: float = 1e-12
    newton_jacobian: str = "primal-dual"
    x0: str = "zero"
    g: str = "zero"
    zero_noise: bool = False
    workers: int = 1
    quad_order: int = 4
    max_state_reals: int = 10**7
    path_index: int = 0
    snapshots: str = ""
    levels: int = 4
    deltas: str = "0.2, 0.1, 0.05, 0.025"
    x0_alt: str = ""
    g_alt: str = ""
    out: str = "out"

    @property
    def tau(self) -> float:
        return self.T / self.N

    def params(self) -> SchemeParams:
        return SchemeParams(
            eps=self.eps,
            T=self.T,
            N=self.N,
            delta=self.delta,
            lam=self.lam,
            newton_abs_tol=self.newton_abs_tol,
            newton_max_iter=self.newton_max_iter,
            linear_rel_tol=self.linear_rel_tol,
            newton_jacobian=self.newton_jacobian,
        )

    def to_text(self, meta: dict | None = None) -> str:
        lines = []
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {_render(getattr(self, f.name))}")
        for k, v in (meta or {}).items():
            lines.append(f"{k} = {_render(v)}")
        return "\n".join(lines) + "\n"


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw, line):
    name = "lam" if key == "lambda" else key
    if name not in _TYPES:
        raise ConfigError("unknown key", key, line)
    typ = _TYPES[name]
    try:
        if typ == "int":
            v = float(raw)
            if v != int(v):
                raise ValueError
            return name, int(v)
        if typ == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return name, v
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return name, low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {typ}", key, line) from None
    return name, raw


def _split_list(text, sep):
    return [t.strip() for t in text.split(sep) if t.strip()]


def _validate(values: dict, lines: dict) -> RunConfig:
    for key in REQUIRED:
        if key not in values:
            raise ConfigError("missing required key", key)

    def bad(key, msg):
        name = "lambda" if key == "lam" else key
        raise ConfigError(msg, name, lines.get(key))

    v = values
    if v["command"] not in COMMANDS:
        bad("command", f"must be one of {', '.join(COMMANDS)}")
    if v["N"] < 1:
        bad("N", "must be >= 1")
    if not v["T"] > 0:
        bad("T", "must be > 0")
    if not 1e-12 <= v["eps"] <= 1:
        bad("eps", "must lie in [1e-12, 1]")
    if v["n_paths"] < 2 and v["command"] != "simulate":
        bad("n_paths", "must be >= 2")
    if v["n_paths"] < 1:
        bad("n_paths", "must be >= 1")
    if v["seed"] < 0 or v["seed"] >= 2**64:
        bad("seed", "must be a 64-bit unsigned integer")
    for key in ("delta", "lam"):
        if v.get(key, 0.0) < 0:
            bad(key, "must be >= 0")
    for key, lo in (("n_cells", 2), ("n_x", 2), ("n_y", 2), ("refinements", 0), ("workers", 1),
                    ("quad_order", 1), ("newton_max_iter", 1), ("levels", 2), ("path_index", 0),
                    ("max_state_reals", 1)):
        if key in v and v[key] < lo:
            bad(key, f"must be >= {lo}")
    if "newton_abs_tol" in v and not v["newton_abs_tol"] > 0:
        bad("newton_abs_tol", "must be > 0")
    if "linear_rel_tol" in v and not 0 < v["linear_rel_tol"] <= 1e-6:
        bad("linear_rel_tol", "must lie in (0, 1e-6]")
    if v.get("newton_jacobian", "primal-dual") not in ("primal-dual", "exact"):
        bad("newton_jacobian", "must be primal-dual or exact")
    dom = v["domain"].split()
    if dom[0] not in ("unit_interval", "unit_square", "interval", "rectangle", "file"):
        bad("domain", "must be unit_interval, unit_square, 'interval a b', 'rectangle x0 x1 y0 y1' or file")
    try:
        _domain(v["domain"])
    except (ValueError, MeshError) as exc:
        bad("domain", str(exc))
    if dom[0] == "file" and not v.get("mesh_file"):
        bad("mesh_file", "required when domain = file")
    for key in ("x0", "g"):
        try:
            parse_field(v.get(key, "zero"))
        except ValueError as exc:
            bad(key, str(exc))
    for key in ("x0_alt", "g_alt"):
        try:
            [parse_field(t) for t in _split_list(v.get(key, ""), ";")]
        except ValueError as exc:
            bad(key, str(exc))
    try:
        ds = [float(t) for t in _split_list(v.get("deltas", RunConfig.deltas), ",")]
    except ValueError:
        bad("deltas", "must be a comma-separated list of numbers")
    if v["command"] == "delta-study":
        if not ds or any(d <= 0 for d in ds) or any(b >= a for a, b in zip(ds, ds[1:])):
            bad("deltas", "must be positive and strictly decreasing")
    if v["command"] == "data-stability":
        xs, gs = _split_list(v.get("x0_alt", ""), ";"), _split_list(v.get("g_alt", ""), ";")
        if not xs and not gs:
            bad("x0_alt", "data-stability needs x0_alt and/or g_alt")
        if xs and gs and len(xs) != len(gs):
            bad("g_alt", "must list as many fields as x0_alt")
    try:
        [int(t) for t in _split_list(v.get("snapshots", ""), ",")]
    except ValueError:
        bad("snapshots", "must be a comma-separated list of time indices")
    if any(not 0 <= int(t) <= v["N"] for t in _split_list(v.get("snapshots", ""), ",")):
        bad("snapshots", f"time indices must lie in [0, {v['N']}]")
    try:
        cfg = RunConfig(**v)
        cfg.params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config(text: str, overrides=()) -> RunConfig:
    """Parse flat ``key = value`` text; ``overrides`` are ``key=value`` strings."""
    values, lines = {}, {}
    meta = {}
    entries = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=n)
        k, val = (s.strip() for s in line.split("=", 1))
        entries.append((k, val, n))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"{item!r} is not key=value", line="--set override")
        k, val = (s.strip() for s in item.split("=", 1))
        entries.append((k, val, "--set override"))
    for k, val, n in entries:
        if k in META_KEYS:
            meta[k] = (val, n)
            continue
        name, conv = _convert(k, val, n)
        values[name] = conv
        lines[name] = n
    cfg = _validate(values, lines)
    if "tau" in meta:
        val, n = meta["tau"]
        try:
            ok = math.isclose(float(val), cfg.tau, rel_tol=1e-12)
        except ValueError:
            ok = False
        if not ok:
            raise ConfigError(f"tau = {val} disagrees with T/N = {cfg.tau!r}", "tau", n)
    return cfg


def _domain(text):
    parts = text.split()
    kind, nums = parts[0], [float(x) for x in parts[1:]]
    if kind == "unit_interval":
        return Domain.interval(0.0, 1.0)
    if kind == "unit_square":
        return Domain.unit_square()
    if kind == "interval":
        if len(nums) != 2:
            raise ValueError("interval needs 'a b'")
        return Domain.interval(*nums)
    if kind == "rectangle":
        if len(nums) != 4:
            raise ValueError("rectangle needs 'x0 x1 y0 y1'")
        return Domain.rectangle(*nums)
    return None


def build_mesh(cfg: RunConfig):
    if cfg.domain.split()[0] == "file":
        mesh = read_mesh(cfg.mesh_file)
    else:
        dom = _domain(cfg.domain)
        if dom.dim == 1:
            mesh = uniform_interval_mesh(dom, cfg.n_cells)
        else:
            mesh = structured_triangle_mesh(dom, cfg.n_x, cfg.n_y)
    for _ in range(cfg.refinements):
        mesh = refine(mesh)
    return mesh


def _spec(cfg, mesh):
    return EnsembleSpec(
        n_paths=cfg.n_paths,
        seed=cfg.seed,
        params=cfg.params(),
        mesh=mesh,
        x0=parse_field(cfg.x0),
        g=parse_field(cfg.g),
        zero_noise=cfg.zero_noise,
        workers=cfg.workers,
        quad_order=cfg.quad_order,
        max_state_reals=cfg.max_state_reals,
    )


def _simulate(cfg, mesh, out: Path):
    space = FeSpace(mesh)
    p = cfg.params()
    data = ProblemData.from_fields(space, parse_field(cfg.x0), parse_field(cfg.g), cfg.quad_order)
    if cfg.zero_noise:
        inc = [0.0] * p.N
    else:
        inc = sample_path(cfg.seed, cfg.path_index, p.T, p.N).increments
    traj = run_trajectory(space, p, data, inc)
    t = p.times()
    with open(out / "trajectory.csv", "w") as fh:
        fh.write("i,t_i,dW,newton_iters,sq_norm,J_eps\n")
        for i in range(p.N + 1):
            x = traj.states[i]
            dW = traj.increments[i - 1] if i else 0.0
            iters = traj.diagnostics[i - 1].iterations if i else 0
            sq = float(x @ (space.mass @ x))
            fh.write(f"{i},{float(t[i])!r},{float(dW)!r},{iters},{sq!r},{tv_sum(space, x, p.eps)!r}\n")
    snaps = [int(s) for s in _split_list(cfg.snapshots, ",")]
    if snaps:
        with open(out / "snapshots.txt", "w") as fh:
            write_snapshots(traj, snaps, fh)
    return {"final_sq_norm": float(traj.final @ (space.mass @ traj.final))}


def run(cfg: RunConfig, out: Path) -> dict:
    """Execute the configured study, writing CSVs into ``out``; returns a summary."""
    mesh = build_mesh(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.command == "simulate":
        return _simulate(cfg, mesh, out)
    spec = _spec(cfg, mesh)
    if cfg.command == "energy-bound":
        rep = estimate_energy_bound(spec)
        write_energy_csv(rep, out / "energy_bound.csv", spec.params.tau)
        write_energy_summary_csv(rep, out / "energy_bound_summary.csv")
        return {"total": rep.components["total"][0], "gronwall_bound": rep.gronwall_bound, "pass": rep.passed}
    if cfg.command == "cauchy":
        table = cauchy_study(spec, cfg.levels)
        write_convergence_csv(table, out / "cauchy.csv")
        return {"diffs": table.diffs}
    if cfg.command == "delta-study":
        deltas = [float(d) for d in _split_list(cfg.deltas, ",")]
        table = delta_study(spec, deltas)
        write_convergence_csv(table, out / "delta_study.csv")
        return {"gaps": table.diffs}
    space = FeSpace(mesh)
    ref = ProblemData.from_fields(space, spec.x0, spec.g, cfg.quad_order)
    xs = _split_list(cfg.x0_alt, ";")
    gs = _split_list(cfg.g_alt, ";")
    n = max(len(xs), len(gs))
    xs = xs or [cfg.x0] * n
    gs = gs or [cfg.g] * n
    pairs = [
        (ref, ProblemData.from_fields(space, parse_field(a), parse_field(b), cfg.quad_order))
        for a, b in zip(xs, gs)
    ]
    table = data_stability_study(spec, pairs)
    write_convergence_csv(table, out / "data_stability.csv")
    return {"gaps": table.diffs}


def _parser():
    defaults = "\n".join(
        f"  {('lambda' if f.name == 'lam' else f.name)} = {_render(f.default)}"
        for f in fields(RunConfig)
        if f.name not in REQUIRED
    )
    return argparse.ArgumentParser(
        prog="stvf",
        description="Stochastic TV flow solver: simulations, energy bounds and convergence studies.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            f"commands: {', '.join(COMMANDS)}\n"
            f"required keys: {', '.join(REQUIRED)}\n"
            "domain: unit_interval | unit_square | 'interval a b' | 'rectangle x0 x1 y0 y1' | file\n"
            "fields: zero, hat, bump, disc_indicator, smoothed_disc, sine_product, sine_series,\n"
            "        e.g. x0 = smoothed_disc(radius=0.3, width=0.1)\n"
            f"defaults:\n{defaults}\n"
            "exit status: 0 ok, 2 config error, 3 numerical failure"
        ),
    )


def main(argv=None) -> int:
    parser = _parser()
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--out", help="output directory (overrides the 'out' key)")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"stvf: cannot read config: {exc}", file=sys.stderr)
        return 2
    overrides = list(args.set) + ([f"out={args.out}"] if args.out else [])
    try:
        cfg = parse_config(text, overrides)
        if cfg.domain.split()[0] == "file":
            build_mesh(cfg)
    except (ConfigError, MeshError, OSError) as exc:
        print(f"stvf: config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    if not args.quiet:
        print(
            f"stvf {__version__}: {cfg.command} on {cfg.domain}, T={cfg.T!r} N={cfg.N} tau={cfg.tau!r} "
            f"eps={cfg.eps!r} delta={cfg.delta!r} lambda={cfg.lam!r} paths={cfg.n_paths} seed={cfg.seed}"
        )
    start = time.perf_counter()
    try:
        summary = run(cfg, out)
    except (NewtonError, SolverError, MemoryError, FloatingPointError) as exc:
        print(f"stvf: numerical failure: {exc}", file=sys.stderr)
        return 3
    elapsed = time.perf_counter() - start
    meta = {"tau": cfg.tau, "library_version": __version__, "wall_clock_seconds": round(elapsed, 3)}
    (out / "manifest.txt").write_text(cfg.to_text(meta))
    if not args.quiet:
        for k, v in summary.items():
            print(f"  {k}: {v}")
        print(f"  wrote {out}/ in {elapsed:.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
