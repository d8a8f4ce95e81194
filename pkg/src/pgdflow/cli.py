"""Command-line entry point: full-order solves, both PGD variants, compression and comparisons."""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as an
from .aposteriori import AposterioriConfig, SnapshotPlan, compute_snapshots, run_aposteriori
from .apriori import AprioriConfig, run_apriori
from .hdg import DataTerm, HDGSystem, SolverError, StokesProblem, constant_vector, drag_functional, surface_faces
from .mapping import SwimmerGeometry, swimmer_mapping
from .mesh import MeshError, ParametricGrid, load_mesh
from .meshgen import DESK, NOMINAL, SPHERE_MINUS, SPHERE_PLUS, rectangle_mesh, swimmer_mesh
from .separated import SeparatedSolution, compress

log = logging.getLogger("pgdflow")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "problem": {
        "mesh": "swimmer:desk", "degree": "3", "nu": "1.0", "tau_scale": "10", "length": "1",
        "inlet_markers": "1", "inlet_velocity": "1,0", "drag_markers": "2,3",
    },
    "mapping": {
        "kind": "radius", "interval1": "-1,1", "interval2": "-2,-1", "elements1": "10", "elements2": "20",
        "param_degree": "4", "param_quad": "8",
    },
    "apriori": {"eta_star": "1e-4", "n_i": "2", "max_modes": "30", "compat_test": "ones"},
    "aposteriori": {"eta_star": "1e-8", "eta_sigma": "1e-10", "n_iter": "500", "max_modes": "60",
                    "level": "all", "save_snapshots": "no"},
    "analysis": {"errors": "yes", "points_per_element": ""},
    "compress": {"tol": "1e-10"},
    "compare": {"methods": "apriori:1, apriori:2, aposteriori:vertices, aposteriori:half, aposteriori:all"},
    "run": {"threads": "1"},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_config(path: str | None, overrides=()) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg.read_string(p.read_text(), source=str(p))
        except configparser.Error as exc:
            raise UsageError(f"bad config file: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        sec, dot, opt = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value: {item!r}")
        if not cfg.has_section(sec):
            cfg.add_section(sec)
        cfg.set(sec, opt.strip(), value.strip())
    for sec in cfg.sections():
        unknown = set(cfg[sec]) - set(DEFAULTS.get(sec, {}))
        if sec not in DEFAULTS or unknown:
            raise UsageError(f"unknown config entries in [{sec}]: {sorted(unknown) or sec}")
    return cfg


def _floats(text: str, n: int | None = None, what: str = "value") -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise UsageError(f"bad {what}: {text!r}") from exc
    if n is not None and len(vals) != n:
        raise UsageError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    return vals


def _ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise UsageError(f"bad {what}: {text!r}") from exc


def _get(cfg, sec, key, conv):
    try:
        return conv(cfg.get(sec, key))
    except ValueError as exc:
        raise UsageError(f"bad value for {sec}.{key}: {cfg.get(sec, key)!r}") from exc


def config_text(cfg) -> str:
    buf = io.StringIO()
    cfg.write(buf)
    return buf.getvalue()


@dataclass
class RunContext:
    cfg: configparser.ConfigParser
    system: HDGSystem
    grids: tuple[ParametricGrid, ...]
    drag: dict[str, np.ndarray]
    threads: int
    out: Path
    _cache: an.ReferenceCache | None = field(default=None, repr=False)

    @property
    def mesh(self):
        return self.system.mesh

    @property
    def total_drag(self) -> np.ndarray:
        return self.drag["drag"]

    def cache(self) -> an.ReferenceCache:
        if self._cache is None:
            self._cache = an.ReferenceCache(self.system.solve_at, self.threads)
        return self._cache

    def quadrature(self) -> an.ParametricQuadrature:
        ppe = self.cfg.get("analysis", "points_per_element").strip()
        return an.parametric_quadrature(self.grids, int(ppe) if ppe else None)


def build_mesh(cfg):
    spec = cfg.get("problem", "mesh").strip()
    k = _get(cfg, "problem", "degree", int)
    if not 1 <= k <= 4:
        raise UsageError("problem.degree must be in [1, 4]")
    if spec.startswith("swimmer:"):
        size = {"desk": DESK, "nominal": NOMINAL}.get(spec.split(":", 1)[1])
        if size is None:
            raise UsageError(f"unknown swimmer mesh size in {spec!r}")
        return swimmer_mesh(k, size)
    if spec.startswith("rectangle:"):
        nx, ny = _ints(spec.split(":", 1)[1], "rectangle size")
        return rectangle_mesh(k, nx, ny, sides={s: (1, 1) for s in ("left", "right", "bottom", "top")})
    try:
        return load_mesh(spec)
    except FileNotFoundError as exc:
        raise UsageError(f"mesh file not found: {spec}") from exc
    except MeshError as exc:
        raise UsageError(f"bad mesh file {spec}: {exc}") from exc


def build_context(cfg, out: Path, threads: int | None) -> RunContext:
    mesh = build_mesh(cfg)
    kind = cfg.get("mapping", "kind").strip()
    iv1 = _floats(cfg.get("mapping", "interval1"), 2, "mapping.interval1")
    iv2 = _floats(cfg.get("mapping", "interval2"), 2, "mapping.interval2")
    for iv in (iv1, iv2):
        if not iv[1] > iv[0]:
            raise UsageError(f"empty parametric interval {iv}")
    geom = SwimmerGeometry()
    if kind == "none":
        mapping, intervals = None, []
    elif kind == "radius":
        mapping, intervals = swimmer_mapping("radius", geom), [(iv1, "elements1")]
    elif kind == "distance":
        mapping, intervals = swimmer_mapping("distance", geom, iv2, mesh.nodes), [(iv2, "elements2")]
    elif kind == "both":
        mapping = swimmer_mapping("both", geom, iv2, mesh.nodes)
        intervals = [(iv1, "elements1"), (iv2, "elements2")]
    else:
        raise UsageError(f"unknown mapping kind {kind!r}")
    pdeg = _get(cfg, "mapping", "param_degree", int)
    pq = _get(cfg, "mapping", "param_quad", int)
    grids = []
    for iv, key in intervals:
        ne = _get(cfg, "mapping", key, int)
        if ne < 1 or pdeg < 1:
            raise UsageError("parametric element counts and degree must be >= 1")
        grids.append(ParametricGrid(iv, ne, pdeg, pq))
    nu = _get(cfg, "problem", "nu", float)
    vel = _floats(cfg.get("problem", "inlet_velocity"), 2, "problem.inlet_velocity")
    inlet = _ints(cfg.get("problem", "inlet_markers"), "problem.inlet_markers")
    problem = StokesProblem(nu, dirichlet=(DataTerm(constant_vector(vel), markers=inlet),),
                            tau_scale=_get(cfg, "problem", "tau_scale", float),
                            length=_get(cfg, "problem", "length", float))
    system = HDGSystem(mesh, problem, mapping)
    markers = _ints(cfg.get("problem", "drag_markers"), "problem.drag_markers")
    drag = {}
    if markers:
        faces = surface_faces(mesh, markers)
        if not len(faces):
            raise UsageError(f"no boundary faces carry the drag markers {markers}")
        drag["drag"] = drag_functional(system, faces)
        for name, mk in (("drag_minus", SPHERE_MINUS), ("drag_plus", SPHERE_PLUS)):
            if mk in markers and len(markers) > 1:
                drag[name] = drag_functional(system, surface_faces(mesh, [mk]))
    t = threads if threads is not None else _get(cfg, "run", "threads", int)
    return RunContext(cfg, system, tuple(grids), drag, max(1, t), out)


def parse_mu(text: str | None, n: int):
    if text is None:
        if n == 0:
            return ()
        raise UsageError(f"--mu with {n} value(s) is required")
    vals = _floats(text, None, "--mu")
    if len(vals) != n:
        raise UsageError(f"--mu needs {n} value(s) for this mapping, got {len(vals)}")
    return vals


# ---------------------------------------------------------------------------
# outputs


def write_fields(path: Path, ctx: RunContext, x: np.ndarray, mu=None) -> None:
    """One row per element node: coordinates, velocity, pressure and the mixed variable."""
    lay = ctx.system.layout
    s = lay.slices()
    E, n = lay.n_elements, lay.n_local
    X = ctx.mesh.element_coords().reshape(-1, 2)
    if mu is not None and ctx.system.n_params:
        labels = np.repeat(ctx.system.labels, n)
        X = ctx.system.mapping.evaluate(X, np.asarray(mu, float), labels)
    u = x[s["u"]].reshape(E, 2, n).transpose(0, 2, 1).reshape(-1, 2)
    p = x[s["p"]].reshape(-1, 1)
    L = x[s["L"]].reshape(E, 4, n).transpose(0, 2, 1).reshape(-1, 4)
    np.savetxt(path, np.hstack([X, u, p, L]), fmt="%.12e", header="x y u1 u2 p L11 L12 L21 L22", comments="")


def surfaces_of(ctx: RunContext, sol: SeparatedSolution) -> dict[str, an.ResponseSurface]:
    return {name: an.drag_response_surface(sol, D, 0, name) for name, D in ctx.drag.items()}


def finish_run(ctx: RunContext, sol: SeparatedSolution, tag: str, setting: str, summary: dict,
               errors: bool) -> an.ErrorReport | None:
    sol.save(ctx.out / f"{tag}.pgd")
    if ctx.drag:
        an.write_drag_surface(ctx.out / "drag_surface.csv", surfaces_of(ctx, sol), ctx.grids)
    summary.update(modes=sol.n_modes, full_order_solves=sol.n_solves,
                   amplitudes=" ".join(f"{a:.6e}" for a in sol.amplitudes))
    report = None
    if errors and ctx.drag:
        quad = ctx.quadrature()
        report = an.error_report(sol, ctx.cache(), quad, an.FieldNorm(ctx.system.geo), ctx.total_drag,
                                 tag, setting)
        an.write_errors_vs_modes(ctx.out / "errors_vs_modes.csv", [report])
        an.write_error_map(ctx.out / "error_map.csv", report, quad, ctx.grids)
        summary.update(reference_solves=ctx.cache().n_solves,
                       E_u=f"{report.E['u'][-1]:.6e}", E_p=f"{report.E['p'][-1]:.6e}",
                       E_L=f"{report.E['L'][-1]:.6e}", E_D=f"{report.E_D[-1]:.6e}")
    return report


def apriori_config(cfg, n_i=None) -> AprioriConfig:
    try:
        return AprioriConfig(eta_star=_get(cfg, "apriori", "eta_star", float),
                             n_i=n_i if n_i is not None else _get(cfg, "apriori", "n_i", int),
                             max_modes=_get(cfg, "apriori", "max_modes", int),
                             compat_test=cfg.get("apriori", "compat_test").strip())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def aposteriori_config(cfg) -> AposterioriConfig:
    try:
        return AposterioriConfig(eta_star=_get(cfg, "aposteriori", "eta_star", float),
                                 eta_sigma=_get(cfg, "aposteriori", "eta_sigma", float),
                                 n_iter=_get(cfg, "aposteriori", "n_iter", int),
                                 max_modes=_get(cfg, "aposteriori", "max_modes", int))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require_params(ctx: RunContext):
    if not ctx.grids:
        raise UsageError("PGD runs need a parametrised mapping (mapping.kind != none)")


def do_apriori(ctx: RunContext, n_i=None):
    _require_params(ctx)
    cfg = apriori_config(ctx.cfg, n_i)
    return run_apriori(ctx.system, ctx.grids, cfg), f"n_i={cfg.n_i}"


def do_aposteriori(ctx: RunContext, level=None):
    _require_params(ctx)
    level = level or ctx.cfg.get("aposteriori", "level").strip()
    try:
        plan = SnapshotPlan.uniform(ctx.grids, level)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    start = ctx.system.n_solves
    tensor = compute_snapshots(plan, ctx.system, ctx.threads)
    n_s = ctx.system.n_solves - start
    if ctx.cfg.getboolean("aposteriori", "save_snapshots"):
        tensor.save(ctx.out / f"snapshots_{level}.tns")
    sol = run_aposteriori(tensor, aposteriori_config(ctx.cfg), plan.sub_grids, ctx.system.layout, n_s)
    return sol, f"n_s={plan.n_s}"


# ---------------------------------------------------------------------------
# commands


def cmd_solve(ctx: RunContext, args) -> dict:
    mu = parse_mu(args.mu, ctx.system.n_params)
    if ctx.system.n_params:
        try:
            ctx.system.mapping.check_mu(mu)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    sol = ctx.system.solve_at(mu)
    write_fields(ctx.out / "fields.txt", ctx, sol.vector(), mu if args.mapped else None)
    out = {"mu": ",".join(f"{v:g}" for v in mu), "full_order_solves": 1}
    for name, D in ctx.drag.items():
        F = D @ sol.vector()
        out[name] = f"{F[0]:.10e} {F[1]:.10e}"
        print(f"{name}: {F[0]:.10e} {F[1]:.10e}")
    return out


def cmd_apriori(ctx: RunContext, args) -> dict:
    sol, setting = do_apriori(ctx)
    summary = {"method": "apriori", "setting": setting, "stop_reason": sol.info.get("stop_reason")}
    finish_run(ctx, sol, "apriori", setting, summary, ctx.cfg.getboolean("analysis", "errors"))
    return summary


def cmd_aposteriori(ctx: RunContext, args) -> dict:
    sol, setting = do_aposteriori(ctx)
    summary = {"method": "aposteriori", "setting": setting}
    finish_run(ctx, sol, "aposteriori", setting, summary, ctx.cfg.getboolean("analysis", "errors"))
    return summary


def _load_solution(path):
    if not path:
        raise UsageError("--input is required")
    try:
        return SeparatedSolution.load(path)
    except FileNotFoundError as exc:
        raise UsageError(f"solution file not found: {path}") from exc
    except (ValueError, StopIteration) as exc:
        raise UsageError(f"bad solution file {path}: {exc}") from exc


def cmd_compress(ctx: RunContext, args) -> dict:
    sol = _load_solution(args.input)
    tol = _get(ctx.cfg, "compress", "tol", float)
    out = compress(sol, tol)
    out.save(ctx.out / "compressed.pgd")
    return {"input_modes": sol.n_modes, "output_modes": out.n_modes, "tol": tol}


def cmd_surface(ctx: RunContext, args) -> dict:
    sol = _load_solution(args.input)
    if sol.layout != ctx.system.layout:
        raise UsageError("solution layout does not match the configured mesh")
    if not ctx.drag:
        raise UsageError("problem.drag_markers is empty")
    an.write_drag_surface(ctx.out / "drag_surface.csv", surfaces_of(ctx, sol), sol.grids)
    return {"modes": sol.n_modes}


def parse_methods(text: str):
    out = []
    for item in (t.strip() for t in text.split(",")):
        if not item:
            continue
        name, _, arg = item.partition(":")
        if name == "apriori":
            try:
                out.append(("apriori", int(arg)))
            except ValueError as exc:
                raise UsageError(f"bad a priori method {item!r}; use apriori:N") from exc
        elif name == "aposteriori":
            if arg not in ("vertices", "half", "all"):
                raise UsageError(f"bad a posteriori method {item!r}")
            out.append(("aposteriori", arg))
        else:
            raise UsageError(f"unknown method {item!r}")
    return out


def cmd_compare(ctx: RunContext, args) -> dict:
    methods = parse_methods(ctx.cfg.get("compare", "methods"))
    if len(methods) < 2:
        raise UsageError("compare needs at least two methods")
    _require_params(ctx)
    if not ctx.drag:
        raise UsageError("problem.drag_markers is empty")
    quad = ctx.quadrature()
    norm = an.FieldNorm(ctx.system.geo)
    reports = []
    for name, arg in methods:
        sol, setting = do_apriori(ctx, arg) if name == "apriori" else do_aposteriori(ctx, arg)
        log.info("method=%s %s modes=%d solves=%d", name, setting, sol.n_modes, sol.n_solves)
        reports.append(an.error_report(sol, ctx.cache(), quad, norm, ctx.total_drag, name, setting))
    rows, matched = an.comparison_report(reports)
    an.write_csv(ctx.out / "comparison.csv", an.COMPARISON_HEADER, rows)
    an.write_csv(ctx.out / "matched_accuracy.csv", an.MATCHED_HEADER, matched)
    an.write_errors_vs_modes(ctx.out / "errors_vs_modes.csv", reports)
    return {"runs": len(reports), "reference_solves": ctx.cache().n_solves}


COMMANDS = {
    "solve": (cmd_solve, "full-order solve at one parameter value"),
    "apriori": (cmd_apriori, "a priori PGD run"),
    "aposteriori": (cmd_aposteriori, "snapshots plus least-squares separation"),
    "compress": (cmd_compress, "re-separate a stored solution"),
    "compare": (cmd_compare, "run several methods and tabulate accuracy against cost"),
    "surface": (cmd_surface, "export drag response surfaces of a stored solution"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pgdflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", default="pgdflow_out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads for independent solves")
        p.add_argument("--mu", help="parameter value(s), comma separated (use --mu=-0.5 for negatives)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a configuration entry")
        p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
        if name == "solve":
            p.add_argument("--mapped", action="store_true", help="export mapped coordinates")
        if name in ("compress", "surface"):
            p.add_argument("--input", help="stored separated solution")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_text(cfg))
        ctx = build_context(cfg, out, args.threads)
        summary = {"command": args.command}
        summary.update(COMMANDS[args.command][0](ctx, args))
        an.write_summary(out / "summary.txt", summary)
    except UsageError as exc:
        print(f"pgdflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, RuntimeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"pgdflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
