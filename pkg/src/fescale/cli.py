"""Run configuration, benchmark orchestration, and results emission.

Configs are JSON files (documented in the README); meshes use a plain-text
node/element format. Every run writes one curve CSV and one per-increment
stats CSV per scheme plus a cross-scheme summary whose ratios are recomputed
from the stats files themselves. Numeric text is written with 17 significant
digits so repeated runs produce byte-identical curve files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from fescale import benchmarks, linalg, macro, material, rve as rvemod
from fescale.errors import ConfigError, FescaleError, StructuralError
from fescale.mesh import QUAD4, TRI3, ElementBlock, Mesh

_KINDS = {TRI3: 3, QUAD4: 4}


# ---------------------------------------------------------------------------
# mesh exchange format


def write_mesh(mesh: Mesh, path):
    """Write the plain-text mesh format (header, counts, then rows)."""
    with open(path, "w") as fh:
        fh.write("fescale-mesh 2\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
        fh.write(f"elements {mesh.n_elements}\n")
        eid = 0
        for block in mesh.blocks:
            for row in block.connectivity:
                fh.write(f"{eid} {block.kind} " + " ".join(str(n) for n in row) + "\n")
                eid += 1


def read_mesh(path) -> Mesh:
    """Parse the plain-text mesh format; errors carry the offending line."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read mesh file {path}: {exc}") from exc

    def fail(lineno, msg):
        raise ConfigError(f"{path}:{lineno + 1}: {msg}")

    if not lines or not lines[0].startswith("fescale-mesh"):
        fail(0, "missing 'fescale-mesh' header")
    i = 1
    parts = lines[i].split()
    if len(parts) != 2 or parts[0] != "nodes":
        fail(i, "expected 'nodes <count>'")
    n_nodes = int(parts[1])
    nodes = np.zeros((n_nodes, 2))
    for k in range(n_nodes):
        i += 1
        parts = lines[i].split()
        if len(parts) != 3:
            fail(i, "expected '<id> <x> <y>'")
        nid = int(parts[0])
        if nid != k:
            fail(i, f"node ids must be consecutive, got {nid}")
        nodes[k] = [float(parts[1]), float(parts[2])]
    i += 1
    parts = lines[i].split()
    if len(parts) != 2 or parts[0] != "elements":
        fail(i, "expected 'elements <count>'")
    n_el = int(parts[1])
    rows = {TRI3: [], QUAD4: []}
    order = []
    for k in range(n_el):
        i += 1
        parts = lines[i].split()
        if len(parts) < 3 or parts[1] not in _KINDS:
            fail(i, "expected '<id> <tri3|quad4> <n...>'")
        kind = parts[1]
        conn = [int(p) for p in parts[2:]]
        if len(conn) != _KINDS[kind]:
            fail(i, f"{kind} needs {_KINDS[kind]} nodes, got {len(conn)}")
        rows[kind].append(conn)
        order.append(kind)
    blocks = [ElementBlock(kind, np.array(rows[kind], dtype=np.int64))
              for kind in (TRI3, QUAD4) if rows[kind]]
    return Mesh(nodes, blocks)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Validated description of one suite run."""

    name: str
    schemes: list
    settings: macro.SolverSettings
    output_dir: str
    benchmark: str | None = None
    overrides: dict = field(default_factory=dict)
    elastic_only: bool = False
    macro_mesh: str | None = None
    rve_mesh: str | None = None
    rve_name: str | None = None
    materials: list = field(default_factory=list)
    dirichlet: list = field(default_factory=list)
    point_loads: list = field(default_factory=list)
    control_dof: int = 0
    reaction_dofs: list = field(default_factory=list)

    def build_model(self, scheme):
        if self.benchmark is not None:
            return benchmarks.build_benchmark(
                self.benchmark, scheme, elastic_only=self.elastic_only, **self.overrides
            )
        macro_mesh = read_mesh(self.macro_mesh)
        micro = self._build_micro()
        return macro.TwoScaleModel(
            macro_mesh=macro_mesh, dirichlet=[tuple(d) for d in self.dirichlet],
            point_loads=[tuple(p) for p in self.point_loads], micro_model=micro,
            scheme=scheme, control_dof=self.control_dof,
            reaction_dofs=np.asarray(self.reaction_dofs or [self.control_dof], dtype=np.int64),
            name=self.name,
        )

    def _build_micro(self):
        mats = [_material_from(spec) for spec in self.materials]
        if self.rve_mesh is not None:
            mesh = read_mesh(self.rve_mesh)
            ids = np.zeros(mesh.n_elements, dtype=np.int64)
            return rvemod.MicroModel(mesh, tuple(mats or [benchmarks.default_materials("")]), ids)
        params = {"material": mats[0] if mats else benchmarks.default_materials("")}
        if len(mats) > 1:
            params["material2"] = mats[1]
        params.update({k: v for k, v in self.overrides.items() if k == "n"})
        return benchmarks.micro_by_name(self.rve_name or "porous-square", params)


def _material_from(spec):
    try:
        elastic = material.ElasticParams(E=float(spec["E"]), nu=float(spec["nu"]))
        if "sigma0" in spec:
            return material.PlasticParams(
                elastic=elastic, sigma0=float(spec["sigma0"]), h=float(spec.get("h", 0.0))
            )
        return elastic
    except (KeyError, StructuralError) as exc:
        raise ConfigError(f"invalid material spec {spec}: {exc}") from exc


def load_config(path) -> RunConfig:
    """Read and validate a JSON run configuration.

    Parse errors carry the line/column; validation errors name the failing
    field or constraint. Defaults are filled for everything optional.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_config(raw, base_dir=".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {
        "name", "benchmark", "schemes", "solver", "output_dir", "overrides",
        "elastic_only", "macro_mesh", "rve_mesh", "rve", "materials",
        "dirichlet", "point_loads", "control_dof", "reaction_dofs",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")

    schemes = raw.get("schemes", ["staggered", "monolithic-stored"])
    if not schemes:
        raise ConfigError("schemes: at least one scheme must be selected")
    try:
        schemes = [macro.canonical_scheme(s) for s in schemes]
    except StructuralError as exc:
        raise ConfigError(str(exc)) from exc

    solver_raw = raw.get("solver", {})
    if not isinstance(solver_raw, dict):
        raise ConfigError("solver: must be an object")
    valid = {f for f in macro.SolverSettings.__dataclass_fields__}
    bad = set(solver_raw) - valid
    if bad:
        raise ConfigError(f"solver: unknown fields {sorted(bad)}")
    try:
        settings = macro.SolverSettings(**solver_raw)
    except StructuralError as exc:
        raise ConfigError(f"solver: {exc}") from exc

    benchmark = raw.get("benchmark")
    macro_mesh = raw.get("macro_mesh")
    if benchmark is None and macro_mesh is None:
        raise ConfigError("either 'benchmark' or 'macro_mesh' is required")
    if benchmark is not None and benchmark not in benchmarks.BENCHMARK_BUILDERS:
        raise ConfigError(
            f"benchmark: unknown name {benchmark!r}; options: "
            f"{sorted(benchmarks.BENCHMARK_BUILDERS)}"
        )
    if macro_mesh is not None:
        macro_mesh = os.path.join(base_dir, macro_mesh)
        if not os.path.exists(macro_mesh):
            raise ConfigError(f"macro_mesh: file not found: {macro_mesh}")
    rve_mesh = raw.get("rve_mesh")
    if rve_mesh is not None:
        rve_mesh = os.path.join(base_dir, rve_mesh)
        if not os.path.exists(rve_mesh):
            raise ConfigError(f"rve_mesh: file not found: {rve_mesh}")

    name = raw.get("name") or benchmark or "custom"
    return RunConfig(
        name=name,
        schemes=schemes,
        settings=settings,
        output_dir=os.path.join(base_dir, raw.get("output_dir", "out")),
        benchmark=benchmark,
        overrides=raw.get("overrides", {}),
        elastic_only=bool(raw.get("elastic_only", False)),
        macro_mesh=macro_mesh,
        rve_mesh=rve_mesh,
        rve_name=raw.get("rve"),
        materials=raw.get("materials", []),
        dirichlet=raw.get("dirichlet", []),
        point_loads=raw.get("point_loads", []),
        control_dof=int(raw.get("control_dof", 0)),
        reaction_dofs=raw.get("reaction_dofs", []),
    )


# ---------------------------------------------------------------------------
# artifacts


def _fmt(x):
    return f"{float(x):.17g}"


def write_curve_csv(path, curve):
    with open(path, "w") as fh:
        fh.write("load_factor,control_value,reaction\n")
        for lam, control, reaction in curve:
            fh.write(f"{_fmt(lam)},{_fmt(control)},{_fmt(reaction)}\n")


def write_stats_csv(path, records):
    with open(path, "w") as fh:
        fh.write("increment,dt,macro_iters,micro_iters_total,factorizations,wall_ms,cut_events\n")
        for r in records:
            fh.write(
                f"{r.index},{_fmt(r.dt)},{r.macro_iterations},{r.micro_iters_total},"
                f"{r.factorizations},{_fmt(r.wall_ms)},{r.cut_events}\n"
            )


def read_stats_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            rows.append(dict(zip(header, line.strip().split(","))))
    return rows


def write_summary(path, name, scheme_files):
    """Cross-scheme totals and ratios, recomputed from the stats CSVs."""
    totals = {}
    for scheme, stats_path in scheme_files.items():
        rows = read_stats_csv(stats_path)
        totals[scheme] = {
            "increments": len(rows),
            "wall_ms": sum(float(r["wall_ms"]) for r in rows),
            "factorizations": sum(int(r["factorizations"]) for r in rows),
            "micro_iters": sum(int(r["micro_iters_total"]) for r in rows),
        }
    base = totals.get("staggered")
    with open(path, "w") as fh:
        fh.write("benchmark,scheme,increments,wall_ms_total,factorizations_total,"
                 "micro_solves_total,wall_ratio_vs_staggered,"
                 "factorization_ratio_vs_staggered,micro_solve_ratio_vs_staggered\n")
        for scheme, tot in totals.items():
            if base is not None and base["wall_ms"] > 0:
                ratios = (
                    _fmt(tot["wall_ms"] / base["wall_ms"]),
                    _fmt(tot["factorizations"] / base["factorizations"]) if base["factorizations"] else "",
                    _fmt(tot["micro_iters"] / base["micro_iters"]) if base["micro_iters"] else "",
                )
            else:
                ratios = ("", "", "")
            fh.write(
                f"{name},{scheme},{tot['increments']},{_fmt(tot['wall_ms'])},"
                f"{tot['factorizations']},{tot['micro_iters']},"
                f"{ratios[0]},{ratios[1]},{ratios[2]}\n"
            )
    return totals


def _echo_config(config):
    """Write the effective configuration (all defaults filled) next to the results."""
    payload = {
        "name": config.name,
        "benchmark": config.benchmark,
        "schemes": config.schemes,
        "overrides": config.overrides,
        "elastic_only": config.elastic_only,
        "solver": {f: getattr(config.settings, f)
                   for f in macro.SolverSettings.__dataclass_fields__},
    }
    with open(os.path.join(config.output_dir, f"{config.name}_config_echo.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def run_suite(config: RunConfig):
    """Run every selected scheme and write curves, stats, and the summary.

    Returns (exit_status, reports): 0 when every scheme converged, 1
    otherwise; artifacts are written either way.
    """
    os.makedirs(config.output_dir, exist_ok=True)
    _echo_config(config)
    reports = {}
    scheme_stats = {}
    status = 0
    for scheme in config.schemes:
        model = config.build_model(scheme)
        report = macro.run(model, config.settings)
        reports[scheme] = report
        prefix = os.path.join(config.output_dir, f"{config.name}_{scheme}")
        write_curve_csv(prefix + "_curve.csv", report.curve)
        write_stats_csv(prefix + "_stats.csv", report.records)
        scheme_stats[scheme] = prefix + "_stats.csv"
        if not report.converged:
            status = 1
    write_summary(
        os.path.join(config.output_dir, f"{config.name}_summary.csv"),
        config.name, scheme_stats,
    )
    return status, reports


# ---------------------------------------------------------------------------
# built-in self checks (fescale check)


def _check_patch_test():
    nodes = np.array([[0.0, 0.0], [1.1, 0.1], [0.9, 1.2], [-0.1, 0.9]])
    mesh = Mesh(nodes, [ElementBlock(QUAD4, [[0, 1, 2, 3]])])
    g = np.array([[0.3, -0.2], [0.1, 0.4]])
    u = (nodes @ g.T).ravel()
    from fescale.mesh import build_integration_points

    for ip in build_integration_points(mesh):
        if not np.allclose(ip.b_operator @ u[ip.dofs], g.ravel(), atol=1e-12):
            return False
    return True


def _check_material_consistency():
    params = material.PlasticParams(material.ElasticParams(100.0, 0.3), 1.0, 2.0)
    err = material.tangent_check(params, np.array([0.0, 0.03, 0.03, 0.0]),
                                 material.MaterialState.virgin())
    return err <= 1e-5


def _check_linear_solver():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((25, 25))
    a = linalg.SparseMatrix.from_dense(m @ m.T + 25 * np.eye(25))
    f = linalg.factorize(a, linalg.compute_ordering(a))
    b = rng.standard_normal(25)
    x = linalg.solve(f, b)
    res = np.abs(a.to_dense() @ x - b).max()
    return res <= 1e-10 * (np.abs(a.to_dense()).max() * np.abs(x).max() + np.abs(b).max())


def _check_periodic_averaging():
    el = material.ElasticParams(100.0, 0.3)
    geom = rvemod.MicroGeometry(benchmarks.rve_laminate(el, el, n=3))
    p = rvemod.RveProblem(geom)
    p.H = np.array([0.01, 0.004, -0.002, -0.006])
    p.u_hat = 1e-3 * np.sin(np.arange(geom.n_reduced))
    return np.allclose(rvemod.average_gradient(p), p.H, atol=1e-10)


def _check_homogenized_tangent():
    el = material.ElasticParams(100.0, 0.3)
    geom = rvemod.MicroGeometry(benchmarks.rve_laminate(el, el, n=3))
    p = rvemod.RveProblem(geom)
    out = rvemod.solve_micro_staggered(p, np.zeros(4), 1e-10, 5)
    return np.allclose(out.c_tangent, el.stiffness(), atol=1e-9 * el.E)


CHECKS = [
    ("element patch test", _check_patch_test),
    ("radial-return consistent tangent", _check_material_consistency),
    ("sparse LU residual bound", _check_linear_solver),
    ("periodic averaging identity", _check_periodic_averaging),
    ("homogenized elastic tangent identity", _check_homogenized_tangent),
]


def run_checks():
    failures = 0
    for label, fn in CHECKS:
        ok = False
        try:
            ok = fn()
        except Exception as exc:  # a crash is a failure with context
            print(f"FAIL {label}: {type(exc).__name__}: {exc}")
            failures += 1
            continue
        print(f"{'PASS' if ok else 'FAIL'} {label}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# command line


def _default_workers():
    try:
        return max(1, int(os.environ.get("FESCALE_WORKERS", "1")))
    except ValueError:
        return 1


def _apply_cli_overrides(config, args):
    if args.schemes:
        config.schemes = [macro.canonical_scheme(s) for s in args.schemes.split(",")]
    if args.out:
        config.output_dir = args.out
    workers = args.workers if args.workers else _default_workers()
    fields = {f: getattr(config.settings, f) for f in macro.SolverSettings.__dataclass_fields__}
    fields["parallel_workers"] = workers
    config.settings = macro.SolverSettings(**fields)
    return config


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fescale", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--schemes", default=None, help="comma-separated scheme list")
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--out", default=None)

    p_bench = sub.add_parser("bench", help="run a named built-in benchmark")
    p_bench.add_argument("suite", help="benchmark name or 'all'")
    p_bench.add_argument("--schemes", default="staggered,monolithic,monolithic-stored")
    p_bench.add_argument("--workers", type=int, default=None)
    p_bench.add_argument("--out", default="out")

    sub.add_parser("check", help="run built-in invariant self-tests")

    args = parser.parse_args(argv)
    try:
        if args.command == "check":
            return run_checks()
        if args.command == "run":
            config = load_config(args.config)
            config = _apply_cli_overrides(config, args)
            status, _ = run_suite(config)
            return status
        if args.command == "bench":
            names = sorted(benchmarks.BENCHMARK_BUILDERS) if args.suite == "all" else [args.suite]
            status = 0
            for name in names:
                raw = {"benchmark": name, "schemes": args.schemes.split(","),
                       "solver": benchmarks.BENCH_SOLVER_DEFAULTS.get(name, {}),
                       "output_dir": args.out}
                raw["overrides"] = benchmarks.BENCH_SIZE_DEFAULTS.get(name, {})
                config = parse_config(raw, base_dir=".")
                config = _apply_cli_overrides(config, args)
                s, reports = run_suite(config)
                status = max(status, s)
                for scheme, rep in reports.items():
                    print(f"{name} [{scheme}]: converged={rep.converged} "
                          f"increments={len(rep.records)} "
                          f"factorizations={rep.total_factorizations} "
                          f"wall={rep.total_wall_ms:.0f} ms")
            return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FescaleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
