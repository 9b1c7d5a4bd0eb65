"""Command-line driver: ``neurofem <command> ...``.

Outputs are CSV (with a ``# config:`` comment line), JSON or Matrix Market
files written under ``--out``. Exit status is 0 on success, 2 on usage
errors and 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys

import numpy as np

log = logging.getLogger("neurofem")


def parse_gamma(text: str) -> float:
    """Accept ``0.00390625``, ``2^-8`` or ``2**-8``."""
    m = re.fullmatch(r"\s*2\s*(?:\^|\*\*)\s*(-?\d+)\s*", text)
    if m:
        return 2.0 ** int(m.group(1))
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"gamma must be positive, got {text}")
    return v


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _config_line(args) -> str:
    skip = {"func"}
    cfg = {k: v for k, v in vars(args).items() if k not in skip}
    return "# config: " + json.dumps(cfg, sort_keys=True, default=str) + "\n"


def _write_vector_csv(path: str, args, columns: list[str], cols: list) -> None:
    with open(path, "w") as fh:
        fh.write(_config_line(args))
        fh.write(",".join(columns) + "\n")
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")


def _read_vector_csv(path: str) -> np.ndarray:
    vals = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals.append(float(line.split(",")[-1]))
            except ValueError:
                continue  # header
    return np.array(vals)


def _read_mtx(path: str):
    from .sparse import mm_read

    with open(path) as fh:
        return mm_read(fh)


def _load_mesh(path: str):
    from .mesh import Mesh, parse_gmsh

    with open(path) as fh:
        text = fh.read()
    if path.endswith(".json"):
        return Mesh.from_json(text)
    return parse_gmsh(text)


def _system(args):
    from .fem import FORCINGS, assemble, poisson_disk_system
    from .mesh import classify_boundary

    if getattr(args, "mesh", None):
        mesh = _load_mesh(args.mesh)
        markers = set(args.dirichlet)
        flux = {m: args.neumann_flux for m in set(np.unique(mesh.facet_markers).tolist()) - markers}
        return assemble(mesh, FORCINGS[args.forcing], classify_boundary(mesh, markers), flux)
    return poisson_disk_system(args.max_area, args.forcing)


def _params(args):
    from .network import SnnParams

    return SnnParams(npm=args.npm, gamma_mag=args.gamma)


# ---------------------------------------------------------------------------
# commands


def cmd_mesh_gen(args) -> None:
    from .mesh import gen_annulus_mesh, gen_disk_mesh, mesh_stats, write_gmsh

    mesh = gen_annulus_mesh(args.max_area, args.inner_radius) if args.annulus else gen_disk_mesh(args.max_area)
    path = _out_path(args, args.name)
    with open(path, "w") as fh:
        fh.write(mesh.to_json() if path.endswith(".json") else write_gmsh(mesh))
    n, ni, ne, amax = mesh_stats(mesh)
    print(f"{path}: {n} nodes, {ne} elements, max area {amax:.6g}")


def cmd_mesh_import(args) -> None:
    mesh = _load_mesh(args.path)
    path = _out_path(args, args.name)
    with open(path, "w") as fh:
        fh.write(mesh.to_json())
    print(f"{path}: {mesh.n_nodes} nodes")


def cmd_mesh_stats(args) -> None:
    from .mesh import classify_boundary, mesh_stats

    mesh = _load_mesh(args.path)
    n, ni, ne, amax = mesh_stats(mesh, classify_boundary(mesh, set(args.dirichlet)))
    print(json.dumps({"n_nodes": n, "n_interior": ni, "n_elements": ne, "max_element_size": amax}))


def cmd_assemble(args) -> None:
    sysm = _system(args)
    with open(_out_path(args, "A.mtx"), "w") as fh:
        fh.write(sysm.export_mtx())
    with open(_out_path(args, "b.csv"), "w") as fh:
        fh.write(_config_line(args))
        fh.write(sysm.export_csv())
    print(f"assembled {sysm.n} unknowns, {sysm.A.nnz} nonzeros")


def cmd_solve_cg(args) -> None:
    from .fem import analytic_u, conventional_solution
    from .sparse import cg_solve

    if args.system:
        A, b = _read_mtx(args.system), _read_vector_csv(args.rhs)
        sol = cg_solve(A, b, tol=args.tol) if np.sum(A.diagonal()) > 0 else cg_solve(-A, -b, tol=args.tol)
        _write_vector_csv(_out_path(args, "solution_cg.csv"), args, ["index", "x"], [range(len(b)), sol.x])
    else:
        sysm = _system(args)
        sol = conventional_solution(sysm, tol=args.tol)
        u = analytic_u(sysm.points()) if args.forcing == "f1" else np.full(sysm.n, np.nan)
        _write_vector_csv(_out_path(args, "solution_cg.csv"), args, ["index", "mesh_node", "x", "analytic"],
                          [range(sysm.n), sysm.interior_nodes, sol.x, u])
    print(json.dumps({"iterations": sol.iterations, "rel_residual": sol.final_rel_residual, "converged": sol.converged}))
    if not sol.converged:
        raise RuntimeError("CG did not converge")


def cmd_solve_float(args) -> None:
    from .fem import conventional_solution
    from .network import build_network
    from .sim_float import RecordOptions, estimate_solution, raster_csv, residual_csv, run, run_config_json

    sysm = _system(args)
    net = build_network(sysm, _params(args))
    rec = RecordOptions(residual_targets={"b": sysm.b}, raster=args.raster)
    tr = run(net, args.steps, args.seed, record=rec, windows=(args.window,), backend=args.backend)
    x = estimate_solution(tr, args.window)
    xc = conventional_solution(sysm).x
    _write_vector_csv(_out_path(args, "solution_nf_float.csv"), args, ["index", "mesh_node", "x", "x_conventional"],
                      [range(sysm.n), sysm.interior_nodes, x, xc])
    with open(_out_path(args, "residual.csv"), "w") as fh:
        fh.write(_config_line(args) + residual_csv(tr))
    if args.raster:
        with open(_out_path(args, "raster.csv"), "w") as fh:
            fh.write(_config_line(args) + raster_csv(tr))
    with open(_out_path(args, "run.json"), "w") as fh:
        fh.write(run_config_json(net, args.steps, args.seed, window=args.window))
    print(json.dumps({"rel_err_vs_conventional": float(np.linalg.norm(x - xc) / np.linalg.norm(xc)),
                      "total_spikes": tr.total_spikes}))


def cmd_solve_fixed(args) -> None:
    from .fem import conventional_solution
    from .network import build_network, export_fixed_network, quantize_network
    from .sim_fixed import EpochConfig, epoch_csv, run_fixed, solve_fixed

    sysm = _system(args)
    fnet = quantize_network(build_network(sysm, _params(args)), shift_plan=args.shift_plan)
    xc = conventional_solution(sysm).x
    x, sim = solve_fixed(fnet, args.steps, args.window, args.seed, noise=not args.no_noise, backend=args.backend)
    _write_vector_csv(_out_path(args, "solution_nf_fixed.csv"), args, ["index", "mesh_node", "x", "x_conventional"],
                      [range(sysm.n), sysm.interior_nodes, x, xc])
    report = {"rel_err_vs_conventional": float(np.linalg.norm(x - xc) / np.linalg.norm(xc)),
              "saturations": sim.saturations, "rescale": fnet.rescale}
    if args.n_epochs > 0:
        modes = ("steady", "transient") if args.mode == "both" else (args.mode,)
        for m in modes:
            res = run_fixed(fnet, EpochConfig(args.epoch_len, args.n_epochs, m), args.seed,
                            noise=not args.no_noise, backend=args.backend)
            with open(_out_path(args, f"epochs_{m}.csv"), "w") as fh:
                fh.write(_config_line(args) + epoch_csv(res))
            report[f"spikes_{m}"] = int(res.spike_counts.sum())
    if args.export:
        export_fixed_network(fnet, _out_path(args, "fixed_network"))
    print(json.dumps(report))


def cmd_solve_ingest(args) -> None:
    from .studies import solve_ingested

    A, b = _read_mtx(args.matrix), _read_vector_csv(args.rhs)
    if len(b) != A.n_rows:
        raise ValueError(f"rhs has {len(b)} entries, matrix has {A.n_rows} rows")
    res = solve_ingested(A, b, _params(args), args.steps, args.window, args.seed, args.backend)
    cols, vals = ["index", "x"], [range(len(b)), res["x"]]
    if "x_cg" in res:
        cols.append("x_cg")
        vals.append(res["x_cg"])
    _write_vector_csv(_out_path(args, "solution_ingest.csv"), args, cols, vals)
    print(json.dumps({k: v for k, v in res.items() if not isinstance(v, np.ndarray)}, default=float))


def cmd_partition(args) -> None:
    from .mesh import gen_disk_mesh
    from .partition import assign_cores, layout_csv, partition_csv, partition_mesh, partition_metrics
    from .fem import poisson_disk_system

    if args.mesh:
        mesh = _load_mesh(args.mesh)
    else:
        mesh = gen_disk_mesh(args.max_area)
    part = partition_mesh(mesh, args.chips, args.iterations, args.balance_weight, args.seed)
    layout = assign_cores(part, args.npm, args.cores, args.max_neurons_per_core)
    with open(_out_path(args, "partition.csv"), "w") as fh:
        fh.write(_config_line(args) + partition_csv(part, layout))
    with open(_out_path(args, "layout.csv"), "w") as fh:
        fh.write(_config_line(args) + layout_csv(mesh, part))
    report = {"n_nodes": mesh.n_nodes, "loads_min": int(part.loads.min()), "loads_max": int(part.loads.max()),
              "changed_last_iteration": part.changed_last_iteration}
    if not args.mesh:
        cut, std, ratio = partition_metrics(part, poisson_disk_system(args.max_area))
        report.update(edge_cut=cut, load_std=std, max_load_ratio=ratio)
    print(json.dumps(report))


def cmd_study(args) -> None:
    from .studies import FIXED_AREAS, FLOAT_AREAS, SINGLE_MESH_AREA, STUDIES, SWITCH_STEPS, StudyConfig

    fixed = args.study == "fixedpoint"
    single = args.study in ("averaging", "switch", "p-vs-pi")
    default_areas = FIXED_AREAS if fixed else ((SINGLE_MESH_AREA,) if single else FLOAT_AREAS)
    default_steps = 10_000 if fixed else (SWITCH_STEPS if args.study == "switch" else 50_000)
    cfg = StudyConfig(
        study=args.study,
        max_areas=tuple(args.max_area or default_areas),
        npm=tuple(args.npm or ((8,) if fixed else (16,))),
        gamma=tuple(args.gamma or ((2.0**-6,) if fixed else (2.0**-8,))),
        steps=args.steps if args.steps is not None else default_steps,
        window=args.window if args.window is not None else (1_000 if fixed else 10_000),
        seeds=tuple(args.seed or (0,)),
        out=args.out,
        epoch_len=args.epoch_len,
        n_epochs=args.n_epochs,
        mode=args.mode,
        backend=args.backend,
    )
    if args.switch_step is not None:
        cfg.switch_step = args.switch_step
    res = STUDIES[args.study](cfg)
    for p in res.write():
        print(p)
    print(json.dumps(res.summary, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


# ---------------------------------------------------------------------------
# parser


def _add_problem(p, area_default: float | None = 0.005) -> None:
    p.add_argument("--max-area", type=float, default=area_default, help="disk mesh max triangle area")
    p.add_argument("--mesh", help="mesh file (.msh or .json) instead of the generated disk")
    p.add_argument("--forcing", choices=("f1", "f2"), default="f1")
    p.add_argument("--dirichlet", type=int, nargs="+", default=[1], help="Dirichlet boundary markers")
    p.add_argument("--neumann-flux", type=float, default=1.0, help="flux on all other boundary markers")


def _add_network(p, npm: int = 16, gamma: float = 2.0**-8) -> None:
    p.add_argument("--npm", type=int, default=npm, help="neurons per mesh node")
    p.add_argument("--gamma", type=parse_gamma, default=gamma, help="readout magnitude |G|, e.g. 2^-8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=("compiled", "python"), default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurofem", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    mesh = sub.add_parser("mesh", help="generate, import or inspect meshes").add_subparsers(dest="action", required=True)
    g = mesh.add_parser("gen")
    g.add_argument("--max-area", type=float, required=True)
    g.add_argument("--annulus", action="store_true")
    g.add_argument("--inner-radius", type=float, default=0.3)
    g.add_argument("--name", default="mesh.msh", help="output file name; .json or .msh")
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_mesh_gen)
    i = mesh.add_parser("import")
    i.add_argument("path")
    i.add_argument("--name", default="mesh.json")
    i.add_argument("--out", default=".")
    i.set_defaults(func=cmd_mesh_import)
    s = mesh.add_parser("stats")
    s.add_argument("path")
    s.add_argument("--dirichlet", type=int, nargs="+", default=[1])
    s.set_defaults(func=cmd_mesh_stats)

    a = sub.add_parser("assemble", help="assemble A and b")
    _add_problem(a)
    a.add_argument("--out", default=".")
    a.set_defaults(func=cmd_assemble)

    solve = sub.add_parser("solve", help="solve a system").add_subparsers(dest="method", required=True)
    c = solve.add_parser("cg")
    _add_problem(c)
    c.add_argument("--system", help="Matrix Market file instead of assembling")
    c.add_argument("--rhs", help="right-hand side CSV (last column) for --system")
    c.add_argument("--tol", type=float, default=1e-12)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_solve_cg)
    f = solve.add_parser("nf-float")
    _add_problem(f)
    _add_network(f)
    f.add_argument("--steps", type=int, default=50_000)
    f.add_argument("--window", type=int, default=10_000)
    f.add_argument("--raster", action="store_true")
    f.add_argument("--out", default=".")
    f.set_defaults(func=cmd_solve_float)
    x = solve.add_parser("nf-fixed")
    _add_problem(x)
    _add_network(x, npm=8, gamma=2.0**-6)
    x.add_argument("--steps", type=int, default=10_000)
    x.add_argument("--window", type=int, default=1_000)
    x.add_argument("--epoch-len", type=int, default=4096)
    x.add_argument("--n-epochs", type=int, default=0, help="also run the epoch protocol when > 0")
    x.add_argument("--mode", choices=("steady", "transient", "both"), default="both")
    x.add_argument("--shift-plan", choices=("derived", "published"), default="derived")
    x.add_argument("--no-noise", action="store_true")
    x.add_argument("--export", action="store_true", help="write the quantized network bundle")
    x.add_argument("--out", default=".")
    x.set_defaults(func=cmd_solve_fixed)
    ing = solve.add_parser("ingest")
    ing.add_argument("matrix")
    ing.add_argument("rhs")
    _add_network(ing)
    ing.add_argument("--steps", type=int, default=50_000)
    ing.add_argument("--window", type=int, default=10_000)
    ing.add_argument("--out", default=".")
    ing.set_defaults(func=cmd_solve_ingest)

    p = sub.add_parser("partition", help="partition a mesh over chips")
    p.add_argument("--max-area", type=float, default=0.0002)
    p.add_argument("--mesh")
    p.add_argument("--chips", type=int, default=32)
    p.add_argument("--iterations", type=int, default=16)
    p.add_argument("--balance-weight", type=float, default=1.0)
    p.add_argument("--npm", type=int, default=8)
    p.add_argument("--cores", type=int, default=128)
    p.add_argument("--max-neurons-per-core", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_partition)

    st = sub.add_parser("study", help="run a parameter sweep")
    st.add_argument("study", choices=("convergence", "residual", "averaging", "switch", "fixedpoint", "p-vs-pi"))
    st.add_argument("--max-area", type=float, action="append")
    st.add_argument("--npm", type=int, action="append")
    st.add_argument("--gamma", type=parse_gamma, action="append")
    st.add_argument("--steps", type=int)
    st.add_argument("--window", type=int)
    st.add_argument("--seed", type=int, action="append")
    st.add_argument("--epoch-len", type=int, default=4096)
    st.add_argument("--n-epochs", type=int, default=16)
    st.add_argument("--mode", choices=("steady", "transient", "both"), default="both")
    st.add_argument("--switch-step", type=int)
    st.add_argument("--backend", choices=("compiled", "python"), default=None)
    st.add_argument("--out", default="results")
    st.set_defaults(func=cmd_study)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - report any failure as a nonzero exit
        log.error("%s: %s", type(e).__name__, e)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
