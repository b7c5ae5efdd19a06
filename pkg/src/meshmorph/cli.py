"""Command-line driver for the experiments, the Laplace comparison and the scaling benchmark."""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
import time
import timeit
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry, interpolation, kernel, smoothing
from .io import (ConfigError, RunConfig, RunSummary, parse_value, read_config,
                 write_config, write_history_csv, write_mesh)
from .mesh import DegenerateInputError, orientation_check, quality_report, tessellate

logger = logging.getLogger("meshmorph")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

# map name -> domain it is defined on
MAP_DOMAINS = {
    "square_to_disk": "unit_square",
    "annulus_to_airfoil": "annulus",
    "joukowsky": "annulus",
    "cube_to_sphere": "unit_cube",
}

NUMERICAL_ERRORS = (kernel.DistinctCentersError, kernel.BracketError, DegenerateInputError,
                    geometry.InfeasibleSpacingError, np.linalg.LinAlgError, FloatingPointError)


@dataclass(frozen=True)
class ExperimentCase:
    name: str
    config: RunConfig
    domain: geometry.DomainSpec
    deformation: object

    @property
    def spacing(self):
        cfg = self.config
        if cfg.n_target > 0:
            return geometry.spacing_for_count(self.domain, cfg.n_target, cfg.seed)
        return cfg.h

    def nodes(self):
        """Generated nodes with data sites marked."""
        cfg = self.config
        raw = geometry.generate_nodes(self.domain, self.spacing, seed=cfg.seed)
        return geometry.select_data_sites(raw, cfg.p, seed=cfg.seed)

    @property
    def params(self):
        cfg = self.config
        return smoothing.SmoothingParams(
            delta=cfg.delta, sigma=cfg.sigma, alpha=cfg.alpha,
            max_iterations=cfg.max_iterations,
            quality_gate=cfg.quality_gate if cfg.quality_gate > 0 else None,
            mu_source=cfg.mu_source)

    @property
    def kernel_config(self):
        cfg = self.config
        return kernel.KernelConfig(cfg.kappa_t, cfg.bracket_lo, cfg.bracket_hi, cfg.norm_kind)


def make_case(cfg):
    """Resolve the domain and deformation named in ``cfg``."""
    if cfg.map not in MAP_DOMAINS:
        raise ConfigError("map", f"unknown map {cfg.map!r}; choose from {sorted(MAP_DOMAINS)}")
    if cfg.domain not in geometry.DOMAIN_KINDS:
        raise ConfigError("domain", f"unknown domain {cfg.domain!r}")
    if MAP_DOMAINS[cfg.map] != cfg.domain:
        raise ConfigError("map", f"map {cfg.map!r} needs domain {MAP_DOMAINS[cfg.map]!r}, "
                                 f"not {cfg.domain!r}")
    try:
        domain = geometry.DomainSpec(cfg.domain, r_in=cfg.r_in, r_out=cfg.r_out)
    except ValueError as exc:
        raise ConfigError("r_in", str(exc)) from None
    if cfg.map in ("annulus_to_airfoil", "joukowsky"):
        deformation = geometry.AnnulusMap(
            r_in=cfg.r_in, r_out=cfg.r_out, center=complex(cfg.joukowsky_cx, cfg.joukowsky_cy),
            airfoil_scale=cfg.airfoil_scale, square_half=cfg.square_half, alpha=cfg.alpha)
    elif cfg.map == "square_to_disk":
        deformation = geometry.square_to_disk
    else:
        deformation = geometry.cube_to_sphere
    return ExperimentCase(cfg.case, cfg, domain, deformation)


def apply_overrides(cfg, pairs):
    values = cfg.to_dict()
    for pair in pairs or ():
        key, sep, text = pair.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(pair, "override must look like key=value")
        if key == "case":
            raise ConfigError(key, "the case cannot be overridden; use a different config")
        values[key] = parse_value(text.strip())
    return RunConfig.from_dict(values)


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads at ``MESHMORPH_THREADS`` when set."""
    n = os.environ.get("MESHMORPH_THREADS")
    if not n:
        yield
        return
    try:
        limit = int(n)
    except ValueError:
        raise ConfigError("MESHMORPH_THREADS", f"expected an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(1, limit)):
        yield


# --- run -----------------------------------------------------------------


def _mesh_fields(mesh, eps=None):
    rep = quality_report(mesh)
    point = {"q_y": rep.q_y}
    if eps is not None:
        point["eps"] = eps
    return point, {"q_e": rep.q_e}


def _write(mesh, path, eps=None):
    point, cell = _mesh_fields(mesh, eps)
    write_mesh(mesh, path, point_data=point, cell_data=cell)


def summarize(case, nodes, result):
    Xd = nodes.coords[nodes.data_mask]
    kappa = kernel.condition_estimate(kernel.assemble(Xd, result.eps_star),
                                      case.config.norm_kind)
    # connectivity of the undeformed mesh carried to each deformed node set
    carried = [orientation_check(result.undeformed_mesh, m.vertices) for m in result.meshes]
    reps = result.reports
    return RunSummary(
        case=case.name, eps_star=result.eps_star, kappa=kappa,
        residual=result.interp.residual(),
        n=len(nodes), n_interior=nodes.n_interior, n_boundary=nodes.n_boundary,
        n_data=nodes.n_data,
        norm2_qe=[r.norm2_qe for r in reps], min_qe=[r.min_qe for r in reps],
        mean_qe=[r.mean_qe for r in reps], min_qy=[r.min_qy for r in reps],
        norm2_qy=[r.norm2_qy for r in reps], inverted_count=[r.inverted_count for r in reps],
        iterations=result.iterations, best_index=result.best_index,
        termination=result.reason,
        timings={k: float(np.mean(v)) for k, v in sorted(result.timings.items())},
        extra={"spacing": float(nodes.spacing), "carried_inverted_count": carried},
    )


@dataclass
class ExperimentOutput:
    case: ExperimentCase
    nodes: geometry.NodeSet
    result: smoothing.RunResult
    summary: RunSummary
    out_dir: Path


def run_experiment(cfg, out_dir=None, write_iterations=True):
    """Generate nodes, fit, smooth and write every artifact to ``out_dir``.

    Files: ``undeformed.vtk``, ``unsmoothed.vtk``, ``iter_###.vtk`` for each
    scored mesh, ``best.vtk``, ``history.csv``, ``summary.json`` and the
    resolved ``config.toml``.
    """
    if isinstance(cfg, (str, Path)):
        cfg = read_config(cfg)
    case = make_case(cfg)
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    nodes = case.nodes()
    gen_time = time.perf_counter() - t0
    logger.info("%s: N = %d (interior %d, boundary %d, data %d)", case.name, len(nodes),
                nodes.n_interior, nodes.n_boundary, nodes.n_data)
    result = smoothing.run(nodes, case.domain, case.deformation, case.params,
                           case.kernel_config, snap_boundary=cfg.snap_boundary)
    summary = summarize(case, nodes, result)
    summary.timings["node_generation"] = gen_time

    write_config(cfg, out / "config.toml")
    _write(result.undeformed_mesh, out / "undeformed.vtk")
    _write(result.unsmoothed_mesh, out / "unsmoothed.vtk", result.eps_history[0])
    if write_iterations:
        for i, mesh in enumerate(result.meshes):
            _write(mesh, out / f"iter_{i:03d}.vtk", result.eps_history[i])
    _write(result.best_mesh, out / "best.vtk", result.eps_history[result.best_index])
    write_history_csv(result.reports, out / "history.csv")
    summary.write(out / "summary.json")
    return ExperimentOutput(case, nodes, result, summary, out)


# --- Laplace comparison --------------------------------------------------


COMPARISON_COLUMNS = ("method", "iterations", "norm2_qe", "min_qe", "mean_qe", "norm2_qy",
                      "min_qy", "inverted_count")


@dataclass
class LaplaceComparison:
    iterations: int
    unsmoothed: object
    rbf: object
    laplace: object
    laplace_mesh: object


def compare_laplace(cfg, out_dir=None):
    """RBF smoothing against the same number of Laplace sweeps on the unsmoothed mesh.

    Boundary nodes stay fixed during the Laplace sweeps. Writes
    ``laplace.vtk``, ``rbf_best.vtk`` and ``comparison.csv`` next to the run
    artifacts.
    """
    exp = run_experiment(cfg, out_dir, write_iterations=False)
    res = exp.result
    n_iter = res.iterations
    holes = exp.case.domain.hole_loops(exp.nodes)
    lap_mesh = smoothing.laplace_smooth(res.unsmoothed_mesh, exp.nodes.boundary_mask, n_iter, holes)
    cmp = LaplaceComparison(n_iter, res.reports[0], res.best_report, quality_report(lap_mesh),
                            lap_mesh)
    _write(lap_mesh, exp.out_dir / "laplace.vtk")
    _write(res.best_mesh, exp.out_dir / "rbf_best.vtk")
    with open(exp.out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for name, it, rep in (("unsmoothed", 0, cmp.unsmoothed), ("rbf", n_iter, cmp.rbf),
                              ("laplace", n_iter, cmp.laplace)):
            w.writerow([name, it, repr(rep.norm2_qe), repr(rep.min_qe), repr(rep.mean_qe),
                        repr(rep.norm2_qy), repr(rep.min_qy), rep.inverted_count])
    return cmp


# --- benchmark -----------------------------------------------------------


@dataclass
class BenchmarkResult:
    sizes: list
    eval_sizes: list
    search: list
    assemble: list
    fit: list
    evaluate: list
    fit_slope: float
    search_slope: float
    eval_slope: float


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _best_of(reps, fn, min_time=0.2):
    """Minimum over ``reps`` repetitions of the mean time per call.

    Each repetition loops enough calls to last about ``min_time`` seconds so
    that short calls are not dominated by timer resolution.
    """
    timer = timeit.Timer(fn)
    number = 1
    while timer.timeit(number) < min_time:
        number *= 2
    return min(timer.repeat(repeat=reps, number=number)) / number


def _circle_sites(n):
    t = 2.0 * np.pi * np.arange(n) / n
    X = np.c_[np.cos(t), np.sin(t)]
    return X, geometry.circle_to_square(t)


def benchmark_preprocessing(sizes, reps=3, eval_data_sites=200, eval_factor=20, seed=0,
                            min_time=0.2):
    """Time the shape-parameter search, the fit and the evaluation.

    ``sizes`` are data-site counts for the search and the fit. Evaluation uses
    ``eval_data_sites`` centres and ``eval_factor * size`` evaluation points.
    Each reported time is the minimum over ``reps`` repetitions.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 4 or sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ConfigError("sizes", "need at least 4 strictly ascending sizes")
    if reps < 1:
        raise ConfigError("reps", "need at least one repetition")
    search, assemble, fit, evaluate = [], [], [], []
    for n in sizes:
        X, Y = _circle_sites(n)
        eps = kernel.find_shape_parameter(X)
        search.append(_best_of(reps, lambda: kernel.find_shape_parameter(X), min_time))
        assemble.append(_best_of(reps, lambda: kernel.assemble(X, eps), min_time))
        # assembly is O(N_d^2) and timed separately; fit = factor + solve
        A = kernel.assemble(X, eps).entries
        fit.append(_best_of(reps, lambda: interpolation.solve(A, Y), min_time))
    Xe, Ye = _circle_sites(eval_data_sites)
    interp = interpolation.fit(Xe, Ye, kernel.find_shape_parameter(Xe))
    rng = np.random.default_rng(seed)
    eval_sizes = [eval_factor * n for n in sizes]
    for m in eval_sizes:
        P = rng.uniform(-1.0, 1.0, (m, 2))
        e = np.full(m, interp.eps_fit)
        evaluate.append(_best_of(reps, lambda: interpolation.evaluate_pointwise(interp, P, e),
                                         min_time))
    return BenchmarkResult(sizes, eval_sizes, search, assemble, fit, evaluate,
                           fit_slope=loglog_slope(sizes, fit),
                           search_slope=loglog_slope(sizes, search),
                           eval_slope=loglog_slope(eval_sizes, evaluate))


# --- entry point ---------------------------------------------------------


def _load(args):
    cfg = read_config(args.config)
    return apply_overrides(cfg, args.set)


def _cmd_run(args):
    exp = run_experiment(_load(args))
    s = exp.summary
    print(f"{s.case}: N={s.n} N_d={s.n_data} eps*={s.eps_star:.6g} "
          f"iterations={s.iterations} best={s.best_index} ({s.termination})")
    print(f"|q_e|_2: {s.norm2_qe[0]:.6g} -> {s.norm2_qe[s.best_index]:.6g}; "
          f"min q_y: {s.min_qy[0]:.4f} -> {s.min_qy[s.best_index]:.4f}; "
          f"inverted in best mesh: {s.inverted_count[s.best_index]}")
    print(f"outputs in {exp.out_dir}")


def _cmd_laplace(args):
    cfg = _load(args)
    cmp = compare_laplace(cfg)
    print(f"iterations: {cmp.iterations}")
    for name, rep in (("unsmoothed", cmp.unsmoothed), ("rbf", cmp.rbf), ("laplace", cmp.laplace)):
        print(f"{name:>10}: |q_e|_2={rep.norm2_qe:.6g} min q_e={rep.min_qe:.4f} "
              f"min q_y={rep.min_qy:.4f} inverted={rep.inverted_count}")


def _cmd_bench(args):
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise ConfigError("sizes", f"expected comma-separated integers, got {args.sizes!r}") from None
    b = benchmark_preprocessing(sizes, args.reps, min_time=args.min_time)
    print("N_d,search_s,assemble_s,fit_s,N_eval,evaluate_s")
    for row in zip(b.sizes, b.search, b.assemble, b.fit, b.eval_sizes, b.evaluate):
        print(",".join(str(v) if isinstance(v, int) else f"{v:.6g}" for v in row))
    print(f"slopes: search {b.search_slope:.3f}, fit {b.fit_slope:.3f}, "
          f"evaluate {b.eval_slope:.3f}")


def _cmd_gen_nodes(args):
    cfg = _load(args)
    case = make_case(cfg)
    nodes = case.nodes()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = tessellate(nodes.coords, case.domain.hole_loops(nodes))
    write_mesh(mesh, out / "nodes.vtk", point_data={"role": nodes.role.astype(float)})
    print(f"{case.name}: h={nodes.spacing:.6g} N={len(nodes)} N_i={nodes.n_interior} "
          f"N_b={nodes.n_boundary} N_d={nodes.n_data} -> {out / 'nodes.vtk'}")


def build_parser():
    ap = argparse.ArgumentParser(prog="meshmorph", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("run", _cmd_run, "run one experiment"),
                            ("compare-laplace", _cmd_laplace, "RBF smoothing vs Laplace"),
                            ("gen-nodes", _cmd_gen_nodes, "generate and write a node set")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="override a config key (repeatable)")
        p.set_defaults(func=fn)
    p = sub.add_parser("bench", help="scaling of the preprocessing steps")
    p.add_argument("--sizes", default="100,200,400,800")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--min-time", type=float, default=0.2,
                   help="seconds each repetition loops for (default 0.2)")
    p.set_defaults(func=_cmd_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with thread_limit():
            args.func(args)
    except ConfigError as exc:
        print(f"meshmorph: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"meshmorph: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
