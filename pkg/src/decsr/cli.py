"""Command-line orchestration: mesh/dataset generation, discovery runs,
hyperparameter grid search, evaluation reports, and run persistence.

Commands: mesh, dataset, discover, gridsearch, evaluate.  Exit codes:
0 success, 1 usage error, 2 runtime failure.  Every run directory gets a
config snapshot, seeds, and stats sufficient to reproduce it exactly.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from . import evolve as EV
from . import minimize as M
from . import simplicial as S
from . import symexpr as X
from .problems import base as PB
from .problems.elastica import elastica_dataset
from .problems.elasticity import elasticity_dataset
from .problems.poisson import poisson_dataset

PROBLEM_MESH_DEFAULTS = {"poisson": 230, "elastica": 11, "elasticity": 142,
                         "elasticity_untyped": 142}

TABLE_DEFAULTS = {
    "poisson": dict(mu=2000, crossover_prob=0.2, mutation_prob=0.8,
                    mixed_mutation_probs=(0.8, 0.2, 0.0),
                    tournament_probs=(0.7, 0.3), alpha=1.0, eta=0.1),
    "elastica": dict(mu=2000, crossover_prob=0.0, mutation_prob=1.0,
                     mixed_mutation_probs=(0.8, 0.2, 0.0),
                     tournament_probs=(1.0, 0.0), alpha=10.0, eta=0.01),
    "elasticity": dict(mu=2000, crossover_prob=0.2, mutation_prob=0.8,
                       mixed_mutation_probs=(0.7, 0.2, 0.1),
                       tournament_probs=(0.7, 0.3), alpha=1000.0, eta=0.0),
}
TABLE_DEFAULTS["elasticity_untyped"] = TABLE_DEFAULTS["elasticity"]


@dataclass
class RunConfig:
    """Complete, serializable description of a discovery campaign."""
    problem: str = "poisson"
    dataset_path: str = ""
    out: str = "out"
    runs: int = 1
    seed: int = 0
    workers: int = 1
    generations: int = 100
    gp: dict = field(default_factory=dict)          # GpConfig overrides
    lbfgs: dict = field(default_factory=dict)       # SolverOptions overrides
    bc: dict = field(default_factory=dict)
    bilevel: dict = field(default_factory=dict)
    dataset_params: dict = field(default_factory=dict)

    def gp_config(self, seed: int) -> EV.GpConfig:
        base = dict(TABLE_DEFAULTS[self.problem])
        base.update(self.gp)
        base["generations"] = int(base.get("generations", self.generations))
        base["seed"] = seed
        base["workers"] = self.workers
        return EV.GpConfig(**base)

    def solver_options(self) -> M.SolverOptions:
        base = dict(gtol=1e-6, max_iter=150, history=10, maxls=20,
                    maxfun_mult=3.0, bilevel_tol=1e-3, bilevel_coarse=9,
                    bilevel_inner_max_iter=80, bilevel_refine_skip=100.0)
        base.update(self.lbfgs)
        base.update({f"bilevel_{k}": v for k, v in self.bilevel.items()})
        checks = base.pop("progress_checks", ((35, 0.05), (75, 0.02)))
        return M.SolverOptions(
            history=int(base["history"]), gtol=float(base["gtol"]),
            max_iter=int(base["max_iter"]), maxls=int(base["maxls"]),
            maxfun_mult=float(base["maxfun_mult"]),
            progress_checks=tuple(checks),
            bilevel_tol=float(base["bilevel_tol"]),
            bilevel_coarse=int(base["bilevel_coarse"]),
            bilevel_inner_max_iter=int(base["bilevel_inner_max_iter"]),
            bilevel_refine_skip=float(base["bilevel_refine_skip"]))


def _parse_value(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(","))
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def write_config(cfg: RunConfig, path: str) -> None:
    cp = configparser.ConfigParser()
    cp["run"] = {k: str(getattr(cfg, k)) for k in
                 ("problem", "dataset_path", "out", "runs", "seed",
                  "workers", "generations")}
    for section in ("gp", "lbfgs", "bc", "bilevel", "dataset_params"):
        data = getattr(cfg, section)
        cp[section] = {k: (",".join(map(str, v)) if isinstance(v, tuple)
                           else str(v)) for k, v in data.items()}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def read_config(path: str) -> RunConfig:
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    cfg = RunConfig()
    if cp.has_section("run"):
        for key, val in cp["run"].items():
            setattr(cfg, key, _parse_value(val) if key not in
                    ("problem", "dataset_path", "out") else val)
    for section in ("gp", "lbfgs", "bc", "bilevel", "dataset_params"):
        if cp.has_section(section):
            setattr(cfg, section,
                    {k: _parse_value(v) for k, v in cp[section].items()})
    return cfg


# -- problem construction -------------------------------------------------------


def build_problem(problem: str, mesh=None, dataset_path: str = "",
                  params: dict | None = None):
    params = dict(params or {})
    if dataset_path:
        return load_problem(dataset_path)
    if mesh is None:
        mesh = default_mesh(problem, seed=int(params.pop("mesh_seed", 7)),
                            nodes=params.pop("nodes", None))
    if problem == "poisson":
        return poisson_dataset(mesh, split_seed=int(params.get("split_seed", 0)))
    if problem == "elastica":
        return elastica_dataset(
            mesh, B=float(params.get("b", params.get("B", 7.854))),
            noise_seed=int(params.get("noise_seed", 0)),
            noise=params.get("noise"),
            split_seed=int(params.get("split_seed", 0)))
    if problem in ("elasticity", "elasticity_untyped"):
        return elasticity_dataset(
            mesh, lam_over_mu=float(params.get("lambda_over_mu", 10.0)),
            mode=str(params.get("mode", "homogeneous")),
            split_seed=int(params.get("split_seed", 0)),
            untyped=problem == "elasticity_untyped")
    raise KeyError(f"unknown problem {problem!r}")


def default_mesh(problem: str, seed: int = 7, nodes=None):
    n = int(nodes or PROBLEM_MESH_DEFAULTS[problem])
    if problem == "elastica":
        return S.interval_mesh(n)
    return S.unit_square_mesh(n, seed=seed)


def save_problem(problem, directory: str) -> None:
    PB.save_dataset(problem, directory)


def load_problem(directory: str):
    mesh, meta, samples, split = PB.load_archive(directory)
    pid = meta["problem"]
    params = meta.get("params", {})
    if pid == "poisson":
        from .problems.poisson import PoissonProblem
        return PoissonProblem(mesh, split, params.get("split_seed", 0))
    if pid == "elastica":
        from .problems.elastica import ElasticaProblem
        return ElasticaProblem(mesh, split, B=params.get("B", 7.854),
                               noise_seed=params.get("noise_seed", 0))
    from .problems.elasticity import (ElasticityProblem,
                                      ElasticityUntypedProblem)
    if pid == "elasticity_untyped":
        return ElasticityUntypedProblem(
            mesh, split, params.get("lambda_over_mu", 10.0),
            split_seed=params.get("split_seed", 0))
    return ElasticityProblem(mesh, split, params.get("mode", "homogeneous"),
                             params.get("lambda_over_mu", 10.0),
                             split_seed=params.get("split_seed", 0))


# -- run artifacts ----------------------------------------------------------------


def hall_of_fame_lines(hof) -> list[str]:
    lines = []
    for ind in hof:
        params = " ".join(f"{k}={v:.17g}" for k, v in
                          sorted(ind.fitted_params.items()))
        note = (f"fitness={ind.fitness:.17g} mse={ind.mse:.17g} "
                f"length={ind.length}")
        if params:
            note += " " + params
        lines.append(f"{ind.key()}  ; {note}")
    return lines


def write_hall_of_fame(hof, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(hall_of_fame_lines(hof)) + "\n")


def read_hall_of_fame(path: str, registry):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            text = line.split(";")[0].strip()
            if text:
                out.append(X.parse(text, registry))
    return out


def execute_discovery(cfg: RunConfig, problem, seed_exprs=None,
                      log=print) -> dict:
    """Run `cfg.runs` independent evolutions; write all artifacts."""
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, os.path.join(cfg.out, "config.ini"))
    S.write_mesh(problem.mesh, os.path.join(cfg.out, "mesh.txt"))
    opts = cfg.solver_options()
    summary = {"problem": cfg.problem, "version": __version__,
               "runs": [], "seed": cfg.seed}
    failures = 0
    for run_idx in range(cfg.runs):
        run_dir = os.path.join(cfg.out, f"run_{run_idx:03d}")
        os.makedirs(run_dir, exist_ok=True)
        seed = EV.derived_seed(cfg.seed, run_idx)
        gp = cfg.gp_config(seed)
        t0 = time.time()
        try:
            hof, stats, checks = EV.run(gp, problem, seed_exprs=seed_exprs,
                                        solver_opts=opts)
        except Exception as exc:  # a crashed run is recorded, not fatal
            failures += 1
            summary["runs"].append({"run": run_idx, "error": str(exc)})
            log(f"run {run_idx}: FAILED ({exc})")
            continue
        with open(os.path.join(run_dir, "stats.jsonl"), "w",
                  encoding="utf-8") as fh:
            for s in stats:
                fh.write(json.dumps(s.as_dict()) + "\n")
        write_hall_of_fame(hof, os.path.join(run_dir, "hall_of_fame.txt"))
        best = hof[0]
        recovered = PB.run_recovered(hof, problem, probe_seed=cfg.seed + 7919)

        test_rec = M.evaluate_candidate_full(best.expr, problem.dataset.test,
                                             problem, opts)
        run_rec = {
            "run": run_idx, "seed": seed, "recovered": recovered,
            "best": best.key(), "best_fitness": best.fitness,
            "best_length": best.length, "train_mse": best.mse,
            "test_mse": test_rec.mse, "fitted_params": best.fitted_params,
            "checks": checks, "wall_s": time.time() - t0,
            "monotone": all(a.best_fitness <= b.best_fitness + 1e-12
                            for a, b in zip(stats, stats[1:])),
        }
        with open(os.path.join(run_dir, "recovery.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(run_rec, fh, indent=1, sort_keys=True)
        summary["runs"].append(run_rec)
        log(f"run {run_idx}: fitness={best.fitness:.4g} "
            f"len={best.length} recovered={recovered} "
            f"({run_rec['wall_s']:.0f}s)")
    done = [r for r in summary["runs"] if "error" not in r]
    summary["recovery_rate"] = (sum(r["recovered"] for r in done) /
                                len(done)) if done else 0.0
    summary["best_test_mse"] = min((r["test_mse"] for r in done),
                                   default=float("nan"))
    summary["failed_runs"] = failures
    with open(os.path.join(cfg.out, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    if failures == cfg.runs:
        raise RuntimeError("all runs failed")
    return summary


# -- svg plotting -----------------------------------------------------------------


def _svg_header(w, h):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
            f'height="{h}" viewBox="0 0 {w} {h}">'
            f'<rect width="{w}" height="{h}" fill="white"/>')


def svg_fitness_curve(stat_rows, path, width=640, height=400):
    """Mean +- std band of |best fitness| per generation, over runs."""
    gens = sorted({r["gen"] for rows in stat_rows for r in rows})
    series = []
    for g in gens:
        vals = [abs(r["best_fitness"]) for rows in stat_rows
                for r in rows if r["gen"] == g]
        series.append((g, float(np.mean(vals)), float(np.std(vals))))
    lo = min(max(m - s, 1e-12) for _, m, s in series)
    hi = max(m + s for _, m, s in series)
    import math
    llo, lhi = math.log10(lo), math.log10(max(hi, lo * 10))

    def xy(g, v):
        xpix = 60 + (width - 80) * (g - gens[0]) / max(1, gens[-1] - gens[0])
        val = math.log10(max(v, 1e-12))
        ypix = height - 40 - (height - 80) * (val - llo) / max(lhi - llo, 1e-9)
        return f"{xpix:.1f},{ypix:.1f}"

    band = [xy(g, m + s) for g, m, s in series] + \
           [xy(g, max(m - s, 1e-12)) for g, m, s in reversed(series)]
    mean_line = " ".join(xy(g, m) for g, m, _ in series)
    parts = [_svg_header(width, height),
             f'<polygon points="{" ".join(band)}" fill="#aac8e8" '
             f'fill-opacity="0.5" stroke="none"/>',
             f'<polyline points="{mean_line}" fill="none" stroke="#1f4e8c" '
             f'stroke-width="2"/>',
             f'<text x="{width/2:.0f}" y="{height-8}" font-size="13" '
             f'text-anchor="middle">generation</text>',
             '<text x="16" y="20" font-size="13">|best fitness| '
             '(log scale, mean&#177;std)</text>', "</svg>"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))


def svg_rod_overlay(curves, dots, path, width=640, height=420):
    """Deformed rod polylines (solutions) and measurement dots (data)."""
    all_pts = np.vstack([np.asarray(c) for c in curves + dots])
    lo, hi = all_pts.min(0) - 0.08, all_pts.max(0) + 0.08
    span = np.maximum(hi - lo, 1e-9)

    def xy(p):
        xpix = 50 + (width - 70) * (p[0] - lo[0]) / span[0]
        ypix = height - 40 - (height - 70) * (p[1] - lo[1]) / span[1]
        return f"{xpix:.1f},{ypix:.1f}"

    parts = [_svg_header(width, height)]
    for c in curves:
        pts = " ".join(xy(p) for p in np.asarray(c))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="#1f4e8c" stroke-width="2"/>')
    for d in dots:
        for p in np.asarray(d):
            parts.append(f'<circle cx="{xy(p).split(",")[0]}" '
                         f'cy="{xy(p).split(",")[1]}" r="3.5" '
                         f'fill="#c0392b"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))


def svg_mesh_snapshot(mesh, positions_list, path, width=520, height=520,
                      scale=5.0):
    """Deformed mesh polygons (displacements magnified for visibility)."""
    ref = mesh.node_coords
    parts = [_svg_header(width, height)]
    colors = ["#e67e22", "#1f4e8c", "#27ae60"]
    for k, pos in enumerate([ref] + list(positions_list)):
        if k > 0:
            pos = ref + scale * (np.asarray(pos) - ref)

        def xy(p):
            return (40 + (width - 80) * (p[0] + 0.15) / 1.5,
                    height - 40 - (height - 80) * (p[1] + 0.15) / 1.5)

        for tri in mesh.simplices[2]:
            pts = " ".join(f"{xy(pos[v])[0]:.1f},{xy(pos[v])[1]:.1f}"
                           for v in tri)
            parts.append(f'<polygon points="{pts}" fill="none" '
                         f'stroke="{colors[k % 3]}" stroke-width="0.6"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))


# -- commands ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _add_common(p):
    p.add_argument("--config", default="", help="INI config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", "-o", default=None)


def make_parser() -> _Parser:
    parser = _Parser(prog="decsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate a benchmark mesh file")
    p.add_argument("--problem", required=True, choices=PROBLEM_MESH_DEFAULTS)
    p.add_argument("--nodes", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("dataset", help="generate a dataset archive")
    p.add_argument("--problem", required=True, choices=PROBLEM_MESH_DEFAULTS)
    p.add_argument("--mesh", default="", help="mesh file (default: generate)")
    p.add_argument("--nodes", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--B", type=float, default=7.854)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--mode", default="homogeneous",
                   choices=("homogeneous", "nonhomogeneous"))
    _add_common(p)

    p = sub.add_parser("discover", help="run model discovery")
    p.add_argument("--problem", required=True, choices=PROBLEM_MESH_DEFAULTS)
    p.add_argument("--dataset", default="", help="dataset archive directory")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--mu", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--seed-halloffame", default="",
                   help="prior run directory whose champions seed the runs")
    _add_common(p)

    p = sub.add_parser("gridsearch", help="hyperparameter grid search")
    p.add_argument("--problem", required=True, choices=PROBLEM_MESH_DEFAULTS)
    p.add_argument("--dataset", default="")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--cells", type=int, default=None,
                   help="limit to the first N grid cells")
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--mu-scale", type=float, default=1.0)
    _add_common(p)

    p = sub.add_parser("evaluate", help="evaluate a hall-of-fame file")
    p.add_argument("--problem", required=True, choices=PROBLEM_MESH_DEFAULTS)
    p.add_argument("--dataset", default="")
    p.add_argument("--hall-of-fame", required=True)
    p.add_argument("--plots", action="store_true")
    _add_common(p)
    return parser


def _load_cfg(args, problem=None) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    if problem:
        cfg.problem = problem
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    env_workers = os.environ.get("DECSR_WORKERS")
    if env_workers:
        cfg.workers = int(env_workers)
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def cmd_mesh(args) -> int:
    cfg = _load_cfg(args, args.problem)
    mesh = default_mesh(args.problem, seed=cfg.seed or 7, nodes=args.nodes)
    out = cfg.out if cfg.out != "out" else "mesh.txt"
    S.write_mesh(mesh, out)
    print(f"wrote {out}: dim {mesh.dim}, {mesh.num_nodes} nodes, "
          f"{mesh.num[mesh.dim]} cells")
    return 0


def cmd_dataset(args) -> int:
    cfg = _load_cfg(args, args.problem)
    mesh = (S.read_mesh(args.mesh) if args.mesh
            else default_mesh(args.problem, seed=cfg.seed or 7,
                              nodes=args.nodes))
    params = {"split_seed": args.split_seed, "noise_seed": args.noise_seed,
              "B": args.B, "noise": args.noise, "mode": args.mode}
    problem = build_problem(args.problem, mesh=mesh, params=params)
    out = cfg.out if cfg.out != "out" else f"{args.problem}_dataset"
    save_problem(problem, out)
    print(f"wrote {out}: {len(problem.dataset.all)} samples "
          f"({len(problem.dataset.train)}/{len(problem.dataset.validation)}/"
          f"{len(problem.dataset.test)})")
    return 0


def cmd_discover(args) -> int:
    cfg = _load_cfg(args, args.problem)
    if args.dataset:
        cfg.dataset_path = args.dataset
    if args.runs is not None:
        cfg.runs = args.runs
    if args.generations is not None:
        cfg.generations = args.generations
        cfg.gp["generations"] = args.generations
    if args.mu is not None:
        cfg.gp["mu"] = args.mu
    if args.eta is not None:
        cfg.gp["eta"] = args.eta
    problem = build_problem(cfg.problem, dataset_path=cfg.dataset_path,
                            params=cfg.dataset_params)
    seed_exprs = None
    if args.seed_halloffame:
        seed_exprs = []
        root = args.seed_halloffame
        for sub_dir in sorted(os.listdir(root)):
            hof_path = os.path.join(root, sub_dir, "hall_of_fame.txt")
            if os.path.isfile(hof_path):
                seed_exprs.extend(read_hall_of_fame(hof_path,
                                                    problem.registry))
        if not seed_exprs:
            print("no hall-of-fame files found to seed from", file=sys.stderr)
            return 2
    summary = execute_discovery(cfg, problem, seed_exprs=seed_exprs)
    print(f"recovery_rate={summary['recovery_rate']:.2f} "
          f"best_test_mse={summary['best_test_mse']:.3g}")
    return 0


GRID_AXES = {
    "mu": (1000, 2000),
    "cx_mut": ((0.0, 1.0), (0.2, 0.8)),
    "mixed": ((0.7, 0.2, 0.1), (0.8, 0.2, 0.0)),
    "tournament": ((1.0, 0.0), (0.7, 0.3)),
}
GRID_ETA = {"poisson": (0.1, 0.0), "elastica": (0.05, 0.01),
            "elasticity": (0.01, 0.0), "elasticity_untyped": (0.01, 0.0)}


def grid_cells(problem: str):
    cells = []
    for mu in GRID_AXES["mu"]:
        for cx, mut in GRID_AXES["cx_mut"]:
            for mixed in GRID_AXES["mixed"]:
                for tour in GRID_AXES["tournament"]:
                    for eta in GRID_ETA[problem]:
                        cells.append(dict(mu=mu, crossover_prob=cx,
                                          mutation_prob=mut,
                                          mixed_mutation_probs=mixed,
                                          tournament_probs=tour, eta=eta))
    return cells


def cmd_gridsearch(args) -> int:
    cfg = _load_cfg(args, args.problem)
    if args.dataset:
        cfg.dataset_path = args.dataset
    problem = build_problem(cfg.problem, dataset_path=cfg.dataset_path,
                            params=cfg.dataset_params)
    cells = grid_cells(cfg.problem)
    if args.cells is not None:
        cells = cells[:args.cells]
    os.makedirs(cfg.out, exist_ok=True)
    opts = cfg.solver_options()
    rows = []
    for idx, cell in enumerate(cells):
        val_mses, recoveries = [], []
        for r in range(args.runs):
            gp_kw = dict(cell)
            gp_kw["mu"] = max(2, int(gp_kw["mu"] * args.mu_scale))
            gp_kw["alpha"] = TABLE_DEFAULTS[cfg.problem]["alpha"]
            gp_kw["generations"] = (args.generations
                                    or cfg.generations)
            gp_kw["seed"] = EV.derived_seed(cfg.seed, 1000 * idx + r)
            gp_kw["workers"] = cfg.workers
            gp = EV.GpConfig(**gp_kw)
            hof, _, _ = EV.run(gp, problem, samples=problem.dataset.train,
                               solver_opts=opts)
            best = hof[0]
            rec = M.evaluate_candidate_full(
                best.expr, problem.dataset.validation, problem, opts)
            val_mses.append(rec.mse)
            recoveries.append(bool(best.valid and PB.recovery_check(
                best.expr, problem, probe_seed=cfg.seed + idx)))
        rows.append(dict(cell=idx, mu=cell["mu"],
                         crossover=cell["crossover_prob"],
                         mutation=cell["mutation_prob"],
                         mixed="/".join(map(str, cell["mixed_mutation_probs"])),
                         tournament="/".join(map(str, cell["tournament_probs"])),
                         eta=cell["eta"],
                         val_mse_mean=float(np.mean(val_mses)),
                         val_mse_std=float(np.std(val_mses)),
                         recovery_rate=float(np.mean(recoveries))))
        print(f"cell {idx}: val_mse={rows[-1]['val_mse_mean']:.3g}"
              f"+-{rows[-1]['val_mse_std']:.2g} "
              f"recovery={rows[-1]['recovery_rate']:.2f}")
    report = os.path.join(cfg.out, "gridsearch.csv")
    with open(report, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    if cfg.problem == "elastica":
        best = min(rows, key=lambda r: r["val_mse_mean"])
        rule = "lowest validation MSE"
    else:
        best = max(rows, key=lambda r: r["recovery_rate"])
        rule = "highest recovery rate"
    print(f"best cell by {rule}: {best['cell']}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args, args.problem)
    if args.dataset:
        cfg.dataset_path = args.dataset
    problem = build_problem(cfg.problem, dataset_path=cfg.dataset_path,
                            params=cfg.dataset_params)
    opts = M.SolverOptions()
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    with open(args.hall_of_fame, encoding="utf-8") as fh:
        lines = [ln.split(";")[0].strip() for ln in fh if ln.strip()]
    for i, text in enumerate(lines):
        try:
            expr = X.parse(text, problem.registry)
        except (X.ExprError, Exception) as exc:
            rows.append(dict(rank=i, expression=text, error=str(exc)))
            print(f"#{i}: parse failure: {exc}")
            continue
        train = M.evaluate_candidate_full(expr, problem.dataset.discovery,
                                          problem, opts)
        test = M.evaluate_candidate_full(expr, problem.dataset.test,
                                         problem, opts)
        gp = TABLE_DEFAULTS[cfg.problem]
        train_fit = -(gp["alpha"] * train.mse + gp["eta"] * expr.length) \
            - train.extra_penalty
        test_fit = -(gp["alpha"] * test.mse + gp["eta"] * expr.length) \
            - test.extra_penalty
        recovered = bool(train.valid and PB.recovery_check(
            expr, problem, probe_seed=cfg.seed + 31))
        row = dict(rank=i, expression=text, length=expr.length,
                   train_fitness=train_fit, test_fitness=test_fit,
                   train_mse=train.mse, test_mse=test.mse,
                   recovered=recovered)
        for k, v in sorted(train.fitted_params.items()):
            row[f"param_{k}"] = v
        rows.append(row)
        print(f"#{i}: len={expr.length} train_mse={train.mse:.3g} "
              f"test_mse={test.mse:.3g} recovered={recovered}")
    report = os.path.join(out_dir, "evaluation.csv")
    keys = sorted({k for r in rows for k in r},
                  key=lambda k: (k != "rank", k))
    with open(report, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    if args.plots:
        _emit_plots(problem, rows, out_dir, opts)
    print(f"wrote {report}")
    return 0


def _emit_plots(problem, rows, out_dir, opts):
    ok = [r for r in rows if "error" not in r and np.isfinite(r["test_mse"])
          and r["test_mse"] < M.SENTINEL_MSE]
    if not ok:
        return
    best = min(ok, key=lambda r: r["test_mse"])
    expr = X.parse(best["expression"], problem.registry)
    params = problem.fit(expr, opts) if problem.id == "elastica" else {}
    samples = problem.dataset.test
    fg, x0, size, bc = problem.make_objective(expr, samples, params)
    x, _, conv, _, _ = M.minimize_objective(fg, x0, size, bc, opts)
    sols = x.reshape(len(samples), -1)
    if problem.id == "elastica":
        curves, dots = [], []
        h = 1.0 / problem.mesh.num[1]
        for sol, s in zip(sols, samples):
            pts = np.zeros((len(sol) + 1, 2))
            pts[1:, 0] = np.cumsum(h * np.cos(sol))
            pts[1:, 1] = np.cumsum(h * np.sin(sol))
            curves.append(pts)
            d = np.zeros((len(sol) + 1, 2))
            ang = s.unknown_data.coeffs
            d[1:, 0] = np.cumsum(h * np.cos(ang))
            d[1:, 1] = np.cumsum(h * np.sin(ang))
            dots.append(d)
        svg_rod_overlay(curves, dots, os.path.join(out_dir, "overlay.svg"))
    elif problem.id.startswith("elasticity"):
        svg_mesh_snapshot(problem.mesh,
                          [sols[0].reshape(-1, 2)],
                          os.path.join(out_dir, "overlay.svg"))


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    handlers = {"mesh": cmd_mesh, "dataset": cmd_dataset,
                "discover": cmd_discover, "gridsearch": cmd_gridsearch,
                "evaluate": cmd_evaluate}
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, KeyError, ValueError, RuntimeError,
            S.MeshError, X.ExprError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
