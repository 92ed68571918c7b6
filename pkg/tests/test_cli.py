import json
import os
import subprocess
import sys

import numpy as np
import pytest

from decsr import cli as CLI
from decsr import simplicial as S


def run_cli(args, cwd):
    return CLI.main([str(a) for a in args])


def test_mesh_command(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert CLI.main(["mesh", "--problem", "poisson", "--nodes", "230",
                     "--seed", "7", "-o", "mesh.txt"]) == 0
    K = S.read_mesh(tmp_path / "mesh.txt")
    assert K.num_nodes == 230
    assert S.delaunay_violations(K) == 0
    assert CLI.main(["mesh", "--problem", "elastica", "-o", "rod.txt"]) == 0
    rod = S.read_mesh(tmp_path / "rod.txt")
    assert rod.num == {0: 11, 1: 10}
    assert CLI.main(["mesh", "--problem", "elasticity", "--nodes", "142",
                     "-o", "el.txt"]) == 0
    assert S.read_mesh(tmp_path / "el.txt").num_nodes == 142


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        CLI.main(["mesh"])  # missing --problem
    assert exc.value.code == 1


def test_runtime_error_exit_code(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code = CLI.main(["discover", "--problem", "poisson",
                     "--dataset", "does_not_exist", "--runs", "1"])
    assert code == 2


def test_dataset_poisson(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert CLI.main(["dataset", "--problem", "poisson", "--nodes", "60",
                     "-o", "ds"]) == 0
    meta = json.loads((tmp_path / "ds" / "meta.json").read_text())
    assert meta["problem"] == "poisson"
    assert len(meta["samples"]) == 12


def test_dataset_elasticity_nonhomogeneous(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert CLI.main(["dataset", "--problem", "elasticity", "--nodes", "40",
                     "--mode", "nonhomogeneous", "-o", "ds"]) == 0
    meta = json.loads((tmp_path / "ds" / "meta.json").read_text())
    assert len(meta["samples"]) == 20
    fams = [s["meta"]["family"] for s in meta["samples"]]
    assert fams.count("quadratic") == 10 and fams.count("uniaxial") == 10


@pytest.fixture(scope="module")
def small_poisson_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "pds"
    assert CLI.main(["dataset", "--problem", "poisson", "--nodes", "50",
                     "--seed", "3", "-o", str(out)]) == 0
    return out


def test_discover_smoke(tmp_path, small_poisson_dataset):
    out = tmp_path / "run"
    code = CLI.main(["discover", "--problem", "poisson",
                     "--dataset", str(small_poisson_dataset),
                     "--runs", "1", "--generations", "0", "--mu", "8",
                     "--seed", "5", "-o", str(out)])
    assert code == 0
    assert (out / "config.ini").is_file()
    assert (out / "mesh.txt").is_file()
    assert (out / "summary.json").is_file()
    assert (out / "run_000" / "stats.jsonl").is_file()
    assert (out / "run_000" / "hall_of_fame.txt").is_file()
    assert (out / "run_000" / "recovery.json").is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert "recovery_rate" in summary
    stats = [json.loads(l) for l in
             (out / "run_000" / "stats.jsonl").read_text().splitlines()]
    assert list(stats[0]) == ["gen", "best_fitness", "mean_abs_fitness",
                              "std_abs_fitness", "best_length", "evals",
                              "wall_ms"]


def test_discover_seeded(tmp_path, small_poisson_dataset):
    first = tmp_path / "first"
    assert CLI.main(["discover", "--problem", "poisson",
                     "--dataset", str(small_poisson_dataset),
                     "--runs", "1", "--generations", "0", "--mu", "6",
                     "--seed", "2", "-o", str(first)]) == 0
    second = tmp_path / "second"
    code = CLI.main(["discover", "--problem", "poisson",
                     "--dataset", str(small_poisson_dataset),
                     "--runs", "1", "--generations", "1", "--mu", "6",
                     "--seed", "2", "--seed-halloffame", str(first),
                     "-o", str(second)])
    assert code == 0
    # the seeded champion must appear verbatim in the new hall of fame
    hof_first = (first / "run_000" / "hall_of_fame.txt").read_text()
    best_first = hof_first.splitlines()[0].split(";")[0].strip()
    hof_second = (second / "run_000" / "hall_of_fame.txt").read_text()
    assert best_first in hof_second


def test_gridsearch_smoke(tmp_path, small_poisson_dataset):
    out = tmp_path / "grid"
    code = CLI.main(["gridsearch", "--problem", "poisson",
                     "--dataset", str(small_poisson_dataset),
                     "--cells", "1", "--runs", "1", "--generations", "0",
                     "--mu-scale", "0.004", "-o", str(out), "--seed", "1"])
    assert code == 0
    lines = (out / "gridsearch.csv").read_text().splitlines()
    assert len(lines) == 2  # header + one cell
    assert lines[0].startswith("cell,")


def test_grid_has_32_cells():
    assert len(CLI.grid_cells("poisson")) == 32
    assert len(CLI.grid_cells("elastica")) == 32
    assert len(CLI.grid_cells("elasticity")) == 32


def test_evaluate_ground_truth(tmp_path, small_poisson_dataset):
    from decsr.problems.poisson import GROUND_TRUTH
    hof = tmp_path / "hof.txt"
    hof.write_text(GROUND_TRUTH + "\n")
    out = tmp_path / "eval"
    code = CLI.main(["evaluate", "--problem", "poisson",
                     "--dataset", str(small_poisson_dataset),
                     "--hall-of-fame", str(hof), "-o", str(out), "--plots"])
    assert code == 0
    rows = (out / "evaluation.csv").read_text().splitlines()
    assert len(rows) == 2
    header = rows[0].split(",")
    vals = dict(zip(header, rows[1].split(",")))
    assert float(vals["test_mse"]) <= 1e-9
    assert vals["recovered"] == "True"


def test_evaluate_empty_hof(tmp_path, small_poisson_dataset):
    hof = tmp_path / "empty.txt"
    hof.write_text("\n")
    code = CLI.main(["evaluate", "--problem", "poisson",
                     "--dataset", str(small_poisson_dataset),
                     "--hall-of-fame", str(hof), "-o", str(tmp_path / "e")])
    assert code == 0


def test_config_roundtrip(tmp_path):
    cfg = CLI.RunConfig(problem="elastica", runs=3, seed=11, workers=2,
                        generations=42)
    cfg.gp = {"mu": 123, "eta": 0.05,
              "mixed_mutation_probs": (0.7, 0.2, 0.1)}
    cfg.lbfgs = {"gtol": 1e-7, "max_iter": 99}
    path = tmp_path / "c.ini"
    CLI.write_config(cfg, path)
    back = CLI.read_config(path)
    assert back.problem == "elastica"
    assert back.runs == 3 and back.seed == 11 and back.workers == 2
    assert back.gp["mu"] == 123
    assert back.gp["mixed_mutation_probs"] == (0.7, 0.2, 0.1)
    assert back.lbfgs["max_iter"] == 99
    gp = back.gp_config(seed=0)
    assert gp.mu == 123 and gp.eta == 0.05
    assert back.solver_options().max_iter == 99


def test_workers_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DECSR_WORKERS", "5")
    import argparse
    args = argparse.Namespace(config="", seed=None, workers=None, out=None)
    cfg = CLI._load_cfg(args)
    assert cfg.workers == 5


def test_entrypoint_subprocess(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "decsr.cli", "mesh", "--problem", "elastica",
         "-o", str(tmp_path / "m.txt")],
        capture_output=True, text=True)
    assert out.returncode == 0
    assert (tmp_path / "m.txt").is_file()


def test_svg_outputs(tmp_path):
    stats = [[{"gen": 0, "best_fitness": -3.0}, {"gen": 1, "best_fitness": -1.0}],
             [{"gen": 0, "best_fitness": -4.0}, {"gen": 1, "best_fitness": -2.0}]]
    CLI.svg_fitness_curve(stats, tmp_path / "fit.svg")
    text = (tmp_path / "fit.svg").read_text()
    assert text.startswith("<svg") and "polyline" in text
    curve = np.column_stack([np.linspace(0, 1, 5), np.zeros(5)])
    CLI.svg_rod_overlay([curve], [curve + 0.01], tmp_path / "rod.svg")
    assert "<circle" in (tmp_path / "rod.svg").read_text()
    K = S.unit_square_mesh(9, seed=1)
    CLI.svg_mesh_snapshot(K, [K.node_coords * 1.02], tmp_path / "mesh.svg")
    assert "polygon" in (tmp_path / "mesh.svg").read_text()
