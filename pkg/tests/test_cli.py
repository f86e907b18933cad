"""Configuration parsing, artifact persistence and command exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from regimelq.cli import main, read_solution_csv, run_command, write_solution_csv
from regimelq.config import parse_config
from regimelq.errors import ParseError, RangeError, UnknownKey
from regimelq.esre import SolverOptions, solve_esre
from regimelq.model import CoefficientField

E1_YAML = """\
problem:
  n: 1
  m: 1
  ell: 2
  T: 1.0
  delta: 0.5
  generator: [[-1.0, 1.0], [1.0, -1.0]]
  x0: [1.0]
  i0: 1
  A: [[0.0]]
  B: [[1.0]]
  C: [[0.0]]
  D: [[0.0]]
  Q: [[0.0]]
  S: [[0.0]]
  R: [[1.0]]
  G: [[1.0]]
"""

SMALL_RUN = E1_YAML + """\
solver: {backend: ode, grid_steps: 200}
simulate:
  n_paths: 400
  dt: 0.01
  seed: 5
  perturbations: [{constant: [0.5]}]
output: {solution_path: s.csv, report_path: r.txt, estimates_path: c.csv}
"""

# coarse-step noisy run: Euler bias makes the value check fail decisively
BIASED_RUN = """\
problem:
  n: 1
  m: 1
  ell: 2
  T: 1.0
  delta: 0.5
  generator: [[-1.0, 1.0], [1.0, -1.0]]
  x0: [1.0]
  i0: 1
  A: [[0.0]]
  B: [[1.0]]
  C: [[0.9]]
  D: [[0.0]]
  Q: [[1.0]]
  S: [[0.0]]
  R: [[1.0]]
  G: [[1.0]]
solver: {backend: ode, grid_steps: 200}
simulate: {n_paths: 4000, dt: 0.25, seed: 12345}
output: {solution_path: s.csv, report_path: r.txt}
"""


def write_cfg(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestParseConfig:
    def test_minimal_gets_defaults(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, E1_YAML))
        assert cfg.solver.grid_steps == 2000
        assert cfg.solver.picard_tol == 1e-9
        assert cfg.solver.backend == "ode"
        assert cfg.simulate.n_paths == 10000
        assert cfg.output.solution_path == "solution.csv"
        assert cfg.problem.ell == 2

    def test_single_regime_rejected(self, tmp_path):
        text = E1_YAML.replace("ell: 2", "ell: 1").replace(
            "generator: [[-1.0, 1.0], [1.0, -1.0]]", "generator: [[0.0]]")
        with pytest.raises(RangeError):
            parse_config(write_cfg(tmp_path, text))

    def test_misspelled_key_rejected(self, tmp_path):
        text = E1_YAML.replace("generator:", "genrator:")
        with pytest.raises(UnknownKey):
            parse_config(write_cfg(tmp_path, text))

    def test_unknown_top_level_section(self, tmp_path):
        with pytest.raises(UnknownKey):
            parse_config(write_cfg(tmp_path, E1_YAML + "extras: {}\n"))

    def test_missing_required_key(self, tmp_path):
        text = E1_YAML.replace("  R: [[1.0]]\n", "")
        with pytest.raises(ParseError):
            parse_config(write_cfg(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            parse_config(tmp_path / "nope.yaml")

    def test_invalid_yaml(self, tmp_path):
        with pytest.raises(ParseError):
            parse_config(write_cfg(tmp_path, "problem: [unclosed"))

    @pytest.mark.parametrize("patch, err", [
        ("simulate: {n_paths: 1}", RangeError),
        ("simulate: {dt: -0.5}", RangeError),
        ("simulate: {i0: 7}", RangeError),
        ("solver: {backend: magic}", RangeError),
        ("solver: {grid_steps: 0}", RangeError),
    ])
    def test_out_of_range_values(self, tmp_path, patch, err):
        with pytest.raises(err):
            parse_config(write_cfg(tmp_path, E1_YAML + patch + "\n"))

    def test_time_table_coefficient(self, tmp_path):
        text = E1_YAML.replace(
            "  Q: [[0.0]]",
            "  Q: {time_table: {0.0: [[1.0]], 0.5: [[2.0]]}}")
        cfg = parse_config(write_cfg(tmp_path, text))
        assert cfg.problem.Q.eval(0.49, 1)[0, 0] == 1.0
        assert cfg.problem.Q.eval(0.5, 1)[0, 0] == 2.0

    def test_tree_table_coefficient(self, tmp_path):
        text = E1_YAML.replace(
            "  Q: [[0.0]]",
            '  Q: {tree_table: {"0,0": [[1.0]], "1,0": [[0.5]], "1,1": [[1.5]]}}')
        text = text + "solver: {backend: tree, tree_depth: 1}\n"
        cfg = parse_config(write_cfg(tmp_path, text))
        ref = CoefficientField.from_tree(
            [np.full((1, 2, 1, 1), 1.0),
             np.array([[[[0.5]], [[0.5]]], [[[1.5]], [[1.5]]]])])
        for node in ((0, 0), (1, 0), (1, 1)):
            got = cfg.problem.Q.eval(node[0], 1, node=node)
            assert np.array_equal(got, ref.eval(node[0], 1, node=node))

    def test_incomplete_tree_table(self, tmp_path):
        text = E1_YAML.replace(
            "  Q: [[0.0]]",
            '  Q: {tree_table: {"0,0": [[1.0]], "1,1": [[1.5]]}}')
        with pytest.raises(ParseError):
            parse_config(write_cfg(tmp_path, text))

    def test_perturbation_forms(self, tmp_path):
        text = E1_YAML + (
            "simulate:\n"
            "  perturbations:\n"
            "    - constant: [0.25]\n"
            "    - table: {times: [0.0, 0.5], values: [[0.1], [0.2]]}\n"
        )
        cfg = parse_config(write_cfg(tmp_path, text))
        assert len(cfg.simulate.perturbations) == 2

    def test_perturbation_wrong_width(self, tmp_path):
        text = E1_YAML + "simulate: {perturbations: [{constant: [0.1, 0.2]}]}\n"
        with pytest.raises(RangeError):
            parse_config(write_cfg(tmp_path, text))


class TestSolutionFiles:
    def test_line_count(self, tmp_path, e1):
        sol = solve_esre(e1, SolverOptions(grid_steps=4))
        out = tmp_path / "sol.csv"
        write_solution_csv(sol, out)
        lines = out.read_text().strip().splitlines()
        # 5 samples x 2 regimes x 1 entry + header
        assert lines[0] == "t,regime,row,col,P,Lambda"
        assert len(lines) == 1 + 10

    def test_round_trip_exact(self, tmp_path, e1):
        sol = solve_esre(e1, SolverOptions(grid_steps=50))
        out = tmp_path / "sol.csv"
        write_solution_csv(sol, out)
        grid, p, lam = read_solution_csv(out)
        assert np.array_equal(grid, sol.grid)
        assert np.array_equal(p, sol.P)
        assert np.array_equal(lam, sol.Lambda)

    def test_rewrite_is_byte_identical(self, tmp_path, e1):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        write_solution_csv(solve_esre(e1, SolverOptions(grid_steps=50)), a)
        write_solution_csv(solve_esre(e1, SolverOptions(grid_steps=50)), b)
        assert a.read_bytes() == b.read_bytes()
        assert (Path(str(a) + ".meta.json").read_bytes()
                == Path(str(b) + ".meta.json").read_bytes())

    def test_metadata_contents(self, tmp_path, e1):
        sol = solve_esre(e1, SolverOptions(grid_steps=50))
        out = tmp_path / "sol.csv"
        write_solution_csv(sol, out)
        meta = json.loads(Path(str(out) + ".meta.json").read_text())
        assert meta["backend"] == "ode"
        assert meta["converged"] is True
        assert meta["tolerances"]["picard_tol"] == 1e-9
        assert len(meta["residual_history"]) == sol.iterations
        assert meta["diagnostics"]["k_estimate"] == 1.0

    def test_configured_tolerances_reach_the_metadata(self, tmp_path):
        # no hidden defaults: what the config says is what the artifact says
        text = SMALL_RUN.replace(
            "solver: {backend: ode, grid_steps: 200}",
            "solver: {backend: ode, grid_steps: 200, picard_tol: 1.0e-7, "
            "psd_tol: 1.0e-8, cond_threshold: 1.0e10}")
        cfg = parse_config(write_cfg(tmp_path, text))
        run_command("solve", cfg, output_dir=tmp_path)
        meta = json.loads((tmp_path / "s.csv.meta.json").read_text())
        assert meta["tolerances"]["picard_tol"] == 1e-7
        assert meta["tolerances"]["psd_tol"] == 1e-8
        assert meta["tolerances"]["cond_threshold"] == 1e10
        assert meta["residual_history"][-1] <= 1e-7


class TestCommands:
    def test_validate_pass(self, tmp_path, capsys):
        cfg = parse_config(write_cfg(tmp_path, SMALL_RUN))
        res = run_command("validate", cfg, output_dir=tmp_path)
        assert res.exit_code == 0
        assert "diffusion size: 0" in capsys.readouterr().out

    def test_validate_fail(self, tmp_path):
        text = SMALL_RUN.replace("R: [[1.0]]", "R: [[0.1]]")
        cfg = parse_config(write_cfg(tmp_path, text))
        assert run_command("validate", cfg, output_dir=tmp_path).exit_code == 1

    def test_solve_writes_artifacts(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, SMALL_RUN))
        res = run_command("solve", cfg, output_dir=tmp_path)
        assert res.exit_code == 0
        grid, p, _ = read_solution_csv(tmp_path / "s.csv")
        assert abs(p[0, 0, 0, 0] - 0.5) <= 1e-6

    def test_solve_nonconvergence_persists_history(self, tmp_path):
        text = SMALL_RUN.replace("solver: {backend: ode, grid_steps: 200}",
                                 "solver: {backend: ode, grid_steps: 200, picard_max_iter: 1}")
        cfg = parse_config(write_cfg(tmp_path, text))
        res = run_command("solve", cfg, output_dir=tmp_path)
        assert res.exit_code == 2
        meta = json.loads((tmp_path / "s.csv.meta.json").read_text())
        assert meta["converged"] is False
        assert len(meta["residual_history"]) == 1

    def test_simulate_writes_estimates(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, SMALL_RUN))
        res = run_command("simulate", cfg, output_dir=tmp_path)
        assert res.exit_code == 0
        rows = (tmp_path / "c.csv").read_text().strip().splitlines()
        assert rows[0] == "policy,mean,std_error,n_paths,dt,seed"
        assert rows[1].startswith("feedback,")
        assert rows[2].startswith("perturbation[0],")

    def test_verify_passes_on_clean_run(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, SMALL_RUN))
        res = run_command("verify", cfg, output_dir=tmp_path)
        assert res.exit_code == 0
        assert "result: PASS" in (tmp_path / "r.txt").read_text()

    def test_verify_detects_biased_simulation(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, BIASED_RUN))
        res = run_command("verify", cfg, output_dir=tmp_path)
        assert res.exit_code == 3
        assert "FAIL" in (tmp_path / "r.txt").read_text()

    def test_report_renders_solution(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, SMALL_RUN))
        run_command("solve", cfg, output_dir=tmp_path)
        res = run_command("report", cfg, output_dir=tmp_path)
        assert res.exit_code == 0
        series = (tmp_path / "r.txt.series.csv").read_text().splitlines()
        assert series[0] == "t,regime,frob_P,min_eig_P,frob_Lambda"
        assert len(series) == 1 + 201 * 2

    def test_tree_backend_solve(self, tmp_path):
        text = E1_YAML + (
            "solver: {backend: tree, tree_depth: 8}\n"
            "output: {solution_path: t.csv, report_path: t.txt}\n"
        )
        cfg = parse_config(write_cfg(tmp_path, text))
        assert run_command("solve", cfg, output_dir=tmp_path).exit_code == 0

    def test_verify_handles_static_problem(self, tmp_path):
        # zero dynamics: every residual sits at roundoff and all checks
        # must still come out as passes
        text = (
            "problem:\n"
            "  n: 1\n  m: 1\n  ell: 2\n  T: 1.0\n  delta: 0.5\n"
            "  generator: [[0.0, 0.0], [0.0, 0.0]]\n"
            "  x0: [1.0]\n  i0: 1\n"
            "  A: [[0.0]]\n  B: [[0.0]]\n  C: [[0.0]]\n  D: [[0.0]]\n"
            "  Q: [[0.0]]\n  S: [[0.0]]\n  R: [[1.0]]\n  G: [[0.8]]\n"
            "solver: {backend: ode, grid_steps: 100}\n"
            "simulate: {n_paths: 200, dt: 0.01, seed: 1}\n"
            "output: {solution_path: s.csv, report_path: r.txt}\n"
        )
        cfg = parse_config(write_cfg(tmp_path, text))
        res = run_command("verify", cfg, output_dir=tmp_path)
        assert res.exit_code == 0

    def test_bundled_configs_solve(self, tmp_path):
        base = Path(__file__).resolve().parents[1] / "demos" / "configs"
        for name in ("e1_scalar.yaml", "asym_two_regime.yaml",
                     "matrix_two_regime.yaml", "tree_random_q.yaml"):
            cfg = parse_config(base / name)
            assert run_command("validate", cfg, output_dir=tmp_path).exit_code == 0
            assert run_command("solve", cfg, output_dir=tmp_path).exit_code == 0

    def test_verify_refuses_tree_backend(self, tmp_path):
        text = E1_YAML + "solver: {backend: tree, tree_depth: 4}\n"
        cfg = parse_config(write_cfg(tmp_path, text))
        assert main(["verify", "--config", str(write_cfg(tmp_path, text, "t.yaml")),
                     "--output", str(tmp_path)]) == 1


class TestMain:
    def test_exit_codes_through_main(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL_RUN)
        assert main(["validate", "--config", str(cfg),
                     "--output", str(tmp_path)]) == 0
        assert main(["solve", "--config", str(cfg),
                     "--output", str(tmp_path)]) == 0

    def test_parse_failure_maps_to_one(self, tmp_path):
        bad = write_cfg(tmp_path, E1_YAML.replace("generator:", "genrator:"))
        assert main(["validate", "--config", str(bad)]) == 1

    def test_missing_artifacts_map_to_four(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL_RUN)
        assert main(["report", "--config", str(cfg),
                     "--output", str(tmp_path / "empty")]) == 4

    def test_io_failure_on_unwritable_path(self, tmp_path):
        text = SMALL_RUN.replace(
            "output: {solution_path: s.csv, report_path: r.txt, estimates_path: c.csv}",
            "output: {solution_path: no/such/dir/s.csv, report_path: r.txt}")
        cfg = write_cfg(tmp_path, text)
        import os
        old = os.getcwd()
        os.chdir(tmp_path)
        try:
            assert main(["solve", "--config", str(cfg)]) == 4
        finally:
            os.chdir(old)

    def test_seed_override_changes_estimates(self, tmp_path):
        noisy = SMALL_RUN.replace("C: [[0.0]]", "C: [[0.5]]")
        cfg = write_cfg(tmp_path, noisy)
        main(["simulate", "--config", str(cfg), "--output", str(tmp_path / "a"),
              "--seed", "1"])
        main(["simulate", "--config", str(cfg), "--output", str(tmp_path / "b"),
              "--seed", "2"])
        a = (tmp_path / "a" / "c.csv").read_text()
        b = (tmp_path / "b" / "c.csv").read_text()
        assert a != b

    def test_end_to_end_determinism(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL_RUN)
        for d in ("x", "y"):
            main(["solve", "--config", str(cfg), "--output", str(tmp_path / d)])
            main(["verify", "--config", str(cfg), "--output", str(tmp_path / d)])
        for name in ("s.csv", "s.csv.meta.json", "r.txt"):
            assert ((tmp_path / "x" / name).read_bytes()
                    == (tmp_path / "y" / name).read_bytes())
