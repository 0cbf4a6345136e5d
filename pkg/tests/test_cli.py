"""Tests for configuration loading, artifacts, and the command line."""

import json

import numpy as np
import pytest

from fescale.benchmarks import grid_quads
from fescale.cli import (
    load_config,
    main,
    parse_config,
    read_mesh,
    read_stats_csv,
    run_suite,
    write_mesh,
)
from fescale.errors import ConfigError
from fescale.mesh import QUAD4, ElementBlock, Mesh

TINY = {
    "benchmark": "notched-shear",
    "schemes": ["staggered", "monolithic-stored"],
    "overrides": {"n_macro": 3, "n_micro": 3},
    "solver": {"tol_macro": 1e-8, "tol_micro": 1e-8,
               "dt_initial": 0.25, "dt_max": 0.25},
}


def write_tiny_config(tmp_path, **extra):
    raw = dict(TINY)
    raw.update(extra)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw))
    return path


class TestLoadConfig:
    def test_minimal_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"benchmark": "notched-shear",
                                    "schemes": ["monolithic"]}))
        cfg = load_config(path)
        assert cfg.benchmark == "notched-shear"
        assert cfg.schemes == ["monolithic"]
        assert cfg.settings.tol_macro == 5e-3  # defaults echoed

    def test_invalid_cut_factor(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"benchmark": "notched-shear",
                                    "solver": {"cut_factor": 1.5}}))
        with pytest.raises(ConfigError, match="cut_factor"):
            load_config(path)

    def test_missing_mesh_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"macro_mesh": "nope.mesh"}))
        with pytest.raises(ConfigError, match="not found"):
            load_config(path)

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"benchmark": "notched-shear",\n  broken\n}')
        with pytest.raises(ConfigError, match=":2:"):
            load_config(path)

    def test_unknown_benchmark(self):
        with pytest.raises(ConfigError, match="unknown name"):
            parse_config({"benchmark": "bogus"})

    def test_empty_scheme_list(self):
        with pytest.raises(ConfigError, match="at least one"):
            parse_config({"benchmark": "notched-shear", "schemes": []})

    def test_scheme_alias_accepted(self):
        cfg = parse_config({"benchmark": "notched-shear",
                            "schemes": ["monolithic-stored-factorization"]})
        assert cfg.schemes == ["monolithic-stored"]


class TestMeshFile:
    def test_round_trip(self, tmp_path):
        nodes, conn = grid_quads(2, 2)
        mesh = Mesh(nodes, [ElementBlock(QUAD4, conn)])
        path = tmp_path / "m.mesh"
        write_mesh(mesh, path)
        back = read_mesh(path)
        np.testing.assert_allclose(back.nodes, mesh.nodes)
        np.testing.assert_array_equal(back.blocks[0].connectivity, conn)

    def test_malformed_reports_line(self, tmp_path):
        path = tmp_path / "bad.mesh"
        path.write_text("fescale-mesh 2\nnodes 1\n0 0.0 0.0\nelements 1\n0 tri3 0 0\n")
        with pytest.raises(ConfigError, match="bad.mesh:5"):
            read_mesh(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.mesh"
        path.write_text("nodes 0\nelements 0\n")
        with pytest.raises(ConfigError, match="header"):
            read_mesh(path)


@pytest.fixture(scope="module")
def suite_out(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("suite")
    cfg = parse_config(dict(TINY, output_dir="art"), base_dir=str(tmp_path))
    status, reports = run_suite(cfg)
    return tmp_path / "art", status, reports


class TestRunSuite:
    def test_exit_status_zero_and_artifacts(self, suite_out):
        out, status, reports = suite_out
        assert status == 0
        for scheme in ("staggered", "monolithic-stored"):
            assert (out / f"notched-shear_{scheme}_curve.csv").exists()
            assert (out / f"notched-shear_{scheme}_stats.csv").exists()
        assert (out / "notched-shear_summary.csv").exists()

    def test_final_reactions_agree(self, suite_out):
        out, _, reports = suite_out
        r1 = np.array([p[2] for p in reports["staggered"].curve])
        r2 = np.array([p[2] for p in reports["monolithic-stored"].curve])
        assert np.abs(r1 - r2).max() <= 1e-6 * np.abs(r1).max()

    def test_summary_matches_recomputed_ratios(self, suite_out):
        out, _, _ = suite_out
        with open(out / "notched-shear_summary.csv") as fh:
            header = fh.readline().strip().split(",")
            rows = [dict(zip(header, line.strip().split(","))) for line in fh]
        stats = {
            s: read_stats_csv(out / f"notched-shear_{s}_stats.csv")
            for s in ("staggered", "monolithic-stored")
        }
        base_f = sum(int(r["factorizations"]) for r in stats["staggered"])
        mono_f = sum(int(r["factorizations"]) for r in stats["monolithic-stored"])
        summary_row = next(r for r in rows if r["scheme"] == "monolithic-stored")
        assert float(summary_row["factorization_ratio_vs_staggered"]) == mono_f / base_f

    def test_curve_bytes_reproducible(self, suite_out, tmp_path):
        out, _, _ = suite_out
        cfg = parse_config(dict(TINY, output_dir="rerun"), base_dir=str(tmp_path))
        run_suite(cfg)
        for scheme in ("staggered", "monolithic-stored"):
            a = (out / f"notched-shear_{scheme}_curve.csv").read_bytes()
            b = (tmp_path / "rerun" / f"notched-shear_{scheme}_curve.csv").read_bytes()
            assert a == b


class TestElasticSuite:
    def test_identical_iteration_counts_across_schemes(self, tmp_path):
        raw = dict(TINY, elastic_only=True, output_dir="el",
                   schemes=["staggered", "monolithic", "monolithic-stored"])
        cfg = parse_config(raw, base_dir=str(tmp_path))
        status, reports = run_suite(cfg)
        assert status == 0
        stats = {
            s: read_stats_csv(tmp_path / "el" / f"notched-shear_{s}_stats.csv")
            for s in raw["schemes"]
        }
        iters = {s: [r["macro_iters"] for r in rows] for s, rows in stats.items()}
        assert iters["staggered"] == iters["monolithic"] == iters["monolithic-stored"]


class TestParallelSuite:
    def test_workers_do_not_change_outputs(self, tmp_path):
        curves = {}
        for workers in (1, 2):
            raw = dict(TINY, output_dir=f"w{workers}")
            raw["solver"] = dict(TINY["solver"], parallel_workers=workers)
            raw["schemes"] = ["monolithic-stored"]
            cfg = parse_config(raw, base_dir=str(tmp_path))
            status, _ = run_suite(cfg)
            assert status == 0
            curves[workers] = (
                tmp_path / f"w{workers}" / "notched-shear_monolithic-stored_curve.csv"
            ).read_bytes()
        assert curves[1] == curves[2]


class TestCustomMeshRun:
    def test_custom_bar_model(self, tmp_path):
        # square macro mesh, one quad; single-quad homogeneous micro
        nodes, conn = grid_quads(1, 1)
        write_mesh(Mesh(nodes, [ElementBlock(QUAD4, conn)]), tmp_path / "macro.mesh")
        write_mesh(Mesh(nodes, [ElementBlock(QUAD4, conn)]), tmp_path / "micro.mesh")
        raw = {
            "name": "bar",
            "macro_mesh": "macro.mesh",
            "rve_mesh": "micro.mesh",
            "materials": [{"E": 100.0, "nu": 0.3}],
            "dirichlet": [[0, 0.0], [2, 0.0], [4, 0.0], [6, 0.0],
                          [1, 0.0], [3, 0.0], [5, 0.01], [7, 0.01]],
            "control_dof": 5,
            "reaction_dofs": [5, 7],
            "schemes": ["monolithic-stored"],
            "solver": {"dt_initial": 0.5, "dt_max": 0.5,
                       "tol_macro": 1e-9, "tol_micro": 1e-9},
            "output_dir": "out",
        }
        (tmp_path / "cfg.json").write_text(json.dumps(raw))
        cfg = load_config(tmp_path / "cfg.json")
        status, reports = run_suite(cfg)
        assert status == 0
        rep = reports["monolithic-stored"]
        # uniaxial strain: reaction = (lam+2mu) * prescribed strain
        e, nu = 100.0, 0.3
        m_oed = e * (1 - nu) / ((1 + nu) * (1 - 2 * nu))
        assert rep.curve[-1][2] == pytest.approx(m_oed * 0.01, rel=1e-8)


class TestMainEntry:
    def test_exit_code_config_error(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["run", str(path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_check_command(self, capsys):
        assert main(["check"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 5

    def test_run_command(self, tmp_path):
        path = write_tiny_config(tmp_path, output_dir="cli_out",
                                 schemes=["monolithic-stored"])
        assert main(["run", str(path)]) == 0
        assert (tmp_path / "cli_out" / "notched-shear_monolithic-stored_curve.csv").exists()

    def test_scheme_flag_overrides_config(self, tmp_path):
        path = write_tiny_config(tmp_path, output_dir="cli_out2")
        assert main(["run", str(path), "--schemes", "staggered"]) == 0
        out = tmp_path / "cli_out2"
        assert (out / "notched-shear_staggered_curve.csv").exists()
        assert not (out / "notched-shear_monolithic-stored_curve.csv").exists()
