import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from cli import build_scenario, main  # noqa: E402
from config import parse_config  # noqa: E402
from export_helper import CONVERGENCE_COLUMNS, format_table, vertex_values, write_dofs_csv, write_vtk  # noqa: E402
from mesh_helper import read_mesh  # noqa: E402
from timestepping_helper import make_state, zero_state  # noqa: E402


def _config(tmp_path, extra=""):
    """Zero-load channel run on the 2 x (1 + 1) mesh, two steps."""
    path = tmp_path / "zero.ini"
    path.write_text("[mesh]\nnx = 2\nny_half = 1\n"
                    "[physics]\nsources = zero\n"
                    "[time]\ndt = 0.01\nT = 0.02\n"
                    f"[output]\ndirectory = {tmp_path / 'out'}\n" + extra)
    return path


class TestCommands:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_mesh_command(self, tmp_path):
        out = tmp_path / "meshes" / "channel.mesh"
        assert main(["mesh", "--nx", "3", "--ny", "2", "--out", str(out)]) == 0
        mesh = read_mesh(out)
        assert mesh.n_triangles == 2 * 3 * 4

    def test_run_writes_ledger_and_snapshots(self, tmp_path, capsys):
        assert main(["run", str(_config(tmp_path, "dump_dofs = on\n"))]) == 0
        out = tmp_path / "out"
        ledger = pd.read_csv(out / "ledger.csv")
        assert list(ledger["n"]) == [1, 2]
        assert np.all(ledger["energy"] == 0.0)
        for n in (1, 2):
            assert (out / f"fields_{n}.vtk").read_text().startswith("# vtk DataFile Version 3.0\n")
            assert (out / f"dofs_{n}.csv").exists()
        assert "stability side conditions" in capsys.readouterr().out

    def test_run_with_step_override(self, tmp_path):
        target = tmp_path / "elsewhere"
        assert main(["run", str(_config(tmp_path)), "--out", str(target), "--steps", "1"]) == 0
        assert len(pd.read_csv(target / "ledger.csv")) == 1
        assert not (tmp_path / "out" / "ledger.csv").exists()

    def test_compare_command(self, tmp_path, capsys):
        assert main(["compare", str(_config(tmp_path)), "--dt-sweep", "2e-2,1e-2"]) == 0
        oracle = pd.read_csv(tmp_path / "out" / "oracle.csv")
        assert list(oracle["dt"]) == [2e-2, 1e-2]
        assert np.all(oracle["discrepancy"] == 0.0)
        assert "|" in capsys.readouterr().out

    def test_converge_command(self, tmp_path):
        """Two small levels against an 8 x 8 reference give a two-row table."""
        assert main(["converge", str(_config(tmp_path)), "--levels", "2", "--ref-h", "0.2"]) == 0
        table = pd.read_csv(tmp_path / "out" / "table1.csv")
        assert list(table.columns) == CONVERGENCE_COLUMNS
        assert len(table) == 2
        assert np.isnan(table["rate_f"][0])

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_converge_reference_too_coarse(self, tmp_path, capsys):
        assert main(["converge", str(_config(tmp_path)), "--levels", "2", "--ref-h", "1.0"]) == 1
        assert "reference" in capsys.readouterr().err

    def test_converge_needs_channel_scenario(self, tmp_path, capsys):
        path = _config(tmp_path)
        path.write_text(path.read_text().replace("[physics]\n", "[physics]\nscenario = custom\n"))
        assert main(["converge", str(path)]) == 1
        assert "Error:" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[time]\ndt = -1\n")
        assert main(["run", str(path)]) == 1
        assert f"{path}:2:" in capsys.readouterr().err

    def test_zero_steps(self, tmp_path):
        assert main(["run", str(_config(tmp_path)), "--steps", "0"]) == 1

    def test_bad_dt_sweep(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["compare", str(_config(tmp_path)), "--dt-sweep", "fast"])


class TestExport:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_dofs_csv_layout(self, tmp_path):
        problem = build_scenario(parse_config(_config(tmp_path)), threads=0)
        path = write_dofs_csv(problem, zero_state(problem), tmp_path / "dofs.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["field", "index", "value"]
        assert len(frame) == sum(problem.spaces.size(name) for name in ("v", "p_f", "U", "xi", "q", "eta"))
        assert set(frame["field"]) == {"v", "p_f", "U", "xi", "q", "eta"}

    def test_vertex_values_follow_regions(self, make_problem):
        """Porous pressure is zero on fluid-only vertices and k1 xi where xi = 1."""
        problem = make_problem()
        fields = {name: np.zeros(problem.spaces.size(name)) for name in ("v", "p_f", "U", "xi", "q", "eta")}
        fields["xi"][:] = 1.0
        values = vertex_values(problem, make_state(problem, 0, 0.0, fields), "p_p")
        y = problem.mesh.nodes[:, 1]
        np.testing.assert_allclose(values[y > 0.0], 0.0)
        np.testing.assert_allclose(values[y <= 0.0], problem.coeffs.k1)

    def test_vtk_sections(self, make_problem, tmp_path):
        problem = make_problem()
        text = write_vtk(tmp_path / "snap.vtk", problem, zero_state(problem)).read_text()
        mesh = problem.mesh
        assert f"POINTS {mesh.n_nodes} double" in text
        assert f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}" in text
        for name in ("VECTORS v", "VECTORS U", "VECTORS q", "SCALARS p_f", "SCALARS p_p"):
            assert name in text

    def test_format_table(self):
        table = format_table(pd.DataFrame({"h": [0.5, 0.25], "rate": [float("nan"), 2.0]}))
        assert "|" in table
        assert "-" in table


@pytest.mark.skipif(os.getenv("SBN_RUN_SLOW", "").lower() not in ("1", "true", "yes"),
                    reason="set SBN_RUN_SLOW=1 to run the fracture scenario")
class TestFractureScenario:
    def test_hundred_steps_stay_finite(self, tmp_path):
        """The shipped fracture configuration runs its full horizon with a finite ledger."""
        config_path = os.path.join(os.path.dirname(__file__), '..', '..', 'configs', 'test2.ini')
        assert main(["run", config_path, "--out", str(tmp_path)]) == 0
        ledger = pd.read_csv(tmp_path / "ledger.csv")
        assert len(ledger) == 100
        assert np.all(np.isfinite(ledger["energy"]))
