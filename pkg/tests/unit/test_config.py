import math
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from config import RunConfig, parse_config, parse_time_expression  # noqa: E402
from errors import ConfigError  # noqa: E402
from model_helper import PhysicalParameters, bjs_beta  # noqa: E402


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParseConfig:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_channel_defaults(self, tmp_path):
        """An empty file gives the channel benchmark with the P2/P1 pair."""
        cfg = parse_config(_write(tmp_path, "# nothing set\n"))
        assert isinstance(cfg, RunConfig)
        assert cfg.scenario == "test1"
        assert cfg.params == PhysicalParameters.channel_benchmark()
        assert cfg.mesh.elements == "p2p1"
        assert cfg.mesh.mapping == "none"
        assert cfg.nitsche.gamma_f == 1500.0 and not cfg.nitsche.use_bjs
        assert cfg.dt == 1e-4 and cfg.n_steps == 10
        assert cfg.scheme == "decoupled"

    def test_fracture_defaults(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "[physics]\nscenario = test2_external_mesh\n"))
        assert cfg.params == PhysicalParameters.fracture()
        assert cfg.mesh.elements == "p1p1"
        assert cfg.mesh.mapping == "test2"
        assert cfg.nitsche.use_bjs
        assert cfg.nitsche.pseudo_stabilization
        assert cfg.sources == "zero"
        assert cfg.dt == 0.1 and cfg.T == 10.0
        assert cfg.n_steps == 100

    def test_values_and_comments(self, tmp_path):
        text = ("[mesh]\nnx = 8   # cells along x\nny_half = 4\n"
                "[time]\ndt = 5e-4\nT = 2e-3\nscheme = monolithic\n"
                "[nitsche]\ncoupling = off\n"
                "[output]\ndirectory = results\nstride = 2\ndump_dofs = yes\n")
        cfg = parse_config(_write(tmp_path, text))
        assert (cfg.mesh.nx, cfg.mesh.ny_half) == (8, 4)
        assert cfg.n_steps == 4
        assert cfg.scheme == "monolithic"
        assert not cfg.nitsche.coupling and cfg.nitsche.gamma_f == 0.0
        assert cfg.stride == 2 and cfg.dump_dofs
        assert str(cfg.output_dir) == "results"

    def test_beta_auto(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "[physics]\nbeta = auto\n"))
        assert cfg.params.beta == pytest.approx(bjs_beta(PhysicalParameters.channel_benchmark()))

    def test_scalar_conductivity(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "[physics]\nk = 0.5\n"))
        assert cfg.params.conductivity == (0.5, 0.0, 0.5)

    def test_inflow_expression(self, tmp_path):
        cfg = parse_config(_write(tmp_path, "[physics]\np_in = 1e3 * sin(pi * t)\n"))
        assert cfg.p_in(0.5) == pytest.approx(1000.0)
        assert cfg.p_in_expression == "1e3 * sin(pi * t)"

    def test_relative_mesh_file(self, tmp_path):
        (tmp_path / "grid.mesh").write_text("MESH v1\n")
        cfg = parse_config(_write(tmp_path, "[mesh]\nfile = grid.mesh\n"))
        assert cfg.mesh.file == tmp_path / "grid.mesh"

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_nonpositive_dt(self, tmp_path):
        path = _write(tmp_path, "[time]\ndt = 0\n")
        with pytest.raises(ConfigError) as excinfo:
            parse_config(path)
        assert excinfo.value.line == 2
        assert str(excinfo.value).startswith(f"{path}:2:")

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            parse_config(_write(tmp_path, "[mesh]\nnx = 4\nnz = 3\n"))
        assert excinfo.value.line == 3
        assert "nz" in str(excinfo.value)

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            parse_config(_write(tmp_path, "[solver]\n"))
        assert excinfo.value.line == 1

    def test_key_outside_section(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(_write(tmp_path, "dt = 1e-3\n"))

    def test_conductivity_given_twice(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(_write(tmp_path, "[physics]\nk = 1.0\nkxx = 2.0\n"))

    def test_invalid_physics(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            parse_config(_write(tmp_path, "[physics]\nmu_f = -1\n"))
        assert "physics" in str(excinfo.value)

    def test_bad_choice(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            parse_config(_write(tmp_path, "[time]\nscheme = implicit\n"))
        assert excinfo.value.line == 2

    def test_missing_mesh_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(_write(tmp_path, "[mesh]\nfile = absent.mesh\n"))

    def test_missing_config(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.ini")

    def test_inflow_with_other_symbol(self, tmp_path):
        with pytest.raises(ConfigError) as excinfo:
            parse_config(_write(tmp_path, "[physics]\np_in = x * t\n"))
        assert excinfo.value.line == 2


class TestTimeExpression:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_constant(self):
        assert parse_time_expression("2.5")(7.0) == 2.5

    def test_exponential(self):
        assert parse_time_expression("exp(-t)")(1.0) == pytest.approx(math.exp(-1.0))

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_syntax_error(self):
        with pytest.raises(ValueError):
            parse_time_expression("sin(")
