"""
Application configuration module.

Loads environment variables and parses run configuration files.

Environment (read from the process or a .env file):
    SBN_THREADS     assembly worker threads, 0 = serial (default 0)
    SBN_LOG_LEVEL   logging level of the command-line entry points (default INFO)
    SBN_OUTPUT_DIR  default output directory (default "output")

Run configuration files are INI-style: ``[section]`` headers, ``key = value``
lines and ``#`` comments. Unknown sections and keys are errors, and every
error names the file and line.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Tuple, Union

import sympy
from dotenv import load_dotenv

from errors import ConfigError, SimulationError
from model_helper import NitscheParameters, PhysicalParameters, bjs_beta

logger = logging.getLogger(__name__)

# Load environment variables from .env file
load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return max(0, int(raw))
    except ValueError:
        logger.warning(f"Ignoring {name}={raw!r}: not an integer, using {default}")
        return default


SBN_THREADS = _env_int("SBN_THREADS", 0)
SBN_LOG_LEVEL = os.getenv("SBN_LOG_LEVEL", "INFO").upper()
SBN_OUTPUT_DIR = os.getenv("SBN_OUTPUT_DIR", "output")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

SCENARIOS = ("test1", "test2_external_mesh", "custom")

_KEYS = {
    "mesh": ("nx", "ny_half", "x_min", "x_max", "y_lo", "y_split", "y_hi", "file", "mapping", "elements"),
    "physics": ("scenario", "mu_f", "mu_p", "lambda_p", "s0", "alpha", "k", "kxx", "kxy", "kyy", "beta", "p_in",
                "injection_rate", "sources"),
    "nitsche": ("gamma_f", "varsigma", "gamma_stab", "gamma_stab_prime", "gamma_q", "mode", "coupling",
                "pseudo_stabilization"),
    "time": ("dt", "T", "scheme"),
    "output": ("directory", "stride", "dump_dofs"),
    "bc": ("fluid_ext_bc",),
}
_TRUE = ("on", "true", "yes", "1")
_FALSE = ("off", "false", "no", "0")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeshSpec:
    """Built-in channel parameters or an external MESH v1 file."""

    nx: int = 5
    ny_half: int = 5
    x_min: float = 0.0
    x_max: float = 1.0
    y_lo: float = -1.0
    y_split: float = 0.0
    y_hi: float = 1.0
    file: Optional[Path] = None
    mapping: str = "none"
    elements: str = "p2p1"


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "test1"
    mesh: MeshSpec = field(default_factory=MeshSpec)
    params: PhysicalParameters = field(default_factory=PhysicalParameters.channel_benchmark)
    nitsche: NitscheParameters = field(default_factory=NitscheParameters)
    p_in_expression: str = "0"
    p_in: Callable[[float], float] = field(default=lambda t: 0.0, repr=False, compare=False)
    injection_rate: float = 25.0
    sources: str = "test1"
    dt: float = 1e-4
    T: float = 1e-3
    scheme: str = "decoupled"
    output_dir: Path = field(default_factory=lambda: Path(SBN_OUTPUT_DIR))
    stride: int = 1
    dump_dofs: bool = False
    fluid_ext_bc: str = "noslip"
    path: Optional[Path] = None

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


# ---------------------------------------------------------------------------
# INI reader
# ---------------------------------------------------------------------------

class _Section:
    """Values of one section with the line each came from."""

    def __init__(self, name: str, path: str, line: int):
        self.name = name
        self.path = path
        self.line = line
        self.values: Dict[str, Tuple[str, int]] = {}

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def error(self, key: Optional[str], message: str) -> ConfigError:
        line = self.values[key][1] if key in self.values else (self.line or None)
        return ConfigError(message, path=self.path, line=line)

    def raw(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.values[key][0] if key in self.values else default

    def get_float(self, key: str, default: float) -> float:
        if key not in self.values:
            return default
        try:
            return float(self.values[key][0])
        except ValueError:
            raise self.error(key, f"{self.name}.{key}: expected a number, got {self.values[key][0]!r}") from None

    def get_int(self, key: str, default: int) -> int:
        if key not in self.values:
            return default
        try:
            return int(self.values[key][0])
        except ValueError:
            raise self.error(key, f"{self.name}.{key}: expected an integer, got {self.values[key][0]!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        if key not in self.values:
            return default
        value = self.values[key][0].lower()
        if value in _TRUE:
            return True
        if value in _FALSE:
            return False
        raise self.error(key, f"{self.name}.{key}: expected on or off, got {self.values[key][0]!r}")

    def get_choice(self, key: str, choices: Iterable[str], default: str) -> str:
        choices = tuple(choices)
        value = self.values[key][0] if key in self.values else default
        if value not in choices:
            raise self.error(key, f"{self.name}.{key}: expected one of {', '.join(choices)}, got {value!r}")
        return value


def _read_ini(path: Path) -> Dict[str, _Section]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read configuration: {e.strerror or e}", path=str(path)) from e

    sections: Dict[str, _Section] = {}
    current: Optional[_Section] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", path=str(path), line=number)
            name = line[1:-1].strip()
            if name not in _KEYS:
                raise ConfigError(f"unknown section [{name}]", path=str(path), line=number)
            if name in sections:
                raise ConfigError(f"duplicate section [{name}]", path=str(path), line=number)
            current = sections[name] = _Section(name, str(path), number)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", path=str(path), line=number)
        if current is None:
            raise ConfigError("key outside of any section", path=str(path), line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS[current.name]:
            raise ConfigError(f"unknown key '{key}' in [{current.name}]", path=str(path), line=number)
        if key in current.values:
            raise ConfigError(f"duplicate key '{key}' in [{current.name}]", path=str(path), line=number)
        current.values[key] = (value, number)
    return sections


def parse_time_expression(text: str) -> Callable[[float], float]:
    """Compile an expression in t (e.g. ``1e3 * sin(pi * t)``) into a callable.

    Raises:
        ValueError: syntax errors or symbols other than t.
    """
    t = sympy.Symbol("t")
    try:
        expression = sympy.sympify(text, locals={"t": t})
    except (sympy.SympifyError, SyntaxError, TypeError) as e:
        raise ValueError(f"cannot parse expression {text!r}") from e
    extra = expression.free_symbols - {t}
    if extra:
        raise ValueError(f"expression {text!r} may only depend on t, found {sorted(map(str, extra))}")
    function = sympy.lambdify(t, expression, "numpy")
    return lambda time: float(function(time))


# ---------------------------------------------------------------------------
# parse_config
# ---------------------------------------------------------------------------

def parse_config(path: Union[str, Path]) -> RunConfig:
    """Parse and validate a run configuration file.

    Raises:
        ConfigError: malformed file, unknown keys or invalid values (with file:line).
    """
    path = Path(path)
    sections = _read_ini(path)
    mesh_s, phys_s, nit_s, time_s, out_s, bc_s = (sections.get(name) or _Section(name, str(path), 0) for name in _KEYS)

    scenario = phys_s.get_choice("scenario", SCENARIOS, "test1")
    external = scenario == "test2_external_mesh"

    mesh_file = mesh_s.raw("file")
    mesh_path = None
    if mesh_file:
        mesh_path = Path(mesh_file)
        if not mesh_path.is_absolute():
            mesh_path = path.parent / mesh_path
        if not mesh_path.exists():
            raise mesh_s.error("file", f"mesh file {mesh_path} does not exist")
    mesh = MeshSpec(
        nx=mesh_s.get_int("nx", 5), ny_half=mesh_s.get_int("ny_half", 5),
        x_min=mesh_s.get_float("x_min", 0.0), x_max=mesh_s.get_float("x_max", 1.0),
        y_lo=mesh_s.get_float("y_lo", -1.0), y_split=mesh_s.get_float("y_split", 0.0),
        y_hi=mesh_s.get_float("y_hi", 1.0), file=mesh_path,
        mapping=mesh_s.get_choice("mapping", ("none", "test2"), "test2" if external and not mesh_path else "none"),
        elements=mesh_s.get_choice("elements", ("p2p1", "p1p1"), "p1p1" if external else "p2p1"),
    )
    for key in ("nx", "ny_half"):
        if getattr(mesh, key) < 1:
            raise mesh_s.error(key, f"mesh.{key} must be at least 1")

    base = PhysicalParameters.fracture() if external else PhysicalParameters.channel_benchmark()
    if "k" in phys_s and any(key in phys_s for key in ("kxx", "kxy", "kyy")):
        raise phys_s.error("k", "give either k or kxx/kxy/kyy, not both")
    if "k" in phys_s:
        k = phys_s.get_float("k", 1.0)
        conductivity = (k, 0.0, k)
    else:
        conductivity = tuple(phys_s.get_float(key, default)
                             for key, default in zip(("kxx", "kxy", "kyy"), base.conductivity))
    beta_raw = phys_s.raw("beta")
    try:
        params = PhysicalParameters(
            mu_f=phys_s.get_float("mu_f", base.mu_f), mu_p=phys_s.get_float("mu_p", base.mu_p),
            lambda_p=phys_s.get_float("lambda_p", base.lambda_p), s0=phys_s.get_float("s0", base.s0),
            alpha=phys_s.get_float("alpha", base.alpha), conductivity=conductivity,
            beta=base.beta if beta_raw in (None, "auto") else phys_s.get_float("beta", base.beta),
        )
        if beta_raw == "auto":
            params = PhysicalParameters(params.mu_f, params.mu_p, params.lambda_p, params.s0, params.alpha,
                                        params.conductivity, bjs_beta(params))
    except SimulationError as e:
        raise phys_s.error(None, f"physics: {e}") from e

    try:
        p_in = parse_time_expression(phys_s.raw("p_in", "0"))
    except ValueError as e:
        raise phys_s.error("p_in", f"physics.p_in: {e}") from e

    mode = nit_s.get_choice("mode", ("nitsche_star", "bjs_plus"), "bjs_plus" if external else "nitsche_star")
    coupling = nit_s.get_bool("coupling", True)
    try:
        nitsche = NitscheParameters(
            gamma_f=nit_s.get_float("gamma_f", 1500.0 if coupling else 0.0),
            varsigma=nit_s.get_int("varsigma", 1),
            gamma_stab=nit_s.get_float("gamma_stab", 1.0),
            gamma_stab_prime=nit_s.get_float("gamma_stab_prime", 0.0),
            gamma_q=nit_s.get_float("gamma_q", 1e-3),
            use_bjs=mode == "bjs_plus",
            coupling=coupling,
            pseudo_stabilization=nit_s.get_bool("pseudo_stabilization", external),
        )
    except SimulationError as e:
        raise nit_s.error(None, f"nitsche: {e}") from e

    dt = time_s.get_float("dt", 0.1 if external else 1e-4)
    T = time_s.get_float("T", 10.0 if external else 1e-3)
    if not dt > 0:
        raise time_s.error("dt", f"time.dt must be positive, got {dt}")
    if T < dt:
        raise time_s.error("T", f"time.T must be at least dt, got T={T}, dt={dt}")
    stride = out_s.get_int("stride", 1)
    if stride < 1:
        raise out_s.error("stride", f"output.stride must be at least 1, got {stride}")
    injection_rate = phys_s.get_float("injection_rate", 25.0)

    config = RunConfig(
        scenario=scenario, mesh=mesh, params=params, nitsche=nitsche,
        p_in_expression=phys_s.raw("p_in", "0"), p_in=p_in, injection_rate=injection_rate,
        sources=phys_s.get_choice("sources", ("test1", "zero"), "zero" if external else "test1"),
        dt=dt, T=T, scheme=time_s.get_choice("scheme", ("decoupled", "monolithic"), "decoupled"),
        output_dir=Path(out_s.raw("directory", SBN_OUTPUT_DIR)), stride=stride,
        dump_dofs=out_s.get_bool("dump_dofs", False),
        fluid_ext_bc=bc_s.get_choice("fluid_ext_bc", ("noslip", "traction_free"), "noslip"),
        path=path,
    )
    logger.info(f"Loaded {path}: scenario={scenario}, dt={dt:g}, T={T:g}, steps={config.n_steps}")
    return config

