"""
Configuration management for the flow inference engine.
Merges built-in defaults, an optional KEY=VALUE config file and command-line
flags. The process environment is never consulted.
"""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from dotenv import dotenv_values

SCALING_MODES = ("auto", "factor", "off")
INIT_KINDS = ("static", "static-jittered", "moving")


@dataclass(frozen=True)
class SolverConfig:
    """Knobs shared by the exact and approximate solvers."""

    cutoff: float
    lam: float = 10.0
    epsilon: float = 1e-4
    scaling: str = "off"
    scale_factor: float = 1.0
    lambda_rule: str = "linear"
    target_min_flow: float = 1.0
    beta_bounds: Optional[Tuple[float, float]] = None
    max_outer: int = 200
    max_inner: int = 500
    inner_tol: float = 1e-8
    cycle_window: int = 50
    max_m_iter: int = 2000
    m_tol: float = 1e-12
    m_gtol: float = 1e-5
    approx_tol: float = 1e-5
    init_offdiag: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.cutoff > 0:
            raise ValueError(f"Cutoff K must be positive, got {self.cutoff}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if not self.m_gtol > 0:
            raise ValueError(f"m_gtol must be positive, got {self.m_gtol}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.scaling not in SCALING_MODES:
            raise ValueError(f"Unknown scaling mode {self.scaling!r}; use one of {SCALING_MODES}")
        if self.scale_factor < 1:
            raise ValueError(f"Scale factor must be >= 1, got {self.scale_factor}")
        if self.beta_bounds is not None and not self.beta_bounds[0] < self.beta_bounds[1]:
            raise ValueError(f"beta bounds must be increasing, got {self.beta_bounds}")
        for name in ("max_outer", "max_inner", "max_m_iter", "cycle_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def with_overrides(self, **changes) -> "SolverConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunConfig:
    """One CLI invocation: the command, its files and the solver settings."""

    command: str
    output_dir: Path
    solver: Optional[SolverConfig] = None
    counts: Optional[Path] = None
    centroids: Optional[Path] = None
    truth: Optional[Path] = None
    flows: Optional[Path] = None
    scenario: Optional[Path] = None
    benchmark: Optional[str] = None
    population: float = 1e4
    steps: int = 3
    noise: float = 0.0
    init: str = "static"
    window: Optional[str] = None
    outer_rounds: int = 1
    nae_target: Optional[float] = None
    m_change_tol: float = 1e-2
    lambdas: List[float] = field(default_factory=list)
    epsilons: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    algorithms: List[str] = field(default_factory=lambda: ["exact"])
    runs: int = 20
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.init not in INIT_KINDS:
            raise ValueError(f"Unknown init strategy {self.init!r}; use one of {INIT_KINDS}")
        if self.outer_rounds < 1:
            raise ValueError("outer_rounds must be >= 1")
        for name in ("counts", "centroids", "truth", "flows", "scenario"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ValueError(f"Input file for {name} does not exist: {path}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Path):
                data[key] = str(value)
        return data


def _bool(value: str) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _pair(value: str) -> Tuple[float, float]:
    low, high = (float(part) for part in str(value).split(","))
    return low, high


# config-file key -> (SolverConfig field or run field, parser)
SOLVER_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "CUTOFF": ("cutoff", float),
    "LAMBDA": ("lam", float),
    "EPSILON": ("epsilon", float),
    "SCALING": ("scaling", str),
    "SCALE_FACTOR": ("scale_factor", float),
    "LAMBDA_RULE": ("lambda_rule", str),
    "TARGET_MIN_FLOW": ("target_min_flow", float),
    "BETA_BOUNDS": ("beta_bounds", _pair),
    "MAX_OUTER": ("max_outer", int),
    "MAX_INNER": ("max_inner", int),
    "INNER_TOL": ("inner_tol", float),
    "CYCLE_WINDOW": ("cycle_window", int),
    "MAX_M_ITER": ("max_m_iter", int),
    "M_TOL": ("m_tol", float),
    "M_GTOL": ("m_gtol", float),
    "APPROX_TOL": ("approx_tol", float),
    "INIT_OFFDIAG": ("init_offdiag", float),
    "SEED": ("seed", int),
}
RUN_KEYS: Dict[str, Tuple[str, Callable[[str], Any]]] = {
    "INIT": ("init", str),
    "OUTER_ROUNDS": ("outer_rounds", int),
    "NAE_TARGET": ("nae_target", float),
    "M_CHANGE_TOL": ("m_change_tol", float),
    "WINDOW": ("window", str),
    "DEBUG": ("debug", _bool),
}


class Settings:
    """Settings resolved from defaults, a config file and explicit overrides."""

    def __init__(self, config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Load settings.

        Args:
            config_path: Optional KEY=VALUE file (dotenv syntax)
            overrides: Values from command-line flags keyed like the file;
                None values are ignored so unset flags fall through

        Raises:
            ValueError: If the file is missing or contains an unknown key
        """
        self.config_path = Path(config_path) if config_path else None
        self.values: Dict[str, Any] = {}

        if self.config_path is not None:
            if not self.config_path.exists():
                raise ValueError(f"Config file not found: {self.config_path}")
            # dotenv_values parses the file without exporting anything to os.environ
            for key, raw in dotenv_values(self.config_path).items():
                self.values[self._parse_key(key)] = self._parse_value(key, raw)

        for key, value in (overrides or {}).items():
            if value is not None:
                self.values[self._parse_key(key)] = value

    @staticmethod
    def _parse_key(key: str) -> str:
        upper = key.strip().upper().replace("-", "_")
        if upper not in SOLVER_KEYS and upper not in RUN_KEYS:
            raise ValueError(
                f"Unknown configuration key: {key}\n"
                f"Valid keys are {sorted(SOLVER_KEYS) + sorted(RUN_KEYS)}"
            )
        return upper

    def _parse_value(self, key: str, raw: Optional[str]) -> Any:
        upper = self._parse_key(key)
        _, parser = SOLVER_KEYS.get(upper) or RUN_KEYS[upper]
        if raw is None or raw == "":
            return None
        try:
            return parser(raw)
        except ValueError as exc:
            raise ValueError(f"Invalid value for {upper}: {raw!r} ({exc})")

    def _get_required(self, key: str) -> Any:
        """
        Get a required setting or raise an error.

        Raises:
            ValueError: If the setting is not supplied
        """
        value = self.values.get(key)
        if value is None:
            raise ValueError(
                f"Missing required setting: {key}\n"
                f"Pass --{key.lower().replace('_', '-')} or add {key}=value to the config file"
            )
        return value

    def get(self, key: str, default: Any = None) -> Any:
        value = self.values.get(self._parse_key(key))
        return default if value is None else value

    def solver_config(self, **defaults) -> SolverConfig:
        """SolverConfig from the resolved values; `defaults` fill unset fields."""
        fields = dict(defaults)
        fields["cutoff"] = self.values.get("CUTOFF", defaults.get("cutoff"))
        if fields["cutoff"] is None:
            fields["cutoff"] = self._get_required("CUTOFF")
        for key, (name, _) in SOLVER_KEYS.items():
            if key != "CUTOFF" and self.values.get(key) is not None:
                fields[name] = self.values[key]
        return SolverConfig(**fields)

    def run_fields(self) -> Dict[str, Any]:
        """RunConfig fields that may come from the config file."""
        return {name: self.values[key] for key, (name, _) in RUN_KEYS.items()
                if self.values.get(key) is not None}

    def __repr__(self):
        source = self.config_path.name if self.config_path else "defaults"
        return f"Settings(source={source}, keys={sorted(self.values)})"
