"""
Experiment configuration: packaged defaults < key=value config file < command-line flags.

Keys are the long flag names without dashes (`batch-size` and `batch_size`
both work). Values from config files arrive as strings and are parsed here;
values from flags arrive already typed.
"""
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import importlib.resources as pkg_resources

from . import presets as _presets_pkg
from .mlmc import CostModel
from .randvar import InvCdfApprox, parse_approx
from .sde import GeometricBrownianMotion
from .softfloat import PrecisionSpec, parse_precision

# Optional: jsonschema validation
try:
    import jsonschema
    _HAS_JSONSCHEMA = True
except Exception:
    _HAS_JSONSCHEMA = False

_PRESETS_RAW = json.loads(pkg_resources.files(_presets_pkg).joinpath("defaults.json").read_text())

SUBCOMMANDS = ("density", "two-way", "four-way", "speedup", "step-errors", "estimate")
PROGRESS_STYLES = ("compact", "detailed", "json")
MIN_PATHS = 2
MIN_PROBE_SAMPLES = 10_000

_STRING_KEYS = {"precision", "approx", "levels", "paths", "cost-model", "out", "stats", "stats-out", "progress-style"}
_INT_KEYS = {"seed", "concurrency", "batch-size", "max-level", "pilot-paths", "bins", "samples", "halve-paths-above"}
_FLOAT_KEYS = {"mu", "sigma", "x0", "horizon", "eps"}
_BOOL_KEYS = {"kahan", "quiet", "validate"}
KNOWN_KEYS = _STRING_KEYS | _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 2 on the command line)."""


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("_", "-")


def parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"invalid boolean '{value}'")


def parse_levels(text: Any) -> List[int]:
    """`a..b` (inclusive) or a single level `a`."""
    raw = str(text).strip()
    lo, sep, hi = raw.partition("..")
    try:
        first = int(lo)
        last = int(hi) if sep else first
    except ValueError as e:
        raise ConfigError(f"invalid level range '{raw}': expected a..b") from e
    if first < 0:
        raise ConfigError(f"levels must be >= 0 (got {raw})")
    if last < first:
        raise ConfigError(f"empty level range '{raw}'")
    return list(range(first, last + 1))


def parse_paths(text: Any) -> Tuple[int, ...]:
    """Comma-separated path counts; one entry means the desk schedule."""
    raw = str(text).strip()
    try:
        counts = tuple(int(part) for part in raw.split(","))
    except ValueError as e:
        raise ConfigError(f"invalid path counts '{raw}'") from e
    if any(n < MIN_PATHS for n in counts):
        raise ConfigError(f"paths must be >= {MIN_PATHS} (got {raw})")
    return counts


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        return None
    try:
        if key in _BOOL_KEYS:
            return parse_bool(value)
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as e:
        raise ConfigError(f"invalid value for {key}: '{value}'") from e
    return str(value)


def _read_key_values(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    values: Dict[str, str] = {}
    for number, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{number}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: str) -> Dict[str, Any]:
    """Flat key=value file; blank lines and `#` comments are skipped."""
    values = {}
    for key, value in _read_key_values(path).items():
        name = normalize_key(key)
        if name not in KNOWN_KEYS:
            raise ConfigError(f"{path}: unknown key '{key}'")
        values[name] = _coerce(name, value)
    return values


def _validate_cost_model(values: Mapping[str, float], source: str) -> None:
    if not _HAS_JSONSCHEMA:
        return
    from . import schemas as _schemas_pkg
    schema_text = pkg_resources.files(_schemas_pkg).joinpath("cost_model.schema.json").read_text()
    try:
        jsonschema.validate(instance=dict(values), schema=json.loads(schema_text))
    except jsonschema.ValidationError as e:
        raise ConfigError(f"{source}: {e.message}") from e


def load_cost_model(path: Optional[str] = None) -> CostModel:
    """Packaged default cost model, with the keys of a key=value file replacing defaults."""
    values: Dict[str, Any] = dict(_PRESETS_RAW["cost_model"])
    if path:
        overrides = {}
        for key, raw in _read_key_values(path).items():
            try:
                overrides[key.replace("-", "_")] = float(raw)
            except ValueError as e:
                raise ConfigError(f"{path}: invalid number for {key}: '{raw}'") from e
        _validate_cost_model(overrides, path)
        values.update(overrides)
    try:
        return CostModel.from_mapping(values)
    except ValueError as e:
        raise ConfigError(f"{path or 'cost model'}: {e}") from e


@dataclass
class ExperimentConfig:
    subcommand: str
    precisions: List[PrecisionSpec]
    approx: Optional[InvCdfApprox]
    approx_name: str
    kahan: bool
    levels: List[int]
    paths: Tuple[int, ...]
    halve_paths_above: int = 9
    seed: int = 1729
    mu: float = 0.05
    sigma: float = 0.2
    x0: float = 1.0
    horizon: float = 1.0
    cost_model: CostModel = field(default_factory=CostModel)
    out: Optional[str] = None
    concurrency: int = 1
    batch_size: int = 2048
    eps: float = 1e-3
    max_level: Optional[int] = None
    pilot_paths: int = 1000
    bins: int = 64
    samples: int = 1_000_000
    stats: Optional[str] = None
    stats_out: Optional[str] = None
    progress_style: str = "compact"
    quiet: bool = False
    validate: bool = False

    @property
    def precision(self) -> PrecisionSpec:
        """Low precision for every subcommand except the two-way sweep."""
        return self.precisions[0]

    @property
    def model(self) -> GeometricBrownianMotion:
        return GeometricBrownianMotion(self.mu, self.sigma, self.x0, self.horizon)

    def paths_for_level(self, level: int) -> int:
        """
        Paths at `level`.

        A single count follows the desk schedule: halved per level above
        `halve_paths_above`, never below two. A list is indexed by position in
        the level range, its last entry repeating.
        """
        if len(self.paths) == 1:
            shift = max(0, level - self.halve_paths_above)
            return max(MIN_PATHS, self.paths[0] >> shift)
        index = self.levels.index(level) if level in self.levels else level
        return self.paths[min(index, len(self.paths) - 1)]


def merged_settings(subcommand: str, overrides: Optional[Mapping[str, Any]] = None,
                    config_file: Optional[str] = None) -> Dict[str, Any]:
    """Raw settings after applying defaults, subcommand defaults, the config file and flags, in that order."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand '{subcommand}'")
    settings: Dict[str, Any] = {}
    for key, value in _PRESETS_RAW["defaults"].items():
        settings[key] = _coerce(key, value)
    for key, value in _PRESETS_RAW["subcommands"][subcommand].items():
        settings[key] = _coerce(key, value)
    if config_file:
        settings.update(load_config_file(config_file))
    for key, value in (overrides or {}).items():
        name = normalize_key(key)
        if name not in KNOWN_KEYS:
            raise ConfigError(f"unknown setting '{key}'")
        if value is not None:
            settings[name] = _coerce(name, value)
    return settings


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def build_config(subcommand: str, overrides: Optional[Mapping[str, Any]] = None,
                 config_file: Optional[str] = None) -> ExperimentConfig:
    s = merged_settings(subcommand, overrides, config_file)

    try:
        precisions = [parse_precision(name) for name in s["precision"].split(",") if name.strip()]
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    _require(bool(precisions), "precision list is empty")
    try:
        approx = parse_approx(s["approx"])
    except ValueError as e:
        raise ConfigError(str(e)) from e

    max_level = s.get("max-level")
    if max_level is not None:
        _require(max_level >= 0, f"max-level must be >= 0 (got {max_level})")
        levels = list(range(max_level + 1))
    else:
        levels = parse_levels(s["levels"])
    if subcommand == "estimate":
        _require(levels[0] == 0, f"estimate needs levels starting at 0 (got {s['levels']})")

    _require(s["concurrency"] >= 1, f"concurrency must be >= 1 (got {s['concurrency']})")
    _require(s["batch-size"] >= 1, f"batch-size must be >= 1 (got {s['batch-size']})")
    _require(s["eps"] > 0, f"eps must be > 0 (got {s['eps']})")
    _require(s["pilot-paths"] >= MIN_PATHS, f"pilot-paths must be >= {MIN_PATHS} (got {s['pilot-paths']})")
    _require(s["bins"] >= 1, f"bins must be >= 1 (got {s['bins']})")
    _require(s["samples"] >= 1, f"samples must be >= 1 (got {s['samples']})")
    _require(s["halve-paths-above"] >= 0, f"halve-paths-above must be >= 0 (got {s['halve-paths-above']})")
    if subcommand == "step-errors":
        _require(s["samples"] >= MIN_PROBE_SAMPLES,
                 f"step-errors needs samples >= {MIN_PROBE_SAMPLES} (got {s['samples']})")
    _require(s["progress-style"] in PROGRESS_STYLES,
             f"progress-style must be one of {', '.join(PROGRESS_STYLES)} (got {s['progress-style']})")
    _require(s["horizon"] > 0, f"horizon must be > 0 (got {s['horizon']})")
    for key in ("mu", "sigma", "x0", "horizon"):
        _require(math.isfinite(s[key]), f"{key} must be finite (got {s[key]})")

    stats = s.get("stats")
    if stats is not None:
        _require(os.path.exists(stats), f"stats file not found: {stats}")

    return ExperimentConfig(
        subcommand=subcommand,
        precisions=precisions,
        approx=approx,
        approx_name=s["approx"].strip().lower(),
        kahan=s["kahan"],
        levels=levels,
        paths=parse_paths(s["paths"]),
        halve_paths_above=s["halve-paths-above"],
        seed=s["seed"],
        mu=s["mu"],
        sigma=s["sigma"],
        x0=s["x0"],
        horizon=s["horizon"],
        cost_model=load_cost_model(s.get("cost-model")),
        out=s.get("out"),
        concurrency=s["concurrency"],
        batch_size=s["batch-size"],
        eps=s["eps"],
        max_level=max_level,
        pilot_paths=s["pilot-paths"],
        bins=s["bins"],
        samples=s["samples"],
        stats=stats,
        stats_out=s.get("stats-out"),
        progress_style=s["progress-style"],
        quiet=s["quiet"],
        validate=s["validate"],
    )
