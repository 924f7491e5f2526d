"""
Experiment configuration: a strict JSON file mapped onto the typed specs of every module.

Sections that carry a seed and do not set one get a seed derived from the global
seed and the section name, so that changing one section never reshuffles another.
"""

import difflib
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, Union

from TsfLab.attack_sim import AttackSpec
from TsfLab.defense import ABLATIONS, DefenseConfig
from TsfLab.errors import ConfigError
from TsfLab.forecaster import ARCHITECTURES, TrainConfig
from TsfLab.series_core import SplitSpec, WindowSpec
from TsfLab.synthetic import SyntheticSpec

logger = getLogger(__name__)

SYNTHETIC_SOURCE = "synthetic"
SEEDED_SECTIONS = ("attack", "train", "defense", "synthetic")

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(state: int) -> int:
    """One output of the splitmix64 generator for the given 64-bit state."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(global_seed: int, section: str) -> int:
    """32-bit seed of a section: splitmix64 of (global seed, crc32 of the section name)."""
    state = ((global_seed & 0xFFFFFFFF) << 32) | zlib.crc32(section.encode("utf-8"))
    return splitmix64(state) & 0xFFFFFFFF


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "mlp"
    hidden: int = 32

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"must be one of {ARCHITECTURES}, got '{self.architecture}'",
                field="architecture",
            )
        if self.hidden < 1:
            raise ConfigError(f"must be >= 1, got {self.hidden}", field="hidden")


@dataclass(frozen=True)
class ExperimentConfig:  # pylint: disable=too-many-instance-attributes
    data: Optional[str] = None
    has_header: bool = True
    out: str = "out"
    seed: int = 0
    undefended_epochs: int = 100
    ablations: Tuple[str, ...] = ()
    diagnostics: bool = True
    window: WindowSpec = field(default_factory=WindowSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    @property
    def uses_synthetic_data(self) -> bool:
        return self.data == SYNTHETIC_SOURCE

    def require_data(self) -> str:
        """The dataset path or the synthetic source name; raises ConfigError if unusable."""
        if not self.data:
            raise ConfigError("a dataset path (or 'synthetic') is required", field="data")
        if not self.uses_synthetic_data and not Path(self.data).is_file():
            raise ConfigError(f"no such file: {self.data}", field="data")
        return self.data

    def seeds(self) -> Dict[str, int]:
        return {name: int(getattr(self, name).seed) for name in SEEDED_SECTIONS}

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ablations"] = list(self.ablations)
        return data

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of the resolved configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def provenance(self) -> Dict[str, Any]:
        """The keys every written artifact carries to tie it to this configuration."""
        return {"config_hash": self.config_hash(), "seeds": self.seeds()}


SECTIONS: Dict[str, Type[Any]] = {
    "window": WindowSpec,
    "split": SplitSpec,
    "attack": AttackSpec,
    "model": ModelSpec,
    "train": TrainConfig,
    "defense": DefenseConfig,
    "synthetic": SyntheticSpec,
}
TOP_LEVEL_KEYS = (
    "data",
    "has_header",
    "out",
    "seed",
    "undefended_epochs",
    "ablations",
    "diagnostics",
)


def _check_keys(keys: List[str], valid: List[str], prefix: str = "") -> None:
    for key in keys:
        if key in valid:
            continue
        suggestions = difflib.get_close_matches(key, valid, n=1)
        hint = f"; did you mean '{suggestions[0]}'?" if suggestions else ""
        raise ConfigError(f"unknown key '{key}'{hint}", field=f"{prefix}{key}")


def _build_section(name: str, spec_type: Type[Any], values: Any, global_seed: int) -> Any:
    if not isinstance(values, dict):
        raise ConfigError("section must be a JSON object", field=name)
    valid = [spec_field.name for spec_field in fields(spec_type)]
    _check_keys(list(values), valid, prefix=f"{name}.")
    values = dict(values)
    if name in SEEDED_SECTIONS and "seed" not in values:
        values["seed"] = derive_seed(global_seed, name)
    try:
        return spec_type(**values)
    except ConfigError as exception:
        raise ConfigError(exception.message, field=f"{name}.{exception.field}") from exception
    except (TypeError, ValueError) as exception:
        raise ConfigError(str(exception), field=name) from exception


def _expect(value: Any, expected: Union[type, Tuple[type, ...]], name: str) -> Any:
    if isinstance(value, bool) and expected is not bool:
        raise ConfigError(f"expected {expected}, got a boolean", field=name)
    if not isinstance(value, expected):
        raise ConfigError(f"expected {expected}, got {type(value).__name__}", field=name)
    return value


def config_from_mapping(data: Mapping[str, Any]) -> ExperimentConfig:
    """Resolve a parsed JSON object into an ExperimentConfig with defaults filled in."""
    if not isinstance(data, Mapping):
        raise ConfigError("the configuration must be a JSON object")
    _check_keys(list(data), [*TOP_LEVEL_KEYS, *SECTIONS])
    global_seed = int(_expect(data.get("seed", 0), int, "seed"))
    ablations = tuple(_expect(data.get("ablations", []), list, "ablations"))
    for ablation in ablations:
        if ablation not in ABLATIONS:
            suggestions = difflib.get_close_matches(str(ablation), ABLATIONS, n=1)
            hint = f"; did you mean '{suggestions[0]}'?" if suggestions else ""
            raise ConfigError(f"unknown ablation '{ablation}'{hint}", field="ablations")
    undefended_epochs = int(_expect(data.get("undefended_epochs", 100), int, "undefended_epochs"))
    if undefended_epochs < 1:
        raise ConfigError("must be >= 1", field="undefended_epochs")
    source = data.get("data")
    sections = {
        name: _build_section(name, spec_type, data.get(name, {}), global_seed)
        for name, spec_type in SECTIONS.items()
    }
    config = ExperimentConfig(
        data=None if source is None else str(_expect(source, str, "data")),
        has_header=bool(_expect(data.get("has_header", True), bool, "has_header")),
        out=str(_expect(data.get("out", "out"), str, "out")),
        seed=global_seed,
        undefended_epochs=undefended_epochs,
        ablations=ablations,
        diagnostics=bool(_expect(data.get("diagnostics", True), bool, "diagnostics")),
        **sections,
    )
    fitted = config.attack.fitted_to(config.window)
    if fitted != config.attack:
        config = replace(config, attack=fitted)
    logger.debug(f"configuration resolved, seeds {config.seeds()}")
    return config


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON experiment configuration file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exception:
        raise ConfigError(f"cannot read configuration: {exception}") from exception
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exception:
        raise ConfigError(
            f"invalid JSON at line {exception.lineno}, column {exception.colno}: {exception.msg}"
        ) from None
    return config_from_mapping(data)
