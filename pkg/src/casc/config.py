"""Pipeline configuration: a dataclass with JSON load/save and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError

DEFAULT_PROMPT_HEALTHY = (
    "an image of brain tissue showing typical signal intensity without any "
    "regions of abnormal intensity or suspicious mass"
)
DEFAULT_PROMPT_TUMOR = (
    "an image of brain tissue showing a tumor with uneven hyperintensity and "
    "irregular borders distinct from surroundings"
)

REPORT_FORMATS = ("json", "table", "both")
CAM_FORMULAS = ("gradient", "gradient_activation")


@dataclass
class PipelineConfig:
    workdir: str
    alpha: float = 20.0
    beta: float = 20.0
    rounds: int = 2
    text_prompts: tuple[str, str] = (DEFAULT_PROMPT_HEALTHY, DEFAULT_PROMPT_TUMOR)
    backend: object = "analytic"  # "analytic" | {"kind": "external", "cmd": [...] | "address": "host:port"}
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    spacing_default: tuple[float, float, float] = (1.0, 1.0, 1.0)
    report_format: str = "both"
    jobs: int = 1
    cam_formula: str = "gradient"
    region_grow_tau: float = 0.5
    box_padding: int = 0
    amda_cycles: int = 1
    hd95_penalty: float | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> "PipelineConfig":
        if not self.workdir:
            raise ConfigError("workdir is required")
        if not (0 <= self.alpha <= 100):
            raise ConfigError(f"alpha {self.alpha!r} outside [0, 100]")
        if not (0 <= self.beta < 100):
            raise ConfigError(f"beta {self.beta!r} outside [0, 100)")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if len(self.text_prompts) != 2:
            raise ConfigError("exactly two text prompts are required")
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ConfigError(f"split must be three nonnegative fractions, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.split)}")
        if self.report_format not in REPORT_FORMATS:
            raise ConfigError(f"report_format must be one of {REPORT_FORMATS}")
        if self.cam_formula not in CAM_FORMULAS:
            raise ConfigError(f"cam_formula must be one of {CAM_FORMULAS}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.amda_cycles < 0:
            raise ConfigError("amda_cycles must be >= 0")
        if self.box_padding < 0:
            raise ConfigError("box_padding must be >= 0")
        if len(self.spacing_default) != 3 or min(self.spacing_default) <= 0:
            raise ConfigError(f"spacing_default must be three positive values")
        return self

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        obj["text_prompts"] = list(self.text_prompts)
        obj["split"] = list(self.split)
        obj["spacing_default"] = list(self.spacing_default)
        return obj


def config_from_obj(obj: dict) -> PipelineConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f for f in PipelineConfig.__dataclass_fields__}
    kwargs = {}
    extra = {}
    for key, value in obj.items():
        if key in known:
            kwargs[key] = value
        else:
            extra[key] = value
    for key in ("text_prompts", "split", "spacing_default"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if extra:
        kwargs.setdefault("extra", {}).update(extra)
    try:
        config = PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    return config.validate()


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_obj(obj)


def save_config(path, config: PipelineConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")
