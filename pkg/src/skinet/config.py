"""Run configuration: flat ``section.key = value`` text plus CLI overrides.

Precedence, lowest to highest: dataclass defaults, the config file, ``--set``
overrides, then dedicated CLI flags. Values are parsed as JSON when possible,
as comma-separated lists when they contain commas, and as bare strings
otherwise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import config_to_dict
from .classifier import ClassifierConfig
from .core import ValidationError
from .data import AugmentationSpec
from .pipeline import PipelineConfig
from .saliency import XraiParams
from .segnet import SegNetConfig, TrainConfig
from .xai_eval import BokehParams


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    out: str = "skinet-out"
    data: str | None = None
    val_data: str | None = None
    inputs: tuple[str, ...] = ()
    seg_checkpoints: tuple[str, ...] = ()
    clf_checkpoint: str | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    balance: bool = True
    train_on_masked: bool = False
    explainers: tuple[str, ...] = ("guided_backprop", "grad_cam", "guided_grad_cam", "xrai", "random")
    fraction: float = 0.10
    task: str = "pipeline"
    standalone: bool = True
    replay_counts: str | None = None


SECTIONS = {
    "run": RunSettings,
    "seg": SegNetConfig,
    "clf": ClassifierConfig,
    "seg_train": TrainConfig,
    "clf_train": TrainConfig,
    "pipeline": PipelineConfig,
    "xrai": XraiParams,
    "bokeh": BokehParams,
    "aug": AugmentationSpec,
}

_SECTION_DEFAULTS = {"clf_train": {"batch_size": 16}}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    seg: SegNetConfig = field(default_factory=SegNetConfig)
    clf: ClassifierConfig = field(default_factory=ClassifierConfig)
    seg_train: TrainConfig = field(default_factory=TrainConfig)
    clf_train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    xrai: XraiParams = field(default_factory=XraiParams)
    bokeh: BokehParams = field(default_factory=BokehParams)
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)

    def to_flat(self) -> dict:
        flat = {}
        for section in SECTIONS:
            for k, v in config_to_dict(getattr(self, section)).items():
                flat[f"{section}.{k}"] = v
        return flat

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_flat().items())


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        return [parse_value(part) for part in raw.split(",") if part.strip()]
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def read_config_text(text: str, origin: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}", "expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(raw)
    return values


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"no such file {p}")
    return read_config_text(p.read_text(), str(p))


def _coerce(cls, name: str, value):
    f = {fl.name: fl for fl in dataclasses.fields(cls)}[name]
    typ = str(f.type)
    if isinstance(value, list):
        return tuple(value)
    if "tuple" in typ and not isinstance(value, tuple) and value is not None and "str |" not in typ:
        return (value,)
    if typ.startswith("float") and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def build_run_config(values: dict) -> RunConfig:
    """Validate every key against its owning section before any work starts."""
    grouped: dict[str, dict] = {s: dict(_SECTION_DEFAULTS.get(s, {})) for s in SECTIONS}
    for key, value in values.items():
        if "." not in key:
            raise ConfigError(key, "keys need a section prefix, e.g. 'seg.dropout_rate'")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(key, f"unknown section {section!r}")
        names = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if name not in names:
            raise ConfigError(key, f"unknown key for section {section!r}")
        grouped[section][name] = _coerce(SECTIONS[section], name, value)
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**grouped[section])
        except (ValidationError, ValueError, TypeError) as exc:
            bad = next(iter(grouped[section]), section) if grouped[section] else section
            key = _guess_key(section, grouped[section], str(exc)) or f"{section}.{bad}"
            raise ConfigError(key, str(exc)) from exc
    return RunConfig(**built)


def _guess_key(section: str, given: dict, message: str) -> str | None:
    for name in given:
        if name in message:
            return f"{section}.{name}"
    return None
