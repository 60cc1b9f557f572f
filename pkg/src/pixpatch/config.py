"""Flat declarative experiment configuration.

A config file is plain text, one ``section.field = value`` pair per line
(``#`` starts a comment). Sections mirror the module structure: ``data.*``
(benchmark generation), ``model.*`` (network), ``loss.*`` (contrast), and
``train.*`` (optimization), plus ``paths.*``. CLI ``--set key=value`` flags
override file values, and dedicated CLI flags override both; the resolved
configuration is echoed into every run directory so a run can be reproduced
from its artifacts alone.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import ContrastConfig
from .model import ModelConfig
from .synth import DomainSpec
from .trainer import TrainConfig
from .validation import ValidationError, require


@dataclass
class DataConfig:
    """Benchmark generation parameters.

    The source domain renders with zero photometric shift; the shift fields
    describe the target domain. ``target_seed = -1`` means ``seed + 1``
    (independent target scenes); setting it equal to ``seed`` produces
    matched scenes whose label maps are pixel-identical to the source's.
    """

    class_count: int = 5
    image_size: int = 64
    samples_per_domain: int = 1000
    seed: int = 0
    target_seed: int = -1
    shapes_min: int = 4
    shapes_max: int = 9
    size_min: float = 0.12
    size_max: float = 0.35
    hue_rotation: float = 40.0
    contrast: float = 0.75
    noise_sigma: float = 0.06
    illumination: float = 0.3
    eval_count: int = 100

    def resolved_target_seed(self) -> int:
        return self.seed + 1 if self.target_seed == -1 else self.target_seed

    def source_spec(self) -> DomainSpec:
        return DomainSpec(class_count=self.class_count, image_size=self.image_size,
                          sample_count=self.samples_per_domain, seed=self.seed,
                          shapes_min=self.shapes_min, shapes_max=self.shapes_max,
                          size_min=self.size_min, size_max=self.size_max)

    def target_spec(self) -> DomainSpec:
        return DomainSpec(class_count=self.class_count, image_size=self.image_size,
                          sample_count=self.samples_per_domain,
                          seed=self.resolved_target_seed(),
                          shapes_min=self.shapes_min, shapes_max=self.shapes_max,
                          size_min=self.size_min, size_max=self.size_max,
                          hue_rotation=self.hue_rotation, contrast=self.contrast,
                          noise_sigma=self.noise_sigma,
                          illumination=self.illumination)

    def validate(self) -> None:
        self.source_spec().validate()
        self.target_spec().validate()
        require(0 <= self.eval_count < self.samples_per_domain,
                f"eval_count must lie in [0, samples_per_domain), got {self.eval_count}")


@dataclass
class PathsConfig:
    # both default to unset: commands require them via flag or config file
    data_root: str = ""
    run_dir: str = ""


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: ContrastConfig = field(default_factory=ContrastConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()


_SECTIONS = ("data", "model", "loss", "train", "paths")


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def flatten_config(config: ExperimentConfig) -> dict[str, str]:
    flat: dict[str, str] = {}
    for section in _SECTIONS:
        for key, value in asdict(getattr(config, section)).items():
            flat[f"{section}.{key}"] = repr(value)
    return flat


def known_keys() -> set[str]:
    return set(flatten_config(default_config()))


def _coerce(raw: str, current):
    """Parse a raw override string against the field's current type."""
    raw = raw.strip()
    if isinstance(current, bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        require(isinstance(value, (tuple, list)), f"expected a tuple, got {raw!r}")
        return tuple(value)
    if isinstance(current, str):
        return str(value).strip("'\"")
    return value


def apply_overrides(config: ExperimentConfig,
                    overrides: dict[str, str]) -> ExperimentConfig:
    """Return a new config with ``section.field`` string overrides applied."""
    sections = {name: dict(asdict(getattr(config, name))) for name in _SECTIONS}
    for key, raw in overrides.items():
        section, _, field_name = key.partition(".")
        if section not in sections or field_name not in sections[section]:
            raise ValidationError(f"unknown config key {key!r}")
        try:
            sections[section][field_name] = _coerce(raw, sections[section][field_name])
        except ValidationError as err:
            raise ValidationError(f"bad value for {key}: {err}") from None
    return ExperimentConfig(
        data=DataConfig(**sections["data"]),
        model=ModelConfig(**{**sections["model"],
                             "widths": tuple(sections["model"]["widths"])}),
        loss=ContrastConfig(**sections["loss"]),
        train=TrainConfig(**sections["train"]),
        paths=PathsConfig(**sections["paths"]))


def parse_config_text(text: str) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno} is not 'key = value': {line!r}")
        key, _, value = stripped.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def load_config_file(path: Path | str) -> dict[str, str]:
    path = Path(path)
    require(path.exists(), f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def resolve_config(config_file: Path | str | None = None,
                   set_overrides: list[str] | None = None,
                   extra: dict[str, str] | None = None) -> ExperimentConfig:
    """Defaults <- config file <- ``--set key=value`` flags <- dedicated flags."""
    config = default_config()
    if config_file is not None:
        config = apply_overrides(config, load_config_file(config_file))
    if set_overrides:
        parsed: dict[str, str] = {}
        for item in set_overrides:
            if "=" not in item:
                raise ValidationError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            parsed[key.strip()] = value.strip()
        config = apply_overrides(config, parsed)
    if extra:
        config = apply_overrides(config, {k: str(v) for k, v in extra.items()})
    config.validate()
    return config


def write_resolved(config: ExperimentConfig, path: Path | str) -> None:
    flat = flatten_config(config)
    lines = [f"{key} = {flat[key]}" for key in sorted(flat)]
    Path(path).write_text("\n".join(lines) + "\n")


def estimator_kwargs(config: ExperimentConfig) -> dict:
    """Translate the config into DomainAdaptiveSegmenter constructor kwargs."""
    train, loss, model = config.train, config.loss, config.model
    return dict(
        class_count=config.data.class_count, iterations=train.iterations,
        batch_size=train.batch_size, learning_rate=train.learning_rate,
        warmup=train.warmup, weight_decay=train.weight_decay,
        alpha=train.alpha, beta=train.beta, temperature=loss.temperature,
        confidence_threshold=train.confidence_threshold,
        ema_momentum=train.ema_momentum, patch_size=train.patch_size,
        resize_min=train.resize_min, resize_max=train.resize_max,
        iou_min=train.iou_min, iou_max=train.iou_max,
        anchors_per_class=loss.anchors_per_class,
        hard_fraction=loss.hard_fraction, cross_batch=loss.cross_batch,
        denominator=loss.denominator, enable_pixel=train.enable_pixel,
        enable_patch=train.enable_patch, enable_target=train.enable_target,
        jitter=train.jitter, blur_sigma=train.blur_sigma,
        augment_mixed=train.augment_mixed,
        mixed_cell_ignore=train.mixed_cell_ignore,
        pixel_on_mixed=train.pixel_on_mixed, teacher_init=train.teacher_init,
        widths=model.widths, blocks=model.blocks, embed_dim=model.embed_dim,
        eval_every=train.eval_every, seed=train.seed)


def replace_train(config: ExperimentConfig, **kwargs) -> ExperimentConfig:
    return ExperimentConfig(data=config.data, model=config.model,
                            loss=config.loss,
                            train=replace(config.train, **kwargs),
                            paths=config.paths)
