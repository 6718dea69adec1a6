"""Run configuration: one JSON document, validated strictly before any compute."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .adapt import AdaptConfig
from .classifier import TrainConfig
from .data import FAMILIES, NUM_PATTERNS, schedule_domains

SWEEP_AXES = ("prompt_size", "placement", "relative_offset", "alpha")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 10
    n_train: int = 5000
    n_test: int = 1000
    seed: int = 7


@dataclass
class SourceConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 100


@dataclass
class PromptConfig:
    lr: float = 0.05
    ema: float = 0.999
    alpha: float = 1.0
    threshold: float = 0.25
    xi: float = 0.01
    batch_size: int = 100
    augment: str = "default"
    placement: str = "random"
    fixed_anchor: list = field(default_factory=lambda: [0, 0])
    dsp_size: int = 8
    dap_size: int = 8
    offset: int = 0
    warmup_epochs: int = 3


@dataclass
class ScheduleConfig:
    kind: str = "standard"
    families: list = field(default_factory=lambda: list(FAMILIES))
    severity: int = 5
    rounds: int = 3


@dataclass
class AblationConfig:
    disable_dsp: bool = False
    disable_dap: bool = False
    alpha_zero: bool = False
    signed_delta_conf: bool = False
    nonneg_eta: bool = False


@dataclass
class SweepConfig:
    axis: str = "prompt_size"
    values: list = field(default_factory=lambda: [4, 8, 16, 32])


@dataclass
class ReportConfig:
    runs: list = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 7
    output_dir: str = "runs"
    run_name: str = "adapt"
    data: DataConfig = field(default_factory=DataConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    adapt: PromptConfig = field(default_factory=PromptConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    # ------------------------------------------------------------ derived

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "checkpoint.ckpt"

    @property
    def run_dir(self) -> Path:
        return self.out / "runs" / self.run_name

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **asdict(self.source))

    def adapt_config(self) -> AdaptConfig:
        kw = asdict(self.adapt)
        kw["fixed_anchor"] = tuple(kw["fixed_anchor"])
        ab = self.ablation
        if ab.alpha_zero:
            kw["alpha"] = 0.0
        return AdaptConfig(
            seed=self.seed,
            disable_dsp=ab.disable_dsp,
            disable_dap=ab.disable_dap,
            signed_delta_conf=ab.signed_delta_conf,
            nonneg_eta=ab.nonneg_eta,
            **kw,
        )

    def schedule_dict(self) -> dict:
        return asdict(self.schedule)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        d, a = self.data, self.adapt
        if not 2 <= d.num_classes <= NUM_PATTERNS:
            raise ConfigError(f"data.num_classes must be in 2..{NUM_PATTERNS}")
        if d.n_train < d.num_classes or d.n_test < d.num_classes:
            raise ConfigError("data.n_train and data.n_test must be >= num_classes")
        if not self.run_name or "/" in self.run_name:
            raise ConfigError("run_name must be a plain directory name")
        unknown = [f for f in self.schedule.families if f not in FAMILIES]
        if unknown:
            raise ConfigError(f"unknown corruption families {unknown}")
        if not 1 <= self.schedule.severity <= 5:
            raise ConfigError("schedule.severity must be in 1..5")
        if self.schedule.rounds < 1:
            raise ConfigError("schedule.rounds must be >= 1")
        if len(a.fixed_anchor) != 2:
            raise ConfigError("adapt.fixed_anchor must be [row, col]")
        if self.sweep.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}")
        for value in self.sweep.values:
            _check_sweep_value(self.sweep.axis, value)
        try:
            schedule_domains(self.schedule_dict())
            self.train_config()
            self.adapt_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for size in (a.dsp_size, a.dap_size):
            if size > 32:
                raise ConfigError("prompt sizes must fit a 32x32 image")
        return self


def _check_sweep_value(axis: str, value) -> None:
    if axis == "placement":
        if not isinstance(value, str) or not (value == "random" or value.startswith("fixed:")):
            raise ConfigError(f"placement sweep values are 'random' or 'fixed:<row>,<col>', got {value!r}")
        if value != "random":
            parse_fixed(value)
    elif axis in ("prompt_size", "relative_offset"):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{axis} sweep values must be integers, got {value!r}")
    elif not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
        raise ConfigError(f"alpha sweep values must be non-negative numbers, got {value!r}")


def parse_fixed(value: str) -> tuple[int, int]:
    try:
        r, c = value.split(":", 1)[1].split(",")
        return int(r), int(c)
    except ValueError:
        raise ConfigError(f"bad fixed placement {value!r}, expected 'fixed:<row>,<col>'") from None


def _type_ok(value, annotation) -> bool:
    origin = typing.get_origin(annotation)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation in (bool, str):
        return isinstance(value, annotation)
    if annotation is list or origin is list:
        return isinstance(value, list)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, a) for a in typing.get_args(annotation))
    return True


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(raw) - set(known))
    if extra:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(extra)}")
    kwargs = {}
    for name, value in raw.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if isinstance(hint, type) and hasattr(hint, "__dataclass_fields__"):
            kwargs[name] = _build(hint, value, path)
        elif not _type_ok(value, hint):
            raise ConfigError(f"{path}: expected {getattr(hint, '__name__', hint)}, got {type(value).__name__}")
        else:
            kwargs[name] = value
    for name, f in known.items():
        if name not in kwargs and f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing key {where}.{name}")
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").validate()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)
