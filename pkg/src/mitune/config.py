"""JSON run configuration with strict key checking.

Layout::

    {"seed": 7,
     "model": {...LMConfig...}, "infusion": {...}, "task": {...},
     "train": {...TrainConfig...}, "data": {...}, "cost": {...}}

Every field has a default (the toy preset). The root seed drives the frozen
weights, the data generator and the training order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .infusion import MiTConfig, select_layers
from .transformer import LMConfig
from .train import TrainConfig

TOY_LR = 2e-3


class ConfigError(ValueError):
    pass


@dataclass
class InfusionSection:
    infused_layers: list | str = "last_third_stride"
    enable_kv: bool = True
    enable_ff: bool = True
    enable_rescale: bool = True
    gate_init: float = 10.0
    rescale_pooling: str = "per_token"
    d_I: int = 32

    def build(self, lm: LMConfig) -> MiTConfig:
        layers = self.infused_layers
        layers = select_layers(lm.n_layers, layers) if isinstance(layers, str) else tuple(layers)
        return MiTConfig(infused_layers=layers, enable_kv=self.enable_kv, enable_ff=self.enable_ff,
                         enable_rescale=self.enable_rescale, gate_init=self.gate_init,
                         rescale_pooling=self.rescale_pooling, d_I=self.d_I)


@dataclass
class TaskSection:
    name: str = "seg"
    schema: str = "last_token"
    modalities: list = field(default_factory=lambda: ["acoustic", "facial"])
    classes: int = 3
    decoder_width: int = 64
    encoder_trainable: bool = True
    filler: int = 0


@dataclass
class DataSection:
    n: int = 1000
    seed: int | None = None  # None: use the root seed


@dataclass
class CostSection:
    lengths: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    prefix_tokens: int | None = None  # None: P = L_tok
    measure: bool = False


def _train_toy() -> TrainConfig:
    return TrainConfig(lr0=TOY_LR)


@dataclass
class RunConfig:
    seed: int = 7
    model: LMConfig = field(default_factory=LMConfig)
    infusion: InfusionSection = field(default_factory=InfusionSection)
    task: TaskSection = field(default_factory=TaskSection)
    train: TrainConfig = field(default_factory=_train_toy)
    data: DataSection = field(default_factory=DataSection)
    cost: CostSection = field(default_factory=CostSection)

    @property
    def mit(self) -> MiTConfig:
        return self.infusion.build(self.model)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": self.seed})

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def echo(self, directory) -> Path:
        """Write the fully resolved config next to a command's outputs."""
        p = Path(directory) / "resolved-config.json"
        p.write_text(self.dumps() + "\n")
        return p


SECTIONS = {"model": LMConfig, "infusion": InfusionSection, "task": TaskSection,
            "train": TrainConfig, "data": DataSection, "cost": CostSection}


def _build(cls, values, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(known)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed {sorted(SECTIONS) + ['seed']}")
    kw = {}
    if "seed" in d:
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            raise ConfigError("seed must be an integer")
        kw["seed"] = d["seed"]
    for name, cls in SECTIONS.items():
        if name in d:
            base = asdict(_train_toy()) if name == "train" else {}
            kw[name] = _build(cls, {**base, **d[name]}, name)
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.task.name not in ("seg", "cls", "msa"):
        raise ConfigError(f"task.name must be seg, cls or msa, got {cfg.task.name!r}")
    if cfg.task.schema not in ("last_token", "task_token"):
        raise ConfigError(f"task.schema must be last_token or task_token, got {cfg.task.schema!r}")
    bad = sorted(set(cfg.task.modalities) - {"acoustic", "facial"})
    if bad:
        raise ConfigError(f"task.modalities: unknown {bad}")
    if cfg.data.n < 2:
        raise ConfigError("data.n must be >= 2")
    try:
        cfg.mit.validate(cfg.model)
    except ValueError as e:
        raise ConfigError(f"infusion: {e}") from None


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FileNotFoundError(f"cannot read config {path}: {e.strerror}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(d)
