"""Run configuration: nested dataclasses, flat dotted-key JSON on disk."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None  # directory written by gen-data; None -> generate in memory
    n_train: int = 1000
    n_val: int = 1000
    n_test: int = 2000
    bias: float = 0.9
    val_bias: float | None = None  # None -> same as bias
    test_bias: float = 1.0 / 3.0
    d_in: int = 4
    base_size_min: int = 15
    base_size_max: int = 35
    seed: int = 0


@dataclass
class ModelConfig:
    kind: str = "c2r"  # c2r | vanilla | vanilla-rat
    backbone: str = "gin"
    d: int = 32
    n_layers: int = 3
    tau: float = 1.0
    mask_mode: str = "soft"  # soft | straight-through (training-time mask)


@dataclass
class LossConfig:
    lambda_cou: float = 1.0
    lambda_cycle: float = 0.01
    lambda_sp: float = 0.01
    lambda_dis: float = 1.0
    alpha: float = 0.4
    tau_nce: float = 0.2
    align: str = "infonce"  # infonce | kl | mse
    distill_stop_grad: bool = True


@dataclass
class AblationConfig:
    no_cycle: bool = False
    no_cou: bool = False
    no_dis: bool = False


@dataclass
class OptimConfig:
    lr: float = 1e-2
    batch_size: int = 128
    epochs: int = 100


@dataclass
class EnvConfig:
    k: int = 3
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs"

    # hash excludes where outputs go and which seeds run
    _UNHASHED = ("out", "seeds")

    def to_flat(self) -> dict:
        flat = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if is_dataclass(val):
                for k, v in asdict(val).items():
                    flat[f"{f.name}.{k}"] = v
            else:
                flat[f.name] = val
        return flat

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        cfg = cls()
        flat = {}
        for key, val in obj.items():
            if isinstance(val, dict):
                flat.update({f"{key}.{k}": v for k, v in val.items()})
            else:
                flat[key] = val
        for key, val in flat.items():
            cfg.set(key, val)
        return cfg

    def set(self, key: str, value) -> None:
        head, _, tail = key.partition(".")
        names = {f.name for f in fields(self)}
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if not tail:
            if head == "seeds":
                value = [int(v) for v in (value if isinstance(value, list) else [value])]
            setattr(self, head, value)
            return
        section = getattr(self, head)
        if not is_dataclass(section) or tail not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, tail, value)

    def apply_overrides(self, pairs) -> "RunConfig":
        for pair in pairs or ():
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.set(key.strip(), value)
        return self

    def digest(self) -> str:
        flat = {k: v for k, v in self.to_flat().items() if k not in self._UNHASHED}
        return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), indent=1, sort_keys=True) + "\n"

    def validate(self) -> None:
        if self.model.kind not in ("c2r", "vanilla", "vanilla-rat"):
            raise ConfigError(f"model.kind must be c2r|vanilla|vanilla-rat, got {self.model.kind!r}")
        if self.model.backbone not in ("gin", "gcn"):
            raise ConfigError(f"model.backbone must be gin|gcn, got {self.model.backbone!r}")
        if self.model.mask_mode not in ("soft", "straight-through"):
            raise ConfigError(f"model.mask_mode must be soft|straight-through, "
                              f"got {self.model.mask_mode!r}")
        if self.loss.align not in ("infonce", "kl", "mse"):
            raise ConfigError(f"loss.align must be infonce|kl|mse, got {self.loss.align!r}")
        for name in ("lambda_cou", "lambda_cycle", "lambda_sp", "lambda_dis"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be nonnegative")
        if not 0.0 <= self.loss.alpha <= 1.0:
            raise ConfigError("loss.alpha must lie in [0, 1]")
        if self.model.kind == "c2r" and self.env.k < 2:
            raise ConfigError("env.k must be >= 2 to sample a different environment")
        if self.optim.epochs < 0 or self.optim.batch_size < 1:
            raise ConfigError("optim.epochs must be >= 0 and optim.batch_size >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")


def load_config(path: str | Path | None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        cfg = RunConfig.from_dict(obj)
    cfg.apply_overrides(overrides)
    cfg.validate()
    return cfg
