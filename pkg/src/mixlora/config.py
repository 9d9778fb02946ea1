"""Run configuration: model dimensions plus training fields plus tasks.

Config files are flat JSON objects; unknown keys are rejected before any
allocation. Round-tripping through ``to_dict``/``from_dict`` is lossless.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError
from .model import ModelConfig

PRECISIONS = {"f32": np.float32, "f64": np.float64}
MODES = ("vanilla", "optimized")


@dataclass
class RunConfig:
    # model
    vocab_size: int = 8192
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    n_experts: int = 8
    top_k: int = 2
    lora_rank: int = 16
    lora_alpha: float = 32.0
    dropout_p: float = 0.05
    aux_coef: float = 1e-2
    max_seq_len: int = 64
    dropout_scope: str = "both"
    router_count_topk: bool = False
    # training
    lr: float = 2e-4
    steps: int = 500
    batch_size: int = 16
    grad_accum: int = 1
    seed: int = 7
    mode: str = "optimized"
    precision: str = "f64"
    tasks: tuple[str, ...] = ("copy",)

    def validate(self) -> "RunConfig":
        self.model().validate()
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        for name in ("steps",):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        for name in ("batch_size", "grad_accum"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if not self.tasks:
            raise ConfigError("tasks must not be empty")
        from .tasks import default_tasks, required_vocab

        registry = default_tasks()
        for name in self.tasks:
            if name not in registry:
                raise ConfigError(
                    f"unknown task {name!r}; known: {sorted(registry)}"
                )
        need = required_vocab([registry[n] for n in self.tasks])
        if self.vocab_size < need:
            raise ConfigError(
                f"vocab_size {self.vocab_size} below task requirement {need}"
            )
        return self

    def model(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = dict(raw)
        if "tasks" in kwargs:
            tasks = kwargs["tasks"]
            if not isinstance(tasks, (list, tuple)) or not all(
                isinstance(t, str) for t in tasks
            ):
                raise ConfigError("tasks must be a list of task names")
            kwargs["tasks"] = tuple(tasks)
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_json(text)
